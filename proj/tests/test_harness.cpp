#include "unetsharp/checkpoint.hpp"
#include "unetsharp/metrics.hpp"
#include "unetsharp/png_io.hpp"
#include "unetsharp/train.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

using namespace unetsharp;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("unetsharp_harness_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Index positives(const Tensor<float>& m)
{
    Index n = 0;
    for (Index i = 0; i < m.size(); ++i) n += m[i] > 0.5f;
    return n;
}

ArchConfig tiny_arch()
{
    ArchConfig cfg;
    cfg.channels = {3, 4, 5, 6, 7};
    cfg.input_size = 16;
    return cfg;
}

TrainConfig toy_config()
{
    TrainConfig cfg;
    cfg.arch = tiny_arch();
    cfg.epochs = 2;
    cfg.batch = 4;
    cfg.seed = 17;
    return cfg;
}

std::string without_seconds(const std::string& line)
{
    const auto at = line.find(",\"seconds\"");
    return at == std::string::npos ? line : line.substr(0, at);
}

Tensor<float> binary(Index n, std::mt19937_64& rng, int one_in)
{
    Tensor<float> t({n});
    for (Index i = 0; i < n; ++i) t[i] = (rng() % static_cast<unsigned>(one_in) == 0) ? 1.0f : 0.0f;
    return t;
}

} // namespace

TEST(Synth, EmptyQuotaAndPresence)
{
    const Dataset d = synth_generate({100, 64, 0.3, 5});
    ASSERT_EQ(d.size(), 100u);
    int empty = 0;
    std::set<std::string> ids;
    for (const Sample& s : d) {
        EXPECT_EQ(s.image.shape(), (Shape{1, 64, 64}));
        EXPECT_EQ(s.mask.shape(), (Shape{1, 64, 64}));
        const Index pos = positives(s.mask);
        EXPECT_EQ(s.presence, pos > 0 ? 1 : 0);
        for (Index i = 0; i < s.mask.size(); ++i) ASSERT_TRUE(s.mask[i] == 0.0f || s.mask[i] == 1.0f);
        for (Index i = 0; i < s.image.size(); ++i) ASSERT_TRUE(s.image[i] >= 0.0f && s.image[i] <= 1.0f);
        if (pos == 0) {
            ++empty;
        } else {
            const double area = static_cast<double>(pos) / (64.0 * 64.0);
            EXPECT_GE(area, 0.01) << s.id;
            EXPECT_LE(area, 0.40) << s.id;
        }
        ids.insert(s.id);
    }
    EXPECT_EQ(empty, 30);
    EXPECT_EQ(ids.size(), 100u);
}

TEST(Synth, DeterministicFiles)
{
    const fs::path a = scratch("synth_a"), b = scratch("synth_b");
    write_dataset(synth_generate({12, 32, 0.25, 8}), a);
    write_dataset(synth_generate({12, 32, 0.25, 8}), b);
    std::size_t files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), a);
        EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
        ++files;
    }
    EXPECT_EQ(files, 24u);
    const Dataset other = synth_generate({12, 32, 0.25, 9});
    const Dataset base = synth_generate({12, 32, 0.25, 8});
    EXPECT_FALSE(bitwise_equal(other[0].image, base[0].image));
}

TEST(Synth, RejectsBadSize)
{
    EXPECT_THROW(synth_generate({4, 40, 0.3, 1}), ArgumentError);
    EXPECT_THROW(synth_generate({4, 0, 0.3, 1}), ArgumentError);
}

TEST(Loader, RoundTripAndThreshold)
{
    const fs::path dir = scratch("load");
    const Dataset d = synth_generate({10, 16, 0.3, 3});
    write_dataset(d, dir);
    const Dataset back = load_dataset(dir);
    ASSERT_EQ(back.size(), 10u);
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(back[i].id, d[i].id);
        EXPECT_TRUE(bitwise_equal(back[i].mask, d[i].mask));
        EXPECT_EQ(back[i].presence, d[i].presence);
        for (Index k = 0; k < d[i].image.size(); ++k) ASSERT_NEAR(back[i].image[k], d[i].image[k], 0.5 / 255 + 1e-6);
    }

    const fs::path t = scratch("threshold");
    fs::create_directories(t / "images");
    fs::create_directories(t / "masks");
    write_png(t / "images" / "a.png", {2, 1, 1, {10, 20}});
    write_png(t / "masks" / "a.png", {2, 1, 1, {200, 50}});
    const Dataset th = load_dataset(t);
    ASSERT_EQ(th.size(), 1u);
    EXPECT_EQ(th[0].mask[0], 1.0f);
    EXPECT_EQ(th[0].mask[1], 0.0f);
    EXPECT_EQ(th[0].presence, 1);
}

TEST(Loader, ErrorsNameTheStem)
{
    const fs::path dir = scratch("mismatch");
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    write_png(dir / "images" / "case7.png", {64, 64, 1, std::vector<std::uint8_t>(64 * 64, 9)});
    write_png(dir / "masks" / "case7.png", {32, 32, 1, std::vector<std::uint8_t>(32 * 32, 0)});
    try {
        load_dataset(dir);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("case7"), std::string::npos) << e.what();
    }
    fs::remove(dir / "masks" / "case7.png");
    try {
        load_dataset(dir);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("case7"), std::string::npos) << e.what();
    }
    EXPECT_THROW(load_dataset(scratch("absent") / "nope"), DataError);
}

TEST(Split, DeterministicDisjointCovering)
{
    const Dataset d = synth_generate({50, 16, 0.3, 2});
    const auto [tr, va] = split_dataset(d, 0.2, 4);
    EXPECT_EQ(tr.size(), 40u);
    EXPECT_EQ(va.size(), 10u);
    std::set<std::string> all;
    for (const auto& s : tr) all.insert(s.id);
    for (const auto& s : va) EXPECT_TRUE(all.insert(s.id).second);
    EXPECT_EQ(all.size(), 50u);
    const auto again = split_dataset(d, 0.2, 4);
    for (std::size_t i = 0; i < va.size(); ++i) EXPECT_EQ(again.second[i].id, va[i].id);
    const auto other = split_dataset(d, 0.2, 5);
    bool differs = false;
    for (std::size_t i = 0; i < va.size(); ++i) differs |= other.second[i].id != va[i].id;
    EXPECT_TRUE(differs);
}

TEST(Augment, RotationGroupAndFlipsPreserveMask)
{
    const Dataset d = synth_generate({6, 32, 0.0, 6});
    for (const Sample& s : d) {
        Sample r = s;
        for (int k = 0; k < 4; ++k) r = rotate90(r, 1);
        EXPECT_TRUE(bitwise_equal(r.image, s.image));
        EXPECT_TRUE(bitwise_equal(r.mask, s.mask));
        EXPECT_TRUE(bitwise_equal(rotate90(s, 4).mask, s.mask));
        for (bool h : {true, false}) {
            const Sample f = flip(s, h);
            EXPECT_EQ(positives(f.mask), positives(s.mask));
            EXPECT_TRUE(bitwise_equal(flip(f, h).mask, s.mask));
        }
        for (int k = 1; k < 4; ++k) EXPECT_EQ(positives(rotate90(s, k).mask), positives(s.mask));
        // Image and mask move together.
        const Sample q = rotate90(s, 1);
        EXPECT_EQ(q.mask[0], s.mask[31]);
        EXPECT_EQ(q.image[0], s.image[31]);
    }
}

TEST(Augment, MaskIsASpatialPermutationOnly)
{
    const Dataset d = synth_generate({8, 32, 0.25, 7});
    std::mt19937_64 rng(3);
    for (const Sample& s : d) {
        for (int trial = 0; trial < 8; ++trial) {
            const Sample a = augment(s, rng);
            EXPECT_EQ(positives(a.mask), positives(s.mask));
            EXPECT_EQ(a.presence, s.presence);
            bool matched = false;
            for (int k = 0; k < 4 && !matched; ++k)
                for (int h = 0; h < 2 && !matched; ++h)
                    for (int v = 0; v < 2 && !matched; ++v) {
                        Sample t = rotate90(s, k);
                        if (h) t = flip(t, true);
                        if (v) t = flip(t, false);
                        matched = bitwise_equal(t.mask, a.mask);
                    }
            EXPECT_TRUE(matched);
        }
    }
    std::mt19937_64 r1(11), r2(11);
    EXPECT_TRUE(bitwise_equal(augment(d[1], r1).image, augment(d[1], r2).image));
    AugmentOptions off;
    off.enabled = false;
    EXPECT_TRUE(bitwise_equal(augment(d[1], r1, off).image, d[1].image));
}

TEST(Augment, RgbPathKeepsMask)
{
    Sample s = synth_generate({1, 16, 0.0, 1})[0];
    Tensor<float> rgb({3, 16, 16});
    for (Index c = 0; c < 3; ++c)
        for (Index i = 0; i < 256; ++i) rgb[c * 256 + i] = s.image[i] * (0.5f + 0.2f * static_cast<float>(c));
    s.image = rgb;
    std::mt19937_64 rng(2);
    for (int t = 0; t < 10; ++t) {
        const Sample a = augment(s, rng);
        EXPECT_EQ(a.image.shape(), rgb.shape());
        EXPECT_EQ(positives(a.mask), positives(s.mask));
    }
}

TEST(Batch, NormalizedImagesAndPresence)
{
    const Dataset d = synth_generate({6, 16, 0.5, 4});
    const SampleBatch b = make_batch(d, {0, 2, 4});
    EXPECT_EQ(b.images.shape(), (Shape{3, 1, 16, 16}));
    EXPECT_EQ(b.masks.shape(), (Shape{3, 1, 16, 16}));
    for (Index i = 0; i < 256; ++i) EXPECT_FLOAT_EQ(b.images[256 + i], (d[2].image[i] - 0.5f) / 0.25f);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(b.presence[k], d[2 * k].presence);
    EXPECT_EQ(b.ids[1], d[2].id);
}

TEST(Metrics, TaggedExamples)
{
    Tensor<float> a({8}, std::vector<float>{1, 1, 1, 1, 0, 0, 0, 0});
    Tensor<float> b({8}, std::vector<float>{0, 0, 1, 1, 1, 1, 0, 0});
    EXPECT_DOUBLE_EQ(iou(a, b), 2.0 / 6.0);
    EXPECT_DOUBLE_EQ(dice(a, b), 0.5);
    EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
    EXPECT_DOUBLE_EQ(dice(a, a), 1.0);
    Tensor<float> c({8}, std::vector<float>{0, 0, 0, 0, 1, 1, 1, 1});
    EXPECT_DOUBLE_EQ(iou(a, c), 0.0);
    EXPECT_DOUBLE_EQ(dice(a, c), 0.0);
    Tensor<float> z({8});
    EXPECT_DOUBLE_EQ(iou(z, z), 1.0);
    EXPECT_DOUBLE_EQ(dice(z, z), 1.0);
    // Strictly above the threshold counts as positive.
    Tensor<float> half({2}, 0.5f), one({2}, 1.0f);
    EXPECT_DOUBLE_EQ(iou(half, one), 0.0);
    EXPECT_THROW(iou(Tensor<float>({3}), Tensor<float>({4})), ShapeError);
}

TEST(Metrics, DiceIouIdentity)
{
    std::mt19937_64 rng(99);
    for (int t = 0; t < 1000; ++t) {
        const Index n = 1 + static_cast<Index>(rng() % 200);
        const int density = 1 + static_cast<int>(rng() % 6);
        const Tensor<float> p = binary(n, rng, density), m = binary(n, rng, density);
        const Overlap o = overlap(p, m);
        // Integer form: 2I / (P + A) equals 2 (I/U) / (1 + I/U), since U + I = P + A.
        EXPECT_EQ(o.uni() + o.intersection, o.predicted + o.actual);
        const double i = iou(o);
        EXPECT_NEAR(dice(o), 2 * i / (1 + i), 4e-16);
    }
}

TEST(Optim, CosineSchedule)
{
    EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-3), 1e-3);
    EXPECT_NEAR(cosine_lr(50, 100, 1e-3), 5e-4, 1e-18);
    EXPECT_NEAR(cosine_lr(100, 100, 1e-3, 1e-5), 1e-5, 1e-18);
    EXPECT_NEAR(cosine_lr(100, 100, 1e-3), 0.0, 1e-18);
    EXPECT_THROW(cosine_lr(0, 0, 1e-3), ArgumentError);
    EXPECT_THROW(cosine_lr(101, 100, 1e-3), ArgumentError);
}

TEST(Optim, AdamFirstStepAndDecay)
{
    ParamStore<double> store;
    store.declare({"w", {10}, ParamKind::ConvWeight});
    store.declare({"z", {3}, ParamKind::ConvWeight});
    store.value("w") = Tensor<double>({10}, 0.5);
    store.value("z") = Tensor<double>({3}, 2.0);
    store.entry("w").grad = Tensor<double>({10}, 1.0);
    store.entry("z").grad = Tensor<double>({3}, 0.0);
    Adam<double> adam;
    adam.step(store, 1e-3, 0.0);
    for (Index i = 0; i < 10; ++i) EXPECT_NEAR(store.value("w")[i] - 0.5, -1e-3, 1e-11);
    for (Index i = 0; i < 3; ++i) EXPECT_EQ(store.value("z")[i], 2.0);

    ParamStore<double> decay;
    decay.declare({"p", {2}, ParamKind::ConvWeight});
    decay.value("p") = Tensor<double>({2}, 2.0);
    decay.entry("p").grad = Tensor<double>({2}, 0.0);
    Adam<double> d;
    d.step(decay, 0.1, 0.5);
    EXPECT_NEAR(decay.value("p")[0], 1.9, 1e-15);

    store.entry("w").grad = Tensor<double>({3}, 1.0);
    EXPECT_THROW(adam.step(store, 1e-3, 0.0), ShapeError);
}

TEST(Optim, AdamIsDeterministic)
{
    const auto run = [] {
        ParamStore<float> s;
        s.declare({"w", {4, 4, 2, 2}, ParamKind::ConvWeight});
        init_weights(s, 3);
        Adam<float> adam;
        for (int t = 0; t < 20; ++t) {
            Tensor<float> g({4, 4, 2, 2});
            for (Index i = 0; i < 64; ++i) g[i] = std::sin(static_cast<float>(i * (t + 1)));
            s.entry("w").grad = g;
            adam.step(s, 1e-2, 1e-4);
        }
        return s.value("w");
    };
    EXPECT_TRUE(bitwise_equal(run(), run()));
}

TEST(Optim, HeInitialization)
{
    ParamStore<double> store;
    store.declare({"c.weight", {64, 512, 3, 3}, ParamKind::ConvWeight});
    store.declare({"c.bias", {64}, ParamKind::Bias});
    store.declare({"n.gamma", {64}, ParamKind::NormScale});
    store.declare({"n.beta", {64}, ParamKind::NormShift});
    store.declare({"n.running_mean", {64}, ParamKind::RunningMean});
    store.declare({"n.running_var", {64}, ParamKind::RunningVar});
    for (auto& [name, e] : store.entries()) e.value.array() = 7.0;
    init_weights(store, 42);
    const auto& w = store.value("c.weight");
    double mean = 0, var = 0;
    for (Index i = 0; i < w.size(); ++i) mean += w[i];
    mean /= static_cast<double>(w.size());
    for (Index i = 0; i < w.size(); ++i) var += (w[i] - mean) * (w[i] - mean);
    var /= static_cast<double>(w.size() - 1);
    EXPECT_GT(w.size(), 10000);
    EXPECT_NEAR(var, 2.0 / 4608.0, 0.1 * 2.0 / 4608.0);
    EXPECT_NEAR(mean, 0.0, 5 * std::sqrt(2.0 / 4608.0 / static_cast<double>(w.size())));
    for (Index i = 0; i < 64; ++i) {
        EXPECT_EQ(store.value("c.bias")[i], 0.0);
        EXPECT_EQ(store.value("n.gamma")[i], 1.0);
        EXPECT_EQ(store.value("n.beta")[i], 0.0);
        EXPECT_EQ(store.value("n.running_mean")[i], 0.0);
        EXPECT_EQ(store.value("n.running_var")[i], 1.0);
    }
    EXPECT_EQ(fan_in({8, 3, 5, 5}, ParamKind::ConvWeight), 75);
    EXPECT_EQ(fan_in({20, 6}, ParamKind::LinearWeight), 20);
}

TEST(Training, LossFallsOnARepeatedBatch)
{
    const Dataset d = synth_generate({4, 16, 0.25, 12});
    const SampleBatch batch = make_batch(d, {0, 1, 2, 3});
    const UNetSharp model(tiny_arch(), {true, true});
    constexpr int kSteps = 50;
    std::vector<std::vector<double>> curves;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ParamStore<float> store = initial_params(model, seed);
        Adam<float> adam;
        std::vector<double> curve;
        for (int step = 0; step < kSteps; ++step) {
            Tape<float> tape;
            Context<float> ctx(tape, store, Mode::Train, derive_seed(seed, 4, static_cast<std::uint64_t>(step)));
            const auto out = model.forward(ctx, tape.leaf(batch.images));
            const auto loss = supervised_loss(out, batch.masks, batch.presence, LossWeights{}, 0.25);
            curve.push_back(loss.report.total);
            store.zero_grad();
            tape.backward(loss.total);
            adam.step(store, 1e-3, 1e-4);
        }
        curves.push_back(curve);
    }
    std::vector<double> median(kSteps);
    for (int t = 0; t < kSteps; ++t) {
        std::vector<double> v;
        for (const auto& c : curves) v.push_back(c[static_cast<std::size_t>(t)]);
        std::nth_element(v.begin(), v.begin() + 2, v.end());
        median[static_cast<std::size_t>(t)] = v[2];
    }
    // Step noise from dropout is averaged out over blocks of five steps.
    std::vector<double> blocks;
    for (int b = 0; b < kSteps / 5; ++b) {
        blocks.push_back(std::accumulate(median.begin() + 5 * b, median.begin() + 5 * b + 5, 0.0) / 5);
    }
    for (std::size_t b = 1; b < blocks.size(); ++b) EXPECT_LE(blocks[b], blocks[b - 1]) << "block " << b;
    for (int t = 1; t < kSteps; ++t) EXPECT_LE(median[static_cast<std::size_t>(t)], 1.01 * median[0]);
    EXPECT_LT(median.back(), 0.8 * median.front());
}

TEST(Training, HistoryScheduleAndDeterminism)
{
    const Dataset d = synth_generate({14, 16, 0.3, 13});
    const auto [tr, va] = split_dataset(d, 0.2, 2);
    const TrainConfig cfg = toy_config();
    const TrainResult a = train(cfg, tr, va);
    const TrainResult b = train(cfg, tr, va);
    ASSERT_EQ(a.history.size(), 2u);
    EXPECT_DOUBLE_EQ(a.history[0].lr, 1e-3);
    EXPECT_LT(a.history[1].lr, 1e-3);
    for (std::size_t e = 0; e < a.history.size(); ++e) {
        EXPECT_EQ(without_seconds(to_json_line(a.history[e])), without_seconds(to_json_line(b.history[e])));
        EXPECT_EQ(a.history[e].branch_losses.size(), 8u);
    }
    for (const auto& [name, e] : a.last.entries()) EXPECT_TRUE(bitwise_equal(e.value, b.last.value(name))) << name;
    EXPECT_GE(a.best_epoch, 0);
    EXPECT_EQ(a.best_val_iou, a.history[static_cast<std::size_t>(a.best_epoch)].val_iou);

    const std::string line = to_json_line(a.history[0]);
    const auto key = [&](const std::string& k) { return line.find("\"" + k + "\""); };
    EXPECT_LT(key("epoch"), key("lr"));
    EXPECT_LT(key("lr"), key("train_total"));
    EXPECT_LT(key("train_total"), key("in_0_1"));
    EXPECT_LT(key("en_4_0"), key("val_iou"));
    EXPECT_LT(key("val_dice"), key("seconds"));
    EXPECT_EQ(line.find('\n'), std::string::npos);
}

TEST(Training, NoDeepSupervisionTrainsOneHead)
{
    const Dataset d = synth_generate({8, 16, 0.3, 14});
    const auto [tr, va] = split_dataset(d, 0.25, 2);
    TrainConfig cfg = toy_config();
    cfg.epochs = 1;
    cfg.deep_supervision = false;
    const TrainResult r = train(cfg, tr, va);
    ASSERT_EQ(r.history[0].branch_losses.size(), 1u);
    EXPECT_EQ(r.history[0].branch_losses.begin()->first, "de_0_4");
    EXPECT_FALSE(r.last.contains("head.in_0_1.weight"));
}

TEST(Training, NonFiniteLossNamesABranch)
{
    Dataset d = synth_generate({6, 16, 0.0, 15});
    d[0].image[5] = std::numeric_limits<float>::quiet_NaN();
    TrainConfig cfg = toy_config();
    cfg.epochs = 1;
    cfg.batch = 6;
    cfg.augment = false;
    try {
        train(cfg, d, {});
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("branch"), std::string::npos) << e.what();
    }
}

TEST(Training, ConfigValidation)
{
    TrainConfig cfg = toy_config();
    cfg.lr0 = 0;
    EXPECT_THROW(cfg.validate(), ArgumentError);
    cfg = toy_config();
    cfg.epochs = 0;
    EXPECT_THROW(cfg.validate(), ArgumentError);
    cfg = toy_config();
    cfg.batch = 0;
    EXPECT_THROW(cfg.validate(), ArgumentError);
}

TEST(Checkpoint, RoundTripPreservesEvaluation)
{
    const Dataset d = synth_generate({10, 16, 0.3, 16});
    const auto [tr, va] = split_dataset(d, 0.3, 2);
    TrainConfig cfg = toy_config();
    cfg.epochs = 1;
    TrainResult r = train(cfg, tr, va);
    const fs::path path = scratch("ckpt") / "model.ushp";
    save_checkpoint(path, r.last, "train.seed = 17\n");
    const Checkpoint c = load_checkpoint(path);
    EXPECT_EQ(c.meta, "train.seed = 17\n");
    ParamStore<float> fresh = initial_params(cfg.model(), 99);
    restore(fresh, c);
    for (const auto& [name, e] : r.last.entries()) EXPECT_TRUE(bitwise_equal(e.value, fresh.value(name))) << name;
    const UNetSharp model = cfg.model();
    EXPECT_EQ(to_json(evaluate(model, r.last, va, OutputMode::Accurate), true),
        to_json(evaluate(model, fresh, va, OutputMode::Accurate), true));

    // Saving the loaded checkpoint reproduces the file byte for byte.
    const fs::path again = path.parent_path() / "again.ushp";
    save_checkpoint(again, c);
    EXPECT_EQ(slurp(path), slurp(again));

    ParamStore<float> other = initial_params(cfg.model().pruned(1), 1);
    EXPECT_THROW(restore(other, c), DataError);
}

TEST(Checkpoint, CorruptionIsDetected)
{
    ParamStore<float> s;
    s.declare({"a", {3, 2}, ParamKind::ConvWeight});
    s.value("a") = Tensor<float>({3, 2}, std::vector<float>{1, -2, 3.5f, -0.0f, 1e-30f, 7});
    const fs::path dir = scratch("corrupt");
    save_checkpoint(dir / "ok.ushp", s, "");
    const std::string bytes = slurp(dir / "ok.ushp");
    EXPECT_EQ(bytes.substr(0, 4), "USHP");
    EXPECT_TRUE(bitwise_equal(load_checkpoint(dir / "ok.ushp").tensors.at("a"), s.value("a")));

    const auto write = [&](const std::string& name, const std::string& content) {
        std::ofstream(dir / name, std::ios::binary) << content;
        return dir / name;
    };
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    EXPECT_THROW(load_checkpoint(write("flip.ushp", flipped)), DataError);
    EXPECT_THROW(load_checkpoint(write("short.ushp", bytes.substr(0, bytes.size() - 6))), DataError);
    std::string magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(load_checkpoint(write("magic.ushp", magic)), DataError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ushp"), DataError);
}

TEST(Evaluation, ReportShapeAndCgmAccuracy)
{
    const Dataset d = synth_generate({6, 16, 0.5, 18});
    const UNetSharp model(tiny_arch(), {true, true});
    ParamStore<float> store = initial_params(model, 3);
    const EvalReport r = evaluate(model, store, d, OutputMode::Accurate);
    ASSERT_EQ(r.images.size(), 6u);
    double iou_sum = 0;
    int agree = 0, total = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(r.images[i].id, d[i].id);
        EXPECT_EQ(r.images[i].presence, d[i].presence);
        EXPECT_EQ(r.images[i].gates.size(), 4u);
        iou_sum += r.images[i].iou;
        for (int g : r.images[i].gates) {
            agree += g == d[i].presence;
            ++total;
        }
    }
    EXPECT_NEAR(r.iou, iou_sum / 6, 1e-12);
    EXPECT_NEAR(r.cgm_accuracy, static_cast<double>(agree) / total, 1e-12);
    const UNetSharp plain(tiny_arch(), {false, true});
    ParamStore<float> ps = initial_params(plain, 3);
    const EvalReport q = evaluate(plain, ps, d, OutputMode::Fast, NodeId{0, 4});
    EXPECT_TRUE(std::isnan(q.cgm_accuracy));
    EXPECT_NE(to_json(q).find("\"cgm_accuracy\":null"), std::string::npos) << to_json(q);
}
