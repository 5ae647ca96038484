#include "unetsharp/train.hpp"

#include "unetsharp/metrics.hpp"

#include "json.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace unetsharp {

void TrainConfig::validate() const
{
    arch.validate();
    loss.validate();
    if (!(lr0 > 0)) throw ArgumentError("train: lr0 must be positive");
    if (lr_min < 0 || lr_min > lr0) throw ArgumentError("train: lr_min must lie in [0, lr0]");
    if (weight_decay < 0) throw ArgumentError("train: weight_decay must be non-negative");
    if (epochs <= 0) throw ArgumentError("train: epochs must be positive");
    if (batch <= 0) throw ArgumentError("train: batch must be positive");
    if (eval_batch <= 0) throw ArgumentError("train: eval_batch must be positive");
    if (cgm_weight < 0) throw ArgumentError("train: cgm_weight must be non-negative");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ArgumentError("train: val_fraction must lie in [0,1)");
    if (level != -1 && (level < 1 || level > arch.depth - 1)) {
        throw ArgumentError("train: level must be -1 or in 1.." + std::to_string(arch.depth - 1));
    }
}

ParamStore<float> initial_params(const UNetSharp& model, std::uint64_t seed)
{
    ParamStore<float> store;
    model.declare(store);
    init_weights(store, derive_seed(seed, 5));
    return store;
}

Inference infer(const UNetSharp& model, ParamStore<float>& store, const Tensor<float>& images, OutputMode mode,
    std::optional<NodeId> branch)
{
    Tape<float> tape(false);
    Context<float> ctx(tape, store, Mode::Eval);
    Var<float> x = tape.leaf(images, false);
    const BranchOutputs<float> out = model.forward(ctx, x);
    Inference r;
    r.prob = inference_output(out, mode, branch);
    for (const auto& b : out.branches) {
        if (b.cgm) r.gates[b.spec->name] = b.cgm->gate;
    }
    return r;
}

EvalReport evaluate(const UNetSharp& model, ParamStore<float>& store, const Dataset& data, OutputMode mode,
    std::optional<NodeId> branch, int batch)
{
    if (batch <= 0) throw ArgumentError("evaluate: batch must be positive");
    EvalReport report;
    report.mode = mode == OutputMode::Fast ? "fast" : "accurate";
    report.level = model.level();
    if (branch) {
        for (const auto& b : model.branches()) {
            if (b.source == *branch) report.branch = b.name;
        }
        if (report.branch.empty()) throw ArgumentError("evaluate: model has no branch on " + to_string(*branch));
    }
    Index gate_pairs = 0, gate_hits = 0;
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch)); ++i) idx.push_back(i);
        const SampleBatch b = make_batch(data, idx);
        const Inference inf = infer(model, store, b.images, mode, branch);
        const Index plane = b.masks.size() / static_cast<Index>(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const Shape s{1, plane};
            Tensor<float> p(s), m(s);
            std::copy_n(inf.prob.data() + static_cast<Index>(k) * plane, plane, p.data());
            std::copy_n(b.masks.data() + static_cast<Index>(k) * plane, plane, m.data());
            const Overlap o = overlap(p, m);
            ImageResult r;
            r.id = b.ids[k];
            r.presence = b.presence[k];
            r.iou = iou(o);
            r.dice = dice(o);
            r.positive_pixels = o.predicted;
            for (const auto& spec : model.branches()) {
                if (spec.family != BranchFamily::In) continue;
                auto it = inf.gates.find(spec.name);
                if (it == inf.gates.end()) continue;
                const int g = it->second[k] > 0.5f ? 1 : 0;
                r.gates.push_back(g);
                ++gate_pairs;
                gate_hits += g == r.presence;
            }
            report.iou += r.iou;
            report.dice += r.dice;
            report.images.push_back(std::move(r));
        }
    }
    const double n = static_cast<double>(report.images.size());
    report.iou = n > 0 ? report.iou / n : std::numeric_limits<double>::quiet_NaN();
    report.dice = n > 0 ? report.dice / n : std::numeric_limits<double>::quiet_NaN();
    report.cgm_accuracy = gate_pairs > 0 ? static_cast<double>(gate_hits) / static_cast<double>(gate_pairs)
                                         : std::numeric_limits<double>::quiet_NaN();
    return report;
}

namespace {

nlohmann::ordered_json number(double v)
{
    return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

bool all_grads_finite(const ParamStore<float>& store, std::string& bad)
{
    for (const auto& [name, e] : store.entries()) {
        if (!e.grad.empty() && !e.grad.all_finite()) {
            bad = name;
            return false;
        }
    }
    return true;
}

} // namespace

std::string to_json(const EvalReport& report, bool with_images)
{
    nlohmann::ordered_json j;
    j["mode"] = report.mode;
    j["branch"] = report.branch.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(report.branch);
    j["level"] = report.level;
    j["images"] = report.images.size();
    j["iou"] = number(report.iou);
    j["dice"] = number(report.dice);
    j["cgm_accuracy"] = number(report.cgm_accuracy);
    if (with_images) {
        auto& arr = j["per_image"] = nlohmann::ordered_json::array();
        for (const auto& r : report.images) {
            arr.push_back({{"id", r.id}, {"presence", r.presence}, {"iou", r.iou}, {"dice", r.dice},
                {"positive_pixels", r.positive_pixels}, {"gates", r.gates}});
        }
    }
    return j.dump();
}

std::string to_json_line(const EpochRecord& r)
{
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["lr"] = r.lr;
    j["train_total"] = number(r.train_total);
    for (const auto& [name, v] : r.branch_losses) j[name] = number(v);
    j["val_iou"] = number(r.val_iou);
    j["val_dice"] = number(r.val_dice);
    j["val_cgm_acc"] = number(r.val_cgm_accuracy);
    j["seconds"] = r.seconds;
    return j.dump();
}

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& val_set, const TrainHooks& hooks)
{
    config.validate();
    const UNetSharp model = config.model();
    ParamStore<float> store = initial_params(model, config.seed);
    Adam<float> adam;

    const auto n = static_cast<Index>(train_set.size());
    // A trailing batch of one would leave the gate's batch norm without statistics.
    const Index full = n / config.batch, rest = n % config.batch;
    const Index per_epoch = full + (rest >= 2 ? 1 : 0);
    if (per_epoch == 0) throw ArgumentError("train: need at least 2 training samples");
    const Index total_steps = per_epoch * config.epochs;
    AugmentOptions aug;
    aug.enabled = config.augment;

    TrainResult result;
    Index step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 shuffle(derive_seed(config.seed, 2, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle() % i]);

        EpochRecord rec;
        rec.epoch = epoch;
        double total_sum = 0.0;
        std::map<std::string, double> branch_sum;
        for (Index bi = 0; bi < per_epoch; ++bi) {
            std::vector<Sample> samples;
            const Index end = std::min(n, (bi + 1) * config.batch);
            for (Index k = bi * config.batch; k < end; ++k) {
                const std::size_t idx = order[static_cast<std::size_t>(k)];
                std::mt19937_64 rng(derive_seed(config.seed, 3, static_cast<std::uint64_t>(epoch), idx));
                samples.push_back(augment(train_set[idx], rng, aug));
            }
            const SampleBatch batch = make_batch(samples);
            const double lr = cosine_lr(step, total_steps, config.lr0, config.lr_min);
            if (bi == 0) rec.lr = lr;

            Tape<float> tape;
            Context<float> ctx(tape, store, Mode::Train, derive_seed(config.seed, 4, static_cast<std::uint64_t>(step)));
            Var<float> x = tape.leaf(batch.images, false);
            const BranchOutputs<float> out = model.forward(ctx, x);
            const SupervisedLoss<float> loss
                = supervised_loss(out, batch.masks, batch.presence, config.loss, config.cgm ? config.cgm_weight : 0.0);
            const std::string where = " (epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ")";
            if (!std::isfinite(loss.report.total)) {
                for (const auto& [name, c] : loss.report.branches) {
                    if (!std::isfinite(c.total)) throw TrainingError("non-finite loss in branch " + name + where);
                }
                throw TrainingError("non-finite presence-gate loss" + where);
            }
            store.zero_grad();
            tape.backward(loss.total);
            std::string bad;
            if (!all_grads_finite(store, bad)) throw TrainingError("non-finite gradient for " + bad + where);
            adam.step(store, lr, config.weight_decay);

            total_sum += loss.report.total;
            for (const auto& [name, c] : loss.report.branches) branch_sum[name] += c.total;
            ++step;
        }
        rec.train_total = total_sum / static_cast<double>(per_epoch);
        for (const auto& [name, v] : branch_sum) rec.branch_losses[name] = v / static_cast<double>(per_epoch);

        store.zero_grad();
        if (!val_set.empty()) {
            const EvalReport ev = evaluate(model, store, val_set, OutputMode::Accurate, {}, config.eval_batch);
            rec.val_iou = ev.iou;
            rec.val_dice = ev.dice;
            rec.val_cgm_accuracy = ev.cgm_accuracy;
        } else {
            rec.val_iou = rec.val_dice = rec.val_cgm_accuracy = std::numeric_limits<double>::quiet_NaN();
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(rec);
        if (hooks.on_epoch) hooks.on_epoch(rec);
        const bool improved = val_set.empty() || rec.val_iou > result.best_val_iou;
        if (improved) {
            result.best = store;
            result.best_epoch = epoch;
            result.best_val_iou = rec.val_iou;
            if (hooks.on_best) hooks.on_best(store, rec);
        }
    }
    result.last = std::move(store);
    return result;
}

} // namespace unetsharp
