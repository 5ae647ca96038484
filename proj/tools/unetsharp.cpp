#include "unetsharp/checkpoint.hpp"
#include "unetsharp/config.hpp"
#include "unetsharp/png_io.hpp"
#include "unetsharp/pruning.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace unetsharp;

namespace {

/// Declared usage error: exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string one_line(std::string s)
{
    for (char& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

struct Loaded {
    TrainConfig config;
    UNetSharp model;
    ParamStore<float> store;
};

Loaded load_model(const std::string& path)
{
    const Checkpoint ckpt = load_checkpoint(path);
    TrainConfig cfg = parse_config(ckpt.meta);
    UNetSharp model = cfg.model();
    ParamStore<float> store;
    model.declare(store);
    restore(store, ckpt);
    return {std::move(cfg), std::move(model), std::move(store)};
}

int cmd_synth(const std::string& out, int count, Index size, double empty_frac, std::uint64_t seed)
{
    SynthOptions o;
    o.count = count;
    o.size = size;
    o.empty_fraction = empty_frac;
    o.seed = seed;
    const Dataset d = synth_generate(o);
    write_dataset(d, out);
    int empty = 0;
    for (const auto& s : d) empty += s.presence == 0;
    std::cout << "wrote " << d.size() << " samples (" << empty << " empty) to " << out << '\n';
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out)
{
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
    if (!data.empty()) cfg.data_dir = data;
    if (cfg.data_dir.empty()) throw UsageError("train: no dataset (set --data or data.dir)");
    const Dataset all = load_dataset(cfg.data_dir, cfg.arch.input_channels);
    auto [train_set, val_set] = split_dataset(all, cfg.val_fraction, cfg.split_seed);
    std::filesystem::create_directories(out);
    const std::filesystem::path dir(out);
    std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw DataError("cannot write " + (dir / "metrics.jsonl").string());
    const std::string meta = format_config(cfg);

    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& r) {
        metrics << to_json_line(r) << '\n' << std::flush;
        std::cerr << "epoch " << r.epoch << " loss " << r.train_total << " val_iou " << r.val_iou << " ("
                  << r.seconds << " s)\n";
    };
    hooks.on_best = [&](const ParamStore<float>& store, const EpochRecord&) {
        save_checkpoint(dir / "checkpoint.ushp", store, meta);
    };
    const TrainResult result = train(cfg, train_set, val_set, hooks);
    save_checkpoint(dir / "last.ushp", result.last, meta);
    std::cout << "best epoch " << result.best_epoch << " val_iou " << result.best_val_iou << " -> "
              << (dir / "checkpoint.ushp").string() << '\n';
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& mode_name,
    const std::string& branch_name, int level)
{
    Loaded m = load_model(ckpt);
    const OutputMode mode = parse_output_mode(mode_name);
    UNetSharp model = level > 0 ? m.model.pruned(PruneLevel(level, m.config.arch.depth)) : m.model;
    std::optional<NodeId> branch;
    if (!branch_name.empty()) {
        if (mode != OutputMode::Fast) throw UsageError("eval: --branch requires --mode fast");
        branch = parse_branch_name(branch_name);
    } else if (mode == OutputMode::Fast) {
        branch = NodeId{0, model.level()};
    }
    const Dataset d = load_dataset(data, m.config.arch.input_channels);
    const EvalReport r = evaluate(model, m.store, d, mode, branch, m.config.eval_batch);
    std::cout << "iou " << r.iou << " dice " << r.dice << '\n' << to_json(r) << '\n';
    return 0;
}

int cmd_prune(const std::string& ckpt, int level, const std::string& out)
{
    Loaded m = load_model(ckpt);
    const PrunedModel p = prune(m.model, m.store, PruneLevel(level, m.config.arch.depth));
    TrainConfig cfg = m.config;
    cfg.level = p.level();
    save_checkpoint(out, extract_params(p), format_config(cfg));
    std::cout << "pruned to L" << p.level() << ": " << p.model.param_count() << " parameters -> " << out << '\n';
    return 0;
}

int cmd_params(const std::string& config_path, int level)
{
    const TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
    const int top = cfg.arch.depth - 1;
    const int lv = level > 0 ? PruneLevel(level, cfg.arch.depth).value() : top;
    const Index grid = param_count(cfg.arch, lv, {false, false});
    const Index heads = param_count(cfg.arch, lv, {true, false});
    const Index gates = param_count(cfg.arch, lv, {true, true});
    std::cout << "level " << lv << " params " << heads << " grid " << grid << " with_cgm " << gates << '\n';
    return 0;
}

int cmd_graph(const std::string& config_path, const std::string& format)
{
    const TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
    const ArchGraph g = build_grid(cfg.arch);
    std::cout << export_graph(g, parse_graph_format(format)) << '\n';
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image, const std::string& out, double threshold)
{
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw UsageError("infer: threshold must lie in [0,1]");
    Loaded m = load_model(ckpt);
    const Index c = m.config.arch.input_channels, size = m.config.arch.input_size;
    const Image8 img = read_png(image, static_cast<int>(c));
    if (img.width != size || img.height != size) {
        throw DataError("infer: image is " + std::to_string(img.width) + "x" + std::to_string(img.height)
                        + ", model expects " + std::to_string(size) + "x" + std::to_string(size));
    }
    Tensor<float> x({1, c, size, size});
    for (Index y = 0; y < size; ++y) {
        for (Index xx = 0; xx < size; ++xx) {
            for (Index ch = 0; ch < c; ++ch) {
                x[(ch * size + y) * size + xx] = img.pixels[static_cast<std::size_t>((y * size + xx) * c + ch)] / 255.0f;
            }
        }
    }
    x = normalize(x);
    const bool pruned = m.model.level() < m.config.arch.depth - 1;
    const OutputMode mode = pruned ? OutputMode::Fast : OutputMode::Accurate;
    const Inference r = infer(m.model, m.store, x, mode, pruned ? std::optional<NodeId>(NodeId{0, m.model.level()}) : std::nullopt);
    Image8 mask{size, size, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(size * size))};
    Index positives = 0;
    for (Index i = 0; i < size * size; ++i) {
        const bool on = r.prob[i] > threshold;
        mask.pixels[static_cast<std::size_t>(i)] = on ? 255 : 0;
        positives += on;
    }
    write_png(out, mask);
    std::cout << "wrote " << out << " (" << positives << " positive pixels)\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"UNet# segmentation: data generation, training, evaluation, pruning"};
    app.require_subcommand(1);

    std::string out, config, data, ckpt, mode = "accurate", branch, format = "dot", image;
    int count = 100, level = 0;
    Index size = 64;
    double empty_frac = 0.3, threshold = 0.5;
    std::uint64_t seed = 0;

    auto* synth = app.add_subcommand("synth", "write a synthetic blob dataset");
    synth->add_option("--out", out, "output directory")->required();
    synth->add_option("--count", count, "number of samples")->check(CLI::NonNegativeNumber);
    synth->add_option("--size", size, "square image extent, multiple of 16");
    synth->add_option("--empty-frac", empty_frac, "share of samples without a blob");
    synth->add_option("--seed", seed, "generator seed");

    auto* trainc = app.add_subcommand("train", "train a model; writes checkpoint.ushp, last.ushp, metrics.jsonl");
    trainc->add_option("--config", config, "key=value config file");
    trainc->add_option("--data", data, "dataset directory (overrides data.dir)");
    trainc->add_option("--out", out, "output directory")->required();

    auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    evalc->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    evalc->add_option("--data", data, "dataset directory")->required();
    evalc->add_option("--mode", mode, "accurate or fast");
    evalc->add_option("--branch", branch, "fast-mode branch, e.g. in_0_2");
    evalc->add_option("--level", level, "prune to this level before evaluating");

    auto* prunec = app.add_subcommand("prune", "write a checkpoint of the level-L sub-model");
    prunec->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    prunec->add_option("--level", level, "pruning level")->required();
    prunec->add_option("--out", out, "output checkpoint")->required();

    auto* paramsc = app.add_subcommand("params", "report learnable parameter counts");
    paramsc->add_option("--config", config, "key=value config file");
    paramsc->add_option("--level", level, "pruning level");

    auto* graphc = app.add_subcommand("graph", "export the node grid");
    graphc->add_option("--config", config, "key=value config file");
    graphc->add_option("--format", format, "dot or json");

    auto* inferc = app.add_subcommand("infer", "segment one PNG image");
    inferc->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    inferc->add_option("--image", image, "input PNG")->required();
    inferc->add_option("--out", out, "output mask PNG")->required();
    inferc->add_option("--threshold", threshold, "probability threshold");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << '\n';
        return 1;
    }

    try {
        if (*synth) return cmd_synth(out, count, size, empty_frac, seed);
        if (*trainc) return cmd_train(config, data, out);
        if (*evalc) return cmd_eval(ckpt, data, mode, branch, level);
        if (*prunec) return cmd_prune(ckpt, level, out);
        if (*paramsc) return cmd_params(config, level);
        if (*graphc) return cmd_graph(config, format);
        if (*inferc) return cmd_infer(ckpt, image, out, threshold);
    } catch (const UsageError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << '\n';
        return 1;
    } catch (const ArgumentError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << one_line(e.what()) << '\n';
        return 2;
    }
    return 1;
}
