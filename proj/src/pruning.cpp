#include "unetsharp/pruning.hpp"

namespace unetsharp {

PruneLevel::PruneLevel(int level, int depth)
    : level_(level)
{
    if (level < 1 || level > depth - 1) {
        throw ArgumentError("prune: level " + std::to_string(level) + " outside 1.." + std::to_string(depth - 1));
    }
}

std::vector<std::string> PrunedModel::retained_names() const
{
    std::vector<std::string> names;
    for (const auto& s : model.param_specs()) names.push_back(s.name);
    return names;
}

PrunedModel prune(const UNetSharp& model, ParamStore<float>& params, PruneLevel level)
{
    if (level.value() > model.level()) {
        throw ArgumentError("prune: level " + std::to_string(level.value()) + " exceeds the model's level "
                            + std::to_string(model.level()));
    }
    PrunedModel p{model.pruned(level.value()), &params};
    for (const auto& s : p.model.param_specs()) {
        if (!params.contains(s.name)) throw ContractError("prune: parent store lacks " + s.name);
        if (params.value(s.name).shape() != s.shape) throw ShapeError("prune: " + s.name + " has the wrong shape");
    }
    return p;
}

Tensor<float> pruned_inference(const PrunedModel& pruned, const Tensor<float>& images)
{
    if (!pruned.params) throw ContractError("pruned_inference: no parameter store");
    return infer(pruned.model, *pruned.params, images, OutputMode::Fast, pruned.output_node()).prob;
}

bool cut_set_holds(const ArchGraph& full, int level)
{
    for (const GridNode& n : full.nodes()) {
        if (n.id.level + n.id.column > level) continue;
        for (const Edge& e : n.inputs) {
            if (e.kind == EdgeKind::Input) continue;
            if (e.source.level + e.source.column > level) return false;
        }
    }
    return true;
}

ParamStore<float> extract_params(const PrunedModel& pruned)
{
    ParamStore<float> out;
    for (const auto& s : pruned.model.param_specs()) out.put(s.name, pruned.params->value(s.name), s.kind);
    return out;
}

TrainResult train_isolated(TrainConfig config, int level, const Dataset& train_set, const Dataset& val_set,
    const TrainHooks& hooks)
{
    PruneLevel checked(level, config.arch.depth);
    config.level = checked.value();
    return train(config, train_set, val_set, hooks);
}

int select_fast_level(const std::vector<double>& val_iou, double margin)
{
    if (val_iou.empty()) throw ArgumentError("select_fast_level: no levels");
    if (margin < 0) throw ArgumentError("select_fast_level: margin must be non-negative");
    const double top = val_iou.back();
    for (std::size_t i = 0; i < val_iou.size(); ++i) {
        if (val_iou[i] >= top - margin) return static_cast<int>(i) + 1;
    }
    return static_cast<int>(val_iou.size());
}

} // namespace unetsharp
