#pragma once

#include "unetsharp/train.hpp"

namespace unetsharp {

/// Validated pruning level 1..depth-1; the top level is the full grid.
class PruneLevel {
public:
    PruneLevel(int level, int depth = 5);
    int value() const { return level_; }
    operator int() const { return level_; }

private:
    int level_;
};

/// Sub-model reading its parameters by name from the parent store; nothing
/// is copied and inference never writes to the store.
struct PrunedModel {
    UNetSharp model;
    ParamStore<float>* params = nullptr;

    int level() const { return model.level(); }
    NodeId output_node() const { return {0, model.level()}; }
    /// Names of the parent tensors the sub-model reads.
    std::vector<std::string> retained_names() const;
};

PrunedModel prune(const UNetSharp& model, ParamStore<float>& params, PruneLevel level);

/// Gated probability map of the head on (0, level).
Tensor<float> pruned_inference(const PrunedModel& pruned, const Tensor<float>& images);

/// True when no edge of `full` runs from a node with I+J > level into one
/// with I+J <= level.
bool cut_set_holds(const ArchGraph& full, int level);

/// Copy of the retained tensors only, for a standalone checkpoint.
ParamStore<float> extract_params(const PrunedModel& pruned);

/// Trains the level-`level` sub-grid on its own, supervising its first-row
/// heads only.
TrainResult train_isolated(TrainConfig config, int level, const Dataset& train_set, const Dataset& val_set,
    const TrainHooks& hooks = {});

/// Smallest level whose validation IoU is within `margin` of the top
/// level's. `val_iou[i]` is the IoU of level i+1.
int select_fast_level(const std::vector<double>& val_iou, double margin = 0.01);

} // namespace unetsharp
