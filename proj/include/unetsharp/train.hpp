#pragma once

#include "unetsharp/data.hpp"
#include "unetsharp/optim.hpp"
#include "unetsharp/supervision.hpp"

#include <functional>
#include <optional>
#include <ostream>

namespace unetsharp {

/// Non-finite loss or gradient during training.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    ArchConfig arch;
    LossWeights loss;
    double lr0 = 1e-3;
    double lr_min = 0.0;
    double weight_decay = 1e-4;
    int epochs = 30;
    int batch = 8;
    std::uint64_t seed = 0;
    bool augment = true;
    bool cgm = true;
    bool deep_supervision = true;
    double cgm_weight = 0.25;
    /// Grid level to build and train; -1 trains the full grid.
    int level = -1;
    std::string data_dir;
    std::uint64_t split_seed = 0;
    double val_fraction = 0.2;
    int eval_batch = 8;

    void validate() const;
    ModelOptions model_options() const { return {cgm, deep_supervision}; }
    UNetSharp model() const { return UNetSharp(arch, model_options(), level); }
};

/// Gated probability map [N,1,H,W] plus each branch's gates.
struct Inference {
    Tensor<float> prob;
    std::map<std::string, std::vector<float>> gates;
};

/// Eval-mode forward on normalized images. Fast mode needs a first-row
/// branch; accurate mode averages the first-row branches.
Inference infer(const UNetSharp& model, ParamStore<float>& store, const Tensor<float>& images, OutputMode mode,
    std::optional<NodeId> branch = {});

struct ImageResult {
    std::string id;
    int presence = 0;
    double iou = 0.0;
    double dice = 0.0;
    Index positive_pixels = 0;
    /// Gate of every first-row branch, in branch order.
    std::vector<int> gates;
};

struct EvalReport {
    std::string mode;
    std::string branch;
    int level = 0;
    double iou = 0.0;  ///< mean per-image IoU
    double dice = 0.0; ///< mean per-image Dice
    /// Fraction of (image, first-row gate) pairs matching presence; NaN without gates.
    double cgm_accuracy = 0.0;
    std::vector<ImageResult> images;
};

EvalReport evaluate(const UNetSharp& model, ParamStore<float>& store, const Dataset& data, OutputMode mode,
    std::optional<NodeId> branch = {}, int batch = 8);

/// Order-preserving serialisation; used for reports and equality checks.
std::string to_json(const EvalReport& report, bool with_images = false);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_total = 0.0;
    std::map<std::string, double> branch_losses;
    double val_iou = 0.0;
    double val_dice = 0.0;
    double val_cgm_accuracy = 0.0;
    double seconds = 0.0;
};

/// One JSON object on one line.
std::string to_json_line(const EpochRecord& record);

struct TrainResult {
    std::vector<EpochRecord> history;
    ParamStore<float> best;
    ParamStore<float> last;
    int best_epoch = -1;
    double best_val_iou = -1.0;
};

struct TrainHooks {
    /// Receives each finished epoch.
    std::function<void(const EpochRecord&)> on_epoch;
    /// Receives the model state whenever validation IoU improves.
    std::function<void(const ParamStore<float>&, const EpochRecord&)> on_best;
};

/// Trains `config.model()` from a seeded He initialization, validating
/// in accurate mode after every epoch.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& val_set, const TrainHooks& hooks = {});

/// Parameters initialized exactly as `train` does before the first step.
ParamStore<float> initial_params(const UNetSharp& model, std::uint64_t seed);

} // namespace unetsharp
