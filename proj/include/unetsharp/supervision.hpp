#pragma once

#include "unetsharp/arch_grid.hpp"
#include "unetsharp/losses.hpp"

#include <optional>
#include <string>
#include <vector>

namespace unetsharp {

enum class BranchFamily { In, De };
enum class CgmVariant { Full, Simplified };

/// One deep-supervision branch: a head on a grid node plus its
/// classification gate.
struct BranchSpec {
    std::string name;
    NodeId source;
    BranchFamily family = BranchFamily::In;
    Index head_kernel = 1;
    Index gt_scale = 1;
    CgmVariant cgm = CgmVariant::Simplified;
    Index channels = 0;

    std::string head_prefix() const { return "head." + name; }
    std::string cgm_prefix() const { return "cgm." + name; }
};

/// All branches of a full grid: the first-row nodes (0,1)..(0,D-1), then
/// the decoder path (1,D-2)..(D-1,0).
std::vector<BranchSpec> branch_specs(const ArchGraph& full_grid);

/// Head and gate parameters of one branch.
std::vector<ParamSpec> branch_param_specs(const BranchSpec& branch, bool with_cgm);

/// Hidden width of the two-layer gate.
inline Index cgm_hidden(Index channels)
{
    return std::max<Index>(1, channels / 4);
}

inline constexpr double kCgmDropout = 0.5;

struct ModelOptions {
    bool cgm = true;
    bool deep_supervision = true;
};

template <typename T>
struct CgmResult {
    Var<T> prob;         ///< [N,2] softmax, column 1 = organ present
    std::vector<T> gate; ///< argmax per item, exactly 0 or 1
};

template <typename T>
struct BranchResult {
    const BranchSpec* spec = nullptr;
    Var<T> logit; ///< [N,1,h,w] pre-activation map at the branch's scale
    std::optional<CgmResult<T>> cgm;
};

template <typename T>
struct BranchOutputs {
    std::map<NodeId, Var<T>> nodes;
    std::vector<BranchResult<T>> branches;

    const BranchResult<T>& branch(NodeId source) const
    {
        for (const auto& b : branches) {
            if (b.spec->source == source) return b;
        }
        throw ArgumentError("no supervised branch on node " + to_string(source));
    }
};

/// Presence gate: concat(global avg, global max) -> flatten, then
/// [bn -> dropout -> linear -> relu] -> [bn -> dropout -> linear] for the
/// full variant or a single [bn -> dropout -> linear] for the simplified
/// one, then softmax and argmax.
template <typename T>
CgmResult<T> cgm_forward(Context<T>& ctx, const Var<T>& feature, CgmVariant variant, const std::string& prefix)
{
    Var<T> pooled = concat_channels<T>({adaptive_avg_pool_1x1(feature), adaptive_max_pool_1x1(feature)});
    Var<T> x = flatten(pooled);
    const auto block = [&](const Var<T>& in, const std::string& bn, const std::string& fc) {
        Var<T> y = batch_norm(in, ctx.param(bn + ".gamma"), ctx.param(bn + ".beta"), ctx.norm_state(bn), ctx.mode());
        y = dropout(y, kCgmDropout, ctx.mode(), ctx.rng());
        return linear(y, ctx.param(fc + ".weight"), ctx.param(fc + ".bias"));
    };
    if (variant == CgmVariant::Full) {
        x = relu(block(x, prefix + ".bn0", prefix + ".fc0"));
        x = block(x, prefix + ".bn1", prefix + ".fc1");
    } else {
        x = block(x, prefix + ".bn0", prefix + ".fc0");
    }
    CgmResult<T> out;
    out.prob = softmax(x, 1);
    const Index n = out.prob.dim(0);
    out.gate.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const T* row = out.prob.value().data() + 2 * i;
        out.gate[static_cast<std::size_t>(i)] = row[1] > row[0] ? T(1) : T(0);
    }
    return out;
}

/// Per-item multiply of seg_map by gate[n].
template <typename T>
Tensor<T> apply_gate(const Tensor<T>& seg_map, const std::vector<T>& gate)
{
    const Index n = seg_map.dim(0);
    if (static_cast<Index>(gate.size()) != n) {
        throw ShapeError("apply_gate: " + std::to_string(gate.size()) + " gates for batch of " + std::to_string(n));
    }
    Tensor<T> out(seg_map.shape());
    const Index per = seg_map.size() / std::max<Index>(1, n);
    for (Index i = 0; i < n; ++i) {
        for (Index q = 0; q < per; ++q) out[i * per + q] = seg_map[i * per + q] * gate[static_cast<std::size_t>(i)];
    }
    return out;
}

/// Repeated 2x2 max pooling of a binary mask [N,1,H,W].
template <typename T>
Tensor<T> downscale_gt(const Tensor<T>& mask, Index factor)
{
    if (factor != 1 && factor != 2 && factor != 4 && factor != 8 && factor != 16) {
        throw ArgumentError("downscale_gt: unsupported factor " + std::to_string(factor));
    }
    if (mask.rank() != 4) throw ShapeError("downscale_gt: expected [N,C,H,W], got " + to_string(mask.shape()));
    if (mask.dim(2) % factor != 0 || mask.dim(3) % factor != 0) {
        throw ShapeError("downscale_gt: extent " + to_string(mask.shape()) + " not divisible by "
                         + std::to_string(factor));
    }
    Tensor<T> cur = mask;
    for (Index f = factor; f > 1; f /= 2) {
        const Index nc = cur.dim(0) * cur.dim(1), h = cur.dim(2), w = cur.dim(3);
        Tensor<T> next({cur.dim(0), cur.dim(1), h / 2, w / 2});
        for (Index p = 0; p < nc; ++p) {
            for (Index y = 0; y < h / 2; ++y) {
                for (Index x = 0; x < w / 2; ++x) {
                    const T* base = cur.data() + p * h * w + 2 * y * w + 2 * x;
                    next[(p * (h / 2) + y) * (w / 2) + x] = std::max({base[0], base[1], base[w], base[w + 1]});
                }
            }
        }
        cur = std::move(next);
    }
    return cur;
}

/// The grid plus its supervised branches. A model at level L < D-1 is a
/// pruned or isolated sub-grid whose branches are first-row heads only.
class UNetSharp {
public:
    UNetSharp(ArchConfig config, ModelOptions options, int level = -1);

    const ArchConfig& config() const { return graph_.config(); }
    const ModelOptions& options() const { return options_; }
    const ArchGraph& graph() const { return graph_; }
    int level() const { return graph_.level(); }
    const std::vector<BranchSpec>& branches() const { return branches_; }
    /// Head of node (0, level).
    const BranchSpec& final_branch() const;
    bool has_branch(NodeId source) const;

    std::vector<ParamSpec> param_specs() const;
    Index param_count() const;

    /// Embedded pruning: same parameter names, sub-grid and first-row heads
    /// up to `level`.
    UNetSharp pruned(int level) const;

    template <typename T>
    void declare(ParamStore<T>& store) const
    {
        for (const auto& spec : param_specs()) store.declare(spec);
    }

    template <typename T>
    BranchOutputs<T> forward(Context<T>& ctx, const Var<T>& image) const
    {
        BranchOutputs<T> out;
        out.nodes = unetsharp::forward(graph_, ctx, image);
        for (const BranchSpec& b : branches_) {
            const Var<T>& feature = out.nodes.at(b.source);
            BranchResult<T> r;
            r.spec = &b;
            r.logit = conv2d(feature, ctx.param(b.head_prefix() + ".weight"), ctx.param(b.head_prefix() + ".bias"), 1,
                (b.head_kernel - 1) / 2);
            if (options_.cgm) r.cgm = cgm_forward(ctx, feature, b.cgm, b.cgm_prefix());
            out.branches.push_back(std::move(r));
        }
        return out;
    }

private:
    UNetSharp(ArchGraph graph, ModelOptions options, std::vector<BranchSpec> branches);

    ArchGraph graph_;
    ModelOptions options_;
    std::vector<BranchSpec> branches_;
};

/// Learnable-scalar count of the model at a pruning level.
struct CountOptions {
    bool heads = true;
    bool cgm = false;
};
Index param_count(const ArchConfig& config, int level, CountOptions options = {});

template <typename T>
struct SupervisedLoss {
    Var<T> total;
    LossReport report;
};

/// Mean over branches of the mixed loss against the ground truth at each
/// branch's scale, plus cgm_weight times the mean gate BCE.
template <typename T>
SupervisedLoss<T> supervised_loss(const BranchOutputs<T>& outputs, const Tensor<T>& mask,
    const std::vector<int>& presence, const LossWeights& weights, double cgm_weight)
{
    if (outputs.branches.empty()) throw ContractError("supervised_loss: no branch outputs");
    SupervisedLoss<T> out;
    std::vector<Var<T>> seg_terms, bce_terms;
    for (const auto& b : outputs.branches) {
        if (!b.spec || !b.logit.valid()) throw ContractError("supervised_loss: branch without a segmentation map");
        const Tensor<T> gt = b.spec->gt_scale == 1 ? mask : downscale_gt(mask, b.spec->gt_scale);
        const MixedLoss<T> m = mixed_seg_loss(b.logit, gt, weights);
        const LossComponents c = m.components();
        out.report.branches[b.spec->name] = c;
        out.report.focal += c.focal;
        out.report.dice += c.dice;
        out.report.lovasz += c.lovasz;
        seg_terms.push_back(m.total);
        if (b.cgm) bce_terms.push_back(bce_loss(b.cgm->prob, presence));
    }
    const double inv_seg = 1.0 / static_cast<double>(seg_terms.size());
    out.report.focal *= inv_seg;
    out.report.dice *= inv_seg;
    out.report.lovasz *= inv_seg;

    std::vector<Var<T>> terms = seg_terms;
    std::vector<T> coeffs(seg_terms.size(), static_cast<T>(inv_seg));
    if (!bce_terms.empty() && cgm_weight != 0.0) {
        const double w = cgm_weight / static_cast<double>(bce_terms.size());
        for (const auto& t : bce_terms) {
            terms.push_back(t);
            coeffs.push_back(static_cast<T>(w));
        }
    }
    double bce = 0.0;
    for (const auto& t : bce_terms) bce += static_cast<double>(t.value()[0]);
    out.report.bce = bce_terms.empty() ? 0.0 : bce / static_cast<double>(bce_terms.size());
    out.total = weighted_sum(terms, coeffs);
    out.report.total = static_cast<double>(out.total.value()[0]);
    return out;
}

enum class OutputMode { Accurate, Fast };

OutputMode parse_output_mode(const std::string& name);

/// Gated sigmoid map of one branch (gate 1 when the model has no CGM).
template <typename T>
Tensor<T> gated_probability(const BranchResult<T>& b)
{
    Tensor<T> prob = sigmoid_values(b.logit.value());
    if (!b.cgm) return prob;
    return apply_gate(prob, b.cgm->gate);
}

/// Accurate mode averages the gated maps of the first-row branches; fast
/// mode returns the chosen first-row branch's gated map.
template <typename T>
Tensor<T> inference_output(const BranchOutputs<T>& outputs, OutputMode mode, std::optional<NodeId> branch = {})
{
    if (mode == OutputMode::Fast) {
        if (!branch) throw ArgumentError("inference_output: fast mode needs a branch");
        const auto& b = outputs.branch(*branch);
        if (b.spec->family != BranchFamily::In) {
            throw ArgumentError("inference_output: fast mode branch must be on the first row");
        }
        return gated_probability(b);
    }
    Tensor<T> acc;
    int count = 0;
    for (const auto& b : outputs.branches) {
        if (b.spec->family != BranchFamily::In) continue;
        Tensor<T> p = gated_probability(b);
        if (count == 0) {
            acc = std::move(p);
        } else {
            acc.array() += p.array();
        }
        ++count;
    }
    if (count == 0) throw ContractError("inference_output: no first-row branches");
    acc.array() /= static_cast<T>(count);
    return acc;
}

/// Parses "in_0_1" style branch names into the source node.
NodeId parse_branch_name(const std::string& name);

} // namespace unetsharp
