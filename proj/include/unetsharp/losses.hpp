#pragma once

#include "unetsharp/ops.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace unetsharp {

/// Weights of the mixed segmentation loss and the focal parameters.
struct LossWeights {
    double w_focal = 0.5;
    double w_dice = 1.0;
    double w_lovasz = 0.5;
    double alpha = 0.25;
    double beta = 2.0;
    /// Apply the positive-class focal term to every pixel, ignoring labels.
    bool focal_positive_only = false;

    void validate() const
    {
        if (w_focal < 0 || w_dice < 0 || w_lovasz < 0 || alpha < 0 || beta < 0) {
            throw ArgumentError("loss: weights and focal parameters must be non-negative");
        }
    }
};

struct LossComponents {
    double total = 0.0;
    double focal = 0.0;
    double dice = 0.0;
    double lovasz = 0.0;
};

/// Supervision summary: branch-averaged components plus each branch's own.
struct LossReport : LossComponents {
    double bce = 0.0;
    std::map<std::string, LossComponents> branches;
};

inline constexpr double kProbClamp = 1e-7;

namespace detail {

inline void require_same(const Shape& a, const Shape& b, const char* op)
{
    if (a != b) throw ShapeError(std::string(op) + ": prediction " + to_string(a) + " vs target " + to_string(b));
}

} // namespace detail

/// Mean over pixels of the label-conditioned binary focal term
///   -a y (1-p)^b log p - (1-a)(1-y) p^b log(1-p),
/// or of -a (1-p)^b log p alone when `positive_only`.
template <typename T>
Var<T> focal_loss(const Var<T>& prob, const Tensor<T>& target, double alpha, double beta, bool positive_only = false)
{
    detail::require_same(prob.shape(), target.shape(), "focal_loss");
    const Index n = prob.value().size();
    const T* p = prob.value().data();
    const T* y = target.data();
    double acc = 0.0;
    std::vector<T> dp(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const double raw = static_cast<double>(p[i]);
        const double pc = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
        const bool clamped = pc != raw;
        const bool positive = positive_only || y[i] > T(0.5);
        double value = 0.0, deriv = 0.0;
        if (positive) {
            const double q = 1.0 - pc;
            value = -alpha * std::pow(q, beta) * std::log(pc);
            deriv = alpha * ((beta > 0 ? beta * std::pow(q, beta - 1.0) : 0.0) * std::log(pc) - std::pow(q, beta) / pc);
        } else {
            const double q = 1.0 - pc;
            value = -(1.0 - alpha) * std::pow(pc, beta) * std::log(q);
            deriv = -(1.0 - alpha) * ((beta > 0 ? beta * std::pow(pc, beta - 1.0) : 0.0) * std::log(q) - std::pow(pc, beta) / q);
        }
        acc += value;
        dp[static_cast<std::size_t>(i)] = clamped ? T(0) : static_cast<T>(deriv / static_cast<double>(n));
    }
    const auto ip = prob.id();
    return prob.tape().emit(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(n))), prob.requires_grad(),
        [ip, dp = std::move(dp)](Tape<T>& t) {
            const T g = t.upstream()[0];
            T* d = t.grad(ip).data();
            for (std::size_t i = 0; i < dp.size(); ++i) d[i] += g * dp[i];
        });
}

/// Per item 1 - (2 sum(Y Yhat) + 1) / (sum Y + sum Yhat + 1), averaged over
/// the batch (first dimension).
template <typename T>
Var<T> laplace_dice_loss(const Var<T>& prob, const Tensor<T>& target)
{
    detail::require_same(prob.shape(), target.shape(), "laplace_dice_loss");
    const Index batch = prob.dim(0);
    const Index per = prob.value().size() / std::max<Index>(1, batch);
    const T* p = prob.value().data();
    const T* y = target.data();
    std::vector<double> num(static_cast<std::size_t>(batch)), den(static_cast<std::size_t>(batch));
    double acc = 0.0;
    for (Index b = 0; b < batch; ++b) {
        double inter = 0.0, sy = 0.0, sp = 0.0;
        for (Index q = 0; q < per; ++q) {
            const double pv = p[b * per + q], yv = y[b * per + q];
            inter += pv * yv;
            sy += yv;
            sp += pv;
        }
        num[b] = 2.0 * inter + 1.0;
        den[b] = sy + sp + 1.0;
        acc += 1.0 - num[b] / den[b];
    }
    const auto ip = prob.id();
    Tensor<T> ycopy = target;
    return prob.tape().emit(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(batch))), prob.requires_grad(),
        [=, ycopy = std::move(ycopy)](Tape<T>& t) {
            const double g = t.upstream()[0];
            T* d = t.grad(ip).data();
            for (Index b = 0; b < batch; ++b) {
                const double db2 = den[b] * den[b];
                for (Index q = 0; q < per; ++q) {
                    const double yv = ycopy[b * per + q];
                    const double dl = -(2.0 * yv * den[b] - num[b]) / db2;
                    d[b * per + q] += static_cast<T>(g * dl / static_cast<double>(batch));
                }
            }
        });
}

/// Mean over pixels of (1 - ys)_+ with labels remapped to -1/+1.
template <typename T>
Var<T> lovasz_hinge_loss(const Var<T>& score, const Tensor<T>& target)
{
    detail::require_same(score.shape(), target.shape(), "lovasz_hinge_loss");
    const Index n = score.value().size();
    const T* s = score.value().data();
    const T* y = target.data();
    double acc = 0.0;
    std::vector<T> ds(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const double sign = y[i] > T(0.5) ? 1.0 : -1.0;
        const double margin = 1.0 - sign * static_cast<double>(s[i]);
        if (margin > 0.0) {
            acc += margin;
            ds[static_cast<std::size_t>(i)] = static_cast<T>(-sign / static_cast<double>(n));
        }
    }
    const auto is = score.id();
    return score.tape().emit(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(n))), score.requires_grad(),
        [is, ds = std::move(ds)](Tape<T>& t) {
            const T g = t.upstream()[0];
            T* d = t.grad(is).data();
            for (std::size_t i = 0; i < ds.size(); ++i) d[i] += g * ds[i];
        });
}

template <typename T>
struct MixedLoss {
    Var<T> total;
    Var<T> focal;
    Var<T> dice;
    Var<T> lovasz;

    LossComponents components() const
    {
        return {static_cast<double>(total.value()[0]), static_cast<double>(focal.value()[0]),
            static_cast<double>(dice.value()[0]), static_cast<double>(lovasz.value()[0])};
    }
};

/// w_focal·focal + w_dice·dice + w_lovasz·hinge. Focal and dice see
/// sigmoid(logit); the hinge sees the logit itself.
template <typename T>
MixedLoss<T> mixed_seg_loss(const Var<T>& logit, const Tensor<T>& target, const LossWeights& w)
{
    detail::require_same(logit.shape(), target.shape(), "mixed_seg_loss");
    Var<T> prob = sigmoid(logit);
    MixedLoss<T> out;
    out.focal = focal_loss(prob, target, w.alpha, w.beta, w.focal_positive_only);
    out.dice = laplace_dice_loss(prob, target);
    out.lovasz = lovasz_hinge_loss(logit, target);
    out.total = weighted_sum<T>({out.focal, out.dice, out.lovasz},
        {static_cast<T>(w.w_focal), static_cast<T>(w.w_dice), static_cast<T>(w.w_lovasz)});
    return out;
}

/// Mean of -log prob2[n, label_n] over rows of a [N,2] probability table.
template <typename T>
Var<T> bce_loss(const Var<T>& prob2, const std::vector<int>& labels)
{
    if (prob2.value().rank() != 2 || prob2.dim(1) != 2) {
        throw ShapeError("bce_loss: expected [N,2] probabilities, got " + to_string(prob2.shape()));
    }
    const Index n = prob2.dim(0);
    if (static_cast<Index>(labels.size()) != n) throw ShapeError("bce_loss: one label per row required");
    const T* p = prob2.value().data();
    double acc = 0.0;
    std::vector<T> dp(static_cast<std::size_t>(2 * n), T(0));
    for (Index i = 0; i < n; ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (label != 0 && label != 1) throw ArgumentError("bce_loss: label " + std::to_string(label) + " not in {0,1}");
        const double raw = p[2 * i + label];
        const double pc = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
        acc -= std::log(pc);
        if (pc == raw) dp[static_cast<std::size_t>(2 * i + label)] = static_cast<T>(-1.0 / (pc * static_cast<double>(n)));
    }
    const auto ip = prob2.id();
    return prob2.tape().emit(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(n))), prob2.requires_grad(),
        [ip, dp = std::move(dp)](Tape<T>& t) {
            const T g = t.upstream()[0];
            T* d = t.grad(ip).data();
            for (std::size_t i = 0; i < dp.size(); ++i) d[i] += g * dp[i];
        });
}

} // namespace unetsharp
