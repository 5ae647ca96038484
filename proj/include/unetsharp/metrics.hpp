#pragma once

#include "unetsharp/tensor.hpp"

namespace unetsharp {

struct Overlap {
    Index intersection = 0;
    Index predicted = 0;
    Index actual = 0;

    Index uni() const { return predicted + actual - intersection; }
};

/// Counts after binarizing `prob` at `threshold` (positive iff > threshold)
/// and `mask` at 0.5.
template <typename T>
Overlap overlap(const Tensor<T>& prob, const Tensor<T>& mask, double threshold = 0.5)
{
    if (prob.shape() != mask.shape()) {
        throw ShapeError("metrics: prediction " + to_string(prob.shape()) + " vs mask " + to_string(mask.shape()));
    }
    Overlap o;
    for (Index i = 0; i < prob.size(); ++i) {
        const bool p = static_cast<double>(prob[i]) > threshold;
        const bool m = static_cast<double>(mask[i]) > 0.5;
        o.predicted += p;
        o.actual += m;
        o.intersection += p && m;
    }
    return o;
}

/// Both-empty pairs score 1.
inline double iou(const Overlap& o)
{
    return o.uni() == 0 ? 1.0 : static_cast<double>(o.intersection) / static_cast<double>(o.uni());
}

inline double dice(const Overlap& o)
{
    const Index denom = o.predicted + o.actual;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(o.intersection) / static_cast<double>(denom);
}

template <typename T>
double iou(const Tensor<T>& prob, const Tensor<T>& mask, double threshold = 0.5)
{
    return iou(overlap(prob, mask, threshold));
}

template <typename T>
double dice(const Tensor<T>& prob, const Tensor<T>& mask, double threshold = 0.5)
{
    return dice(overlap(prob, mask, threshold));
}

} // namespace unetsharp
