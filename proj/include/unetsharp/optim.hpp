#pragma once

#include "unetsharp/param_store.hpp"

#include <cmath>
#include <map>
#include <random>

namespace unetsharp {

/// lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2 for 0 <= t <= T.
inline double cosine_lr(Index t, Index total, double lr0, double lr_min = 0.0)
{
    if (total <= 0) throw ArgumentError("cosine_lr: total steps must be positive");
    if (t < 0 || t > total) {
        throw ArgumentError("cosine_lr: step " + std::to_string(t) + " outside 0.." + std::to_string(total));
    }
    constexpr double pi = 3.14159265358979323846;
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(pi * static_cast<double>(t) / static_cast<double>(total)));
}

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction and decoupled weight decay on every learnable
/// tensor of a store.
template <typename T>
class Adam {
public:
    struct Moments {
        Tensor<T> m;
        Tensor<T> v;
    };

    explicit Adam(AdamOptions options = {})
        : options_(options)
    {
    }

    Index step_count() const { return step_; }
    std::map<std::string, Moments>& moments() { return moments_; }

    /// One update; entries without a gradient still receive the decay.
    void step(ParamStore<T>& store, double lr, double weight_decay)
    {
        ++step_;
        const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
        const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
        for (auto& [name, e] : store.entries()) {
            if (!is_learnable(e.kind)) continue;
            if (weight_decay != 0.0) e.value.array() -= static_cast<T>(lr * weight_decay) * e.value.array();
            if (e.grad.empty()) continue;
            if (e.grad.shape() != e.value.shape()) {
                throw ShapeError("adam: gradient of " + name + " is " + to_string(e.grad.shape()) + ", value "
                                 + to_string(e.value.shape()));
            }
            auto [it, fresh] = moments_.try_emplace(name);
            if (fresh) {
                it->second.m = Tensor<T>(e.value.shape());
                it->second.v = Tensor<T>(e.value.shape());
            }
            auto m = it->second.m.array();
            auto v = it->second.v.array();
            const auto g = e.grad.array();
            const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
            m = b1 * m + (T(1) - b1) * g;
            v = b2 * v + (T(1) - b2) * g.square();
            const T step_size = static_cast<T>(lr / c1);
            const T rc2 = static_cast<T>(1.0 / std::sqrt(c2));
            e.value.array() -= step_size * m / ((v.sqrt() * rc2) + static_cast<T>(options_.eps));
        }
    }

private:
    AdamOptions options_;
    Index step_ = 0;
    std::map<std::string, Moments> moments_;
};

/// Fan-in of a conv [cout,cin,k,k] or linear [in,out] weight.
inline Index fan_in(const Shape& shape, ParamKind kind)
{
    if (kind == ParamKind::ConvWeight) return shape.at(1) * shape.at(2) * shape.at(3);
    if (kind == ParamKind::LinearWeight) return shape.at(0);
    throw ArgumentError("fan_in: not a weight tensor");
}

/// He-normal weights, zero biases, identity norm affine, fresh statistics.
/// Entries are visited in name order so the draw sequence is fixed.
template <typename T>
void init_weights(ParamStore<T>& store, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    for (auto& [name, e] : store.entries()) {
        switch (e.kind) {
        case ParamKind::ConvWeight:
        case ParamKind::LinearWeight: {
            const double sd = std::sqrt(2.0 / static_cast<double>(fan_in(e.value.shape(), e.kind)));
            for (Index i = 0; i < e.value.size(); ++i) {
                // Box-Muller on the raw stream for cross-platform reproducibility.
                const double u1 = 1.0 - static_cast<double>(rng() >> 11) * 0x1.0p-53;
                const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
                const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
                e.value[i] = static_cast<T>(sd * z);
            }
            break;
        }
        case ParamKind::Bias:
        case ParamKind::NormShift:
        case ParamKind::RunningMean: e.value.set_zero(); break;
        case ParamKind::NormScale:
        case ParamKind::RunningVar: e.value.array() = T(1); break;
        }
    }
}

} // namespace unetsharp
