#pragma once

#include "unetsharp/ops.hpp"

#include <map>
#include <random>
#include <string>
#include <unordered_map>

namespace unetsharp {

enum class ParamKind { ConvWeight, LinearWeight, Bias, NormScale, NormShift, RunningMean, RunningVar };

inline bool is_learnable(ParamKind kind)
{
    return kind != ParamKind::RunningMean && kind != ParamKind::RunningVar;
}

/// Declared tensor of a model: name, shape and role.
struct ParamSpec {
    std::string name;
    Shape shape;
    ParamKind kind;
};

/// Named learnable tensors plus non-learnable buffers (norm statistics),
/// ordered by name.
template <typename T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> value;
        Tensor<T> grad;
        ParamKind kind = ParamKind::Bias;
    };

    void declare(const ParamSpec& spec)
    {
        auto [it, inserted] = entries_.try_emplace(spec.name);
        if (!inserted) {
            if (it->second.value.shape() != spec.shape) {
                throw ShapeError("param " + spec.name + ": redeclared with shape " + to_string(spec.shape));
            }
            return;
        }
        it->second.kind = spec.kind;
        const T fill = (spec.kind == ParamKind::NormScale || spec.kind == ParamKind::RunningVar) ? T(1) : T(0);
        it->second.value = Tensor<T>(spec.shape, fill);
    }

    void put(const std::string& name, Tensor<T> value, ParamKind kind)
    {
        Entry& e = entries_[name];
        e.value = std::move(value);
        e.grad = Tensor<T>();
        e.kind = kind;
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& entry(const std::string& name)
    {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("param store: no tensor named " + name);
        return it->second;
    }
    const Entry& entry(const std::string& name) const
    {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("param store: no tensor named " + name);
        return it->second;
    }

    Tensor<T>& value(const std::string& name) { return entry(name).value; }
    const Tensor<T>& value(const std::string& name) const { return entry(name).value; }

    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    void zero_grad()
    {
        for (auto& [name, e] : entries_) e.grad = Tensor<T>();
    }

    Index learnable_count() const
    {
        Index total = 0;
        for (const auto& [name, e] : entries_) {
            if (is_learnable(e.kind)) total += e.value.size();
        }
        return total;
    }

private:
    std::map<std::string, Entry> entries_;
};

/// Everything an op sequence needs beyond its inputs: the tape, the
/// parameters it binds, the train/eval mode and the dropout stream.
template <typename T>
class Context {
public:
    Context(Tape<T>& tape, ParamStore<T>& store, Mode mode, std::uint64_t seed = 0)
        : tape_(tape)
        , store_(store)
        , mode_(mode)
        , rng_(seed)
    {
    }

    Tape<T>& tape() { return tape_; }
    ParamStore<T>& store() { return store_; }
    Mode mode() const { return mode_; }
    std::mt19937_64& rng() { return rng_; }

    Var<T> param(const std::string& name)
    {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        auto& e = store_.entry(name);
        Var<T> v = tape_.bind(e.value, tape_.recording() ? &e.grad : nullptr);
        bound_.emplace(name, v);
        return v;
    }

    NormState<T> norm_state(const std::string& prefix)
    {
        NormState<T> s;
        s.running_mean = &store_.value(prefix + ".running_mean");
        s.running_var = &store_.value(prefix + ".running_var");
        return s;
    }

private:
    Tape<T>& tape_;
    ParamStore<T>& store_;
    Mode mode_;
    std::mt19937_64 rng_;
    std::unordered_map<std::string, Var<T>> bound_;
};

/// conv -> batch norm -> relu, the unit block of the grid.
template <typename T>
Var<T> conv_bn_relu(Context<T>& ctx, const Var<T>& x, const std::string& conv, const std::string& norm, Index k)
{
    Var<T> y = conv2d(x, ctx.param(conv + ".weight"), ctx.param(conv + ".bias"), 1, (k - 1) / 2);
    y = batch_norm(y, ctx.param(norm + ".gamma"), ctx.param(norm + ".beta"), ctx.norm_state(norm), ctx.mode());
    return relu(y);
}

inline void append_conv_specs(std::vector<ParamSpec>& out, const std::string& name, Index cin, Index cout, Index k)
{
    out.push_back({name + ".weight", {cout, cin, k, k}, ParamKind::ConvWeight});
    out.push_back({name + ".bias", {cout}, ParamKind::Bias});
}

inline void append_norm_specs(std::vector<ParamSpec>& out, const std::string& name, Index channels)
{
    out.push_back({name + ".gamma", {channels}, ParamKind::NormScale});
    out.push_back({name + ".beta", {channels}, ParamKind::NormShift});
    out.push_back({name + ".running_mean", {channels}, ParamKind::RunningMean});
    out.push_back({name + ".running_var", {channels}, ParamKind::RunningVar});
}

} // namespace unetsharp
