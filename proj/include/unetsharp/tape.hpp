#pragma once

#include "unetsharp/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <utility>

namespace unetsharp {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id)
        : tape_(tape)
        , id_(id)
    {
    }

    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Tensor<T>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    Index dim(Index axis) const { return value().dim(axis); }
    bool requires_grad() const { return tape_->requires_grad(id_); }
    const Tensor<T>& grad() const { return tape_->grad_of(id_); }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Linear record of executed ops. Backward replays the adjoints in exact
/// reverse execution order; gradients of a value are summed over its uses.
///
/// A non-recording tape evaluates values only and never allocates
/// gradient storage.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&)>;

    explicit Tape(bool recording = true)
        : recording_(recording)
    {
    }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }

    Var<T> leaf(Tensor<T> value, bool requires_grad = false)
    {
        Node node;
        node.owned = std::move(value);
        node.requires_grad = requires_grad && recording_;
        node.is_leaf = true;
        nodes_.push_back(std::move(node));
        return Var<T>(this, nodes_.size() - 1);
    }

    /// Leaf aliasing an external tensor (a parameter). After backward the
    /// leaf's gradient is added into `grad_sink` when one is given.
    Var<T> bind(const Tensor<T>& value, Tensor<T>* grad_sink)
    {
        Node node;
        node.external = &value;
        node.grad_sink = grad_sink;
        node.requires_grad = recording_ && grad_sink != nullptr;
        node.is_leaf = true;
        nodes_.push_back(std::move(node));
        return Var<T>(this, nodes_.size() - 1);
    }

    /// Adds the result of an op. `backward` is kept only when recording and
    /// some input participates in differentiation.
    Var<T> emit(Tensor<T> value, bool requires_grad, BackwardFn backward = {})
    {
        Node node;
        node.owned = std::move(value);
        node.requires_grad = recording_ && requires_grad;
        nodes_.push_back(std::move(node));
        const std::size_t id = nodes_.size() - 1;
        if (nodes_.back().requires_grad && backward) {
            ops_.push_back(Op{id, std::move(backward)});
        }
        return Var<T>(this, id);
    }

    const Tensor<T>& value(std::size_t id) const
    {
        const Node& node = nodes_[id];
        return node.external ? *node.external : node.owned;
    }

    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

    /// Accumulator for `id`, zero-initialized on first access.
    Tensor<T>& grad(std::size_t id)
    {
        Node& node = nodes_[id];
        if (node.grad.empty()) node.grad = Tensor<T>::zeros(value(id).shape());
        return node.grad;
    }

    void backward(const Var<T>& loss)
    {
        if (loss.value().size() != 1) {
            throw ArgumentError("backward: loss must be a scalar, got shape "
                                + to_string(loss.shape()));
        }
        if (!recording_) throw ContractError("backward: tape is not recording");
        for (Node& node : nodes_) {
            if (!node.is_leaf) node.grad = Tensor<T>();
        }
        if (!nodes_[loss.id()].requires_grad) return;
        grad(loss.id())[0] += T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if (!has_grad(it->output)) continue;
            current_ = it->output;
            it->backward(*this);
            if (!nodes_[it->output].is_leaf) nodes_[it->output].grad = Tensor<T>();
        }
        for (Node& node : nodes_) {
            if (node.grad_sink && !node.grad.empty()) {
                if (node.grad_sink->empty()) *node.grad_sink = Tensor<T>::zeros(node.grad.shape());
                node.grad_sink->array() += node.grad.array();
                node.grad.set_zero();
            }
        }
    }

    /// Gradient flowing into the op currently being replayed.
    const Tensor<T>& upstream() const { return nodes_[current_].grad; }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        Tensor<T>* grad_sink = nullptr;
        bool requires_grad = false;
        bool is_leaf = false;
    };
    struct Op {
        std::size_t output;
        BackwardFn backward;
    };

    bool recording_;
    std::deque<Node> nodes_;
    std::vector<Op> ops_;
    std::size_t current_ = 0;
};

} // namespace unetsharp
