#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace unetsharp {

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Statistics over a population too small to normalize.
class DegenerateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major N-d array. 4-d tensors are laid out NCHW.
template <typename T>
class Tensor {
public:
    using Scalar = T;
    using Storage = Eigen::Array<T, Eigen::Dynamic, 1>;
    using FlatMap = Eigen::Map<Storage>;
    using ConstFlatMap = Eigen::Map<const Storage>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape))
        , data_(Storage::Constant(numel(shape_), fill))
    {
    }

    Tensor(Shape shape, const std::vector<T>& values)
        : shape_(std::move(shape))
        , data_(numel(shape_))
    {
        if (static_cast<Index>(values.size()) != data_.size()) {
            throw ShapeError("tensor: " + std::to_string(values.size())
                             + " values for shape " + to_string(shape_));
        }
        std::copy(values.begin(), values.end(), data_.data());
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    /// Storage left unset; every element must be written before use.
    static Tensor uninitialized(Shape shape)
    {
        Tensor t;
        t.data_.resize(numel(shape));
        t.shape_ = std::move(shape);
        return t;
    }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

    const Shape& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    Index size() const { return data_.size(); }
    bool empty() const { return data_.size() == 0; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    FlatMap array() { return FlatMap(data_.data(), data_.size()); }
    ConstFlatMap array() const { return ConstFlatMap(data_.data(), data_.size()); }

    T& operator[](Index i) { return data_[i]; }
    const T& operator[](Index i) const { return data_[i]; }

    T& at(Index n, Index c, Index h, Index w)
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(Index n, Index c, Index h, Index w) const
    {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    Tensor reshaped(Shape shape) const
    {
        if (numel(shape) != size()) {
            throw ShapeError("reshape " + to_string(shape_) + " -> " + to_string(shape));
        }
        Tensor out;
        out.shape_ = std::move(shape);
        out.data_ = data_;
        return out;
    }

    template <typename U>
    Tensor<U> cast() const
    {
        Tensor<U> out(shape_);
        out.array() = array().template cast<U>();
        return out;
    }

    void set_zero() { data_.setZero(); }

    bool all_finite() const { return array().isFinite().all(); }

private:
    Shape shape_;
    Storage data_;
};

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b)
{
    if (a.shape() != b.shape()) return false;
    return std::equal(a.data(), a.data() + a.size(), b.data(),
        [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

} // namespace unetsharp
