#pragma once

// Differentiable neural primitives over Tape<T>. All 4-d tensors are NCHW.

#include "unetsharp/parallel.hpp"
#include "unetsharp/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace unetsharp {

enum class Mode { Train, Eval };
enum class UpsampleMode { Bilinear, Nearest };

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op)
{
    if (s.size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank)
                         + ", got " + to_string(s));
    }
}

template <typename T>
bool any_grad(std::initializer_list<const Var<T>*> vars)
{
    for (const Var<T>* v : vars) {
        if (v->requires_grad()) return true;
    }
    return false;
}

// Converts a uniform 64-bit draw to [0, 1).
inline double unit_uniform(std::mt19937_64& rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

struct ConvGeometry {
    Index n, cin, h, w, cout, k, stride, pad, ho, wo;
    Index kdim() const { return cin * k * k; }
    Index plane() const { return ho * wo; }
};

// Output rows are indexed globally as r = n * ho + oy. Row q = (c, ky, kx)
// of the patch matrix for rows [r0, r1) holds that tap for every output
// position in the block, laid out row-major.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, Index r0, Index r1, T* col)
{
    const Index pcount = (r1 - r0) * g.wo;
    for (Index c = 0; c < g.cin; ++c) {
        for (Index ky = 0; ky < g.k; ++ky) {
            for (Index kx = 0; kx < g.k; ++kx) {
                T* row = col + ((c * g.k + ky) * g.k + kx) * pcount;
                // Valid ox satisfy 0 <= ox * stride - pad + kx < w.
                const Index lo = std::min(g.wo, std::max<Index>(0, (g.pad - kx + g.stride - 1) / g.stride));
                const Index hi = std::max(lo, std::min(g.wo, (g.w + g.pad - kx + g.stride - 1) / g.stride));
                for (Index r = r0; r < r1; ++r) {
                    const Index n = r / g.ho, oy = r % g.ho;
                    const Index iy = oy * g.stride - g.pad + ky;
                    T* dst = row + (r - r0) * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, T(0));
                        continue;
                    }
                    const T* src = x + ((n * g.cin + c) * g.h + iy) * g.w;
                    std::fill(dst, dst + lo, T(0));
                    if (g.stride == 1) {
                        std::copy(src + lo - g.pad + kx, src + hi - g.pad + kx, dst + lo);
                    } else {
                        for (Index ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride - g.pad + kx];
                    }
                    std::fill(dst + hi, dst + g.wo, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, Index r0, Index r1, T* dx)
{
    const Index pcount = (r1 - r0) * g.wo;
    for (Index c = 0; c < g.cin; ++c) {
        for (Index ky = 0; ky < g.k; ++ky) {
            for (Index kx = 0; kx < g.k; ++kx) {
                const T* row = col + ((c * g.k + ky) * g.k + kx) * pcount;
                const Index lo = std::min(g.wo, std::max<Index>(0, (g.pad - kx + g.stride - 1) / g.stride));
                const Index hi = std::max(lo, std::min(g.wo, (g.w + g.pad - kx + g.stride - 1) / g.stride));
                for (Index r = r0; r < r1; ++r) {
                    const Index n = r / g.ho, oy = r % g.ho;
                    const Index iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    const T* src = row + (r - r0) * g.wo;
                    T* dst = dx + ((n * g.cin + c) * g.h + iy) * g.w;
                    if (g.stride == 1) {
                        const Index off = kx - g.pad;
                        for (Index ox = lo; ox < hi; ++ox) dst[ox + off] += src[ox];
                    } else {
                        for (Index ox = lo; ox < hi; ++ox) dst[ox * g.stride - g.pad + kx] += src[ox];
                    }
                }
            }
        }
    }
}

// Output rows per GEMM block: a patch matrix of about 512K scalars keeps the
// product cache-resident.
inline Index conv_rows(const ConvGeometry& g)
{
    constexpr Index target = Index{1} << 19;
    const Index columns = std::clamp<Index>(target / g.kdim(), 512, 2048);
    return std::clamp<Index>(columns / g.wo, 1, g.n * g.ho);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{
    if (a.shape() != b.shape()) {
        throw ShapeError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    auto out = Tensor<T>::uninitialized(a.shape());
    out.array() = a.value().array() + b.value().array();
    const auto ia = a.id(), ib = b.id();
    return a.tape().emit(std::move(out), detail::any_grad({&a, &b}), [ia, ib](Tape<T>& t) {
        const auto& g = t.upstream();
        if (t.requires_grad(ia)) t.grad(ia).array() += g.array();
        if (t.requires_grad(ib)) t.grad(ib).array() += g.array();
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b)
{
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    auto out = Tensor<T>::uninitialized(a.shape());
    out.array() = a.value().array() * b.value().array();
    const auto ia = a.id(), ib = b.id();
    return a.tape().emit(std::move(out), detail::any_grad({&a, &b}), [ia, ib](Tape<T>& t) {
        const auto& g = t.upstream();
        if (t.requires_grad(ia)) t.grad(ia).array() += g.array() * t.value(ib).array();
        if (t.requires_grad(ib)) t.grad(ib).array() += g.array() * t.value(ia).array();
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor)
{
    auto out = Tensor<T>::uninitialized(x.shape());
    out.array() = x.value().array() * factor;
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [ix, factor](Tape<T>& t) {
        t.grad(ix).array() += t.upstream().array() * factor;
    });
}

template <typename T>
Var<T> sum(const Var<T>& x)
{
    double acc = 0.0;
    const T* p = x.value().data();
    for (Index i = 0; i < x.value().size(); ++i) acc += static_cast<double>(p[i]);
    Tensor<T> out({1}, static_cast<T>(acc));
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [ix](Tape<T>& t) {
        t.grad(ix).array() += t.upstream()[0];
    });
}

template <typename T>
Var<T> mean(const Var<T>& x)
{
    const Index n = x.value().size();
    return scale(sum(x), T(1) / static_cast<T>(n));
}

/// Σ weights[i]·terms[i] over scalar terms.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights)
{
    if (terms.empty() || terms.size() != weights.size()) {
        throw ArgumentError("weighted_sum: need one weight per term");
    }
    double acc = 0.0;
    bool rg = false;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].value().size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
        acc += static_cast<double>(weights[i]) * static_cast<double>(terms[i].value()[0]);
        rg = rg || terms[i].requires_grad();
        ids.push_back(terms[i].id());
    }
    return terms[0].tape().emit(Tensor<T>({1}, static_cast<T>(acc)), rg, [ids, weights](Tape<T>& t) {
        const T g = t.upstream()[0];
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (t.requires_grad(ids[i])) t.grad(ids[i])[0] += g * weights[i];
        }
    });
}

template <typename T>
Var<T> relu(const Var<T>& x)
{
    auto out = Tensor<T>::uninitialized(x.shape());
    out.array() = x.value().array().max(T(0));
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [ix](Tape<T>& t) {
        const auto& xv = t.value(ix);
        t.grad(ix).array() += (xv.array() > T(0)).select(t.upstream().array(), T(0));
    });
}

template <typename T>
Tensor<T> sigmoid_values(const Tensor<T>& x)
{
    auto out = Tensor<T>::uninitialized(x.shape());
    const T* in = x.data();
    T* o = out.data();
    for (Index i = 0; i < x.size(); ++i) {
        const T v = in[i];
        if (v >= T(0)) {
            o[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            o[i] = e / (T(1) + e);
        }
    }
    return out;
}

template <typename T>
Var<T> sigmoid(const Var<T>& x)
{
    const auto ix = x.id();
    Tensor<T> out = sigmoid_values(x.value());
    auto& tape = x.tape();
    const std::size_t oid = tape.size();
    return tape.emit(std::move(out), x.requires_grad(), [ix, oid](Tape<T>& t) {
        const auto& s = t.value(oid);
        t.grad(ix).array() += t.upstream().array() * s.array() * (T(1) - s.array());
    });
}

/// Softmax along `axis`, max-subtracted.
template <typename T>
Var<T> softmax(const Var<T>& x, Index axis)
{
    const Shape& s = x.shape();
    if (axis < 0) axis += static_cast<Index>(s.size());
    if (axis < 0 || axis >= static_cast<Index>(s.size())) throw ArgumentError("softmax: bad axis");
    Index outer = 1, inner = 1;
    for (Index i = 0; i < axis; ++i) outer *= s[i];
    for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i) inner *= s[i];
    const Index len = s[axis];

    Tensor<T> out(s);
    const T* in = x.value().data();
    T* o = out.data();
    for (Index a = 0; a < outer; ++a) {
        for (Index b = 0; b < inner; ++b) {
            const Index base = a * len * inner + b;
            T mx = -std::numeric_limits<T>::infinity();
            for (Index k = 0; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
            double z = 0.0;
            for (Index k = 0; k < len; ++k) {
                o[base + k * inner] = std::exp(in[base + k * inner] - mx);
                z += o[base + k * inner];
            }
            for (Index k = 0; k < len; ++k) o[base + k * inner] = static_cast<T>(o[base + k * inner] / z);
        }
    }
    const auto ix = x.id();
    auto& tape = x.tape();
    const std::size_t oid = tape.size();
    return tape.emit(std::move(out), x.requires_grad(), [=](Tape<T>& t) {
        const T* y = t.value(oid).data();
        const T* g = t.upstream().data();
        T* dx = t.grad(ix).data();
        for (Index a = 0; a < outer; ++a) {
            for (Index b = 0; b < inner; ++b) {
                const Index base = a * len * inner + b;
                double dot = 0.0;
                for (Index k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
                for (Index k = 0; k < len; ++k) {
                    const Index i = base + k * inner;
                    dx[i] += y[i] * (g[i] - static_cast<T>(dot));
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution and affine maps

/// Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,k,k] plus bias.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, Index stride = 1, Index pad = 0)
{
    detail::require_rank(x.shape(), 4, "conv2d input");
    detail::require_rank(w.shape(), 4, "conv2d weight");
    detail::ConvGeometry g{};
    g.n = x.dim(0);
    g.cin = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.cout = w.dim(0);
    g.k = w.dim(2);
    g.stride = stride;
    g.pad = pad;
    if (w.dim(1) != g.cin) {
        throw ShapeError("conv2d: input has " + std::to_string(g.cin) + " channels, weight expects "
                         + std::to_string(w.dim(1)));
    }
    if (w.dim(3) != g.k) throw ShapeError("conv2d: kernel must be square");
    if (b.value().size() != g.cout) throw ShapeError("conv2d: bias size must equal output channels");
    if (stride < 1 || pad < 0) throw ArgumentError("conv2d: invalid stride/pad");
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k || g.ho <= 0 || g.wo <= 0) {
        throw ShapeError("conv2d: non-positive output extent for input " + to_string(x.shape()));
    }

    const bool pointwise = g.k == 1 && stride == 1 && pad == 0;
    // Pointwise convs run one image per block; others run blocks of output rows.
    const Index rows_total = g.n * g.ho;
    const Index rows = pointwise ? g.ho : detail::conv_rows(g);
    const Index nblocks = (rows_total + rows - 1) / rows;

    auto out = Tensor<T>::uninitialized(Shape{g.n, g.cout, g.ho, g.wo});
    const T* xd = x.value().data();
    const T* wd = w.value().data();
    const T* bd = b.value().data();
    T* od = out.data();
    const detail::ConstRowMap<T> wmat(wd, g.cout, g.kdim());
    const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(bd, g.cout);

    parallel_for(nblocks, [&](Index bi) {
        if (pointwise) {
            detail::ConstRowMap<T> xin(xd + bi * g.cin * g.plane(), g.cin, g.plane());
            detail::RowMap<T> o(od + bi * g.cout * g.plane(), g.cout, g.plane());
            o.noalias() = wmat * xin;
            o.colwise() += bias;
            return;
        }
        const Index r0 = bi * rows, r1 = std::min(rows_total, r0 + rows);
        const Index pcount = (r1 - r0) * g.wo;
        std::vector<T> col(static_cast<std::size_t>(g.kdim() * pcount));
        detail::im2col(xd, g, r0, r1, col.data());
        detail::RowMat<T> res(g.cout, pcount);
        res.noalias() = wmat * detail::ConstRowMap<T>(col.data(), g.kdim(), pcount);
        for (Index r = r0; r < r1; ++r) {
            const Index n = r / g.ho, oy = r % g.ho;
            for (Index co = 0; co < g.cout; ++co) {
                const T* src = res.data() + co * pcount + (r - r0) * g.wo;
                T* dst = od + ((n * g.cout + co) * g.ho + oy) * g.wo;
                const T bv = bd[co];
                for (Index q = 0; q < g.wo; ++q) dst[q] = src[q] + bv;
            }
        }
    });

    const auto ix = x.id(), iw = w.id(), ib = b.id();
    return x.tape().emit(std::move(out), detail::any_grad({&x, &w, &b}), [=](Tape<T>& t) {
        const T* gd = t.upstream().data();
        const bool gx = t.requires_grad(ix), gw = t.requires_grad(iw), gb = t.requires_grad(ib);
        const T* xv = t.value(ix).data();
        const detail::ConstRowMap<T> wm(t.value(iw).data(), g.cout, g.kdim());
        T* dx = gx ? t.grad(ix).data() : nullptr;
        T* dwd = gw ? t.grad(iw).data() : nullptr;

        if (pointwise) {
            std::vector<detail::RowMat<T>> dw_parts(static_cast<std::size_t>(gw ? nblocks : 0));
            parallel_for(nblocks, [&](Index bi) {
                detail::ConstRowMap<T> gout(gd + bi * g.cout * g.plane(), g.cout, g.plane());
                if (gw) {
                    detail::ConstRowMap<T> xin(xv + bi * g.cin * g.plane(), g.cin, g.plane());
                    dw_parts[static_cast<std::size_t>(bi)].noalias() = gout * xin.transpose();
                }
                if (gx) {
                    detail::RowMap<T> dxm(dx + bi * g.cin * g.plane(), g.cin, g.plane());
                    dxm.noalias() += wm.transpose() * gout;
                }
            });
            if (gw) {
                detail::RowMap<T> dwm(dwd, g.cout, g.kdim());
                for (const auto& part : dw_parts) dwm += part;
            }
        } else {
            // Blocks run in waves of one per worker; their weight partials and
            // input-gradient scatters are folded in block order so the result
            // does not depend on the worker count.
            const Index wave = std::max<Index>(1, thread_count());
            struct Partial {
                detail::RowMat<T> dw;
                detail::RowMat<T> dcol;
            };
            std::vector<Partial> parts(static_cast<std::size_t>(std::min(wave, nblocks)));
            for (Index w0 = 0; w0 < nblocks; w0 += wave) {
                const Index w1 = std::min(nblocks, w0 + wave);
                parallel_for(w1 - w0, [&](Index k) {
                    const Index bi = w0 + k;
                    const Index r0 = bi * rows, r1 = std::min(rows_total, r0 + rows);
                    const Index pcount = (r1 - r0) * g.wo;
                    detail::RowMat<T> gmat(g.cout, pcount);
                    for (Index r = r0; r < r1; ++r) {
                        const Index n = r / g.ho, oy = r % g.ho;
                        for (Index co = 0; co < g.cout; ++co) {
                            std::copy_n(gd + ((n * g.cout + co) * g.ho + oy) * g.wo, g.wo,
                                gmat.data() + co * pcount + (r - r0) * g.wo);
                        }
                    }
                    Partial& p = parts[static_cast<std::size_t>(k)];
                    if (gw) {
                        std::vector<T> col(static_cast<std::size_t>(g.kdim() * pcount));
                        detail::im2col(xv, g, r0, r1, col.data());
                        p.dw.noalias() = gmat * detail::ConstRowMap<T>(col.data(), g.kdim(), pcount).transpose();
                    }
                    if (gx) p.dcol.noalias() = wm.transpose() * gmat;
                });
                for (Index k = 0; k < w1 - w0; ++k) {
                    const Index bi = w0 + k;
                    const Index r0 = bi * rows, r1 = std::min(rows_total, r0 + rows);
                    Partial& p = parts[static_cast<std::size_t>(k)];
                    if (gw) detail::RowMap<T>(dwd, g.cout, g.kdim()) += p.dw;
                    if (gx) detail::col2im(p.dcol.data(), g, r0, r1, dx);
                }
            }
        }
        if (gb) {
            T* db = t.grad(ib).data();
            for (Index co = 0; co < g.cout; ++co) {
                double acc = 0.0;
                for (Index n = 0; n < g.n; ++n) {
                    const T* src = gd + (n * g.cout + co) * g.plane();
                    for (Index q = 0; q < g.plane(); ++q) acc += src[q];
                }
                db[co] += static_cast<T>(acc);
            }
        }
    });
}

/// y[N,G] = x[N,F]·w[F,G] + b[G].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b)
{
    detail::require_rank(x.shape(), 2, "linear input");
    detail::require_rank(w.shape(), 2, "linear weight");
    const Index n = x.dim(0), f = x.dim(1), gdim = w.dim(1);
    if (w.dim(0) != f) {
        throw ShapeError("linear: input features " + std::to_string(f) + " vs weight rows "
                         + std::to_string(w.dim(0)));
    }
    if (b.value().size() != gdim) throw ShapeError("linear: bias size mismatch");
    Tensor<T> out({n, gdim});
    detail::RowMap<T> o(out.data(), n, gdim);
    o.noalias() = detail::ConstRowMap<T>(x.value().data(), n, f)
        * detail::ConstRowMap<T>(w.value().data(), f, gdim);
    o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), gdim);

    const auto ix = x.id(), iw = w.id(), ib = b.id();
    return x.tape().emit(std::move(out), detail::any_grad({&x, &w, &b}), [=](Tape<T>& t) {
        detail::ConstRowMap<T> gm(t.upstream().data(), n, gdim);
        if (t.requires_grad(ix)) {
            detail::RowMap<T>(t.grad(ix).data(), n, f).noalias()
                += gm * detail::ConstRowMap<T>(t.value(iw).data(), f, gdim).transpose();
        }
        if (t.requires_grad(iw)) {
            detail::RowMap<T>(t.grad(iw).data(), f, gdim).noalias()
                += detail::ConstRowMap<T>(t.value(ix).data(), n, f).transpose() * gm;
        }
        if (t.requires_grad(ib)) {
            T* db = t.grad(ib).data();
            for (Index j = 0; j < gdim; ++j) {
                double acc = 0.0;
                for (Index i = 0; i < n; ++i) acc += gm(i, j);
                db[j] += static_cast<T>(acc);
            }
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape)
{
    Tensor<T> out = x.value().reshaped(std::move(shape));
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [ix](Tape<T>& t) {
        t.grad(ix).array() += t.upstream().array();
    });
}

/// Row-major flatten of all non-batch dimensions.
template <typename T>
Var<T> flatten(const Var<T>& x)
{
    const Index n = x.dim(0);
    return reshape(x, Shape{n, x.value().size() / std::max<Index>(1, n)});
}

// ---------------------------------------------------------------------------
// Normalization and regularization

template <typename T>
struct NormState {
    Tensor<T>* running_mean = nullptr;
    Tensor<T>* running_var = nullptr;
    T eps = T(1e-5);
    T momentum = T(0.1);
};

/// Per-channel batch normalization of x[N,C] or x[N,C,H,W].
///
/// Train mode normalizes with the batch statistics (population variance)
/// and folds them into the running estimates; eval mode uses the running
/// estimates.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, NormState<T> state, Mode mode)
{
    const Shape& s = x.shape();
    if (s.size() != 2 && s.size() != 4) throw ShapeError("batch_norm: expected rank 2 or 4, got " + to_string(s));
    const Index n = s[0], c = s[1];
    const Index plane = s.size() == 4 ? s[2] * s[3] : 1;
    const Index population = n * plane;
    if (gamma.value().size() != c || beta.value().size() != c) {
        throw ShapeError("batch_norm: affine parameters must have " + std::to_string(c) + " entries");
    }
    if (!state.running_mean || !state.running_var) throw ContractError("batch_norm: missing running statistics");
    if (mode == Mode::Train && population < 2) {
        throw DegenerateError("batch_norm: batch statistics over a population of "
                              + std::to_string(population));
    }

    const T* xd = x.value().data();
    const T* gd = gamma.value().data();
    const T* bd = beta.value().data();
    std::vector<T> mu(c), inv_std(c);
    if (mode == Mode::Train) {
        for (Index ch = 0; ch < c; ++ch) {
            double acc = 0.0, acc2 = 0.0;
            for (Index i = 0; i < n; ++i) {
                const T* p = xd + (i * c + ch) * plane;
                for (Index q = 0; q < plane; ++q) acc += p[q];
            }
            const double m = acc / static_cast<double>(population);
            for (Index i = 0; i < n; ++i) {
                const T* p = xd + (i * c + ch) * plane;
                for (Index q = 0; q < plane; ++q) {
                    const double d = p[q] - m;
                    acc2 += d * d;
                }
            }
            const double var = acc2 / static_cast<double>(population);
            mu[ch] = static_cast<T>(m);
            inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
            const double unbiased = acc2 / static_cast<double>(population - 1);
            T& rm = (*state.running_mean)[ch];
            T& rv = (*state.running_var)[ch];
            rm = static_cast<T>((1.0 - state.momentum) * rm + state.momentum * m);
            rv = static_cast<T>((1.0 - state.momentum) * rv + state.momentum * unbiased);
        }
    } else {
        for (Index ch = 0; ch < c; ++ch) {
            mu[ch] = (*state.running_mean)[ch];
            inv_std[ch] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>((*state.running_var)[ch]) + static_cast<double>(state.eps)));
        }
    }

    auto xhat = Tensor<T>::uninitialized(s);
    auto out = Tensor<T>::uninitialized(s);
    for (Index i = 0; i < n; ++i) {
        for (Index ch = 0; ch < c; ++ch) {
            const Index off = (i * c + ch) * plane;
            for (Index q = 0; q < plane; ++q) {
                const T h = (xd[off + q] - mu[ch]) * inv_std[ch];
                xhat[off + q] = h;
                out[off + q] = gd[ch] * h + bd[ch];
            }
        }
    }

    const auto ix = x.id(), ig = gamma.id(), ibeta = beta.id();
    return x.tape().emit(std::move(out), detail::any_grad({&x, &gamma, &beta}),
        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t) {
            const T* gy = t.upstream().data();
            const T* gam = t.value(ig).data();
            std::vector<double> sum_g(c, 0.0), sum_gh(c, 0.0);
            for (Index i = 0; i < n; ++i) {
                for (Index ch = 0; ch < c; ++ch) {
                    const Index off = (i * c + ch) * plane;
                    for (Index q = 0; q < plane; ++q) {
                        sum_g[ch] += gy[off + q];
                        sum_gh[ch] += static_cast<double>(gy[off + q]) * xhat[off + q];
                    }
                }
            }
            if (t.requires_grad(ig)) {
                T* dg = t.grad(ig).data();
                for (Index ch = 0; ch < c; ++ch) dg[ch] += static_cast<T>(sum_gh[ch]);
            }
            if (t.requires_grad(ibeta)) {
                T* db = t.grad(ibeta).data();
                for (Index ch = 0; ch < c; ++ch) db[ch] += static_cast<T>(sum_g[ch]);
            }
            if (!t.requires_grad(ix)) return;
            T* dx = t.grad(ix).data();
            const double inv_pop = 1.0 / static_cast<double>(population);
            for (Index i = 0; i < n; ++i) {
                for (Index ch = 0; ch < c; ++ch) {
                    const Index off = (i * c + ch) * plane;
                    const T k = gam[ch] * inv_std[ch];
                    if (mode == Mode::Train) {
                        const T mg = static_cast<T>(sum_g[ch] * inv_pop);
                        const T mgh = static_cast<T>(sum_gh[ch] * inv_pop);
                        for (Index q = 0; q < plane; ++q) {
                            dx[off + q] += k * (gy[off + q] - mg - xhat[off + q] * mgh);
                        }
                    } else {
                        for (Index q = 0; q < plane; ++q) dx[off + q] += k * gy[off + q];
                    }
                }
            }
        });
}

/// Inverted dropout: zeroes with probability p and rescales survivors by
/// 1/(1-p) in train mode; returns x itself in eval mode or when p is 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double p, Mode mode, std::mt19937_64& rng)
{
    if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout: p must lie in [0, 1)");
    if (mode == Mode::Eval || p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    Tensor<T> mask(x.shape());
    for (Index i = 0; i < mask.size(); ++i) mask[i] = detail::unit_uniform(rng) < p ? T(0) : keep_scale;
    auto out = Tensor<T>::uninitialized(x.shape());
    out.array() = x.value().array() * mask.array();
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [ix, mask = std::move(mask)](Tape<T>& t) {
        t.grad(ix).array() += t.upstream().array() * mask.array();
    });
}

// ---------------------------------------------------------------------------
// Pooling, resampling and channel plumbing

/// 2x2 max pooling with stride 2; gradient goes to the first maximum in
/// scan order.
template <typename T>
Var<T> max_pool2d(const Var<T>& x)
{
    detail::require_rank(x.shape(), 4, "max_pool2d");
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("max_pool2d: odd spatial extent " + to_string(x.shape()));
    const Index ho = h / 2, wo = w / 2;
    auto out = Tensor<T>::uninitialized(Shape{n, c, ho, wo});
    std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
    const T* xd = x.value().data();
    for (Index nc = 0; nc < n * c; ++nc) {
        const T* plane = xd + nc * h * w;
        for (Index oy = 0; oy < ho; ++oy) {
            for (Index ox = 0; ox < wo; ++ox) {
                Index best = (2 * oy) * w + 2 * ox;
                const Index cand[3] = {best + 1, best + w, best + w + 1};
                for (Index k : cand) {
                    if (plane[k] > plane[best]) best = k;
                }
                const Index o = (nc * ho + oy) * wo + ox;
                out[o] = plane[best];
                argmax[static_cast<std::size_t>(o)] = nc * h * w + best;
            }
        }
    }
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [ix, argmax = std::move(argmax)](Tape<T>& t) {
        const T* g = t.upstream().data();
        T* dx = t.grad(ix).data();
        for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += g[o];
    });
}

namespace detail {

struct AxisTaps {
    std::vector<Index> lo, hi;
    std::vector<double> wlo, whi;
};

// Source taps for one output axis; bilinear follows the half-pixel
// (align-corners false) convention.
inline AxisTaps upsample_taps(Index in, Index factor, UpsampleMode mode)
{
    const Index out = in * factor;
    AxisTaps taps;
    taps.lo.resize(out);
    taps.hi.resize(out);
    taps.wlo.resize(out);
    taps.whi.resize(out);
    for (Index o = 0; o < out; ++o) {
        if (mode == UpsampleMode::Nearest) {
            taps.lo[o] = taps.hi[o] = o / factor;
            taps.wlo[o] = 1.0;
            taps.whi[o] = 0.0;
            continue;
        }
        double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        if (src < 0.0) src = 0.0;
        const Index i0 = std::min<Index>(static_cast<Index>(std::floor(src)), in - 1);
        const Index i1 = std::min<Index>(i0 + 1, in - 1);
        const double l1 = src - static_cast<double>(i0);
        taps.lo[o] = i0;
        taps.hi[o] = i1;
        taps.wlo[o] = 1.0 - l1;
        taps.whi[o] = l1;
    }
    return taps;
}

} // namespace detail

/// Spatial upsampling by factor 2, 4, 8 or 16.
template <typename T>
Var<T> upsample(const Var<T>& x, Index factor, UpsampleMode mode = UpsampleMode::Bilinear)
{
    detail::require_rank(x.shape(), 4, "upsample");
    if (factor != 2 && factor != 4 && factor != 8 && factor != 16) {
        throw ArgumentError("upsample: unsupported factor " + std::to_string(factor));
    }
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Index ho = h * factor, wo = w * factor;
    const auto ty = detail::upsample_taps(h, factor, mode);
    const auto tx = detail::upsample_taps(w, factor, mode);
    auto out = Tensor<T>::uninitialized(Shape{n, c, ho, wo});
    const T* xd = x.value().data();
    // Separable: interpolate along x for every input row, then blend rows.
    std::vector<T> rows(static_cast<std::size_t>(h * wo));
    for (Index nc = 0; nc < n * c; ++nc) {
        const T* src = xd + nc * h * w;
        for (Index iy = 0; iy < h; ++iy) {
            const T* r = src + iy * w;
            T* dst = rows.data() + iy * wo;
            for (Index ox = 0; ox < wo; ++ox) {
                dst[ox] = static_cast<T>(tx.wlo[ox]) * r[tx.lo[ox]] + static_cast<T>(tx.whi[ox]) * r[tx.hi[ox]];
            }
        }
        T* dst = out.data() + nc * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
            const T* r0 = rows.data() + ty.lo[oy] * wo;
            const T* r1 = rows.data() + ty.hi[oy] * wo;
            const T a0 = static_cast<T>(ty.wlo[oy]), a1 = static_cast<T>(ty.whi[oy]);
            T* o = dst + oy * wo;
            for (Index ox = 0; ox < wo; ++ox) o[ox] = a0 * r0[ox] + a1 * r1[ox];
        }
    }
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [=](Tape<T>& t) {
        const T* g = t.upstream().data();
        T* dx = t.grad(ix).data();
        std::vector<T> grows(static_cast<std::size_t>(h * wo));
        for (Index nc = 0; nc < n * c; ++nc) {
            const T* gsrc = g + nc * ho * wo;
            std::fill(grows.begin(), grows.end(), T(0));
            for (Index oy = 0; oy < ho; ++oy) {
                T* r0 = grows.data() + ty.lo[oy] * wo;
                T* r1 = grows.data() + ty.hi[oy] * wo;
                const T a0 = static_cast<T>(ty.wlo[oy]), a1 = static_cast<T>(ty.whi[oy]);
                const T* gr = gsrc + oy * wo;
                for (Index ox = 0; ox < wo; ++ox) {
                    r0[ox] += a0 * gr[ox];
                    r1[ox] += a1 * gr[ox];
                }
            }
            T* d = dx + nc * h * w;
            for (Index iy = 0; iy < h; ++iy) {
                const T* gr = grows.data() + iy * wo;
                T* dr = d + iy * w;
                for (Index ox = 0; ox < wo; ++ox) {
                    dr[tx.lo[ox]] += static_cast<T>(tx.wlo[ox]) * gr[ox];
                    dr[tx.hi[ox]] += static_cast<T>(tx.whi[ox]) * gr[ox];
                }
            }
        }
    });
}

/// Channel concatenation in argument order; all inputs share N, H, W.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs)
{
    if (xs.empty()) throw ArgumentError("concat_channels: no inputs");
    if (xs.size() == 1) return xs.front();
    const Shape& s0 = xs[0].shape();
    detail::require_rank(s0, 4, "concat_channels");
    Index ctotal = 0;
    bool rg = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const Shape& s = xs[i].shape();
        detail::require_rank(s, 4, "concat_channels");
        if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
            throw ShapeError("concat_channels: input " + std::to_string(i) + " has shape " + to_string(s)
                             + ", expected N,H,W of " + to_string(s0));
        }
        ctotal += s[1];
        rg = rg || xs[i].requires_grad();
    }
    const Index n = s0[0], plane = s0[2] * s0[3];
    auto out = Tensor<T>::uninitialized(Shape{n, ctotal, s0[2], s0[3]});
    std::vector<std::size_t> ids;
    std::vector<Index> widths;
    for (const auto& v : xs) {
        ids.push_back(v.id());
        widths.push_back(v.dim(1));
    }
    for (Index i = 0; i < n; ++i) {
        Index offset = 0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const Index block = widths[k] * plane;
            std::copy_n(xs[k].value().data() + i * block, block, out.data() + (i * ctotal + offset) * plane);
            offset += widths[k];
        }
    }
    return xs[0].tape().emit(std::move(out), rg, [=](Tape<T>& t) {
        const T* g = t.upstream().data();
        for (Index i = 0; i < n; ++i) {
            Index offset = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                const Index block = widths[k] * plane;
                if (t.requires_grad(ids[k])) {
                    T* d = t.grad(ids[k]).data() + i * block;
                    const T* src = g + (i * ctotal + offset) * plane;
                    for (Index q = 0; q < block; ++q) d[q] += src[q];
                }
                offset += widths[k];
            }
        }
    });
}

/// Channels [begin, end) of x[N,C,H,W].
template <typename T>
Var<T> slice_channels(const Var<T>& x, Index begin, Index end)
{
    detail::require_rank(x.shape(), 4, "slice_channels");
    const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    if (begin < 0 || end > c || begin >= end) throw ArgumentError("slice_channels: bad range");
    const Index width = end - begin;
    auto out = Tensor<T>::uninitialized(Shape{n, width, x.dim(2), x.dim(3)});
    for (Index i = 0; i < n; ++i) {
        std::copy_n(x.value().data() + (i * c + begin) * plane, width * plane, out.data() + i * width * plane);
    }
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [=](Tape<T>& t) {
        const T* g = t.upstream().data();
        T* d = t.grad(ix).data();
        for (Index i = 0; i < n; ++i) {
            T* dst = d + (i * c + begin) * plane;
            const T* src = g + i * width * plane;
            for (Index q = 0; q < width * plane; ++q) dst[q] += src[q];
        }
    });
}

/// Global mean over H, W: [N,C,H,W] -> [N,C,1,1].
template <typename T>
Var<T> adaptive_avg_pool_1x1(const Var<T>& x)
{
    detail::require_rank(x.shape(), 4, "adaptive_avg_pool_1x1");
    const Index nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> out({x.dim(0), x.dim(1), 1, 1});
    for (Index i = 0; i < nc; ++i) {
        double acc = 0.0;
        const T* p = x.value().data() + i * plane;
        for (Index q = 0; q < plane; ++q) acc += p[q];
        out[i] = static_cast<T>(acc / static_cast<double>(plane));
    }
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [=](Tape<T>& t) {
        const T* g = t.upstream().data();
        T* d = t.grad(ix).data();
        const T inv = T(1) / static_cast<T>(plane);
        for (Index i = 0; i < nc; ++i) {
            for (Index q = 0; q < plane; ++q) d[i * plane + q] += g[i] * inv;
        }
    });
}

/// Global max over H, W: [N,C,H,W] -> [N,C,1,1].
template <typename T>
Var<T> adaptive_max_pool_1x1(const Var<T>& x)
{
    detail::require_rank(x.shape(), 4, "adaptive_max_pool_1x1");
    const Index nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> out({x.dim(0), x.dim(1), 1, 1});
    std::vector<Index> argmax(static_cast<std::size_t>(nc));
    for (Index i = 0; i < nc; ++i) {
        const T* p = x.value().data() + i * plane;
        Index best = 0;
        for (Index q = 1; q < plane; ++q) {
            if (p[q] > p[best]) best = q;
        }
        out[i] = p[best];
        argmax[static_cast<std::size_t>(i)] = i * plane + best;
    }
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [ix, argmax = std::move(argmax)](Tape<T>& t) {
        const T* g = t.upstream().data();
        T* d = t.grad(ix).data();
        for (std::size_t i = 0; i < argmax.size(); ++i) d[argmax[i]] += g[i];
    });
}

/// Multiplies item n of x by the constant factors[n]; factors carry no
/// gradient.
template <typename T>
Var<T> scale_items(const Var<T>& x, const std::vector<T>& factors)
{
    const Index n = x.dim(0);
    if (static_cast<Index>(factors.size()) != n) {
        throw ShapeError("scale_items: " + std::to_string(factors.size()) + " factors for batch of "
                         + std::to_string(n));
    }
    const Index per = x.value().size() / std::max<Index>(1, n);
    Tensor<T> out(x.shape());
    for (Index i = 0; i < n; ++i) {
        for (Index q = 0; q < per; ++q) out[i * per + q] = x.value()[i * per + q] * factors[i];
    }
    const auto ix = x.id();
    return x.tape().emit(std::move(out), x.requires_grad(), [=](Tape<T>& t) {
        const T* g = t.upstream().data();
        T* d = t.grad(ix).data();
        for (Index i = 0; i < n; ++i) {
            for (Index q = 0; q < per; ++q) d[i * per + q] += g[i * per + q] * factors[i];
        }
    });
}

} // namespace unetsharp
