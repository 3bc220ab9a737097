#pragma once

// Differentiable operations over Var<S>. Every op validates shapes, computes its forward
// value eagerly, and registers a backward closure when any input requires a gradient.

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "usvid/autodiff.hpp"
#include "usvid/tensor.hpp"

namespace usvid {

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using CMatMap = Eigen::Map<const RowMat<S>>;

// Eigen's small-product and reduction kernels peel scalar iterations up to the first
// aligned address, so the float summation order would depend on where a buffer happens
// to sit on the heap. Products therefore run on aligned copies and are written back
// elementwise, which keeps every result a function of the values alone.
template <class S>
RowMat<S> aligned(const S* p, std::size_t rows, std::size_t cols) {
    return CMatMap<S>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class S, class Expr>
void assign_product(S* dst, std::size_t rows, std::size_t cols, const Expr& product, bool accumulate) {
    const RowMat<S> tmp = product;
    MatMap<S> d(dst, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    if (accumulate) d += tmp;
    else d = tmp;
}

template <class S>
S row_sum(const S* p, std::size_t n) {
    S acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += p[i];
    return acc;
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

template <class S>
S stable_softplus(S x) {
    return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <class S>
S sigmoid(S x) {
    if (x >= 0) return S(1) / (S(1) + std::exp(-x));
    const S e = std::exp(x);
    return e / (S(1) + e);
}

// cols[(c*k + ky)*k + kx][oy*Wo + ox] = x[c][oy*stride + ky - pad][ox*stride + kx - pad]
template <class S>
void im2col(const S* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, S* cols) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                S* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    S* out = row + oy * Wo;
                    if (iy < 0 || iy >= static_cast<long>(H)) {
                        std::fill(out, out + Wo, S(0));
                        continue;
                    }
                    const S* in = x + (c * H + static_cast<std::size_t>(iy)) * W;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        out[ox] = (ix < 0 || ix >= static_cast<long>(W)) ? S(0) : in[ix];
                    }
                }
            }
}

template <class S>
void col2im_add(const S* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, S* dx) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const S* row = cols + ((c * k + ky) * k + kx) * Ho * Wo;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    S* out = dx + (c * H + static_cast<std::size_t>(iy)) * W;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (ix >= 0 && ix < static_cast<long>(W)) out[ix] += row[oy * Wo + ox];
                    }
                }
            }
}

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    require(in + 2 * pad >= k, "conv: kernel larger than padded input");
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                                 shape_str(b.shape()));
    Tensor<S> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_op<S>("add", std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
        for (const auto* v : {&a, &b}) {
            if (!v->requires_grad()) continue;
            auto& d = v->node().grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    detail::require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                                 shape_str(b.shape()));
    Tensor<S> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_op<S>("sub", std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
        if (a.requires_grad()) {
            auto& d = a.node().grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& d = b.node().grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
        }
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    detail::require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                                 shape_str(b.shape()));
    Tensor<S> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_op<S>("mul", std::move(out), {a, b}, [a, b](const Tensor<S>& g) {
        if (a.requires_grad()) {
            auto& d = a.node().grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b.value()[i];
        }
        if (b.requires_grad()) {
            auto& d = b.node().grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a.value()[i];
        }
    });
}

/// Elementwise a / b. Denominators smaller in magnitude than `min_denominator` are
/// clamped to it (sign preserved) so the result stays finite.
template <class S>
Var<S> div(const Var<S>& a, const Var<S>& b, S min_denominator = S(1e-12)) {
    detail::require(a.shape() == b.shape(), "div: shape mismatch " + shape_str(a.shape()) + " vs " +
                                                 shape_str(b.shape()));
    Tensor<S> den = b.value();
    for (std::size_t i = 0; i < den.size(); ++i)
        if (std::abs(den[i]) < min_denominator) den[i] = den[i] < 0 ? -min_denominator : min_denominator;
    Tensor<S> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= den[i];
    Tensor<S> q = out;
    return make_op<S>("div", std::move(out), {a, b}, [a, b, den, q](const Tensor<S>& g) {
        if (a.requires_grad()) {
            auto& d = a.node().grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / den[i];
        }
        if (b.requires_grad()) {
            auto& d = b.node().grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i] * q[i] / den[i];
        }
    });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S c) {
    Tensor<S> out = a.value();
    for (auto& v : out.data()) v += c;
    return make_op<S>("add_scalar", std::move(out), {a}, [a](const Tensor<S>& g) {
        auto& d = a.node().grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

/// c - a, elementwise.
template <class S>
Var<S> rsub_scalar(S c, const Var<S>& a) {
    Tensor<S> out = a.value();
    for (auto& v : out.data()) v = c - v;
    return make_op<S>("rsub_scalar", std::move(out), {a}, [a](const Tensor<S>& g) {
        auto& d = a.node().grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    });
}

template <class S>
Var<S> scale(const Var<S>& a, S c) {
    Tensor<S> out = a.value();
    for (auto& v : out.data()) v *= c;
    return make_op<S>("scale", std::move(out), {a}, [a, c](const Tensor<S>& g) {
        auto& d = a.node().grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * c;
    });
}

template <class S>
Var<S> relu(const Var<S>& a) {
    Tensor<S> out = a.value();
    for (auto& v : out.data()) v = v > S(0) ? v : S(0);
    return make_op<S>("relu", std::move(out), {a}, [a](const Tensor<S>& g) {
        auto& d = a.node().grad_buffer();
        const auto& x = a.value();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > S(0)) d[i] += g[i];
    });
}

template <class S>
Var<S> softplus(const Var<S>& a) {
    Tensor<S> out = a.value();
    for (auto& v : out.data()) v = detail::stable_softplus(v);
    return make_op<S>("softplus", std::move(out), {a}, [a](const Tensor<S>& g) {
        auto& d = a.node().grad_buffer();
        const auto& x = a.value();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * detail::sigmoid(x[i]);
    });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

template <class S>
Var<S> sum(const Var<S>& a) {
    double acc = 0;
    for (auto v : a.value().data()) acc += v;
    return make_op<S>("sum", Tensor<S>::scalar(static_cast<S>(acc)), {a}, [a](const Tensor<S>& g) {
        auto& d = a.node().grad_buffer();
        for (auto& v : d.data()) v += g[0];
    });
}

template <class S>
Var<S> mean(const Var<S>& a) {
    detail::require(a.size() > 0, "mean: empty input");
    double acc = 0;
    for (auto v : a.value().data()) acc += v;
    const S n = static_cast<S>(a.size());
    return make_op<S>("mean", Tensor<S>::scalar(static_cast<S>(acc / a.size())), {a},
                      [a, n](const Tensor<S>& g) {
                          auto& d = a.node().grad_buffer();
                          for (auto& v : d.data()) v += g[0] / n;
                      });
}

template <class S>
Var<S> reshape(const Var<S>& a, Shape shape) {
    Tensor<S> out = a.value().reshaped(std::move(shape));
    return make_op<S>("reshape", std::move(out), {a}, [a](const Tensor<S>& g) {
        auto& d = a.node().grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
}

/// Columns [begin, end) of an N×M matrix.
template <class S>
Var<S> slice_cols(const Var<S>& a, std::size_t begin, std::size_t end) {
    detail::require(a.value().rank() == 2, "slice_cols: expected a matrix");
    const std::size_t N = a.dim(0), M = a.dim(1);
    detail::require(begin < end && end <= M, "slice_cols: bad range");
    const std::size_t W = end - begin;
    Tensor<S> out(Shape{N, W});
    for (std::size_t r = 0; r < N; ++r)
        for (std::size_t c = 0; c < W; ++c) out[r * W + c] = a.value()[r * M + begin + c];
    return make_op<S>("slice_cols", std::move(out), {a}, [a, begin, W, M, N](const Tensor<S>& g) {
        auto& d = a.node().grad_buffer();
        for (std::size_t r = 0; r < N; ++r)
            for (std::size_t c = 0; c < W; ++c) d[r * M + begin + c] += g[r * W + c];
    });
}

/// Concatenates N×M_i matrices along columns.
template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    detail::require(!parts.empty(), "concat_cols: no inputs");
    const std::size_t N = parts[0].dim(0);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require(p.value().rank() == 2 && p.dim(0) == N, "concat_cols: row count mismatch");
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    Tensor<S> out(Shape{N, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t r = 0; r < N; ++r)
            std::copy_n(parts[k].value().ptr() + r * widths[k], widths[k], out.ptr() + r * total + off);
        off += widths[k];
    }
    return make_op<S>("concat_cols", std::move(out), parts, [parts, widths, total, N](const Tensor<S>& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (parts[k].requires_grad()) {
                auto& d = parts[k].node().grad_buffer();
                for (std::size_t r = 0; r < N; ++r)
                    for (std::size_t c = 0; c < widths[k]; ++c) d[r * widths[k] + c] += g[r * total + off + c];
            }
            off += widths[k];
        }
    });
}

/// Places row i of `a` (n×F, any trailing shape) at row index[i] of an N-row output;
/// rows not referenced are zero.
template <class S>
Var<S> scatter_rows(const Var<S>& a, const std::vector<std::size_t>& index, std::size_t N) {
    detail::require(a.value().rank() >= 1 && a.dim(0) == index.size(), "scatter_rows: index length mismatch");
    const std::size_t F = a.dim(0) ? a.size() / a.dim(0) : 0;
    Shape shape = a.shape();
    shape[0] = N;
    Tensor<S> out(shape);
    for (std::size_t i = 0; i < index.size(); ++i) {
        detail::require(index[i] < N, "scatter_rows: index out of range");
        std::copy_n(a.value().ptr() + i * F, F, out.ptr() + index[i] * F);
    }
    return make_op<S>("scatter_rows", std::move(out), {a}, [a, index, F](const Tensor<S>& g) {
        auto& d = a.node().grad_buffer();
        for (std::size_t i = 0; i < index.size(); ++i)
            for (std::size_t f = 0; f < F; ++f) d[i * F + f] += g[index[i] * F + f];
    });
}

// ---------------------------------------------------------------------------
// Dense layers

/// (M×K) · (K×N)
template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    detail::require(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(0),
                    "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor<S> out(Shape{M, N});
    detail::assign_product(out.ptr(), M, N,
                           detail::aligned(a.value().ptr(), M, K) * detail::aligned(b.value().ptr(), K, N), false);
    return make_op<S>("matmul", std::move(out), {a, b}, [a, b, M, K, N](const Tensor<S>& g) {
        const auto G = detail::aligned(g.ptr(), M, N);
        if (a.requires_grad())
            detail::assign_product(a.node().grad_buffer().ptr(), M, K,
                                   G * detail::aligned(b.value().ptr(), K, N).transpose(), true);
        if (b.requires_grad())
            detail::assign_product(b.node().grad_buffer().ptr(), K, N,
                                   detail::aligned(a.value().ptr(), M, K).transpose() * G, true);
    });
}

/// x (N×K) · wᵀ (K×O) + bias (O).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& bias) {
    detail::require(x.value().rank() == 2 && w.value().rank() == 2 && x.dim(1) == w.dim(1),
                    "linear: incompatible shapes " + shape_str(x.shape()) + " and weight " +
                        shape_str(w.shape()));
    const std::size_t N = x.dim(0), K = x.dim(1), O = w.dim(0);
    detail::require(bias.size() == O, "linear: bias length mismatch");
    Tensor<S> out(Shape{N, O});
    detail::assign_product(out.ptr(), N, O,
                           detail::aligned(x.value().ptr(), N, K) * detail::aligned(w.value().ptr(), O, K).transpose(),
                           false);
    for (std::size_t r = 0; r < N; ++r)
        for (std::size_t o = 0; o < O; ++o) out[r * O + o] += bias.value()[o];
    return make_op<S>("linear", std::move(out), {x, w, bias}, [x, w, bias, N, K, O](const Tensor<S>& g) {
        const auto G = detail::aligned(g.ptr(), N, O);
        if (x.requires_grad())
            detail::assign_product(x.node().grad_buffer().ptr(), N, K, G * detail::aligned(w.value().ptr(), O, K),
                                   true);
        if (w.requires_grad())
            detail::assign_product(w.node().grad_buffer().ptr(), O, K,
                                   G.transpose() * detail::aligned(x.value().ptr(), N, K), true);
        if (bias.requires_grad()) {
            auto& d = bias.node().grad_buffer();
            for (std::size_t r = 0; r < N; ++r)
                for (std::size_t o = 0; o < O; ++o) d[o] += g[r * O + o];
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions

/// 2D convolution: x N×C×H×W, weight O×C×k×k, bias O. Each image is processed with its
/// own GEMM, so an image's output never depends on the other images in the batch.
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, std::size_t stride, std::size_t pad) {
    detail::require(x.value().rank() == 4, "conv2d: input must be N×C×H×W, got " + shape_str(x.shape()));
    detail::require(w.value().rank() == 4 && w.dim(2) == w.dim(3), "conv2d: weight must be O×C×k×k");
    detail::require(stride >= 1, "conv2d: stride must be positive");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), k = w.dim(2);
    detail::require(w.dim(1) == C, "conv2d: channel mismatch: input " + std::to_string(C) + ", weight " +
                                       std::to_string(w.dim(1)));
    detail::require(bias.size() == O, "conv2d: bias length mismatch");
    const std::size_t Ho = detail::conv_out(H, k, stride, pad), Wo = detail::conv_out(W, k, stride, pad);
    const std::size_t P = Ho * Wo, Kd = C * k * k;

    Tensor<S> out(Shape{N, O, Ho, Wo});
    std::vector<S> cols(Kd * P);
    const auto Wm = detail::aligned(w.value().ptr(), O, Kd);
    for (std::size_t n = 0; n < N; ++n) {
        detail::im2col(x.value().ptr() + n * C * H * W, C, H, W, k, stride, pad, Ho, Wo, cols.data());
        S* y = out.ptr() + n * O * P;
        detail::assign_product(y, O, P, Wm * detail::aligned(cols.data(), Kd, P), false);
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < P; ++i) y[o * P + i] += bias.value()[o];
    }
    return make_op<S>("conv2d", std::move(out), {x, w, bias},
                      [=](const Tensor<S>& g) {
                          std::vector<S> cols(Kd * P), dcols(Kd * P);
                          const auto Wm = detail::aligned(w.value().ptr(), O, Kd);
                          for (std::size_t n = 0; n < N; ++n) {
                              const S* gn = g.ptr() + n * O * P;
                              const auto G = detail::aligned(gn, O, P);
                              if (w.requires_grad()) {
                                  detail::im2col(x.value().ptr() + n * C * H * W, C, H, W, k, stride, pad, Ho,
                                                 Wo, cols.data());
                                  detail::assign_product(w.node().grad_buffer().ptr(), O, Kd,
                                                         G * detail::aligned(cols.data(), Kd, P).transpose(), true);
                              }
                              if (bias.requires_grad()) {
                                  auto& d = bias.node().grad_buffer();
                                  for (std::size_t o = 0; o < O; ++o) d[o] += detail::row_sum(gn + o * P, P);
                              }
                              if (x.requires_grad()) {
                                  detail::assign_product(dcols.data(), Kd, P, Wm.transpose() * G, false);
                                  detail::col2im_add(dcols.data(), C, H, W, k, stride, pad, Ho, Wo,
                                                     x.node().grad_buffer().ptr() + n * C * H * W);
                              }
                          }
                      });
}

/// 1D convolution along the time axis applied independently at every spatial site.
/// x B×T×C×P (P spatial sites), weight O×k×C, bias O, zero padding `pad` frames on
/// both ends. Output B×To×O×P.
template <class S>
Var<S> conv_temporal(const Var<S>& x, const Var<S>& w, const Var<S>& bias, std::size_t stride,
                     std::size_t pad) {
    detail::require(x.value().rank() == 4, "conv_temporal: input must be B×T×C×P, got " + shape_str(x.shape()));
    detail::require(w.value().rank() == 3, "conv_temporal: weight must be O×k×C");
    detail::require(stride >= 1, "conv_temporal: stride must be positive");
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), P = x.dim(3);
    const std::size_t O = w.dim(0), k = w.dim(1);
    detail::require(w.dim(2) == C, "conv_temporal: channel mismatch");
    detail::require(bias.size() == O, "conv_temporal: bias length mismatch");
    const std::size_t To = detail::conv_out(T, k, stride, pad);
    const std::size_t frame = C * P, Kd = k * C;

    // Stacks the k input frames feeding output step `to` into a (k*C)×P matrix.
    auto gather = [=](const S* xb, std::size_t to, S* buf) {
        for (std::size_t j = 0; j < k; ++j) {
            const long t = static_cast<long>(to * stride + j) - static_cast<long>(pad);
            if (t < 0 || t >= static_cast<long>(T)) std::fill_n(buf + j * frame, frame, S(0));
            else std::copy_n(xb + static_cast<std::size_t>(t) * frame, frame, buf + j * frame);
        }
    };

    Tensor<S> out(Shape{B, To, O, P});
    std::vector<S> buf(Kd * P);
    const auto Wm = detail::aligned(w.value().ptr(), O, Kd);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t to = 0; to < To; ++to) {
            gather(x.value().ptr() + b * T * frame, to, buf.data());
            S* y = out.ptr() + (b * To + to) * O * P;
            detail::assign_product(y, O, P, Wm * detail::aligned(buf.data(), Kd, P), false);
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t i = 0; i < P; ++i) y[o * P + i] += bias.value()[o];
        }
    return make_op<S>("conv_temporal", std::move(out), {x, w, bias}, [=](const Tensor<S>& g) {
        std::vector<S> buf(Kd * P), dbuf(Kd * P);
        const auto Wm = detail::aligned(w.value().ptr(), O, Kd);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t to = 0; to < To; ++to) {
                const S* gt = g.ptr() + (b * To + to) * O * P;
                const auto G = detail::aligned(gt, O, P);
                if (w.requires_grad()) {
                    gather(x.value().ptr() + b * T * frame, to, buf.data());
                    detail::assign_product(w.node().grad_buffer().ptr(), O, Kd,
                                           G * detail::aligned(buf.data(), Kd, P).transpose(), true);
                }
                if (bias.requires_grad()) {
                    auto& d = bias.node().grad_buffer();
                    for (std::size_t o = 0; o < O; ++o) d[o] += detail::row_sum(gt + o * P, P);
                }
                if (x.requires_grad()) {
                    detail::assign_product(dbuf.data(), Kd, P, Wm.transpose() * G, false);
                    S* dx = x.node().grad_buffer().ptr() + b * T * frame;
                    for (std::size_t j = 0; j < k; ++j) {
                        const long t = static_cast<long>(to * stride + j) - static_cast<long>(pad);
                        if (t < 0 || t >= static_cast<long>(T)) continue;
                        S* dst = dx + static_cast<std::size_t>(t) * frame;
                        const S* src = dbuf.data() + j * frame;
                        for (std::size_t i = 0; i < frame; ++i) dst[i] += src[i];
                    }
                }
            }
    });
}

/// N×C×H×W -> N×C mean over spatial positions.
template <class S>
Var<S> global_avg_pool2d(const Var<S>& x) {
    detail::require(x.value().rank() == 4, "global_avg_pool2d: input must be N×C×H×W");
    const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    Tensor<S> out(Shape{N, C});
    for (std::size_t i = 0; i < N * C; ++i) {
        const S* p = x.value().ptr() + i * P;
        S acc = 0;
        for (std::size_t j = 0; j < P; ++j) acc += p[j];
        out[i] = acc / static_cast<S>(P);
    }
    return make_op<S>("global_avg_pool2d", std::move(out), {x}, [x, N, C, P](const Tensor<S>& g) {
        auto& d = x.node().grad_buffer();
        for (std::size_t i = 0; i < N * C; ++i) {
            const S v = g[i] / static_cast<S>(P);
            for (std::size_t j = 0; j < P; ++j) d[i * P + j] += v;
        }
    });
}

/// B×T×C×P -> B×C mean over time and space.
template <class S>
Var<S> spacetime_avg_pool(const Var<S>& x) {
    detail::require(x.value().rank() == 4, "spacetime_avg_pool: input must be B×T×C×P");
    const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), P = x.dim(3);
    const S inv = S(1) / static_cast<S>(T * P);
    Tensor<S> out(Shape{B, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c) {
                const S* p = x.value().ptr() + ((b * T + t) * C + c) * P;
                S acc = 0;
                for (std::size_t j = 0; j < P; ++j) acc += p[j];
                out[b * C + c] += acc;
            }
    for (auto& v : out.data()) v *= inv;
    return make_op<S>("spacetime_avg_pool", std::move(out), {x}, [x, B, T, C, P, inv](const Tensor<S>& g) {
        auto& d = x.node().grad_buffer();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t c = 0; c < C; ++c) {
                    const S v = g[b * C + c] * inv;
                    S* p = d.ptr() + ((b * T + t) * C + c) * P;
                    for (std::size_t j = 0; j < P; ++j) p[j] += v;
                }
    });
}

// ---------------------------------------------------------------------------
// Regularization

/// Inverted dropout: in training mode each element is zeroed with probability p and
/// survivors are scaled by 1/(1-p); identity otherwise. The keep mask depends only on
/// the generator state, not on S.
template <class S>
Var<S> dropout(const Var<S>& x, double p, bool training, std::mt19937_64& rng) {
    detail::require(p >= 0 && p < 1, "dropout: rate must be in [0,1)");
    if (!training || p == 0) return x;
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    const auto threshold = static_cast<std::uint64_t>(p * 18446744073709551616.0);
    Tensor<S> maskv(x.shape());
    for (auto& m : maskv.data()) m = rng() >= threshold ? keep_scale : S(0);
    Tensor<S> out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= maskv[i];
    return make_op<S>("dropout", std::move(out), {x}, [x, maskv](const Tensor<S>& g) {
        auto& d = x.node().grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * maskv[i];
    });
}

// ---------------------------------------------------------------------------
// Classification loss used by the gradient-check suite

/// Mean over rows of -log softmax(logits)[target].
template <class S>
Var<S> softmax_cross_entropy(const Var<S>& logits, const std::vector<std::size_t>& targets) {
    detail::require(logits.value().rank() == 2, "softmax_cross_entropy: logits must be N×K");
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    detail::require(targets.size() == N && N > 0, "softmax_cross_entropy: target count mismatch");
    Tensor<S> probs(Shape{N, K});
    double loss = 0;
    for (std::size_t r = 0; r < N; ++r) {
        detail::require(targets[r] < K, "softmax_cross_entropy: target out of range");
        const S* z = logits.value().ptr() + r * K;
        const S mx = *std::max_element(z, z + K);
        S denom = 0;
        for (std::size_t c = 0; c < K; ++c) denom += std::exp(z[c] - mx);
        for (std::size_t c = 0; c < K; ++c) probs[r * K + c] = std::exp(z[c] - mx) / denom;
        loss += -(z[targets[r]] - mx - std::log(denom));
    }
    return make_op<S>("softmax_cross_entropy", Tensor<S>::scalar(static_cast<S>(loss / N)), {logits},
                      [logits, probs, targets, N, K](const Tensor<S>& g) {
                          auto& d = logits.node().grad_buffer();
                          const S s = g[0] / static_cast<S>(N);
                          for (std::size_t r = 0; r < N; ++r)
                              for (std::size_t c = 0; c < K; ++c)
                                  d[r * K + c] += s * (probs[r * K + c] - (c == targets[r] ? S(1) : S(0)));
                      });
}

}  // namespace usvid
