#pragma once

// Mask-aware temporal pooling over unordered frame embeddings: multi-head attention with
// global query vectors, plus fixed average and max pooling.
//
// For head i with partition width d = D / num_heads, frame t contributes the slice
// h_i^t = e_t[i*d, (i+1)*d). The head scores every valid frame by its dot product with
// the head's query, normalizes the scores with a softmax over valid frames, and returns
// the weighted sum of the slices. The concatenated head outputs occupy the same index
// ranges as the partitions they came from.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "usvid/autodiff.hpp"
#include "usvid/tensor.hpp"

namespace usvid {

/// Per-clip attention diagnostics. `scores` and `weights` are num_heads×num_frames,
/// row-major; masked positions hold score 0 and weight 0.
struct AttentionRecord {
    std::size_t num_heads = 0;
    std::size_t num_frames = 0;
    std::vector<double> scores;
    std::vector<double> weights;
    Mask mask;

    double score(std::size_t head, std::size_t t) const { return scores[head * num_frames + t]; }
    double weight(std::size_t head, std::size_t t) const { return weights[head * num_frames + t]; }
    std::size_t num_valid() const {
        return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    }
};

inline std::size_t head_width(std::size_t embed_dim, std::size_t num_heads) {
    if (num_heads == 0 || embed_dim % num_heads != 0)
        throw Error("attention: " + std::to_string(num_heads) + " heads do not divide embedding width " +
                    std::to_string(embed_dim));
    return embed_dim / num_heads;
}

/// Splits T×D embeddings into a T×num_heads×(D/num_heads) tensor; slice i of frame t is
/// embedding columns [i*d, (i+1)*d).
template <class S>
Tensor<S> partition(const Tensor<S>& embeddings, std::size_t num_heads) {
    if (embeddings.rank() != 2) throw Error("partition: expected T×D embeddings");
    const std::size_t T = embeddings.dim(0), D = embeddings.dim(1);
    const std::size_t d = head_width(D, num_heads);
    return embeddings.reshaped(Shape{T, num_heads, d});
}

namespace detail {

inline std::size_t count_valid(std::span<const std::uint8_t> mask) {
    return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
}

inline void require_some_valid(std::span<const std::uint8_t> mask, const char* who) {
    if (count_valid(mask) == 0) throw Error(std::string(who) + ": every frame is masked (empty clip)");
}

}  // namespace detail

/// Softmax over the valid positions; masked positions get exactly 0. Stabilized by
/// subtracting the maximum valid score.
template <class S>
std::vector<S> masked_softmax(std::span<const S> scores, std::span<const std::uint8_t> mask) {
    if (scores.size() != mask.size()) throw Error("masked_softmax: scores and mask differ in length");
    detail::require_some_valid(mask, "masked_softmax");
    S mx = -std::numeric_limits<S>::infinity();
    for (std::size_t t = 0; t < scores.size(); ++t)
        if (mask[t]) mx = std::max(mx, scores[t]);
    std::vector<S> out(scores.size(), S(0));
    S denom = 0;
    for (std::size_t t = 0; t < scores.size(); ++t)
        if (mask[t]) denom += (out[t] = std::exp(scores[t] - mx));
    for (auto& v : out) v /= denom;
    return out;
}

namespace detail {

// One clip of attention pooling. e: T×D, q: H×d. Writes pooled (D), weights and scores (H×T).
template <class S>
void attention_clip_forward(const S* e, std::size_t T, std::size_t D, const S* q, std::size_t heads,
                            std::span<const std::uint8_t> mask, bool scale_scores, S* pooled, S* weights,
                            S* scores) {
    const std::size_t d = D / heads;
    const S factor = scale_scores ? S(1) / std::sqrt(static_cast<S>(d)) : S(1);
    std::vector<S> lam(T);
    for (std::size_t i = 0; i < heads; ++i) {
        const S* qi = q + i * d;
        for (std::size_t t = 0; t < T; ++t) {
            lam[t] = 0;
            if (!mask[t]) continue;
            const S* h = e + t * D + i * d;
            S acc = 0;
            for (std::size_t j = 0; j < d; ++j) acc += h[j] * qi[j];
            lam[t] = acc * factor;
        }
        const auto a = masked_softmax<S>(lam, mask);
        S* out = pooled + i * d;
        std::fill(out, out + d, S(0));
        for (std::size_t t = 0; t < T; ++t) {
            scores[i * T + t] = lam[t];
            weights[i * T + t] = a[t];
            if (!mask[t]) continue;
            const S* h = e + t * D + i * d;
            for (std::size_t j = 0; j < d; ++j) out[j] += a[t] * h[j];
        }
    }
}

template <class S>
AttentionRecord make_record(std::size_t heads, std::size_t T, const S* scores, const S* weights,
                            std::span<const std::uint8_t> mask) {
    AttentionRecord r;
    r.num_heads = heads;
    r.num_frames = T;
    r.scores.assign(scores, scores + heads * T);
    r.weights.assign(weights, weights + heads * T);
    r.mask.assign(mask.begin(), mask.end());
    return r;
}

}  // namespace detail

/// Attention pooling of a single clip (T×D embeddings, num_heads×d queries).
template <class S>
std::pair<Tensor<S>, AttentionRecord> attention_pool(const Tensor<S>& embeddings, const Tensor<S>& queries,
                                                      std::span<const std::uint8_t> mask,
                                                      bool scale_scores = false) {
    if (embeddings.rank() != 2) throw Error("attention_pool: expected T×D embeddings");
    if (queries.rank() != 2) throw Error("attention_pool: expected num_heads×d queries");
    const std::size_t T = embeddings.dim(0), D = embeddings.dim(1), heads = queries.dim(0);
    if (head_width(D, heads) != queries.dim(1))
        throw Error("attention_pool: query width " + std::to_string(queries.dim(1)) + " != D/num_heads");
    if (mask.size() != T) throw Error("attention_pool: mask length mismatch");
    detail::require_some_valid(mask, "attention_pool");
    Tensor<S> pooled(Shape{D});
    std::vector<S> w(heads * T), sc(heads * T);
    detail::attention_clip_forward(embeddings.ptr(), T, D, queries.ptr(), heads, mask, scale_scores, pooled.ptr(),
                                   w.data(), sc.data());
    return {std::move(pooled), detail::make_record(heads, T, sc.data(), w.data(), mask)};
}

/// Mean over valid frames, per channel.
template <class S>
Tensor<S> average_pool(const Tensor<S>& embeddings, std::span<const std::uint8_t> mask) {
    if (embeddings.rank() != 2) throw Error("average_pool: expected T×D embeddings");
    const std::size_t T = embeddings.dim(0), D = embeddings.dim(1);
    if (mask.size() != T) throw Error("average_pool: mask length mismatch");
    detail::require_some_valid(mask, "average_pool");
    const S n = static_cast<S>(detail::count_valid(mask));
    Tensor<S> out(Shape{D});
    for (std::size_t t = 0; t < T; ++t)
        if (mask[t])
            for (std::size_t j = 0; j < D; ++j) out[j] += embeddings[t * D + j];
    for (auto& v : out.data()) v /= n;
    return out;
}

/// Per-channel index of the maximum over valid frames; ties go to the lowest index.
template <class S>
std::vector<std::size_t> max_pool_argmax(const S* e, std::size_t T, std::size_t D,
                                         std::span<const std::uint8_t> mask) {
    std::vector<std::size_t> arg(D, T);
    for (std::size_t t = 0; t < T; ++t) {
        if (!mask[t]) continue;
        for (std::size_t j = 0; j < D; ++j)
            if (arg[j] == T || e[t * D + j] > e[arg[j] * D + j]) arg[j] = t;
    }
    return arg;
}

/// Elementwise max over valid frames.
template <class S>
Tensor<S> max_pool(const Tensor<S>& embeddings, std::span<const std::uint8_t> mask) {
    if (embeddings.rank() != 2) throw Error("max_pool: expected T×D embeddings");
    const std::size_t T = embeddings.dim(0), D = embeddings.dim(1);
    if (mask.size() != T) throw Error("max_pool: mask length mismatch");
    detail::require_some_valid(mask, "max_pool");
    const auto arg = max_pool_argmax(embeddings.ptr(), T, D, mask);
    Tensor<S> out(Shape{D});
    for (std::size_t j = 0; j < D; ++j) out[j] = embeddings[arg[j] * D + j];
    return out;
}

// ---------------------------------------------------------------------------
// Batched differentiable versions: embeddings B×T×D, mask B×T (row-major).

template <class S>
struct AttentionPoolResult {
    Var<S> pooled;  // B×D
    std::vector<AttentionRecord> records;
};

namespace detail {

inline void check_batch(const Shape& shape, const Mask& mask, const char* who) {
    if (shape.size() != 3) throw Error(std::string(who) + ": embeddings must be B×T×D");
    if (mask.size() != shape[0] * shape[1]) throw Error(std::string(who) + ": mask must be B×T");
    for (std::size_t b = 0; b < shape[0]; ++b)
        require_some_valid(std::span<const std::uint8_t>(mask.data() + b * shape[1], shape[1]), who);
}

}  // namespace detail

template <class S>
AttentionPoolResult<S> attention_pool_op(const Var<S>& embeddings, const Var<S>& queries, const Mask& mask,
                                         bool scale_scores = false) {
    detail::check_batch(embeddings.shape(), mask, "attention_pool");
    const std::size_t B = embeddings.dim(0), T = embeddings.dim(1), D = embeddings.dim(2);
    if (queries.value().rank() != 2) throw Error("attention_pool: queries must be num_heads×d");
    const std::size_t heads = queries.dim(0), d = head_width(D, heads);
    if (queries.dim(1) != d) throw Error("attention_pool: query width does not equal D/num_heads");

    Tensor<S> pooled(Shape{B, D});
    Tensor<S> weights(Shape{B, heads, T}), scores(Shape{B, heads, T});
    AttentionPoolResult<S> res;
    for (std::size_t b = 0; b < B; ++b) {
        std::span<const std::uint8_t> m(mask.data() + b * T, T);
        detail::attention_clip_forward(embeddings.value().ptr() + b * T * D, T, D, queries.value().ptr(), heads, m,
                                       scale_scores, pooled.ptr() + b * D, weights.ptr() + b * heads * T,
                                       scores.ptr() + b * heads * T);
        res.records.push_back(detail::make_record(heads, T, scores.ptr() + b * heads * T,
                                                  weights.ptr() + b * heads * T, m));
    }
    const S factor = scale_scores ? S(1) / std::sqrt(static_cast<S>(d)) : S(1);
    res.pooled = make_op<S>(
        "attention_pool", std::move(pooled), {embeddings, queries},
        [embeddings, queries, mask, weights, B, T, D, heads, d, factor](const Tensor<S>& g) {
            const S* e = embeddings.value().ptr();
            const S* q = queries.value().ptr();
            S* de = embeddings.requires_grad() ? embeddings.node().grad_buffer().ptr() : nullptr;
            S* dq = queries.requires_grad() ? queries.node().grad_buffer().ptr() : nullptr;
            std::vector<S> da(T), dl(T);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < heads; ++i) {
                    const S* gi = g.ptr() + b * D + i * d;
                    const S* a = weights.ptr() + (b * heads + i) * T;
                    S dot = 0;
                    for (std::size_t t = 0; t < T; ++t) {
                        da[t] = 0;
                        if (!mask[b * T + t]) continue;
                        const S* h = e + (b * T + t) * D + i * d;
                        S acc = 0;
                        for (std::size_t j = 0; j < d; ++j) acc += gi[j] * h[j];
                        da[t] = acc;
                        dot += a[t] * acc;
                    }
                    for (std::size_t t = 0; t < T; ++t) {
                        if (!mask[b * T + t]) continue;
                        dl[t] = a[t] * (da[t] - dot) * factor;
                        const S* h = e + (b * T + t) * D + i * d;
                        if (de) {
                            S* dh = de + (b * T + t) * D + i * d;
                            for (std::size_t j = 0; j < d; ++j) dh[j] += a[t] * gi[j] + dl[t] * q[i * d + j];
                        }
                        if (dq)
                            for (std::size_t j = 0; j < d; ++j) dq[i * d + j] += dl[t] * h[j];
                    }
                }
        });
    return res;
}

template <class S>
Var<S> average_pool_op(const Var<S>& embeddings, const Mask& mask) {
    detail::check_batch(embeddings.shape(), mask, "average_pool");
    const std::size_t B = embeddings.dim(0), T = embeddings.dim(1), D = embeddings.dim(2);
    Tensor<S> out(Shape{B, D});
    std::vector<S> inv(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::span<const std::uint8_t> m(mask.data() + b * T, T);
        inv[b] = S(1) / static_cast<S>(detail::count_valid(m));
        for (std::size_t t = 0; t < T; ++t)
            if (m[t])
                for (std::size_t j = 0; j < D; ++j) out[b * D + j] += embeddings.value()[(b * T + t) * D + j];
        for (std::size_t j = 0; j < D; ++j) out[b * D + j] *= inv[b];
    }
    return make_op<S>("average_pool", std::move(out), {embeddings}, [embeddings, mask, inv, B, T, D](const Tensor<S>& g) {
        auto& de = embeddings.node().grad_buffer();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t)
                if (mask[b * T + t])
                    for (std::size_t j = 0; j < D; ++j) de[(b * T + t) * D + j] += g[b * D + j] * inv[b];
    });
}

template <class S>
Var<S> max_pool_op(const Var<S>& embeddings, const Mask& mask) {
    detail::check_batch(embeddings.shape(), mask, "max_pool");
    const std::size_t B = embeddings.dim(0), T = embeddings.dim(1), D = embeddings.dim(2);
    Tensor<S> out(Shape{B, D});
    std::vector<std::size_t> arg(B * D);
    for (std::size_t b = 0; b < B; ++b) {
        const S* e = embeddings.value().ptr() + b * T * D;
        const auto a = max_pool_argmax(e, T, D, std::span<const std::uint8_t>(mask.data() + b * T, T));
        for (std::size_t j = 0; j < D; ++j) {
            arg[b * D + j] = a[j];
            out[b * D + j] = e[a[j] * D + j];
        }
    }
    return make_op<S>("max_pool", std::move(out), {embeddings}, [embeddings, arg, B, T, D](const Tensor<S>& g) {
        auto& de = embeddings.node().grad_buffer();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < D; ++j) de[(b * T + arg[b * D + j]) * D + j] += g[b * D + j];
    });
}

}  // namespace usvid
