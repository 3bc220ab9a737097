#pragma once

// Per-frame CNN: a stack of (3×3 conv, stride 2, relu) blocks, global average pooling,
// and a learned linear projection to the embedding width.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "usvid/autodiff.hpp"
#include "usvid/dataio.hpp"
#include "usvid/ops.hpp"

namespace usvid {

struct EncoderConfig {
    std::size_t in_channels = 3;
    std::size_t image_size = 32;
    std::size_t embed_dim = 256;
    std::vector<std::size_t> widths{16, 32, 64, 128};
    // Pixels enter the network as (x - input_mean) / input_std.
    double input_mean = 0.5;
    double input_std = 0.25;

    template <class S>
    S normalize(float x) const {
        return static_cast<S>((double(x) - input_mean) / input_std);
    }

    void validate() const {
        if (in_channels == 0 || embed_dim == 0 || widths.empty()) throw Error("encoder: empty configuration");
        if (!(input_std > 0) || !std::isfinite(input_mean)) throw Error("encoder: invalid input normalization");
        const std::size_t factor = std::size_t{1} << widths.size();
        if (image_size == 0 || image_size % factor != 0)
            throw Error("encoder: image size " + std::to_string(image_size) + " is not divisible by 2^" +
                        std::to_string(widths.size()));
    }
};

/// B×T×D frame embeddings; rows at masked positions are zero and never read downstream.
template <class S>
struct FrameEmbeddings {
    Var<S> values;
    Mask mask;
};

namespace detail {

template <class S>
Tensor<S> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<S>(dist(rng));
    return t;
}

}  // namespace detail

/// Fan-in scaled uniform initialization: conv weights U(±sqrt(6/fan_in)), the
/// projection U(±sqrt(3/fan_in)), zero biases.
inline void init_encoder_params(const EncoderConfig& cfg, ParamMap<float>& params, std::mt19937_64& rng) {
    cfg.validate();
    std::size_t in = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
        const std::size_t out = cfg.widths[i], fan_in = in * 9;
        const std::string p = "encoder.conv" + std::to_string(i);
        params[p + ".weight"] = detail::uniform_tensor<float>(Shape{out, in, 3, 3}, std::sqrt(6.0 / fan_in), rng);
        params[p + ".bias"] = Tensor<float>(Shape{out});
        in = out;
    }
    params["encoder.proj.weight"] =
        detail::uniform_tensor<float>(Shape{cfg.embed_dim, in}, std::sqrt(3.0 / double(in)), rng);
    params["encoder.proj.bias"] = Tensor<float>(Shape{cfg.embed_dim});
}

template <class S>
const Var<S>& param(const VarMap<S>& vars, const std::string& name) {
    auto it = vars.find(name);
    if (it == vars.end()) throw Error("missing parameter " + name);
    return it->second;
}

/// Embeds every valid frame of the batch independently. Padding frames are skipped,
/// so a frame's embedding depends only on that frame's pixels.
template <class S>
FrameEmbeddings<S> encode_frames(const EncoderConfig& cfg, const VarMap<S>& vars, const ClipBatch& batch) {
    cfg.validate();
    const Shape& s = batch.frames.shape();
    if (s.size() != 5) throw Error("encode_frames: batch frames must be B×T×C×H×W");
    const std::size_t B = s[0], T = s[1];
    if (B == 0 || T == 0) throw Error("encode_frames: empty batch");
    if (s[2] != cfg.in_channels || s[3] != cfg.image_size || s[4] != cfg.image_size)
        throw Error("encode_frames: frame shape " + shape_str({s[2], s[3], s[4]}) + " does not match encoder " +
                    shape_str({cfg.in_channels, cfg.image_size, cfg.image_size}));
    if (batch.mask.size() != B * T) throw Error("encode_frames: mask must be B×T");

    const std::size_t F = s[2] * s[3] * s[4];
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < B * T; ++i)
        if (batch.mask[i]) rows.push_back(i);
    if (rows.empty()) throw Error("encode_frames: batch has no valid frames");

    Tensor<S> x(Shape{rows.size(), s[2], s[3], s[4]});
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t f = 0; f < F; ++f) x[r * F + f] = cfg.template normalize<S>(batch.frames[rows[r] * F + f]);

    Var<S> h = Var<S>::leaf(std::move(x));
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
        const std::string p = "encoder.conv" + std::to_string(i);
        h = relu(conv2d(h, param(vars, p + ".weight"), param(vars, p + ".bias"), 2, 1));
    }
    h = global_avg_pool2d(h);
    h = linear(h, param(vars, "encoder.proj.weight"), param(vars, "encoder.proj.bias"));
    h = scatter_rows(h, rows, B * T);
    return {reshape(h, Shape{B, T, cfg.embed_dim}), batch.mask};
}

}  // namespace usvid
