#pragma once

// Video-level models. The USVN path encodes frames independently, pools them over time
// (attention, average or max), applies dropout and a single linear layer. The temporal
// baseline consumes ordered fixed-length clips through factorized (2D spatial, then 1D
// temporal) convolution blocks.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "usvid/autodiff.hpp"
#include "usvid/dataio.hpp"
#include "usvid/encoder.hpp"
#include "usvid/ops.hpp"
#include "usvid/pooling.hpp"
#include "usvid/random.hpp"

namespace usvid {

enum class Architecture { usvn, temporal };
enum class PoolingKind { attention, average, max };
enum class HeadKind { binary_logit, ef_volumes, scalar_regression };

NLOHMANN_JSON_SERIALIZE_ENUM(Architecture, {{Architecture::usvn, "usvn"}, {Architecture::temporal, "temporal"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PoolingKind, {{PoolingKind::attention, "attention"},
                                           {PoolingKind::average, "average"},
                                           {PoolingKind::max, "max"}})
NLOHMANN_JSON_SERIALIZE_ENUM(HeadKind, {{HeadKind::binary_logit, "binary_logit"},
                                        {HeadKind::ef_volumes, "ef_volumes"},
                                        {HeadKind::scalar_regression, "scalar_regression"}})

struct TemporalBaselineConfig {
    std::vector<std::size_t> widths{16, 32, 64};
    std::size_t temporal_kernel = 3;
    std::size_t clip_length = 32;
};

struct ModelConfig {
    Architecture architecture = Architecture::usvn;
    EncoderConfig encoder;
    std::size_t num_heads = 16;
    PoolingKind pooling = PoolingKind::attention;
    HeadKind head = HeadKind::binary_logit;
    double dropout = 0.5;
    bool scale_scores = false;
    TemporalBaselineConfig temporal;

    std::size_t head_outputs() const { return head == HeadKind::ef_volumes ? 2 : 1; }

    void validate() const {
        if (!(dropout >= 0 && dropout < 1)) throw Error("model: dropout must be in [0,1)");
        if (!(encoder.input_std > 0) || !std::isfinite(encoder.input_mean))
            throw Error("model: invalid input normalization");
        if (architecture == Architecture::usvn) {
            encoder.validate();
            if (pooling == PoolingKind::attention) head_width(encoder.embed_dim, num_heads);
        } else {
            const auto& t = temporal;
            if (t.widths.empty() || t.temporal_kernel == 0 || t.clip_length == 0)
                throw Error("temporal baseline: empty configuration");
            if (t.temporal_kernel % 2 == 0) throw Error("temporal baseline: temporal kernel must be odd");
            if (encoder.in_channels == 0 || encoder.image_size % (std::size_t{1} << t.widths.size()) != 0)
                throw Error("temporal baseline: image size must be divisible by 2^blocks");
        }
    }
};

// JSON mapping. Missing keys keep their defaults; unknown keys are rejected by the CLI
// config loader, not here.
inline void to_json(nlohmann::ordered_json& j, const EncoderConfig& c) {
    j = nlohmann::ordered_json{{"in_channels", c.in_channels},
                               {"image_size", c.image_size},
                               {"embed_dim", c.embed_dim},
                               {"widths", c.widths},
                               {"input_mean", c.input_mean},
                               {"input_std", c.input_std}};
}
inline void from_json(const nlohmann::ordered_json& j, EncoderConfig& c) {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.image_size = j.value("image_size", c.image_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.widths = j.value("widths", c.widths);
    c.input_mean = j.value("input_mean", c.input_mean);
    c.input_std = j.value("input_std", c.input_std);
}
inline void to_json(nlohmann::ordered_json& j, const TemporalBaselineConfig& c) {
    j = nlohmann::ordered_json{
        {"widths", c.widths}, {"temporal_kernel", c.temporal_kernel}, {"clip_length", c.clip_length}};
}
inline void from_json(const nlohmann::ordered_json& j, TemporalBaselineConfig& c) {
    c.widths = j.value("widths", c.widths);
    c.temporal_kernel = j.value("temporal_kernel", c.temporal_kernel);
    c.clip_length = j.value("clip_length", c.clip_length);
}
inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
    j = nlohmann::ordered_json{{"architecture", c.architecture}, {"encoder", c.encoder},
                               {"num_heads", c.num_heads},       {"pooling", c.pooling},
                               {"head", c.head},                 {"dropout", c.dropout},
                               {"scale_scores", c.scale_scores}, {"temporal", c.temporal}};
}
namespace detail {

// The enum serializers map unknown strings to the first enumerator; reject them instead.
template <class E>
void enum_field(const nlohmann::ordered_json& j, const char* key, E& out) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    E e{};
    v.get_to(e);
    if (nlohmann::ordered_json(e) != v) throw Error(std::string("model: invalid value for '") + key + "': " + v.dump());
    out = e;
}

}  // namespace detail

inline void from_json(const nlohmann::ordered_json& j, ModelConfig& c) {
    detail::enum_field(j, "architecture", c.architecture);
    if (j.contains("encoder")) j.at("encoder").get_to(c.encoder);
    c.num_heads = j.value("num_heads", c.num_heads);
    detail::enum_field(j, "pooling", c.pooling);
    detail::enum_field(j, "head", c.head);
    c.dropout = j.value("dropout", c.dropout);
    c.scale_scores = j.value("scale_scores", c.scale_scores);
    if (j.contains("temporal")) j.at("temporal").get_to(c.temporal);
}

// ---------------------------------------------------------------------------
// Volume decomposition head

inline constexpr double kVolumeFloor = 0.1;

/// Maps two unconstrained head outputs to positive volumes: softplus(y) + 0.1.
template <class S>
std::pair<S, S> volume_head_map(S y1, S y2) {
    const S floor = static_cast<S>(kVolumeFloor);
    return {detail::stable_softplus(y1) + floor, detail::stable_softplus(y2) + floor};
}

/// EF = 1 - ESV / EDV.
template <class S>
S ef_from_volumes(S esv, S edv) {
    if (!(esv > 0) || !(edv > 0)) throw Error("ef_from_volumes: volumes must be positive");
    return S(1) - esv / edv;
}

// ---------------------------------------------------------------------------
// Parameters

/// Fresh parameters for a configuration. Deterministic in (cfg, seed).
inline ParamMap<float> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    auto rng = make_rng(seed, {tag(Stream::init)});
    ParamMap<float> params;
    std::size_t feat = 0;
    if (cfg.architecture == Architecture::usvn) {
        init_encoder_params(cfg.encoder, params, rng);
        feat = cfg.encoder.embed_dim;
        if (cfg.pooling == PoolingKind::attention) {
            const std::size_t d = head_width(feat, cfg.num_heads);
            std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(d)));
            Tensor<float> q(Shape{cfg.num_heads, d});
            for (auto& v : q.data()) v = static_cast<float>(dist(rng));
            params["pooling.queries"] = std::move(q);
        }
    } else {
        std::size_t in = cfg.encoder.in_channels;
        const std::size_t k = cfg.temporal.temporal_kernel;
        for (std::size_t i = 0; i < cfg.temporal.widths.size(); ++i) {
            const std::size_t out = cfg.temporal.widths[i];
            const std::string p = "temporal.block" + std::to_string(i);
            params[p + ".spatial.weight"] =
                detail::uniform_tensor<float>(Shape{out, in, 3, 3}, std::sqrt(6.0 / double(in * 9)), rng);
            params[p + ".spatial.bias"] = Tensor<float>(Shape{out});
            params[p + ".temporal.weight"] =
                detail::uniform_tensor<float>(Shape{out, k, out}, std::sqrt(6.0 / double(out * k)), rng);
            params[p + ".temporal.bias"] = Tensor<float>(Shape{out});
            in = out;
        }
        feat = in;
    }
    const std::size_t outs = cfg.head_outputs();
    params["head.weight"] = detail::uniform_tensor<float>(Shape{outs, feat}, 1.0 / std::sqrt(double(feat)), rng);
    params["head.bias"] = Tensor<float>(Shape{outs});
    return params;
}

// ---------------------------------------------------------------------------
// Forward passes

struct ForwardMode {
    bool training = false;
    std::uint64_t dropout_seed = 0;

    static ForwardMode eval() { return {}; }
    static ForwardMode train(std::uint64_t seed) { return {true, seed}; }
};

template <class S>
struct ForwardOutput {
    Var<S> raw;         // B×head_outputs linear-layer outputs
    Var<S> prediction;  // B: log-odds, ejection fraction or scalar
    Var<S> esv, edv;    // B, volume head only
    std::vector<AttentionRecord> records;  // attention pooling only
};

namespace detail {

template <class S>
ForwardOutput<S> apply_head(const ModelConfig& cfg, const VarMap<S>& vars, const Var<S>& features,
                            const ForwardMode& mode) {
    auto rng = make_rng(mode.dropout_seed, {tag(Stream::dropout)});
    Var<S> h = dropout(features, cfg.dropout, mode.training, rng);
    ForwardOutput<S> out;
    out.raw = linear(h, param(vars, "head.weight"), param(vars, "head.bias"));
    const std::size_t B = features.dim(0);
    if (cfg.head == HeadKind::ef_volumes) {
        const S floor = static_cast<S>(kVolumeFloor);
        out.esv = reshape(add_scalar(softplus(slice_cols(out.raw, 0, 1)), floor), Shape{B});
        out.edv = reshape(add_scalar(softplus(slice_cols(out.raw, 1, 2)), floor), Shape{B});
        out.prediction = rsub_scalar(S(1), div(out.esv, out.edv));
    } else {
        out.prediction = reshape(out.raw, Shape{B});
    }
    return out;
}

}  // namespace detail

/// Encoder, temporal pooling, dropout and linear head.
template <class S>
ForwardOutput<S> usvn_forward(const ModelConfig& cfg, const VarMap<S>& vars, const ClipBatch& batch,
                              const ForwardMode& mode) {
    const auto emb = encode_frames(cfg.encoder, vars, batch);
    Var<S> pooled;
    std::vector<AttentionRecord> records;
    switch (cfg.pooling) {
        case PoolingKind::attention: {
            auto r = attention_pool_op(emb.values, param(vars, "pooling.queries"), emb.mask, cfg.scale_scores);
            pooled = r.pooled;
            records = std::move(r.records);
            break;
        }
        case PoolingKind::average: pooled = average_pool_op(emb.values, emb.mask); break;
        case PoolingKind::max: pooled = max_pool_op(emb.values, emb.mask); break;
    }
    auto out = detail::apply_head(cfg, vars, pooled, mode);
    out.records = std::move(records);
    return out;
}

/// Factorized spatiotemporal baseline. Every clip must hold exactly clip_length valid frames.
template <class S>
ForwardOutput<S> temporal_baseline_forward(const ModelConfig& cfg, const VarMap<S>& vars, const ClipBatch& batch,
                                           const ForwardMode& mode) {
    const Shape& s = batch.frames.shape();
    if (s.size() != 5) throw Error("temporal baseline: batch frames must be B×T×C×H×W");
    const std::size_t B = s[0], T = s[1];
    if (B == 0) throw Error("temporal baseline: empty batch");
    if (T != cfg.temporal.clip_length)
        throw Error("temporal baseline: expected clips of " + std::to_string(cfg.temporal.clip_length) +
                    " frames, got " + std::to_string(T));
    for (auto m : batch.mask)
        if (!m) throw Error("temporal baseline: clips must be resampled to full length (padding found)");
    if (s[2] != cfg.encoder.in_channels || s[3] != cfg.encoder.image_size || s[4] != cfg.encoder.image_size)
        throw Error("temporal baseline: frame shape does not match configuration");

    Tensor<S> x(Shape{B * T, s[2], s[3], s[4]});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = cfg.encoder.template normalize<S>(batch.frames[i]);
    Var<S> h = Var<S>::leaf(std::move(x));
    std::size_t t_len = T, hw = s[3];
    const std::size_t k = cfg.temporal.temporal_kernel;
    for (std::size_t i = 0; i < cfg.temporal.widths.size(); ++i) {
        const std::string p = "temporal.block" + std::to_string(i);
        const std::size_t width = cfg.temporal.widths[i];
        // spatial: (B*T)×C×H×W -> (B*T)×O×H/2×W/2
        h = relu(conv2d(h, param(vars, p + ".spatial.weight"), param(vars, p + ".spatial.bias"), 2, 1));
        hw /= 2;
        // temporal: B×T×O×P, stride 2 after the first block
        h = reshape(h, Shape{B, t_len, width, hw * hw});
        const std::size_t stride = i == 0 ? 1 : 2;
        h = relu(conv_temporal(h, param(vars, p + ".temporal.weight"), param(vars, p + ".temporal.bias"), stride,
                               k / 2));
        t_len = h.dim(1);
        if (i + 1 < cfg.temporal.widths.size()) h = reshape(h, Shape{B * t_len, width, hw, hw});
    }
    Var<S> pooled = spacetime_avg_pool(h);
    return detail::apply_head(cfg, vars, pooled, mode);
}

template <class S>
ForwardOutput<S> forward(const ModelConfig& cfg, const VarMap<S>& vars, const ClipBatch& batch,
                         const ForwardMode& mode) {
    return cfg.architecture == Architecture::usvn ? usvn_forward(cfg, vars, batch, mode)
                                                  : temporal_baseline_forward(cfg, vars, batch, mode);
}

/// How a clip is turned into model input at evaluation time: all frames for USVN,
/// uniform resampling to the fixed clip length for the temporal baseline.
inline FrameSet eval_frames(const ModelConfig& cfg, const VideoClip& clip) {
    return cfg.architecture == Architecture::usvn ? all_frames(clip)
                                                  : resample_uniform(clip, cfg.temporal.clip_length);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian): "USVM", u16 version, u32 config length, config JSON bytes,
// u32 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
// u32 extents[rank], float32 data.

inline constexpr char kCheckpointMagic[4] = {'U', 'S', 'V', 'M'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::ordered_json config;  // echo of the configuration that produced the parameters
    ParamMap<float> params;

    ModelConfig model_config() const {
        ModelConfig m;
        config.at("model").get_to(m);
        return m;
    }
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::string out(kCheckpointMagic, 4);
    detail::put_le<std::uint16_t>(out, kCheckpointVersion);
    const std::string cfg = ck.config.dump();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.params.size()));
    for (const auto& [name, t] : ck.params) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (float v : t.data()) detail::put_le(out, v);
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "<memory>") {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (pos + n > bytes.size()) throw Error(source + ": truncated checkpoint");
    };
    auto u32 = [&]() {
        need(4);
        const auto v = detail::get_le<std::uint32_t>(bytes.data() + pos);
        pos += 4;
        return v;
    };
    need(6);
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw Error(source + ": not a checkpoint (bad magic)");
    if (detail::get_le<std::uint16_t>(bytes.data() + 4) != kCheckpointVersion)
        throw Error(source + ": unsupported checkpoint version");
    pos = 6;
    Checkpoint ck;
    const auto cfg_len = u32();
    need(cfg_len);
    ck.config = nlohmann::ordered_json::parse(bytes.substr(pos, cfg_len));
    pos += cfg_len;
    const auto count = u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = u32();
        need(name_len);
        std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        const auto rank = u32();
        Shape shape(rank);
        for (auto& d : shape) d = u32();
        const std::size_t n = shape_numel(shape);
        need(n * 4);
        std::vector<float> data(n);
        for (std::size_t k = 0; k < n; ++k) data[k] = detail::get_le<float>(bytes.data() + pos + 4 * k);
        pos += n * 4;
        ck.params.emplace(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
    }
    if (pos != bytes.size()) throw Error(source + ": trailing bytes in checkpoint");
    return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    return decode_checkpoint(std::string(std::istreambuf_iterator<char>(in), {}), path.string());
}

}  // namespace usvid
