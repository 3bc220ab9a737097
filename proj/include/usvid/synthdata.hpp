#pragma once

// Deterministic synthetic video tasks.
//
//   keyframe    binary; a bright colored blob appears in k random frames of positive clips
//               on top of a dim distractor present in every clip. Order-independent.
//   area_ratio  regression; a disk pulses in radius, label = 1 - min area / max area over
//               the rendered frames. Order-independent.
//   motion      binary; a blob orbits the image center, label 1 = counterclockwise. Clips
//               are generated in mirrored pairs (a counterclockwise clip and its exact
//               time reversal), so both classes contain exactly the same frame sets.
//
// Every clip is a pure function of (config, seed, clip index). Clips are grouped into
// synthetic "patients" that share nuisance parameters (background level, static
// texture, blob placement prior).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "usvid/dataio.hpp"
#include "usvid/random.hpp"
#include "usvid/tensor.hpp"

namespace usvid {

enum class TaskKind { keyframe, area_ratio, motion };

inline std::string task_name(TaskKind t) {
    switch (t) {
        case TaskKind::keyframe: return "keyframe";
        case TaskKind::area_ratio: return "area_ratio";
        case TaskKind::motion: return "motion";
    }
    return "?";
}

inline TaskKind parse_task(const std::string& s) {
    if (s == "keyframe") return TaskKind::keyframe;
    if (s == "area_ratio") return TaskKind::area_ratio;
    if (s == "motion") return TaskKind::motion;
    throw Error("unknown task '" + s + "' (expected keyframe, area_ratio or motion)");
}

inline bool task_is_binary(TaskKind t) { return t != TaskKind::area_ratio; }

/// Spatial parameters are fractions of the image side length.
struct GenConfig {
    std::size_t n_clips = 500;
    std::size_t channels = 3;
    std::size_t image_size = 32;
    std::size_t t_min = 16;
    std::size_t t_max = 64;
    double noise_std = 0.1;
    std::optional<std::size_t> n_groups;  // default n_clips / 5

    // keyframe
    double blob_radius = 0.15;
    double bright_intensity = 0.9;
    double dim_intensity = 0.3;
    std::size_t k_min = 1;
    std::size_t k_max = 5;

    // area_ratio
    double disk_radius = 0.25;  // r0
    double amp_min = 0.1;
    double amp_max = 0.4;
    double freq_min = 1.0;  // cycles per clip
    double freq_max = 2.0;
    double disk_intensity = 0.6;

    // motion
    double orbit_radius = 0.3;
    double angular_speed = 2 * std::numbers::pi / 16;  // radians per frame
    double motion_intensity = 0.8;

    std::size_t groups() const { return n_groups ? *n_groups : std::max<std::size_t>(1, n_clips / 5); }

    void validate(TaskKind task) const {
        if (n_clips == 0) throw Error("gen: n_clips must be positive");
        if (channels == 0 || image_size < 4) throw Error("gen: invalid frame geometry");
        if (t_min == 0 || t_min > t_max) throw Error("gen: invalid frame-count range");
        if (noise_std < 0) throw Error("gen: noise std must be non-negative");
        if (groups() == 0 || groups() > n_clips) throw Error("gen: group count must be in [1, n_clips]");
        const double px = double(image_size);
        switch (task) {
            case TaskKind::keyframe:
                if (k_min == 0 || k_min > k_max) throw Error("gen: invalid key-frame count range");
                if (k_min > t_min) throw Error("gen: key-frame minimum exceeds shortest clip");
                if (blob_radius <= 0) throw Error("gen: blob radius must be positive");
                break;
            case TaskKind::area_ratio:
                if (!(amp_min >= 0 && amp_min <= amp_max && amp_max < 1)) throw Error("gen: invalid amplitude range");
                if (!(freq_min > 0 && freq_min <= freq_max)) throw Error("gen: invalid frequency range");
                if (disk_radius * px * (1 - amp_max) < 1.0)
                    throw Error("gen: smallest disk radius r0(1-A) is below one pixel");
                break;
            case TaskKind::motion:
                if (orbit_radius <= 0 || angular_speed <= 0 || blob_radius <= 0)
                    throw Error("gen: invalid motion parameters");
                if (angular_speed >= std::numbers::pi) throw Error("gen: angular speed must be below pi per frame");
                break;
        }
    }
};

/// Generative ground truth recorded alongside each clip.
struct ClipMeta {
    // keyframe
    std::vector<std::size_t> key_frames;
    double blob_x = 0, blob_y = 0;
    // area_ratio
    double amplitude = 0, frequency = 0, phase = 0, radius = 0;
    std::size_t min_area = 0, max_area = 0;
    // motion
    int direction = 0;  // +1 counterclockwise, -1 clockwise
    double start_phase = 0;
};

struct LabeledClip {
    VideoClip clip;
    ClipMeta meta;
};

namespace detail {

struct GroupNuisance {
    double background = 0.2;
    double prior_x = 0, prior_y = 0;  // pixel coordinates
    std::vector<std::array<double, 3>> texture;  // (x, y, sigma) faint static bumps
};

inline GroupNuisance group_nuisance(const GenConfig& cfg, std::uint64_t seed, std::size_t g) {
    auto rng = make_rng(seed, {tag(Stream::group), g});
    std::uniform_real_distribution<double> u(0, 1);
    const double S = double(cfg.image_size);
    GroupNuisance n;
    n.background = 0.1 + 0.15 * u(rng);
    n.prior_x = S * (0.3 + 0.4 * u(rng));
    n.prior_y = S * (0.3 + 0.4 * u(rng));
    for (int i = 0; i < 3; ++i) n.texture.push_back({S * u(rng), S * u(rng), S * (0.08 + 0.08 * u(rng))});
    return n;
}

// Adds a Gaussian bump (sigma = radius/2) to one frame, channel-weighted.
inline void add_blob(float* frame, const GenConfig& cfg, double cx, double cy, double radius, double intensity,
                     const std::vector<double>& channel_gain) {
    const std::size_t S = cfg.image_size;
    const double sigma = radius / 2;
    const double inv = 1.0 / (2 * sigma * sigma);
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
            const double v = intensity * std::exp(-(dx * dx + dy * dy) * inv);
            for (std::size_t c = 0; c < cfg.channels; ++c) frame[(c * S + y) * S + x] += float(v * channel_gain[c]);
        }
}

inline std::vector<double> gray(const GenConfig& cfg) { return std::vector<double>(cfg.channels, 1.0); }

// Color-only signal: the first channel of a multi-channel frame.
inline std::vector<double> colored(const GenConfig& cfg) {
    std::vector<double> g(cfg.channels, 0.0);
    g[0] = 1.0;
    return g;
}

inline void fill_background(Tensor<float>& frames, const GenConfig& cfg, const GroupNuisance& g, bool texture) {
    const std::size_t T = frames.dim(0), F = frames.size() / T;
    std::fill(frames.ptr(), frames.ptr() + F, float(g.background));
    if (texture)
        for (const auto& b : g.texture) add_blob(frames.ptr(), cfg, b[0], b[1], 2 * b[2], 0.12, gray(cfg));
    for (std::size_t t = 1; t < T; ++t) std::copy_n(frames.ptr(), F, frames.ptr() + t * F);
}

inline void add_noise_and_clamp(Tensor<float>& frames, double noise_std, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, noise_std > 0 ? noise_std : 1.0);
    for (auto& v : frames.data()) {
        double x = v;
        if (noise_std > 0) x += n(rng);
        v = static_cast<float>(std::clamp(x, 0.0, 1.0));
    }
}

inline std::size_t draw_length(const GenConfig& cfg, std::mt19937_64& rng) {
    return std::uniform_int_distribution<std::size_t>(cfg.t_min, cfg.t_max)(rng);
}

inline std::string group_name(std::size_t g) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "g%04zu", g);
    return buf;
}

inline std::string clip_name(TaskKind task, std::size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%05zu", task_name(task).c_str(), i);
    return buf;
}

/// Exactly floor(n/2) positives, placed by a seeded shuffle.
inline std::vector<int> balanced_labels(std::size_t n, std::uint64_t seed) {
    std::vector<int> labels(n, 0);
    std::fill(labels.begin(), labels.begin() + long(n / 2), 1);
    auto rng = make_rng(seed, {tag(Stream::label)});
    std::shuffle(labels.begin(), labels.end(), rng);
    return labels;
}

}  // namespace detail

/// Pixel count of a hard-edged disk (pixel centers within `radius` of the center).
inline std::size_t disk_pixel_area(std::size_t image_size, double cx, double cy, double radius) {
    std::size_t n = 0;
    for (std::size_t y = 0; y < image_size; ++y)
        for (std::size_t x = 0; x < image_size; ++x) {
            const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
            if (dx * dx + dy * dy <= radius * radius) ++n;
        }
    return n;
}

inline LabeledClip gen_keyframe_clip(const GenConfig& cfg, std::uint64_t seed, std::size_t i, int label) {
    const std::size_t g = i % cfg.groups();
    const auto nuis = detail::group_nuisance(cfg, seed, g);
    auto rng = make_rng(seed, {tag(Stream::clip), i});
    std::uniform_real_distribution<double> u(0, 1);
    const double S = double(cfg.image_size), radius = cfg.blob_radius * S;
    const std::size_t T = detail::draw_length(cfg, rng);

    LabeledClip out;
    out.clip.frames = Tensor<float>(Shape{T, cfg.channels, cfg.image_size, cfg.image_size});
    detail::fill_background(out.clip.frames, cfg, nuis, true);
    const std::size_t F = out.clip.frames.size() / T;

    const double dx = S * (0.15 + 0.7 * u(rng)), dy = S * (0.15 + 0.7 * u(rng));
    for (std::size_t t = 0; t < T; ++t)
        detail::add_blob(out.clip.frames.ptr() + t * F, cfg, dx, dy, radius, cfg.dim_intensity, detail::gray(cfg));

    std::normal_distribution<double> jitter(0.0, 0.1 * S);
    const double bx = std::clamp(nuis.prior_x + jitter(rng), radius, S - radius);
    const double by = std::clamp(nuis.prior_y + jitter(rng), radius, S - radius);
    if (label == 1) {
        const std::size_t k_hi = std::min(cfg.k_max, T);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(cfg.k_min, k_hi)(rng);
        std::vector<std::size_t> all(T);
        for (std::size_t t = 0; t < T; ++t) all[t] = t;
        std::sample(all.begin(), all.end(), std::back_inserter(out.meta.key_frames), k, rng);
        for (auto t : out.meta.key_frames)
            detail::add_blob(out.clip.frames.ptr() + t * F, cfg, bx, by, radius, cfg.bright_intensity,
                             detail::colored(cfg));
        out.meta.blob_x = bx;
        out.meta.blob_y = by;
    }
    detail::add_noise_and_clamp(out.clip.frames, cfg.noise_std, rng);
    out.clip.label = float(label);
    out.clip.group_id = detail::group_name(g);
    out.clip.clip_id = detail::clip_name(TaskKind::keyframe, i);
    return out;
}

inline LabeledClip gen_area_ratio_clip(const GenConfig& cfg, std::uint64_t seed, std::size_t i) {
    const std::size_t g = i % cfg.groups();
    const auto nuis = detail::group_nuisance(cfg, seed, g);
    auto rng = make_rng(seed, {tag(Stream::clip), i});
    std::uniform_real_distribution<double> u(0, 1);
    const double S = double(cfg.image_size);
    const std::size_t T = detail::draw_length(cfg, rng);

    LabeledClip out;
    auto& m = out.meta;
    m.amplitude = cfg.amp_min + (cfg.amp_max - cfg.amp_min) * u(rng);
    m.frequency = cfg.freq_min + (cfg.freq_max - cfg.freq_min) * u(rng);
    m.phase = 2 * std::numbers::pi * u(rng);
    m.radius = cfg.disk_radius * S;
    // group-level center offset
    const double cx = S / 2 + 0.1 * (nuis.prior_x - S / 2), cy = S / 2 + 0.1 * (nuis.prior_y - S / 2);

    out.clip.frames = Tensor<float>(Shape{T, cfg.channels, cfg.image_size, cfg.image_size});
    detail::fill_background(out.clip.frames, cfg, nuis, false);
    const std::size_t side = cfg.image_size, F = out.clip.frames.size() / T;
    m.min_area = std::numeric_limits<std::size_t>::max();
    m.max_area = 0;
    for (std::size_t t = 0; t < T; ++t) {
        const double r =
            m.radius * (1 + m.amplitude * std::sin(2 * std::numbers::pi * m.frequency * double(t) / double(T) + m.phase));
        float* frame = out.clip.frames.ptr() + t * F;
        std::size_t area = 0;
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
                if (dx * dx + dy * dy > r * r) continue;
                ++area;
                for (std::size_t c = 0; c < cfg.channels; ++c)
                    frame[(c * side + y) * side + x] += float(cfg.disk_intensity);
            }
        m.min_area = std::min(m.min_area, area);
        m.max_area = std::max(m.max_area, area);
    }
    detail::add_noise_and_clamp(out.clip.frames, cfg.noise_std, rng);
    out.clip.label = static_cast<float>(1.0 - double(m.min_area) / double(m.max_area));
    out.clip.group_id = detail::group_name(g);
    out.clip.clip_id = detail::clip_name(TaskKind::area_ratio, i);
    return out;
}

/// Counterclockwise orbit clip for pair index p; its time reversal is the clockwise twin.
inline LabeledClip gen_orbit_clip(const GenConfig& cfg, std::uint64_t seed, std::size_t p) {
    const std::size_t g = p % cfg.groups();
    const auto nuis = detail::group_nuisance(cfg, seed, g);
    auto rng = make_rng(seed, {tag(Stream::clip), p});
    std::uniform_real_distribution<double> u(0, 1);
    const double S = double(cfg.image_size);
    const std::size_t T = detail::draw_length(cfg, rng);

    LabeledClip out;
    out.meta.direction = 1;
    out.meta.start_phase = 2 * std::numbers::pi * u(rng);
    out.clip.frames = Tensor<float>(Shape{T, cfg.channels, cfg.image_size, cfg.image_size});
    detail::fill_background(out.clip.frames, cfg, nuis, true);
    const std::size_t F = out.clip.frames.size() / T;
    const double R = cfg.orbit_radius * S;
    for (std::size_t t = 0; t < T; ++t) {
        const double theta = out.meta.start_phase + cfg.angular_speed * double(t);
        // y grows downward in image rows, so counterclockwise on screen subtracts sin.
        detail::add_blob(out.clip.frames.ptr() + t * F, cfg, S / 2 + R * std::cos(theta), S / 2 - R * std::sin(theta),
                         cfg.blob_radius * S, cfg.motion_intensity, detail::gray(cfg));
    }
    detail::add_noise_and_clamp(out.clip.frames, cfg.noise_std, rng);
    out.clip.label = 1.0f;
    out.clip.group_id = detail::group_name(g);
    return out;
}

inline Tensor<float> reverse_frames(const Tensor<float>& frames) {
    const std::size_t T = frames.dim(0), F = frames.size() / T;
    Tensor<float> out(frames.shape());
    for (std::size_t t = 0; t < T; ++t) std::copy_n(frames.ptr() + (T - 1 - t) * F, F, out.ptr() + t * F);
    return out;
}

inline LabeledClip reverse_clip(const LabeledClip& in) {
    LabeledClip out = in;
    out.clip.frames = reverse_frames(in.clip.frames);
    out.clip.label = 1.0f - in.clip.label;
    out.meta.direction = -in.meta.direction;
    return out;
}

inline std::vector<LabeledClip> gen_keyframe_task(const GenConfig& cfg, std::uint64_t seed) {
    cfg.validate(TaskKind::keyframe);
    const auto labels = detail::balanced_labels(cfg.n_clips, seed);
    std::vector<LabeledClip> out;
    out.reserve(cfg.n_clips);
    for (std::size_t i = 0; i < cfg.n_clips; ++i) out.push_back(gen_keyframe_clip(cfg, seed, i, labels[i]));
    return out;
}

inline std::vector<LabeledClip> gen_area_ratio_task(const GenConfig& cfg, std::uint64_t seed) {
    cfg.validate(TaskKind::area_ratio);
    std::vector<LabeledClip> out;
    out.reserve(cfg.n_clips);
    for (std::size_t i = 0; i < cfg.n_clips; ++i) out.push_back(gen_area_ratio_clip(cfg, seed, i));
    return out;
}

/// Clips 2p and 2p+1 are an orbit and its time reversal; which of the two comes first is
/// seeded. Both members of a pair share a group, hence a split.
inline std::vector<LabeledClip> gen_motion_direction_task(const GenConfig& cfg, std::uint64_t seed) {
    cfg.validate(TaskKind::motion);
    const auto first_ccw = detail::balanced_labels((cfg.n_clips + 1) / 2, seed);
    std::vector<LabeledClip> out;
    out.reserve(cfg.n_clips);
    for (std::size_t p = 0; 2 * p < cfg.n_clips; ++p) {
        LabeledClip ccw = gen_orbit_clip(cfg, seed, p);
        LabeledClip cw = reverse_clip(ccw);
        std::array<LabeledClip*, 2> order{&ccw, &cw};
        if (!first_ccw[p]) std::swap(order[0], order[1]);
        for (std::size_t k = 0; k < 2 && out.size() < cfg.n_clips; ++k) {
            order[k]->clip.clip_id = detail::clip_name(TaskKind::motion, out.size());
            out.push_back(std::move(*order[k]));
        }
    }
    return out;
}

inline std::vector<LabeledClip> generate_task(TaskKind task, const GenConfig& cfg, std::uint64_t seed) {
    switch (task) {
        case TaskKind::keyframe: return gen_keyframe_task(cfg, seed);
        case TaskKind::area_ratio: return gen_area_ratio_task(cfg, seed);
        case TaskKind::motion: return gen_motion_direction_task(cfg, seed);
    }
    return {};
}

/// Assigns whole groups to train/val/test with the given fractions (test takes the rest).
inline void assign_group_splits(std::vector<LabeledClip>& clips, std::uint64_t seed, double train_frac = 0.70,
                                double val_frac = 0.15) {
    std::vector<std::string> groups;
    for (const auto& c : clips) groups.push_back(c.clip.group_id);
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    auto rng = make_rng(seed, {tag(Stream::split)});
    std::shuffle(groups.begin(), groups.end(), rng);
    const std::size_t G = groups.size();
    const auto n_train = static_cast<std::size_t>(std::llround(train_frac * double(G)));
    const auto n_val = std::min(G - n_train, static_cast<std::size_t>(std::llround(val_frac * double(G))));
    std::map<std::string, std::string> split;
    for (std::size_t k = 0; k < G; ++k) split[groups[k]] = k < n_train ? "train" : k < n_train + n_val ? "val" : "test";
    for (auto& c : clips) c.clip.split = split[c.clip.group_id];
}

/// Writes clips/<clip_id>.usvc files and manifest.csv into `dir`.
inline Manifest write_dataset(const std::vector<LabeledClip>& clips, TaskKind task, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "clips");
    Manifest m;
    m.base_dir = dir;
    for (const auto& c : clips) {
        ManifestRow r;
        r.clip_id = c.clip.clip_id;
        r.path = "clips/" + c.clip.clip_id + ".usvc";
        r.task = task_name(task);
        r.label = c.clip.label;
        r.group_id = c.clip.group_id;
        r.split = c.clip.split;
        r.num_frames = c.clip.num_frames();
        write_clip(c.clip.frames, dir / r.path);
        m.rows.push_back(std::move(r));
    }
    validate_manifest(m);
    write_manifest(m, dir / "manifest.csv");
    return m;
}

}  // namespace usvid
