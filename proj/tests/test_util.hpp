#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "usvid/dataio.hpp"
#include "usvid/model.hpp"
#include "usvid/tensor.hpp"

namespace testutil {

using namespace usvid;

template <class S = float>
Tensor<S> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<S>(u(rng));
    return t;
}

inline VideoClip random_clip(std::size_t T, std::size_t C, std::size_t S, std::mt19937_64& rng,
                             std::string id = "clip", float label = 0.0f) {
    VideoClip c;
    c.clip_id = std::move(id);
    c.group_id = "g0";
    c.split = "train";
    c.label = label;
    c.frames = random_tensor(Shape{T, C, S, S}, rng, 0.0, 1.0);
    return c;
}

/// Small USVN configuration used throughout the unit tests.
inline ModelConfig tiny_usvn(std::size_t D = 32, std::size_t heads = 4, std::size_t image = 8) {
    ModelConfig m;
    m.encoder.in_channels = 3;
    m.encoder.image_size = image;
    m.encoder.embed_dim = D;
    m.encoder.widths = {4, 8};
    m.num_heads = heads;
    m.dropout = 0.0;
    return m;
}

inline ModelConfig tiny_temporal(std::size_t clip_length = 8, std::size_t image = 8) {
    ModelConfig m;
    m.architecture = Architecture::temporal;
    m.encoder.in_channels = 3;
    m.encoder.image_size = image;
    m.temporal.widths = {4, 6, 8};
    m.temporal.clip_length = clip_length;
    m.dropout = 0.0;
    return m;
}

inline ClipBatch batch_of(const std::vector<VideoClip>& clips) {
    std::vector<BatchItem> items;
    for (const auto& c : clips) items.push_back({all_frames(c), c.label, c.clip_id});
    return collate(items);
}

class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("usvid_test_" + std::to_string(rd()) + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
