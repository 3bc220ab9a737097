#pragma once

// Clip container files, dataset manifests, frame sampling and padded batch collation.
//
// Clip file layout (all integers and floats little-endian):
//   bytes 0-3   magic "USVC"
//   bytes 4-5   format version (u16, currently 1)
//   bytes 6-21  T, C, H, W (u32 each)
//   bytes 22-   T*C*H*W float32 values, row-major T×C×H×W

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "usvid/random.hpp"
#include "usvid/tensor.hpp"

namespace usvid {

/// One video: T×C×H×W frames in [0,1] plus its label and bookkeeping.
struct VideoClip {
    std::string clip_id;
    std::string group_id;
    std::string split;
    float label = 0;
    Tensor<float> frames;

    std::size_t num_frames() const { return frames.rank() ? frames.dim(0) : 0; }
};

class ClipFileError : public Error {
public:
    enum class Kind { io, bad_magic, unsupported_version, bad_header, truncated };
    ClipFileError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline constexpr char kClipMagic[4] = {'U', 'S', 'V', 'C'};
inline constexpr std::uint16_t kClipVersion = 1;
inline constexpr std::size_t kClipHeaderBytes = 4 + 2 + 4 * 4;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::string& out, T v) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
    out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(const char* p) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ClipFileError(ClipFileError::Kind::io, "cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + path.string());
}

}  // namespace detail

inline std::string encode_clip(const Tensor<float>& frames) {
    if (frames.rank() != 4) throw Error("clip frames must be T×C×H×W, got " + shape_str(frames.shape()));
    std::string out;
    out.reserve(kClipHeaderBytes + frames.size() * 4);
    out.append(kClipMagic, 4);
    detail::put_le<std::uint16_t>(out, kClipVersion);
    for (std::size_t i = 0; i < 4; ++i) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(frames.dim(i)));
    if constexpr (std::endian::native == std::endian::little) {
        out.append(reinterpret_cast<const char*>(frames.ptr()), frames.size() * sizeof(float));
    } else {
        for (float v : frames.data()) detail::put_le(out, v);
    }
    return out;
}

inline Tensor<float> decode_clip(const std::string& bytes, const std::string& source = "<memory>") {
    using K = ClipFileError::Kind;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kClipMagic, 4) != 0)
        throw ClipFileError(K::bad_magic, source + ": not a clip file (bad magic)");
    if (bytes.size() < kClipHeaderBytes) throw ClipFileError(K::truncated, source + ": truncated header");
    const auto version = detail::get_le<std::uint16_t>(bytes.data() + 4);
    if (version != kClipVersion)
        throw ClipFileError(K::unsupported_version,
                            source + ": unsupported clip format version " + std::to_string(version));
    Shape shape(4);
    for (std::size_t i = 0; i < 4; ++i) shape[i] = detail::get_le<std::uint32_t>(bytes.data() + 6 + 4 * i);
    const std::size_t n = shape_numel(shape);
    const std::size_t payload = bytes.size() - kClipHeaderBytes;
    if (payload < n * 4)
        throw ClipFileError(K::truncated, source + ": payload holds " + std::to_string(payload / 4) +
                                              " floats, header declares " + std::to_string(n));
    if (payload > n * 4) throw ClipFileError(K::bad_header, source + ": trailing bytes after payload");
    std::vector<float> data(n);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(data.data(), bytes.data() + kClipHeaderBytes, n * 4);
    } else {
        for (std::size_t i = 0; i < n; ++i) data[i] = detail::get_le<float>(bytes.data() + kClipHeaderBytes + 4 * i);
    }
    return Tensor<float>(std::move(shape), std::move(data));
}

inline void write_clip(const Tensor<float>& frames, const std::filesystem::path& path) {
    detail::write_file_bytes(path, encode_clip(frames));
}

inline Tensor<float> read_clip(const std::filesystem::path& path) {
    return decode_clip(detail::read_file_bytes(path), path.string());
}

/// Reads only the header; returns the T×C×H×W shape.
inline Shape read_clip_shape(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ClipFileError(ClipFileError::Kind::io, "cannot open " + path.string());
    std::string head(kClipHeaderBytes, '\0');
    in.read(head.data(), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    if (head.size() < 4 || std::memcmp(head.data(), kClipMagic, 4) != 0)
        throw ClipFileError(ClipFileError::Kind::bad_magic, path.string() + ": not a clip file (bad magic)");
    if (head.size() < kClipHeaderBytes)
        throw ClipFileError(ClipFileError::Kind::truncated, path.string() + ": truncated header");
    Shape shape(4);
    for (std::size_t i = 0; i < 4; ++i) shape[i] = detail::get_le<std::uint32_t>(head.data() + 6 + 4 * i);
    return shape;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRow {
    std::string clip_id;
    std::string path;  // relative to the manifest's directory
    std::string task;
    double label = 0;
    std::string group_id;
    std::string split;
    std::size_t num_frames = 0;
};

inline constexpr const char* kManifestHeader = "clip_id,path,task,label,group_id,split,num_frames";

struct Manifest {
    std::vector<ManifestRow> rows;
    std::filesystem::path base_dir;  // directory the relative paths resolve against

    std::vector<ManifestRow> split_rows(const std::string& split) const {
        std::vector<ManifestRow> out;
        for (const auto& r : rows)
            if (r.split == split) out.push_back(r);
        return out;
    }

    /// Distinct group ids of a split, sorted.
    std::vector<std::string> groups(const std::string& split) const {
        std::set<std::string> g;
        for (const auto& r : rows)
            if (r.split == split) g.insert(r.group_id);
        return {g.begin(), g.end()};
    }
};

inline std::string format_label(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string manifest_to_csv(const Manifest& m) {
    std::ostringstream os;
    os << kManifestHeader << '\n';
    for (const auto& r : m.rows)
        os << r.clip_id << ',' << r.path << ',' << r.task << ',' << format_label(r.label) << ',' << r.group_id << ','
           << r.split << ',' << r.num_frames << '\n';
    return os.str();
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    detail::write_file_bytes(path, manifest_to_csv(m));
}

/// Structural checks: unique clip ids, known splits, no group spanning two splits.
inline void validate_manifest(const Manifest& m) {
    std::set<std::string> ids;
    std::map<std::string, std::string> group_split;
    for (const auto& r : m.rows) {
        if (!ids.insert(r.clip_id).second) throw Error("manifest: duplicate clip_id " + r.clip_id);
        if (r.split != "train" && r.split != "val" && r.split != "test")
            throw Error("manifest: clip " + r.clip_id + " has unknown split '" + r.split + "'");
        auto [it, inserted] = group_split.emplace(r.group_id, r.split);
        if (!inserted && it->second != r.split)
            throw Error("manifest: group " + r.group_id + " appears in splits " + it->second + " and " + r.split);
    }
}

/// Checks that every referenced clip file exists and its header frame count matches.
inline void validate_manifest_files(const Manifest& m) {
    for (const auto& r : m.rows) {
        const Shape s = read_clip_shape(m.base_dir / r.path);
        if (s[0] != r.num_frames)
            throw Error("manifest: clip " + r.clip_id + " declares " + std::to_string(r.num_frames) +
                        " frames, file has " + std::to_string(s[0]));
    }
}

inline Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw Error("manifest: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestHeader) throw Error("manifest: unexpected header '" + line + "'");
    Manifest m;
    m.base_dir = base_dir;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 7) throw Error("manifest line " + std::to_string(lineno) + ": expected 7 fields");
        ManifestRow r;
        r.clip_id = f[0];
        r.path = f[1];
        r.task = f[2];
        r.group_id = f[4];
        r.split = f[5];
        try {
            std::size_t used = 0;
            r.label = std::stod(f[3], &used);
            if (used != f[3].size()) throw std::invalid_argument("label");
            const long long nf = std::stoll(f[6], &used);
            if (used != f[6].size() || nf < 0) throw std::invalid_argument("num_frames");
            r.num_frames = static_cast<std::size_t>(nf);
        } catch (const std::exception&) {
            throw Error("manifest line " + std::to_string(lineno) + ": malformed label or num_frames");
        }
        m.rows.push_back(std::move(r));
    }
    validate_manifest(m);
    return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open manifest " + path.string());
    std::string text(std::istreambuf_iterator<char>(in), {});
    return parse_manifest(text, path.parent_path());
}

/// Loads the clips of one split (all splits when `split` is empty), in manifest order.
inline std::vector<VideoClip> load_clips(const Manifest& m, const std::string& split = "") {
    std::vector<VideoClip> out;
    for (const auto& r : m.rows) {
        if (!split.empty() && r.split != split) continue;
        VideoClip c;
        c.clip_id = r.clip_id;
        c.group_id = r.group_id;
        c.split = r.split;
        c.label = static_cast<float>(r.label);
        c.frames = read_clip(m.base_dir / r.path);
        if (c.num_frames() != r.num_frames)
            throw Error("manifest: clip " + r.clip_id + " frame count does not match its file");
        out.push_back(std::move(c));
    }
    return out;
}

/// Keeps `count` whole training groups chosen uniformly at random; val/test rows are
/// untouched. Groups are drawn as a prefix of one seeded shuffle, so the selection for
/// count k is contained in the selection for count k+1.
inline Manifest subsample_train_groups(const Manifest& m, std::size_t count, std::uint64_t seed) {
    auto groups = m.groups("train");
    if (count > groups.size())
        throw Error("subsample: requested " + std::to_string(count) + " groups, only " +
                    std::to_string(groups.size()) + " training groups exist");
    auto rng = make_rng(seed, {tag(Stream::subsample)});
    std::shuffle(groups.begin(), groups.end(), rng);
    const std::set<std::string> keep(groups.begin(), groups.begin() + static_cast<long>(count));
    Manifest out;
    out.base_dir = m.base_dir;
    for (const auto& r : m.rows)
        if (r.split != "train" || keep.count(r.group_id)) out.rows.push_back(r);
    return out;
}

inline Manifest subsample_train_groups(const Manifest& m, double fraction, std::uint64_t seed) {
    if (!(fraction > 0 && fraction <= 1)) throw Error("subsample: fraction must be in (0,1]");
    const auto n = m.groups("train").size();
    const auto count = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * double(n))));
    return subsample_train_groups(m, std::min(count, n), seed);
}

// ---------------------------------------------------------------------------
// Frame selection and batching

/// A fixed-length set of frames; valid frames are left-packed, padding frames are zero.
struct FrameSet {
    Tensor<float> frames;  // K×C×H×W
    Mask mask;             // K
    std::vector<std::size_t> source_index;  // original frame index per valid slot
};

inline Tensor<float> gather_frames(const Tensor<float>& frames, const std::vector<std::size_t>& idx,
                                   std::size_t total_slots) {
    const std::size_t F = frames.size() / frames.dim(0);
    Shape shape = frames.shape();
    shape[0] = total_slots;
    Tensor<float> out(shape);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(frames.ptr() + idx[i] * F, F, out.ptr() + i * F);
    return out;
}

inline FrameSet all_frames(const VideoClip& clip) {
    const std::size_t T = clip.num_frames();
    if (T == 0) throw Error("clip " + clip.clip_id + " has no frames");
    FrameSet fs;
    fs.frames = clip.frames;
    fs.mask.assign(T, 1);
    fs.source_index.resize(T);
    for (std::size_t t = 0; t < T; ++t) fs.source_index[t] = t;
    return fs;
}

/// Training-time frame sampling. T >= K: K distinct frames drawn uniformly without
/// replacement, kept in their original relative order. T < K: all T frames followed by
/// K - T zero padding slots.
template <class Rng>
FrameSet sample_frames(const VideoClip& clip, std::size_t K, Rng& rng) {
    if (K == 0) throw Error("sample_frames: K must be at least 1");
    const std::size_t T = clip.num_frames();
    if (T == 0) throw Error("sample_frames: clip " + clip.clip_id + " has no frames");
    std::vector<std::size_t> all(T);
    for (std::size_t t = 0; t < T; ++t) all[t] = t;
    std::vector<std::size_t> idx;
    if (T >= K) {
        idx.reserve(K);
        std::sample(all.begin(), all.end(), std::back_inserter(idx), K, rng);
    } else {
        idx = all;
    }
    FrameSet fs;
    fs.frames = gather_frames(clip.frames, idx, K);
    fs.mask.assign(K, 0);
    std::fill(fs.mask.begin(), fs.mask.begin() + static_cast<long>(idx.size()), 1);
    fs.source_index = std::move(idx);
    return fs;
}

/// Uniform temporal resampling to exactly `length` frames:
/// index_j = round(j * (T-1) / (length-1)).
inline std::vector<std::size_t> uniform_indices(std::size_t T, std::size_t length) {
    if (T == 0 || length == 0) throw Error("uniform_indices: empty clip or target length");
    std::vector<std::size_t> idx(length, 0);
    if (length == 1) return idx;
    for (std::size_t j = 0; j < length; ++j)
        idx[j] = static_cast<std::size_t>(std::llround(double(j) * double(T - 1) / double(length - 1)));
    return idx;
}

inline FrameSet resample_uniform(const VideoClip& clip, std::size_t length) {
    const auto idx = uniform_indices(clip.num_frames(), length);
    FrameSet fs;
    fs.frames = gather_frames(clip.frames, idx, length);
    fs.mask.assign(length, 1);
    fs.source_index = idx;
    return fs;
}

/// Zero-padded batch: frames B×T_max×C×H×W, mask B×T_max.
struct ClipBatch {
    Tensor<float> frames;
    Mask mask;
    std::vector<float> labels;
    std::vector<std::string> clip_ids;
    std::vector<std::vector<std::size_t>> source_index;

    std::size_t batch_size() const { return frames.dim(0); }
    std::size_t max_frames() const { return frames.dim(1); }
    std::size_t num_valid(std::size_t b) const {
        const auto T = max_frames();
        return static_cast<std::size_t>(std::count(mask.begin() + long(b * T), mask.begin() + long((b + 1) * T), 1));
    }
};

struct BatchItem {
    FrameSet frames;
    float label = 0;
    std::string clip_id;
};

inline ClipBatch collate(const std::vector<BatchItem>& items) {
    if (items.empty()) throw Error("collate: empty clip list");
    const Shape& s0 = items[0].frames.frames.shape();
    if (s0.size() != 4) throw Error("collate: frames must be T×C×H×W");
    std::size_t T_max = 0;
    for (const auto& it : items) {
        const Shape& s = it.frames.frames.shape();
        if (s.size() != 4 || s[1] != s0[1] || s[2] != s0[2] || s[3] != s0[3])
            throw Error("collate: clip " + it.clip_id + " has frame geometry " + shape_str(s) +
                        ", expected C×H×W of " + shape_str(s0));
        if (it.frames.mask.size() != s[0]) throw Error("collate: mask length mismatch for clip " + it.clip_id);
        T_max = std::max(T_max, s[0]);
    }
    const std::size_t B = items.size(), F = s0[1] * s0[2] * s0[3];
    ClipBatch batch;
    batch.frames = Tensor<float>(Shape{B, T_max, s0[1], s0[2], s0[3]});
    batch.mask.assign(B * T_max, 0);
    for (std::size_t b = 0; b < B; ++b) {
        const auto& fs = items[b].frames;
        std::size_t t = 0;
        for (std::size_t k = 0; k < fs.mask.size(); ++k) {
            if (!fs.mask[k]) continue;
            std::copy_n(fs.frames.ptr() + k * F, F, batch.frames.ptr() + (b * T_max + t) * F);
            batch.mask[b * T_max + t] = 1;
            ++t;
        }
        batch.labels.push_back(items[b].label);
        batch.clip_ids.push_back(items[b].clip_id);
        batch.source_index.push_back(fs.source_index);
    }
    return batch;
}

}  // namespace usvid
