#pragma once

// Attention-head ranking and prototype frame extraction.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "usvid/dataio.hpp"
#include "usvid/metrics.hpp"
#include "usvid/pooling.hpp"

namespace usvid {

struct HeadEntropy {
    std::size_t head = 0;
    double mean_entropy = 0;
};

/// Heads sorted by mean per-clip attention entropy, lowest first; ties keep head order.
inline std::vector<HeadEntropy> rank_heads_by_entropy(std::span<const AttentionRecord> records) {
    if (records.empty()) throw Error("rank_heads_by_entropy: no attention records");
    const std::size_t H = records[0].num_heads;
    std::vector<double> acc(H, 0.0);
    for (const auto& r : records) {
        if (r.num_heads != H)
            throw Error("rank_heads_by_entropy: records disagree on head count (" + std::to_string(H) + " vs " +
                        std::to_string(r.num_heads) + ")");
        const auto e = attention_entropy(r);
        for (std::size_t h = 0; h < H; ++h) acc[h] += e[h];
    }
    std::vector<HeadEntropy> out(H);
    for (std::size_t h = 0; h < H; ++h) out[h] = {h, acc[h] / double(records.size())};
    std::stable_sort(out.begin(), out.end(),
                     [](const HeadEntropy& a, const HeadEntropy& b) { return a.mean_entropy < b.mean_entropy; });
    return out;
}

struct PrototypeRow {
    std::size_t head = 0;
    std::size_t rank = 0;  // 0-based
    std::string clip_id;
    std::size_t frame_index = 0;
    double score = 0;   // raw alignment h·q, comparable across clips
    double weight = 0;  // within-clip softmax weight
    double entropy = 0;  // the head's mean entropy over the batch
};

/// The k frames of the batch with the largest raw score for `head`. records[i] belongs to
/// clip_ids[i]; frame indices are positions within the evaluated clip. Ties go to the
/// lexicographically smaller (clip_id, frame_index).
inline std::vector<PrototypeRow> top_attention_frames(std::span<const AttentionRecord> records,
                                                      std::span<const std::string> clip_ids, std::size_t head,
                                                      std::size_t k = 10) {
    if (records.empty()) throw Error("top_attention_frames: empty batch");
    if (clip_ids.size() != records.size()) throw Error("top_attention_frames: one clip id per record required");
    std::vector<PrototypeRow> rows;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (head >= r.num_heads)
            throw Error("top_attention_frames: head " + std::to_string(head) + " out of range (" +
                        std::to_string(r.num_heads) + " heads)");
        for (std::size_t t = 0; t < r.num_frames; ++t) {
            if (!r.mask[t]) continue;
            PrototypeRow p;
            p.head = head;
            p.clip_id = clip_ids[i];
            p.frame_index = t;
            p.score = r.score(head, t);
            p.weight = r.weight(head, t);
            rows.push_back(std::move(p));
        }
    }
    std::sort(rows.begin(), rows.end(), [](const PrototypeRow& a, const PrototypeRow& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.clip_id != b.clip_id) return a.clip_id < b.clip_id;
        return a.frame_index < b.frame_index;
    });
    if (rows.size() > k) rows.resize(k);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].rank = i;
    return rows;
}

struct PrototypeReport {
    std::vector<HeadEntropy> heads;  // selected heads, lowest entropy first
    std::vector<PrototypeRow> rows;
};

/// Top-k prototypes for each of the `num_heads` lowest-entropy heads.
inline PrototypeReport prototype_report(std::span<const AttentionRecord> records, std::span<const std::string> clip_ids,
                                        std::size_t num_heads, std::size_t k) {
    PrototypeReport rep;
    auto ranked = rank_heads_by_entropy(records);
    if (ranked.size() > num_heads) ranked.resize(num_heads);
    for (const auto& he : ranked) {
        auto rows = top_attention_frames(records, clip_ids, he.head, k);
        for (auto& r : rows) {
            r.entropy = he.mean_entropy;
            rep.rows.push_back(std::move(r));
        }
    }
    rep.heads = std::move(ranked);
    return rep;
}

inline std::string prototype_csv(const PrototypeReport& rep) {
    std::ostringstream os;
    os << "head,rank,clip_id,frame_index,score,weight,entropy\n";
    char buf[256];
    for (const auto& r : rep.rows) {
        std::snprintf(buf, sizeof buf, ",%zu,%.9g,%.9g,%.9g\n", r.frame_index, r.score, r.weight, r.entropy);
        os << r.head << ',' << r.rank << ',' << r.clip_id << buf;
    }
    return os.str();
}

inline std::string prototype_frame_name(const PrototypeRow& r) {
    return "head" + std::to_string(r.head) + "_rank" + std::to_string(r.rank) + "_" + r.clip_id + "_f" +
           std::to_string(r.frame_index) + ".usvc";
}

/// Writes each prototype frame as a single-frame clip file into dir.
inline void export_prototype_frames(const PrototypeReport& rep, const std::vector<VideoClip>& clips,
                                    const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& r : rep.rows) {
        auto it = std::find_if(clips.begin(), clips.end(), [&](const VideoClip& c) { return c.clip_id == r.clip_id; });
        if (it == clips.end()) throw Error("export_prototype_frames: unknown clip " + r.clip_id);
        if (r.frame_index >= it->frames.dim(0)) throw Error("export_prototype_frames: frame index out of range");
        write_clip(gather_frames(it->frames, {r.frame_index}, 1), dir / prototype_frame_name(r));
    }
}

}  // namespace usvid
