#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "test_util.hpp"
#include "usvid/dataio.hpp"

using namespace usvid;
using testutil::random_clip;

namespace {

ClipFileError::Kind decode_error_kind(const std::string& bytes) {
    try {
        decode_clip(bytes);
    } catch (const ClipFileError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected a ClipFileError";
    return ClipFileError::Kind::io;
}

Manifest toy_manifest() {
    // 6 train groups with 1-3 clips each, plus val and test groups.
    Manifest m;
    int id = 0;
    auto add = [&](const std::string& g, const std::string& split, int n) {
        for (int i = 0; i < n; ++i) {
            ManifestRow r;
            r.clip_id = "c" + std::to_string(id++);
            r.path = "clips/" + r.clip_id + ".usvc";
            r.task = "keyframe";
            r.label = id % 2;
            r.group_id = g;
            r.split = split;
            r.num_frames = 3;
            m.rows.push_back(r);
        }
    };
    for (int g = 0; g < 6; ++g) add("t" + std::to_string(g), "train", 1 + g % 3);
    add("v0", "val", 2);
    add("s0", "test", 2);
    return m;
}

std::set<std::string> train_groups(const Manifest& m) {
    const auto g = m.groups("train");
    return {g.begin(), g.end()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Clip files

TEST(ClipFile, RoundtripIsBitwiseIdentity) {
    std::mt19937_64 rng(1);
    const auto clip = random_clip(7, 3, 8, rng);
    testutil::TempDir dir;
    write_clip(clip.frames, dir.path() / "a.usvc");
    const auto back = read_clip(dir.path() / "a.usvc");
    EXPECT_EQ(back, clip.frames);
    EXPECT_EQ(read_clip_shape(dir.path() / "a.usvc"), (Shape{7, 3, 8, 8}));
    EXPECT_EQ(encode_clip(back), encode_clip(clip.frames));
}

TEST(ClipFile, HeaderLayout) {
    const Tensor<float> f(Shape{2, 1, 1, 3}, {1, 2, 3, 4, 5, 6});
    const auto bytes = encode_clip(f);
    ASSERT_EQ(bytes.size(), kClipHeaderBytes + 6 * 4);
    EXPECT_EQ(bytes.substr(0, 4), "USVC");
    EXPECT_EQ(std::uint8_t(bytes[4]), 1);  // version, little-endian
    EXPECT_EQ(std::uint8_t(bytes[5]), 0);
    EXPECT_EQ(std::uint8_t(bytes[6]), 2);  // T
    EXPECT_EQ(std::uint8_t(bytes[18]), 3);  // W
    const unsigned char one_le[4] = {0x00, 0x00, 0x80, 0x3f};  // 1.0f
    EXPECT_EQ(std::memcmp(bytes.data() + kClipHeaderBytes, one_le, 4), 0);
}

TEST(ClipFile, DistinctErrors) {
    std::mt19937_64 rng(2);
    const auto bytes = encode_clip(random_clip(2, 1, 4, rng).frames);
    EXPECT_EQ(decode_error_kind("XXXX" + bytes.substr(4)), ClipFileError::Kind::bad_magic);
    EXPECT_EQ(decode_error_kind(bytes.substr(0, bytes.size() - 4)), ClipFileError::Kind::truncated);
    auto v2 = bytes;
    v2[4] = 2;
    EXPECT_EQ(decode_error_kind(v2), ClipFileError::Kind::unsupported_version);
    EXPECT_EQ(decode_error_kind(bytes.substr(0, 10)), ClipFileError::Kind::truncated);
    EXPECT_THROW(read_clip("/nonexistent/clip.usvc"), ClipFileError);
}

// ---------------------------------------------------------------------------
// Manifests

TEST(Manifest, CsvRoundtrip) {
    const auto m = toy_manifest();
    const auto text = manifest_to_csv(m);
    EXPECT_EQ(text.substr(0, text.find('\n')), "clip_id,path,task,label,group_id,split,num_frames");
    const auto back = parse_manifest(text, "/data");
    EXPECT_EQ(manifest_to_csv(back), text);
    EXPECT_EQ(back.base_dir, std::filesystem::path("/data"));
}

TEST(Manifest, ValidationErrors) {
    auto m = toy_manifest();
    m.rows[1].clip_id = m.rows[0].clip_id;
    EXPECT_THROW(validate_manifest(m), Error);
    m = toy_manifest();
    m.rows.back().group_id = "t0";  // a train group leaking into test
    EXPECT_THROW(validate_manifest(m), Error);
    m = toy_manifest();
    m.rows[0].split = "holdout";
    EXPECT_THROW(validate_manifest(m), Error);
    EXPECT_THROW(parse_manifest("id,path\n", "."), Error);
    EXPECT_THROW(parse_manifest(std::string(kManifestHeader) + "\na,b,c,notanumber,g,train,3\n", "."), Error);
    EXPECT_THROW(parse_manifest(std::string(kManifestHeader) + "\na,b,c,1,g,train\n", "."), Error);
}

TEST(Manifest, FileValidationAndLoading) {
    testutil::TempDir dir;
    std::mt19937_64 rng(3);
    auto m = toy_manifest();
    m.base_dir = dir.path();
    std::filesystem::create_directories(dir.path() / "clips");
    for (const auto& r : m.rows) write_clip(random_clip(3, 1, 4, rng).frames, dir.path() / r.path);
    write_manifest(m, dir.path() / "manifest.csv");
    const auto back = read_manifest(dir.path() / "manifest.csv");
    validate_manifest_files(back);
    const auto val = load_clips(back, "val");
    ASSERT_EQ(val.size(), 2u);
    EXPECT_EQ(val[0].split, "val");
    EXPECT_EQ(load_clips(back).size(), m.rows.size());

    write_clip(random_clip(4, 1, 4, rng).frames, dir.path() / m.rows[0].path);
    EXPECT_THROW(validate_manifest_files(back), Error);
}

TEST(Subsample, FractionOneIsIdentity) {
    const auto m = toy_manifest();
    EXPECT_EQ(manifest_to_csv(subsample_train_groups(m, 1.0, 5)), manifest_to_csv(m));
}

TEST(Subsample, CountOneKeepsExactlyOneGroup) {
    const auto m = toy_manifest();
    const auto r = subsample_train_groups(m, std::size_t{1}, 5);
    EXPECT_EQ(r.groups("train").size(), 1u);
    EXPECT_EQ(r.split_rows("val").size(), 2u);
    EXPECT_EQ(r.split_rows("test").size(), 2u);
    const auto g = r.groups("train")[0];
    std::size_t expected = 0;
    for (const auto& row : m.rows) expected += row.group_id == g;
    EXPECT_EQ(r.split_rows("train").size(), expected);
}

TEST(Subsample, SelectionsAreNested) {
    const auto m = toy_manifest();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::set<std::string> prev;
        for (std::size_t k = 1; k <= 6; ++k) {
            const auto cur = train_groups(subsample_train_groups(m, k, seed));
            EXPECT_EQ(cur.size(), k);
            EXPECT_TRUE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
            prev = cur;
        }
    }
}

TEST(Subsample, Errors) {
    const auto m = toy_manifest();
    EXPECT_THROW(subsample_train_groups(m, std::size_t{7}, 0), Error);
    EXPECT_THROW(subsample_train_groups(m, 0.0, 0), Error);
    EXPECT_THROW(subsample_train_groups(m, 1.5, 0), Error);
}

// ---------------------------------------------------------------------------
// Frame sampling

TEST(SampleFrames, LongClipGivesDistinctFrames) {
    std::mt19937_64 rng(6);
    auto clip = random_clip(100, 1, 2, rng);
    for (std::size_t t = 0; t < 100; ++t) clip.frames[t * 4] = float(t);  // tag frames
    const auto fs = sample_frames(clip, 32, rng);
    EXPECT_EQ(fs.mask, Mask(32, 1));
    const std::set<std::size_t> distinct(fs.source_index.begin(), fs.source_index.end());
    EXPECT_EQ(distinct.size(), 32u);
    for (std::size_t k = 0; k < 32; ++k) EXPECT_EQ(fs.frames[k * 4], float(fs.source_index[k]));
}

TEST(SampleFrames, ShortClipIsPadded) {
    std::mt19937_64 rng(7);
    const auto clip = random_clip(20, 1, 2, rng);
    const auto fs = sample_frames(clip, 32, rng);
    ASSERT_EQ(fs.mask.size(), 32u);
    for (std::size_t k = 0; k < 32; ++k) EXPECT_EQ(fs.mask[k], k < 20 ? 1 : 0);
    for (std::size_t i = 20 * 4; i < fs.frames.size(); ++i) EXPECT_EQ(fs.frames[i], 0.0f);
}

TEST(SampleFrames, KEqualsTUsesEveryFrame) {
    std::mt19937_64 rng(8);
    const auto clip = random_clip(12, 1, 2, rng);
    const auto fs = sample_frames(clip, 12, rng);
    auto idx = fs.source_index;
    std::sort(idx.begin(), idx.end());
    for (std::size_t t = 0; t < 12; ++t) EXPECT_EQ(idx[t], t);
    EXPECT_EQ(fs.mask, Mask(12, 1));
}

TEST(SampleFrames, DeterministicGivenGeneratorState) {
    std::mt19937_64 a(9), b(9), data(1);
    const auto clip = random_clip(50, 1, 2, data);
    EXPECT_EQ(sample_frames(clip, 10, a).source_index, sample_frames(clip, 10, b).source_index);
}

TEST(SampleFrames, Errors) {
    std::mt19937_64 rng(10);
    VideoClip empty;
    EXPECT_THROW(sample_frames(empty, 4, rng), Error);
    EXPECT_THROW(sample_frames(random_clip(3, 1, 2, rng), 0, rng), Error);
}

TEST(SampleFrames, UniformlyDistributed) {
    std::mt19937_64 rng(11);
    const auto clip = random_clip(10, 1, 1, rng);
    std::vector<int> counts(10, 0);
    for (int trial = 0; trial < 5000; ++trial)
        for (auto t : sample_frames(clip, 3, rng).source_index) ++counts[t];
    for (int c : counts) EXPECT_NEAR(c, 1500, 150);
}

// ---------------------------------------------------------------------------
// Collation

TEST(Collate, MixedLengthsAreLeftPacked) {
    std::mt19937_64 rng(12);
    const auto a = random_clip(3, 2, 4, rng, "a", 1.0f), b = random_clip(5, 2, 4, rng, "b", 0.0f);
    const auto batch = testutil::batch_of({a, b});
    EXPECT_EQ(batch.frames.shape(), (Shape{2, 5, 2, 4, 4}));
    EXPECT_EQ(batch.mask, (Mask{1, 1, 1, 0, 0, 1, 1, 1, 1, 1}));
    EXPECT_EQ(batch.labels, (std::vector<float>{1.0f, 0.0f}));
    EXPECT_EQ(batch.clip_ids, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(batch.num_valid(0), 3u);
    const std::size_t F = 32;
    for (std::size_t i = 0; i < 3 * F; ++i) EXPECT_EQ(batch.frames[i], a.frames[i]);
    for (std::size_t i = 3 * F; i < 5 * F; ++i) EXPECT_EQ(batch.frames[i], 0.0f);
}

TEST(Collate, SingleClipHasFullMask) {
    std::mt19937_64 rng(13);
    const auto batch = testutil::batch_of({random_clip(4, 1, 2, rng)});
    EXPECT_EQ(batch.mask, Mask(4, 1));
}

TEST(Collate, PaddedSamplesStayLeftPacked) {
    std::mt19937_64 rng(14);
    const auto a = random_clip(2, 1, 2, rng, "a"), b = random_clip(6, 1, 2, rng, "b");
    const auto batch = collate({{sample_frames(a, 4, rng), 0, "a"}, {sample_frames(b, 4, rng), 1, "b"}});
    EXPECT_EQ(batch.mask, (Mask{1, 1, 0, 0, 1, 1, 1, 1}));
}

TEST(Collate, Errors) {
    std::mt19937_64 rng(15);
    EXPECT_THROW(collate({}), Error);
    EXPECT_THROW(testutil::batch_of({random_clip(2, 1, 4, rng), random_clip(2, 1, 8, rng)}), Error);
    EXPECT_THROW(testutil::batch_of({random_clip(2, 1, 4, rng), random_clip(2, 3, 4, rng)}), Error);
}

TEST(UniformIndices, Examples) {
    EXPECT_EQ(uniform_indices(5, 5), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
    EXPECT_EQ(uniform_indices(100, 3), (std::vector<std::size_t>{0, 50, 99}));  // 49.5 rounds up
    EXPECT_EQ(uniform_indices(7, 1), (std::vector<std::size_t>{0}));
    EXPECT_THROW(uniform_indices(0, 3), Error);
}
