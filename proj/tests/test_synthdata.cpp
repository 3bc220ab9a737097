#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "test_util.hpp"
#include "usvid/synthdata.hpp"

using namespace usvid;

namespace {

GenConfig small_cfg(std::size_t n = 40) {
    GenConfig g;
    g.n_clips = n;
    g.image_size = 16;
    g.t_min = 8;
    g.t_max = 16;
    return g;
}

// Upper regularized incomplete gamma Q(a, x) by series / continued fraction.
double gamma_q(double a, double x) {
    if (x <= 0) return 1.0;
    const double lg = std::lgamma(a);
    if (x < a + 1) {
        double sum = 1.0 / a, term = sum;
        for (int n = 1; n < 500; ++n) {
            term *= x / (a + n);
            sum += term;
            if (term < sum * 1e-15) break;
        }
        return 1.0 - sum * std::exp(-x + a * std::log(x) - lg);
    }
    double b = x + 1 - a, c = 1e300, d = 1 / b, h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -i * (i - a);
        b += 2;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1) < 1e-15) break;
    }
    return std::exp(-x + a * std::log(x) - lg) * h;
}

// Blob angle (screen counterclockwise from +x) of one frame, from the intensity-weighted
// centroid of channel 0 above the frame median.
double blob_angle(const float* frame, std::size_t S) {
    std::vector<float> v(frame, frame + S * S);
    auto sorted = v;
    std::nth_element(sorted.begin(), sorted.begin() + long(sorted.size() / 2), sorted.end());
    const double med = sorted[sorted.size() / 2];
    double wx = 0, wy = 0, w = 0;
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const double a = std::max(0.0, double(v[y * S + x]) - med - 0.2);
            wx += a * (double(x) + 0.5);
            wy += a * (double(y) + 0.5);
            w += a;
        }
    return std::atan2(double(S) / 2 - wy / w, wx / w - double(S) / 2);
}

// Min and max disk areas of noise-free frames: pixels clearly above the background.
std::pair<std::size_t, std::size_t> pixel_area_extremes(const Tensor<float>& frames, std::size_t S) {
    const std::size_t T = frames.dim(0), F = frames.size() / T, P = S * S;
    std::size_t lo = P, hi = 0;
    for (std::size_t t = 0; t < T; ++t) {
        const float* f = frames.ptr() + t * F;
        const float bg = *std::min_element(f, f + P);
        std::size_t area = 0;
        for (std::size_t i = 0; i < P; ++i) area += f[i] > bg + 0.3f;
        lo = std::min(lo, area);
        hi = std::max(hi, area);
    }
    return {lo, hi};
}

}  // namespace

TEST(ChiSquareHelper, MatchesTabulatedQuantile) {
    // 0.99 quantile of chi-square with 11 degrees of freedom is 24.725.
    EXPECT_NEAR(gamma_q(11 / 2.0, 24.725 / 2), 0.01, 1e-4);
    EXPECT_NEAR(gamma_q(1, 2.0), std::exp(-2.0), 1e-12);
}

TEST(Synth, GenerationIsDeterministic) {
    for (auto task : {TaskKind::keyframe, TaskKind::area_ratio, TaskKind::motion}) {
        const auto a = generate_task(task, small_cfg(), 7);
        const auto b = generate_task(task, small_cfg(), 7);
        const auto c = generate_task(task, small_cfg(), 8);
        ASSERT_EQ(a.size(), 40u);
        bool any_diff = false;
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_EQ(a[i].clip.frames, b[i].clip.frames);
            EXPECT_EQ(a[i].clip.label, b[i].clip.label);
            EXPECT_EQ(a[i].clip.clip_id, b[i].clip.clip_id);
            any_diff = any_diff || !(a[i].clip.frames == c[i].clip.frames);
        }
        EXPECT_TRUE(any_diff) << task_name(task);
    }
}

TEST(Synth, ClipsArePureFunctionsOfTheirIndex) {
    // A prefix of a longer run equals a shorter run.
    auto cfg = small_cfg(10);
    cfg.n_groups = 2;
    auto big = cfg;
    big.n_clips = 30;
    const auto a = gen_area_ratio_task(cfg, 3);
    const auto b = gen_area_ratio_task(big, 3);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(a[i].clip.frames, b[i].clip.frames);
}

TEST(Synth, PixelsAreClampedToUnitRange) {
    for (auto task : {TaskKind::keyframe, TaskKind::area_ratio, TaskKind::motion})
        for (const auto& c : generate_task(task, small_cfg(10), 1))
            for (float v : c.clip.frames.data()) {
                ASSERT_GE(v, 0.0f);
                ASSERT_LE(v, 1.0f);
            }
}

TEST(Keyframe, ClassBalanceAndLabels) {
    for (std::size_t n : {9u, 40u, 101u}) {
        const auto clips = gen_keyframe_task(small_cfg(n), 2);
        std::size_t pos = 0;
        for (const auto& c : clips) {
            ASSERT_TRUE(c.clip.label == 0.0f || c.clip.label == 1.0f);
            pos += c.clip.label == 1.0f;
            EXPECT_EQ(c.clip.label == 1.0f, !c.meta.key_frames.empty());
        }
        EXPECT_EQ(pos, n / 2);
        if (n >= 40) {
            EXPECT_GE(double(pos) / n, 0.45);
            EXPECT_LE(double(pos) / n, 0.55);
        }
    }
}

TEST(Keyframe, MetadataListsTheFramesThatCarryTheBlob) {
    auto cfg = small_cfg(30);
    cfg.noise_std = 0;
    const std::size_t S = cfg.image_size, P = S * S;
    for (const auto& c : gen_keyframe_task(cfg, 4)) {
        if (c.clip.label == 0) continue;
        const auto& keys = c.meta.key_frames;
        ASSERT_GE(keys.size(), 1u);
        ASSERT_LE(keys.size(), 5u);
        const std::set<std::size_t> key_set(keys.begin(), keys.end());
        EXPECT_EQ(key_set.size(), keys.size());
        const std::size_t T = c.clip.num_frames(), F = c.clip.frames.size() / T;
        std::size_t plain = T;
        for (std::size_t t = 0; t < T && plain == T; ++t)
            if (!key_set.count(t)) plain = t;
        ASSERT_LT(plain, T);
        const float* ref = c.clip.frames.ptr() + plain * F;
        const std::size_t cx = std::size_t(c.meta.blob_x), cy = std::size_t(c.meta.blob_y);
        for (std::size_t t = 0; t < T; ++t) {
            const float* f = c.clip.frames.ptr() + t * F;
            if (!key_set.count(t)) {
                EXPECT_TRUE(std::equal(f, f + F, ref)) << c.clip.clip_id << " frame " << t;
                continue;
            }
            // Key frames brighten channel 0 at the blob and leave the other channels alone.
            EXPECT_GT(f[cy * S + cx], ref[cy * S + cx]);
            for (std::size_t i = P; i < F; ++i) ASSERT_EQ(f[i], ref[i]);
            const double radius = cfg.blob_radius * double(S);
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x) {
                    if (f[y * S + x] == ref[y * S + x]) continue;
                    const double dx = x + 0.5 - c.meta.blob_x, dy = y + 0.5 - c.meta.blob_y;
                    EXPECT_LT(std::sqrt(dx * dx + dy * dy), 4 * radius);
                }
        }
    }
}

TEST(Keyframe, KeyFramesStandOutUnderNoise) {
    const auto cfg = small_cfg(30);
    const std::size_t S = cfg.image_size;
    for (const auto& c : gen_keyframe_task(cfg, 5)) {
        if (c.clip.label == 0) continue;
        const std::size_t T = c.clip.num_frames(), F = c.clip.frames.size() / T;
        const std::size_t pix = std::size_t(c.meta.blob_y) * S + std::size_t(c.meta.blob_x);
        const std::set<std::size_t> keys(c.meta.key_frames.begin(), c.meta.key_frames.end());
        double key_mean = 0, other_mean = 0;
        for (std::size_t t = 0; t < T; ++t) (keys.count(t) ? key_mean : other_mean) += c.clip.frames[t * F + pix];
        key_mean /= double(keys.size());
        other_mean /= double(T - keys.size());
        EXPECT_GT(key_mean - other_mean, 0.3) << c.clip.clip_id;
    }
}

TEST(AreaRatio, ZeroAmplitudeGivesLabelZero) {
    auto cfg = small_cfg(10);
    cfg.amp_min = cfg.amp_max = 0;
    for (const auto& c : gen_area_ratio_task(cfg, 6)) EXPECT_EQ(c.clip.label, 0.0f);
}

TEST(AreaRatio, LabelMatchesAreasRecomputedFromPixels) {
    auto cfg = small_cfg(20);
    cfg.noise_std = 0;
    for (const auto& c : gen_area_ratio_task(cfg, 7)) {
        const auto [lo, hi] = pixel_area_extremes(c.clip.frames, cfg.image_size);
        EXPECT_EQ(lo, c.meta.min_area);
        EXPECT_EQ(hi, c.meta.max_area);
        EXPECT_EQ(c.clip.label, static_cast<float>(1.0 - double(lo) / double(hi)));
        EXPECT_GE(c.clip.label, 0.0f);
        EXPECT_LT(c.clip.label, 1.0f);
    }
}

TEST(AreaRatio, LabelApproachesTheClosedFormWhenExtremesAreSampled) {
    auto cfg = small_cfg(20);
    cfg.image_size = 64;
    cfg.t_min = cfg.t_max = 64;
    for (const auto& c : gen_area_ratio_task(cfg, 8)) {
        const double A = c.meta.amplitude;
        const double closed = 1 - (1 - A) * (1 - A) / ((1 + A) * (1 + A));
        EXPECT_NEAR(c.clip.label, closed, 0.05) << "A=" << A;
    }
}

TEST(AreaRatio, LabelIsInvariantToFrameOrder) {
    auto cfg = small_cfg(10);
    cfg.noise_std = 0;
    std::mt19937_64 rng(9);
    for (const auto& c : gen_area_ratio_task(cfg, 9)) {
        auto f = c.clip.frames;
        const std::size_t T = f.dim(0), F = f.size() / T;
        std::vector<std::size_t> perm(T);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor<float> shuffled(f.shape());
        for (std::size_t t = 0; t < T; ++t) std::copy_n(f.ptr() + perm[t] * F, F, shuffled.ptr() + t * F);
        const auto [lo, hi] = pixel_area_extremes(shuffled, cfg.image_size);
        EXPECT_EQ(c.clip.label, static_cast<float>(1.0 - double(lo) / double(hi)));
    }
}

TEST(AreaRatio, TooSmallDiskIsAnError) {
    auto cfg = small_cfg(4);
    cfg.disk_radius = 0.05;
    cfg.amp_max = 0.4;
    EXPECT_THROW(gen_area_ratio_task(cfg, 0), Error);
}

TEST(Motion, MirroredPairsAndLabels) {
    const auto clips = gen_motion_direction_task(small_cfg(40), 10);
    ASSERT_EQ(clips.size(), 40u);
    std::size_t pos = 0;
    for (std::size_t p = 0; p < 20; ++p) {
        const auto& a = clips[2 * p];
        const auto& b = clips[2 * p + 1];
        ASSERT_TRUE(a.clip.label == 0.0f || a.clip.label == 1.0f);
        EXPECT_EQ(a.clip.label, 1.0f - b.clip.label);
        EXPECT_EQ(a.clip.group_id, b.clip.group_id);
        EXPECT_EQ(reverse_frames(a.clip.frames), b.clip.frames);
        EXPECT_EQ(a.meta.direction, a.clip.label == 1.0f ? 1 : -1);
        pos += (a.clip.label == 1.0f) + (b.clip.label == 1.0f);
    }
    EXPECT_EQ(pos, 20u);
}

TEST(Motion, ReversingAClipFlipsItsLabel) {
    for (const auto& c : gen_motion_direction_task(small_cfg(10), 11)) {
        const auto r = reverse_clip(c);
        EXPECT_EQ(r.clip.label, 1.0f - c.clip.label);
        EXPECT_EQ(reverse_clip(r).clip.frames, c.clip.frames);
    }
}

TEST(Motion, RenderedBlobMovesInTheLabelledDirection) {
    auto cfg = small_cfg(20);
    cfg.image_size = 32;
    cfg.noise_std = 0.02;
    const std::size_t S = cfg.image_size;
    for (const auto& c : gen_motion_direction_task(cfg, 12)) {
        const std::size_t T = c.clip.num_frames(), F = c.clip.frames.size() / T;
        double turn = 0;
        for (std::size_t t = 1; t < T; ++t) {
            double d = blob_angle(c.clip.frames.ptr() + t * F, S) - blob_angle(c.clip.frames.ptr() + (t - 1) * F, S);
            d = std::remainder(d, 2 * std::numbers::pi);
            turn += d;
        }
        EXPECT_EQ(turn > 0, c.clip.label == 1.0f) << c.clip.clip_id << " turn " << turn;
    }
}

TEST(Motion, FrameAngleHistogramsMatchAcrossClasses) {
    auto cfg = small_cfg(1000);
    cfg.image_size = 24;
    cfg.t_min = 8;
    cfg.t_max = 12;
    const std::size_t S = cfg.image_size, bins = 12;
    std::vector<double> hist[2] = {std::vector<double>(bins, 0), std::vector<double>(bins, 0)};
    const auto clips = gen_motion_direction_task(cfg, 13);
    for (const auto& c : clips) {
        const std::size_t T = c.clip.num_frames(), F = c.clip.frames.size() / T;
        double sx = 0, sy = 0;
        for (std::size_t t = 0; t < T; ++t) {
            const double a = blob_angle(c.clip.frames.ptr() + t * F, S);
            sx += std::cos(a);
            sy += std::sin(a);
        }
        double mean_angle = std::atan2(sy, sx);
        if (mean_angle < 0) mean_angle += 2 * std::numbers::pi;
        const std::size_t b = std::min(bins - 1, std::size_t(mean_angle / (2 * std::numbers::pi) * bins));
        hist[c.clip.label == 1.0f ? 1 : 0][b] += 1;
    }
    // Chi-square test of homogeneity on the 2 x bins table.
    double chi2 = 0;
    const double n0 = std::accumulate(hist[0].begin(), hist[0].end(), 0.0);
    const double n1 = std::accumulate(hist[1].begin(), hist[1].end(), 0.0);
    std::size_t used = 0;
    for (std::size_t b = 0; b < bins; ++b) {
        const double col = hist[0][b] + hist[1][b];
        if (col == 0) continue;
        ++used;
        for (int k = 0; k < 2; ++k) {
            const double e = col * (k ? n1 : n0) / (n0 + n1);
            chi2 += (hist[k][b] - e) * (hist[k][b] - e) / e;
        }
    }
    const double p = gamma_q(double(used - 1) / 2, chi2 / 2);
    EXPECT_GT(p, 0.01) << "chi2 " << chi2;
    EXPECT_EQ(n0, 500);
    EXPECT_EQ(n1, 500);
}

TEST(Splits, GroupsNeverSpanSplits) {
    auto clips = gen_keyframe_task(small_cfg(200), 14);
    assign_group_splits(clips, 14);
    std::map<std::string, std::string> seen;
    std::map<std::string, std::set<std::string>> groups;
    for (const auto& c : clips) {
        auto [it, ins] = seen.emplace(c.clip.group_id, c.clip.split);
        EXPECT_EQ(it->second, c.clip.split);
        groups[c.clip.split].insert(c.clip.group_id);
    }
    EXPECT_EQ(groups["train"].size(), 28u);  // 40 groups: 70/15/15
    EXPECT_EQ(groups["val"].size(), 6u);
    EXPECT_EQ(groups["test"].size(), 6u);
}

TEST(Splits, GroupsShareNuisanceParameters) {
    auto cfg = small_cfg(20);
    cfg.n_groups = 4;
    const auto a = detail::group_nuisance(cfg, 1, 2);
    const auto b = detail::group_nuisance(cfg, 1, 2);
    const auto c = detail::group_nuisance(cfg, 1, 3);
    EXPECT_EQ(a.background, b.background);
    EXPECT_NE(a.background, c.background);
    const auto clips = gen_keyframe_task(cfg, 1);
    EXPECT_EQ(clips[2].clip.group_id, clips[6].clip.group_id);
}

TEST(Synth, InvalidConfigurationsAreRejected) {
    auto cfg = small_cfg(10);
    cfg.t_min = 20;
    EXPECT_THROW(gen_keyframe_task(cfg, 0), Error);
    cfg = small_cfg(10);
    cfg.k_min = 3;
    cfg.k_max = 2;
    EXPECT_THROW(gen_keyframe_task(cfg, 0), Error);
    cfg = small_cfg(10);
    cfg.amp_min = 0.5;
    cfg.amp_max = 0.2;
    EXPECT_THROW(gen_area_ratio_task(cfg, 0), Error);
    cfg = small_cfg(10);
    cfg.angular_speed = 4;
    EXPECT_THROW(gen_motion_direction_task(cfg, 0), Error);
    cfg = small_cfg(10);
    cfg.n_groups = 11;
    EXPECT_THROW(gen_motion_direction_task(cfg, 0), Error);
    EXPECT_THROW(parse_task("pda"), Error);
}

TEST(Synth, WriteDatasetProducesAValidManifest) {
    auto clips = gen_motion_direction_task(small_cfg(20), 15);
    assign_group_splits(clips, 15);
    testutil::TempDir dir;
    const auto m = write_dataset(clips, TaskKind::motion, dir.path());
    const auto back = read_manifest(dir.path() / "manifest.csv");
    ASSERT_EQ(back.rows.size(), 20u);
    validate_manifest_files(back);
    const auto loaded = load_clips(back);
    for (std::size_t i = 0; i < 20; ++i) {
        EXPECT_EQ(loaded[i].frames, clips[i].clip.frames);
        EXPECT_EQ(loaded[i].label, clips[i].clip.label);
        EXPECT_EQ(back.rows[i].task, "motion");
    }
}
