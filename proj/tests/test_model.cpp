#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "test_util.hpp"
#include "usvid/losses.hpp"
#include "usvid/model.hpp"

using namespace usvid;
using testutil::batch_of;
using testutil::random_clip;

namespace {

ClipBatch single(const Tensor<float>& frames) {
    VideoClip c;
    c.clip_id = "x";
    c.frames = frames;
    return batch_of({c});
}

Tensor<float> permute_frames(const Tensor<float>& frames, const std::vector<std::size_t>& perm) {
    const std::size_t F = frames.size() / frames.dim(0);
    Tensor<float> out(frames.shape());
    for (std::size_t t = 0; t < perm.size(); ++t) std::copy_n(frames.ptr() + perm[t] * F, F, out.ptr() + t * F);
    return out;
}

Tensor<float> predict(const ModelConfig& cfg, const ParamMap<float>& params, const ClipBatch& batch) {
    return forward(cfg, make_leaves(params, false), batch, ForwardMode::eval()).prediction.value();
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder

TEST(Encoder, OutputShape) {
    ModelConfig cfg;  // default encoder: 3×32×32 frames, D=256
    const auto params = init_params(cfg, 0);
    std::mt19937_64 rng(1);
    const auto batch = batch_of({random_clip(5, 3, 32, rng, "a"), random_clip(5, 3, 32, rng, "b")});
    const auto emb = encode_frames(cfg.encoder, make_leaves(params, false), batch);
    EXPECT_EQ(emb.values.shape(), (Shape{2, 5, 256}));
    EXPECT_EQ(emb.mask, Mask(10, 1));
}

TEST(Encoder, IdenticalFramesGiveIdenticalRows) {
    const auto cfg = testutil::tiny_usvn();
    const auto params = init_params(cfg, 2);
    std::mt19937_64 rng(2);
    auto clip = random_clip(4, 3, 8, rng);
    std::copy_n(clip.frames.ptr(), 192, clip.frames.ptr() + 2 * 192);  // frame 2 := frame 0
    const auto e = encode_frames(cfg.encoder, make_leaves(params, false), batch_of({clip})).values.value();
    for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(e[0 * 32 + j], e[2 * 32 + j]);
}

TEST(Encoder, PermutingFramesPermutesRows) {
    const auto cfg = testutil::tiny_usvn();
    const auto params = init_params(cfg, 3);
    std::mt19937_64 rng(3);
    const auto clip = random_clip(6, 3, 8, rng);
    const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
    const auto vars = make_leaves(params, false);
    const auto e = encode_frames(cfg.encoder, vars, single(clip.frames)).values.value();
    const auto ep = encode_frames(cfg.encoder, vars, single(permute_frames(clip.frames, perm))).values.value();
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(ep[t * 32 + j], e[perm[t] * 32 + j]);
}

TEST(Encoder, ZeroingOneFrameChangesOnlyItsRow) {
    const auto cfg = testutil::tiny_usvn();
    const auto params = init_params(cfg, 4);
    std::mt19937_64 rng(4);
    const auto clip = random_clip(5, 3, 8, rng);
    const auto vars = make_leaves(params, false);
    const auto e = encode_frames(cfg.encoder, vars, single(clip.frames)).values.value();
    for (std::size_t t = 0; t < 5; ++t) {
        auto f = clip.frames;
        std::fill_n(f.ptr() + t * 192, 192, 0.0f);
        const auto ez = encode_frames(cfg.encoder, vars, single(f)).values.value();
        bool row_changed = false;
        for (std::size_t r = 0; r < 5; ++r)
            for (std::size_t j = 0; j < 32; ++j) {
                if (r == t) row_changed = row_changed || ez[r * 32 + j] != e[r * 32 + j];
                else EXPECT_EQ(ez[r * 32 + j], e[r * 32 + j]);
            }
        EXPECT_TRUE(row_changed) << "frame " << t;
    }
}

TEST(Encoder, EvalIsBitwiseDeterministic) {
    const auto cfg = testutil::tiny_usvn();
    const auto params = init_params(cfg, 5);
    std::mt19937_64 rng(5);
    const auto batch = batch_of({random_clip(3, 3, 8, rng, "a"), random_clip(7, 3, 8, rng, "b")});
    const auto a = encode_frames(cfg.encoder, make_leaves(params, false), batch).values.value();
    const auto b = encode_frames(cfg.encoder, make_leaves(params, false), batch).values.value();
    EXPECT_EQ(a, b);
}

TEST(Encoder, PaddedRowsAreZero) {
    const auto cfg = testutil::tiny_usvn();
    const auto params = init_params(cfg, 6);
    std::mt19937_64 rng(6);
    const auto batch = batch_of({random_clip(2, 3, 8, rng, "a"), random_clip(4, 3, 8, rng, "b")});
    const auto e = encode_frames(cfg.encoder, make_leaves(params, false), batch).values.value();
    for (std::size_t t = 2; t < 4; ++t)
        for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(e[t * 32 + j], 0.0f);
}

TEST(Encoder, Errors) {
    const auto cfg = testutil::tiny_usvn();
    const auto vars = make_leaves(init_params(cfg, 0), false);
    std::mt19937_64 rng(7);
    EXPECT_THROW(encode_frames(cfg.encoder, vars, batch_of({random_clip(2, 3, 16, rng)})), Error);
    EXPECT_THROW(encode_frames(cfg.encoder, vars, batch_of({random_clip(2, 1, 8, rng)})), Error);
    ClipBatch empty;
    empty.frames = Tensor<float>(Shape{0, 0, 3, 8, 8});
    EXPECT_THROW(encode_frames(cfg.encoder, vars, empty), Error);
    EncoderConfig bad = cfg.encoder;
    bad.image_size = 6;
    EXPECT_THROW(bad.validate(), Error);
}

// ---------------------------------------------------------------------------
// Volume head

TEST(VolumeHead, SaturatesAtTheFloor) {
    const auto [esv, edv] = volume_head_map(-1000.0, -1000.0);
    EXPECT_EQ(esv, 0.1);
    EXPECT_EQ(edv, 0.1);
    const auto [f1, f2] = volume_head_map(-1000.0f, -1000.0f);
    EXPECT_EQ(f1, 0.1f);
    EXPECT_EQ(f2, 0.1f);
}

TEST(VolumeHead, ZeroMapsToLn2PlusFloor) {
    const auto [v, w] = volume_head_map(0.0, 0.0);
    EXPECT_NEAR(v, 0.793147, 1e-6);
    EXPECT_EQ(v, w);
}

TEST(VolumeHead, MonotoneAndPositive) {
    double prev = 0;
    for (double y = -50; y <= 50; y += 0.25) {
        const double v = volume_head_map(y, y).first;
        EXPECT_GT(v, 0.0);
        EXPECT_GE(v, prev);
        prev = v;
    }
    EXPECT_NEAR(volume_head_map(100.0, 0.0).first, 100.1, 1e-9);
}

TEST(EjectionFraction, Examples) {
    EXPECT_EQ(ef_from_volumes(50.0, 100.0), 0.5);
    EXPECT_EQ(ef_from_volumes(7.0, 7.0), 0.0);
    EXPECT_EQ(ef_from_volumes(25.0, 100.0), 0.75);
    EXPECT_THROW(ef_from_volumes(0.0, 1.0), Error);
    EXPECT_THROW(ef_from_volumes(1.0, -1.0), Error);
}

// ---------------------------------------------------------------------------
// USVN forward

TEST(Usvn, BinaryHeadShapesAndNormalizedAttention) {
    const auto cfg = testutil::tiny_usvn();
    const auto params = init_params(cfg, 10);
    std::mt19937_64 rng(10);
    const auto batch = batch_of({random_clip(3, 3, 8, rng, "a"), random_clip(6, 3, 8, rng, "b")});
    const auto out = forward(cfg, make_leaves(params, false), batch, ForwardMode::eval());
    EXPECT_EQ(out.prediction.shape(), (Shape{2}));
    ASSERT_EQ(out.records.size(), 2u);
    for (const auto& r : out.records) {
        EXPECT_EQ(r.num_heads, 4u);
        for (std::size_t h = 0; h < 4; ++h) {
            double total = 0;
            for (std::size_t t = 0; t < r.num_frames; ++t) total += r.weight(h, t);
            EXPECT_NEAR(total, 1.0, 1e-5);
        }
    }
    EXPECT_EQ(out.records[0].num_valid(), 3u);
}

TEST(Usvn, NoRecordsForFixedPooling) {
    for (auto kind : {PoolingKind::average, PoolingKind::max}) {
        auto cfg = testutil::tiny_usvn();
        cfg.pooling = kind;
        const auto params = init_params(cfg, 11);
        EXPECT_EQ(params.count("pooling.queries"), 0u);
        std::mt19937_64 rng(11);
        const auto out =
            forward(cfg, make_leaves(params, false), batch_of({random_clip(3, 3, 8, rng)}), ForwardMode::eval());
        EXPECT_TRUE(out.records.empty());
    }
}

TEST(Usvn, PermutationInvariantInEvalMode) {
    for (auto kind : {PoolingKind::attention, PoolingKind::average, PoolingKind::max}) {
        auto cfg = testutil::tiny_usvn();
        cfg.pooling = kind;
        cfg.dropout = 0.5;
        const auto params = init_params(cfg, 12);
        std::mt19937_64 rng(12);
        const auto clip = random_clip(9, 3, 8, rng);
        std::vector<std::size_t> perm(9);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        const auto a = predict(cfg, params, single(clip.frames));
        const auto b = predict(cfg, params, single(permute_frames(clip.frames, perm)));
        EXPECT_NEAR(a[0], b[0], 1e-5);
    }
}

TEST(Usvn, PaddingInvariant) {
    const auto cfg = testutil::tiny_usvn();
    const auto params = init_params(cfg, 13);
    std::mt19937_64 rng(13);
    const auto short_clip = random_clip(20, 3, 8, rng, "short");
    const auto long_clip = random_clip(32, 3, 8, rng, "long");
    const auto alone = predict(cfg, params, batch_of({short_clip}));
    const auto padded = predict(cfg, params, batch_of({short_clip, long_clip}));
    EXPECT_NEAR(alone[0], padded[0], 1e-6);
}

TEST(Usvn, EfHeadReportsExactDecomposition) {
    auto cfg = testutil::tiny_usvn();
    cfg.head = HeadKind::ef_volumes;
    const auto params = init_params(cfg, 14);
    EXPECT_EQ(params.at("head.weight").shape(), (Shape{2, 32}));
    std::mt19937_64 rng(14);
    const auto batch = batch_of({random_clip(3, 3, 8, rng, "a"), random_clip(5, 3, 8, rng, "b")});
    const auto out = forward(cfg, make_leaves(params, false), batch, ForwardMode::eval());
    for (std::size_t b = 0; b < 2; ++b) {
        const float esv = out.esv.value()[b], edv = out.edv.value()[b];
        EXPECT_GT(esv, 0.0f);
        EXPECT_GT(edv, 0.0f);
        EXPECT_EQ(out.prediction.value()[b], 1.0f - esv / edv);
        const auto [v1, v2] = volume_head_map(out.raw.value()[b * 2], out.raw.value()[b * 2 + 1]);
        EXPECT_FLOAT_EQ(esv, v1);
        EXPECT_FLOAT_EQ(edv, v2);
    }
}

TEST(Usvn, DropoutOnlyInTrainingAndSeeded) {
    auto cfg = testutil::tiny_usvn();
    cfg.dropout = 0.5;
    const auto params = init_params(cfg, 15);
    std::mt19937_64 rng(15);
    const auto batch = batch_of({random_clip(4, 3, 8, rng, "a"), random_clip(4, 3, 8, rng, "b")});
    const auto vars = make_leaves(params, false);
    const auto e1 = forward(cfg, vars, batch, ForwardMode::eval()).prediction.value();
    const auto e2 = forward(cfg, vars, batch, ForwardMode::eval()).prediction.value();
    const auto t1 = forward(cfg, vars, batch, ForwardMode::train(3)).prediction.value();
    const auto t2 = forward(cfg, vars, batch, ForwardMode::train(3)).prediction.value();
    const auto t3 = forward(cfg, vars, batch, ForwardMode::train(4)).prediction.value();
    EXPECT_EQ(e1, e2);
    EXPECT_EQ(t1, t2);
    EXPECT_NE(t1, e1);
    EXPECT_NE(t1, t3);
}

TEST(Usvn, FullModelGradientCheck) {
    for (auto head : {HeadKind::binary_logit, HeadKind::ef_volumes}) {
        auto cfg = testutil::tiny_usvn(32, 4, 8);
        cfg.head = head;
        const auto params = init_params(cfg, 16);
        std::mt19937_64 rng(16);
        const auto batch = batch_of({random_clip(4, 3, 8, rng, "a", 1.0f), random_clip(3, 3, 8, rng, "b", 0.0f)});
        auto loss = [&](const auto& vars) {
            using S = typename std::decay_t<decltype(vars.begin()->second.value())>::value_type;
            const auto out = forward(cfg, vars, batch, ForwardMode::eval());
            if (head == HeadKind::binary_logit) return bce_with_logits(out.prediction, std::vector<S>{1, 0});
            return mse(out.prediction, std::vector<S>{S(0.6), S(0.3)});
        };
        const auto analytic = grad<float>(loss, params);
        const auto numeric = finite_difference_grad<double>(loss, cast_params<double>(params), 1e-6);
        const auto rep = check_gradients(analytic, numeric, 1e-3, 1e-5);
        for (const auto& e : rep.entries) EXPECT_TRUE(e.pass) << e.name << " worst " << e.worst_analytic << " vs " << e.worst_numeric;
        EXPECT_EQ(rep.entries.size(), params.size());
    }
}

// ---------------------------------------------------------------------------
// Temporal baseline

TEST(Temporal, OutputShape) {
    const auto cfg = testutil::tiny_temporal(32);
    const auto params = init_params(cfg, 20);
    std::mt19937_64 rng(20);
    const auto batch = batch_of({random_clip(32, 3, 8, rng, "a"), random_clip(32, 3, 8, rng, "b")});
    const auto out = forward(cfg, make_leaves(params, false), batch, ForwardMode::eval());
    EXPECT_EQ(out.prediction.shape(), (Shape{2}));
    EXPECT_TRUE(out.records.empty());
}

TEST(Temporal, ConstantClipEqualsItsReversal) {
    const auto cfg = testutil::tiny_temporal(8);
    const auto params = init_params(cfg, 21);
    std::mt19937_64 rng(21);
    auto clip = random_clip(8, 3, 8, rng);
    for (std::size_t t = 1; t < 8; ++t) std::copy_n(clip.frames.ptr(), 192, clip.frames.ptr() + t * 192);
    const std::vector<std::size_t> rev{7, 6, 5, 4, 3, 2, 1, 0};
    EXPECT_EQ(predict(cfg, params, single(clip.frames)), predict(cfg, params, single(permute_frames(clip.frames, rev))));
}

TEST(Temporal, IsSensitiveToFrameOrder) {
    const auto cfg = testutil::tiny_temporal(8);
    const auto params = init_params(cfg, 22);
    std::mt19937_64 rng(22);
    const auto clip = random_clip(8, 3, 8, rng);
    const std::vector<std::size_t> rev{7, 6, 5, 4, 3, 2, 1, 0};
    EXPECT_NE(predict(cfg, params, single(clip.frames))[0],
              predict(cfg, params, single(permute_frames(clip.frames, rev)))[0]);
}

TEST(Temporal, WrongLengthOrPaddingIsAnError) {
    const auto cfg = testutil::tiny_temporal(8);
    const auto vars = make_leaves(init_params(cfg, 23), false);
    std::mt19937_64 rng(23);
    EXPECT_THROW(forward(cfg, vars, batch_of({random_clip(7, 3, 8, rng)}), ForwardMode::eval()), Error);
    EXPECT_THROW(forward(cfg, vars, batch_of({random_clip(8, 3, 8, rng), random_clip(5, 3, 8, rng)}),
                         ForwardMode::eval()),
                 Error);
}

TEST(Temporal, EvalFramesResampleUniformly) {
    const auto cfg = testutil::tiny_temporal(5);
    std::mt19937_64 rng(24);
    const auto clip = random_clip(9, 1, 4, rng);
    const auto fs = eval_frames(cfg, clip);
    EXPECT_EQ(fs.source_index, (std::vector<std::size_t>{0, 2, 4, 6, 8}));
    EXPECT_EQ(uniform_indices(3, 5), (std::vector<std::size_t>{0, 1, 1, 2, 2}));  // round half away from zero
}

TEST(Temporal, GradientCheck) {
    const auto cfg = testutil::tiny_temporal(8);
    const auto params = init_params(cfg, 25);
    std::mt19937_64 rng(25);
    const auto batch = batch_of({random_clip(8, 3, 8, rng, "a"), random_clip(8, 3, 8, rng, "b")});
    auto loss = [&](const auto& vars) {
        using S = typename std::decay_t<decltype(vars.begin()->second.value())>::value_type;
        return bce_with_logits(forward(cfg, vars, batch, ForwardMode::eval()).prediction, std::vector<S>{0, 1});
    };
    const auto rep = check_gradients(grad<float>(loss, params),
                                     finite_difference_grad<double>(loss, cast_params<double>(params), 1e-6), 1e-3,
                                     1e-5);
    for (const auto& e : rep.entries) EXPECT_TRUE(e.pass) << e.name;
}

// ---------------------------------------------------------------------------
// Configuration and checkpoints

TEST(ModelConfig, UnknownEnumStringsAreRejected) {
    nlohmann::ordered_json j = testutil::tiny_usvn();
    j["pooling"] = "avg";
    EXPECT_THROW(j.get<ModelConfig>(), Error);
    j["pooling"] = "max";
    EXPECT_EQ(j.get<ModelConfig>().pooling, PoolingKind::max);
    j["head"] = "ef";
    EXPECT_THROW(j.get<ModelConfig>(), Error);
    j["head"] = "ef_volumes";
    j["architecture"] = 3;
    EXPECT_THROW(j.get<ModelConfig>(), Error);
}

TEST(ModelConfig, ValidationAndJsonRoundtrip) {
    auto cfg = testutil::tiny_usvn();
    cfg.num_heads = 3;
    EXPECT_THROW(cfg.validate(), Error);
    cfg.num_heads = 8;
    cfg.dropout = 1.0;
    EXPECT_THROW(cfg.validate(), Error);
    cfg.dropout = 0.25;
    cfg.head = HeadKind::ef_volumes;
    cfg.scale_scores = true;
    nlohmann::ordered_json j = cfg;
    const auto back = j.get<ModelConfig>();
    EXPECT_EQ(nlohmann::ordered_json(back), j);
    EXPECT_EQ(back.num_heads, 8u);
    EXPECT_EQ(back.encoder.widths, cfg.encoder.widths);
}

TEST(Params, InitIsDeterministicPerSeed) {
    const auto cfg = testutil::tiny_usvn();
    EXPECT_EQ(init_params(cfg, 1), init_params(cfg, 1));
    EXPECT_NE(init_params(cfg, 1), init_params(cfg, 2));
    const auto p = init_params(cfg, 1);
    EXPECT_EQ(p.at("pooling.queries").shape(), (Shape{4, 8}));
    for (float b : p.at("head.bias").data()) EXPECT_EQ(b, 0.0f);
}

TEST(Checkpoint, RoundtripIsBitwiseExact) {
    const auto cfg = testutil::tiny_usvn();
    Checkpoint ck;
    ck.config = {{"model", cfg}, {"seed", 7}};
    ck.params = init_params(cfg, 30);
    testutil::TempDir dir;
    write_checkpoint(ck, dir.path() / "m.usvm");
    const auto back = read_checkpoint(dir.path() / "m.usvm");
    EXPECT_EQ(back.params, ck.params);
    EXPECT_EQ(back.config, ck.config);
    EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
    EXPECT_EQ(nlohmann::ordered_json(back.model_config()), nlohmann::ordered_json(cfg));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    Checkpoint ck;
    ck.config = {{"model", testutil::tiny_usvn()}};
    ck.params = init_params(testutil::tiny_usvn(), 31);
    const auto bytes = encode_checkpoint(ck);
    EXPECT_THROW(decode_checkpoint("XXXX" + bytes.substr(4)), Error);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 4)), Error);
    EXPECT_THROW(decode_checkpoint(bytes + "x"), Error);
    EXPECT_THROW(read_checkpoint("/nonexistent/checkpoint.usvm"), Error);
}
