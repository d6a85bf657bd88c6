#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mini.hpp"

using namespace tgps;
using stage2::Stage2Model;

namespace {

ag::Var param(const Stage2Model& m, const std::string& name) { return m.params().get(name); }

void zero_prefix(Stage2Model& m, const std::string& prefix) {
    for (auto v : m.params().with_prefix(prefix)) v.mutable_value().fill(0.0);
}

struct Batch {
    ag::Var src, tgt, pose;
    Tensor masks;
    TextBatch text;
};

Batch make_batch(const Stage2Model& m, const std::vector<Stage2Example>& ex) {
    Batch b;
    std::vector<Tensor> s, t, p, k;
    std::vector<TokenSeq> toks;
    for (const auto& e : ex) {
        s.push_back(e.source_image);
        t.push_back(e.target_image);
        p.push_back(e.target_heatmap);
        k.push_back(e.mask);
        toks.push_back(e.tokens);
    }
    b.src = ag::constant(mini::batch_of(s));
    b.tgt = ag::constant(mini::batch_of(t));
    b.pose = ag::constant(mini::batch_of(p));
    b.masks = mini::batch_of(k);
    b.text = m.text_encoder().encode(toks);
    return b;
}

}  // namespace

TEST(Stage2Encoder, DefaultFrameScaleSizes) {
    const Vocab v = mini::vocab();
    auto cfg = mini::stage2_config(v.size(), 3);
    cfg.height = 128;
    cfg.width = 64;
    const Stage2Model m(cfg, 1);
    oracle::Rng rng(1);
    const auto pyr = m.encode_image(ag::constant(oracle::random_tensor({1, 3, 128, 64}, rng)));
    const auto pose = m.encode_pose(ag::constant(oracle::random_tensor({1, 3, 128, 64}, rng, 0, 1)));
    const int want[3][2] = {{16, 8}, {32, 16}, {64, 32}};
    ASSERT_EQ(pyr.size(), 3u);
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(pyr[i].dim(2), want[i][0]);
        EXPECT_EQ(pyr[i].dim(3), want[i][1]);
        EXPECT_EQ(pyr[i].shape(), pose[i].shape());
        EXPECT_EQ(pyr[i].dim(1), cfg.scale_channels(i + 1));
    }
}

TEST(Stage2Encoder, ZeroWeightsGiveZeroPyramid) {
    const Vocab v = mini::vocab();
    Stage2Model m(mini::stage2_config(v.size()), 2);
    zero_prefix(m, "img_enc.");
    zero_prefix(m, "pose_enc.");
    oracle::Rng rng(2);
    for (const auto& f : m.encode_image(ag::constant(oracle::random_tensor({2, 3, 16, 8}, rng))))
        for (double x : f.value().data) ASSERT_EQ(x, 0.0);
    const Stage2Model fresh(mini::stage2_config(v.size()), 2);
    for (const auto& f : fresh.encode_pose(ag::constant(Tensor({1, 3, 16, 8}))))  // biases start at zero
        for (double x : f.value().data) ASSERT_EQ(x, 0.0);
}

TEST(Stage2Encoder, Deterministic) {
    const Vocab v = mini::vocab();
    const Stage2Model a(mini::stage2_config(v.size()), 3), b(mini::stage2_config(v.size()), 3);
    oracle::Rng rng(3);
    const Tensor x = oracle::random_tensor({2, 3, 16, 8}, rng);
    const auto pa = a.encode_image(ag::constant(x)), pb = b.encode_image(ag::constant(x));
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].value(), pb[i].value());
}

TEST(Stage2Encoder, PoseChannelPermutationWithPermutedWeights) {
    const Vocab v = mini::vocab();
    const Stage2Model m(mini::stage2_config(v.size()), 4);
    Stage2Model permuted(mini::stage2_config(v.size()), 4);
    const std::vector<int> perm{2, 0, 1};
    oracle::Rng rng(4);
    const Tensor h = oracle::random_tensor({2, 3, 16, 8}, rng, 0, 1);
    Tensor hp = h;
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 8; ++x) hp.at(b, perm[c], y, x) = h.at(b, c, y, x);
    const Tensor w = param(m, "pose_enc.block1.weight").value();
    Tensor wp = w;
    for (int o = 0; o < w.dim(0); ++o)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) wp.at(o, perm[c], i, j) = w.at(o, c, i, j);
    param(permuted, "pose_enc.block1.weight").mutable_value() = wp;
    const auto a = m.encode_pose(ag::constant(h)), b = permuted.encode_pose(ag::constant(hp));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LT(oracle::max_abs_diff(a[i].value(), b[i].value()), 1e-12);
}

TEST(Stage2Config, ScaleAlignmentValidation) {
    const Vocab v = mini::vocab();
    for (int H : {8, 16, 24, 32, 48})
        for (int W : {8, 16, 24})
            for (int m = 1; m <= 5; ++m) {
                auto cfg = mini::stage2_config(v.size(), m);
                cfg.height = H;
                cfg.width = W;
                const bool ok = std::gcd(H, W) % (1 << m) == 0;
                if (!ok) {
                    EXPECT_THROW(Stage2Model(cfg, 1), ConfigError) << H << "x" << W << " m=" << m;
                    continue;
                }
                const Stage2Model model(cfg, 1);
                oracle::Rng rng(5);
                const auto pyr = model.encode_image(ag::constant(oracle::random_tensor({1, 3, H, W}, rng)));
                const auto pose = model.encode_pose(ag::constant(Tensor({1, 3, H, W})));
                for (int i = 1; i <= m; ++i) {
                    EXPECT_EQ(pyr[i - 1].dim(2), H >> (m - i + 1));
                    EXPECT_EQ(pyr[i - 1].dim(3), W >> (m - i + 1));
                    EXPECT_EQ(pose[i - 1].shape(), pyr[i - 1].shape());
                }
            }
}

TEST(AttentionalUpsample, Preconditions) {
    const Vocab v = mini::vocab();
    const Stage2Model m(mini::stage2_config(v.size()), 6);
    const int l1 = m.config().scale_channels(1), l2 = m.config().scale_channels(2);
    const ag::Var z1 = ag::constant(Tensor({1, l1, 4, 2})), z2 = ag::constant(Tensor({1, l2, 8, 4}));
    const ag::Var u1 = m.attentional_upsample(1, z1, z1, std::nullopt);
    EXPECT_EQ(u1.shape(), (Shape{1, m.up_channels(1), 8, 4}));
    EXPECT_THROW(m.attentional_upsample(1, z1, z1, u1), ShapeError);
    EXPECT_THROW(m.attentional_upsample(2, z2, z2, std::nullopt), ShapeError);
    EXPECT_THROW(m.attentional_upsample(2, z2, z2, z1), ShapeError);  // u_prev at the wrong size
    EXPECT_THROW(m.attentional_upsample(3, z2, z2, u1), ShapeError);
}

TEST(AttentionalUpsample, MatchesCompositionOfPrimitives) {
    const Vocab v = mini::vocab();
    const Stage2Model m(mini::stage2_config(v.size()), 7);
    oracle::Rng rng(7);
    const int l1 = m.config().scale_channels(1), l2 = m.config().scale_channels(2);
    const Tensor z1 = oracle::random_tensor({2, l1, 4, 2}, rng), s1 = oracle::random_tensor({2, l1, 4, 2}, rng);
    const Tensor z2 = oracle::random_tensor({2, l2, 8, 4}, rng), s2 = oracle::random_tensor({2, l2, 8, 4}, rng);

    auto reference = [&](int i, std::vector<Tensor> parts) {
        int C = 0;
        for (const auto& p : parts) C += p.dim(1);
        const int B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
        Tensor cat({B, C, H, W});
        for (int b = 0; b < B; ++b) {
            int off = 0;
            for (const auto& p : parts) {
                for (int c = 0; c < p.dim(1); ++c)
                    for (int y = 0; y < H; ++y)
                        for (int x = 0; x < W; ++x) cat.at(b, off + c, y, x) = p.at(b, c, y, x);
                off += p.dim(1);
            }
        }
        const std::string n = "up.block" + std::to_string(i);
        Tensor y = oracle::conv2d(cat, param(m, n + ".weight").value(), param(m, n + ".bias").value(), 1, 1);
        for (auto& q : y.data) q = q > 0 ? q : 0.2 * q;
        return oracle::upsample2x(y);
    };
    const ag::Var u1 = m.attentional_upsample(1, ag::constant(z1), ag::constant(s1), std::nullopt);
    const Tensor r1 = reference(1, {z1, s1});
    EXPECT_LT(oracle::max_abs_diff(u1.value(), r1), 1e-12);
    const ag::Var u2 = m.attentional_upsample(2, ag::constant(z2), ag::constant(s2), u1);
    EXPECT_LT(oracle::max_abs_diff(u2.value(), reference(2, {z2, s2, r1})), 1e-12);
}

TEST(Stage2Generator, ShapeDeterminismAndRange) {
    const Vocab v = mini::vocab();
    const auto ex = mini::stage2_examples(2, 8, v);
    const Stage2Model a(mini::stage2_config(v.size()), 8), b(mini::stage2_config(v.size()), 8);
    const Batch ba = make_batch(a, ex), bb = make_batch(b, ex);
    const Tensor xa = a.generate(ba.src, ba.pose, ba.text).image.value();
    EXPECT_EQ(xa.shape, (Shape{2, 3, 16, 8}));
    EXPECT_EQ(xa, b.generate(bb.src, bb.pose, bb.text).image.value());
    for (double x : xa.data) {
        EXPECT_GT(x, -1.0);
        EXPECT_LT(x, 1.0);
    }
}

TEST(Stage2Generator, OutputStaysInRangeForLargeWeights) {
    const Vocab v = mini::vocab();
    Stage2Model m(mini::stage2_config(v.size()), 9);
    oracle::Rng rng(9);
    for (auto p : m.params().all())
        for (auto& x : p.mutable_value().data) x = std::uniform_real_distribution<double>(-3, 3)(rng);
    const Batch b = make_batch(m, mini::stage2_examples(2, 9, v));
    for (double x : m.generate(b.src, b.pose, b.text).image.value().data) {
        // tanh rounds to exactly ±1 in double for |x| > ~19; the open interval is only mathematical.
        ASSERT_GE(x, -1.0);
        ASSERT_LE(x, 1.0);
    }
}

TEST(Stage2Generator, SimilarityPathSharesWeightsWithSynthesis) {
    const Vocab v = mini::vocab();
    const Stage2Model m(mini::stage2_config(v.size()), 10);
    const Batch b = make_batch(m, mini::stage2_examples(2, 10, v));
    const auto g = m.generate(b.src, b.pose, b.text);
    const auto p = m.attend(b.src, b.text);
    for (std::size_t i = 0; i < p.context.size(); ++i) EXPECT_EQ(g.path.context[i].value(), p.context[i].value());
    // Storage identity: the encoder blocks are the registered parameters themselves.
    EXPECT_EQ(m.image_encoder_blocks()[0].weight.node().get(), param(m, "img_enc.block1.weight").node().get());
}

TEST(MaskedL1, Examples) {
    oracle::Rng rng(11);
    const Tensor x = oracle::random_tensor({1, 3, 2, 2}, rng), y = oracle::random_tensor({1, 3, 2, 2}, rng);
    const Tensor ones({1, 1, 2, 2}, 1.0), zeros({1, 1, 2, 2});
    EXPECT_EQ(loss::masked_l1(ag::constant(x), ag::constant(x), ones).item(), 0.0);
    EXPECT_EQ(loss::masked_l1(ag::constant(x), ag::constant(y), zeros).item(), 0.0);
    const Tensor half({1, 1, 2, 2}, {1, 0, 0, 1});
    EXPECT_NEAR(loss::masked_l1(ag::constant(x), ag::constant(y), half).item(), oracle::masked_l1(x, y, half), 1e-15);
    EXPECT_THROW(loss::masked_l1(ag::constant(x), ag::constant(y), Tensor({1, 3, 2, 2})), ShapeError);
}

TEST(Stage2Loss, NeutralDiscriminatorClosedForms) {
    const Vocab v = mini::vocab();
    Stage2Model m(mini::stage2_config(v.size()), 12);
    zero_prefix(m, "d2.out_");
    const Batch b = make_batch(m, mini::stage2_examples(2, 12, v));
    const ag::Var fake = m.generate(b.src, b.pose, b.text).image;
    EXPECT_NEAR(stage2::d_loss(m, b.tgt, fake, b.text, b.pose).item(), 6 * std::log(2.0), 1e-12);
    EXPECT_NEAR(stage2::g_loss(m, fake, b.tgt, b.masks, b.text, b.pose, 0, 0).total.item(), 3 * std::log(2.0), 1e-12);
}

TEST(Stage2Loss, SaturatedHeadsLeaveTheGammaTerms) {
    const Vocab v = mini::vocab();
    Stage2Model m(mini::stage2_config(v.size()), 13);
    zero_prefix(m, "d2.out_");
    for (const char* h : {"text", "pose", "joint"}) param(m, std::string("d2.out_") + h + ".bias").mutable_value()[0] = 40.0;
    const Batch b = make_batch(m, mini::stage2_examples(2, 13, v));
    const ag::Var fake = m.generate(b.src, b.pose, b.text).image;
    const auto g = stage2::g_loss(m, fake, b.tgt, b.masks, b.text, b.pose, 10, 1);
    const double gamma_terms = 10 * g.l1.item() + g.similarity.item();
    EXPECT_NEAR(g.total.item(), gamma_terms, 3 * -std::log(1 - loss::kProbEps) + 1e-12);
}

TEST(Stage2Loss, TermsMatchIndependentRecomputation) {
    const Vocab v = mini::vocab();
    const Stage2Model m(mini::stage2_config(v.size()), 14);
    const Batch b = make_batch(m, mini::stage2_examples(2, 14, v));
    const ag::Var fake = m.generate(b.src, b.pose, b.text).image;
    const auto jr = m.discriminate(b.tgt, b.text, b.pose), jf = m.discriminate(fake, b.text, b.pose);

    const double d_want = oracle::d_bce(jr.text.value().data, jf.text.value().data) +
                          oracle::d_bce(jr.pose.value().data, jf.pose.value().data) +
                          oracle::d_bce(jr.joint.value().data, jf.joint.value().data);
    EXPECT_NEAR(stage2::d_loss(m, b.tgt, fake, b.text, b.pose).item(), d_want, 1e-10);

    const auto g = stage2::g_loss(m, fake, b.tgt, b.masks, b.text, b.pose, 10, 1);
    const double adv = oracle::g_bce(jf.text.value().data) + oracle::g_bce(jf.pose.value().data) + oracle::g_bce(jf.joint.value().data);
    const double l1 = oracle::masked_l1(fake.value(), b.tgt.value(), b.masks);
    const double ms = mini::oracle_similarity(m, fake, b.text);
    EXPECT_NEAR(g.similarity.item(), ms, 1e-9);
    EXPECT_NEAR(g.total.item(), adv + 10 * l1 + ms, 1e-9);
}

TEST(Stage2Loss, PerfectDiscriminatorIsNearZero) {
    const Tensor one({2}, 1.0), zero({2});
    double total = 0;
    for (int k = 0; k < 3; ++k) total += loss::discriminator_bce(ag::constant(one), ag::constant(zero)).item();
    EXPECT_LT(total, 1e-6);
}

TEST(TrainStage2, ZeroLearningRateLeavesParametersUntouched) {
    const Vocab v = mini::vocab();
    Stage2Model m(mini::stage2_config(v.size()), 15);
    const auto before = mini::snapshot(m.params());
    TrainConfig cfg = mini::train_config();
    cfg.lr_g = cfg.lr_d = 0;
    train_stage2(m, mini::stage2_examples(3, 15, v), cfg, false, {{}, false});
    EXPECT_EQ(mini::snapshot(m.params()), before);
}

TEST(TrainStage2, FrozenTextEncoderIsNotUpdated) {
    const Vocab v = mini::vocab();
    Stage2Model m(mini::stage2_config(v.size()), 16);
    std::vector<Tensor> before;
    for (const auto& p : m.params().with_prefix("text.")) before.push_back(p.value());
    train_stage2(m, mini::stage2_examples(3, 16, v), mini::train_config(), true, {{}, false});
    std::vector<Tensor> after;
    for (const auto& p : m.params().with_prefix("text.")) after.push_back(p.value());
    EXPECT_EQ(after, before);
}

TEST(TrainStage2, SimilarityLossNeedsBatchOfTwo) {
    const Vocab v = mini::vocab();
    Stage2Model m(mini::stage2_config(v.size()), 17);
    TrainConfig cfg = mini::train_config();
    cfg.batch_size = 1;
    EXPECT_THROW(train_stage2(m, mini::stage2_examples(2, 17, v), cfg, false, {{}, false}), ValidationError);
}

TEST(TrainStage2, SingleScaleRuns) {
    const Vocab v = mini::vocab();
    Stage2Model m(mini::stage2_config(v.size(), 1), 18);
    TrainConfig cfg = mini::train_config();
    cfg.m = 1;
    const auto curve = train_stage2(m, mini::stage2_examples(3, 18, v), cfg, false, {{}, false});
    EXPECT_TRUE(std::isfinite(final_value(curve, "l1")));
}

TEST(TrainStage2, OverfitsOnePair) {
    const Vocab v = mini::vocab();
    Stage2Model m(mini::stage2_config(v.size()), 19);
    const auto ex = mini::stage2_examples(1, 19, v);
    TrainConfig cfg = mini::train_config();
    cfg.batch_size = 1;
    cfg.gamma2 = 0;
    cfg.steps_stage2 = 600;
    cfg.lr_g = 3e-3;
    cfg.lr_d = 0;
    train_stage2(m, ex, cfg, false, {{}, false});
    ag::NoGradGuard ng;
    const Batch b = make_batch(m, ex);
    const double l1 = oracle::masked_l1(m.generate(b.src, b.pose, b.text).image.value(), b.tgt.value(), b.masks);
    EXPECT_LT(l1, 0.05);
}
