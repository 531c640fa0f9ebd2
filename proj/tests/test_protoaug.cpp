#include "cs2k/errors.hpp"
#include "cs2k/protoaug.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cs2k;
using namespace testing_support;

namespace {

PrototypeStore history(std::vector<int> counts, std::vector<double> sigmas) {
    PrototypeStore s;
    for (std::size_t t = 0; t < counts.size(); ++t) {
        s.class_counts[static_cast<int>(t)] = counts[t];
        s.sigma_history[static_cast<int>(t)] = sigmas[t];
    }
    return s;
}

double norm(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// -log softmax(W e + b)[y] evaluated directly.
double ce(const Model& m, const std::vector<double>& e, int y) {
    const auto& p = m.params().values;
    std::vector<double> z;
    for (std::size_t k = 0; k < m.num_outputs(); ++k) {
        const std::size_t base = m.classifier_offset() + k * m.classifier_row_stride();
        double s = p[base + e.size()];
        for (std::size_t j = 0; j < e.size(); ++j) s += p[base + j] * e[j];
        z.push_back(s);
    }
    double lse = 0;
    for (double v : z) lse += std::exp(v);
    return std::log(lse) - z[static_cast<std::size_t>(y)];
}

} // namespace

// --- scaling factor -------------------------------------------------------------

TEST(ScalingFactor, FirstIncrementalStepUsesSigmaZero) {
    EXPECT_EQ(scaling_factor(1, history({4}, {2.5})), 2.5);
}

TEST(ScalingFactor, ConstantSigmaIsAFixpoint) {
    for (auto counts : {std::vector<int>{4, 1, 1}, std::vector<int>{15, 1, 1, 1}, std::vector<int>{2, 7, 3}}) {
        std::vector<double> sig(counts.size(), 0.7);
        const auto s = history(counts, sig);
        for (int t = 1; t < static_cast<int>(counts.size()); ++t) EXPECT_NEAR(scaling_factor(t, s), 0.7, 1e-12);
    }
}

TEST(ScalingFactor, WeightedCombination) {
    EXPECT_NEAR(scaling_factor(2, history({4, 1}, {2.0, 1.0})), 1.8, 1e-9);
    // t = 3: (|C^2| s^2 + (|C^0| + |C^1|) s^1) / (|C^0| + |C^1| + |C^2|)
    EXPECT_NEAR(scaling_factor(3, history({4, 1, 2}, {2.0, 1.0, 3.0})), (2 * 3.0 + 5 * 1.0) / 7.0, 1e-9);
}

TEST(ScalingFactor, OneHomogeneous) {
    const auto base = history({4, 1, 2, 1}, {2.0, 1.0, 3.0, 0.5});
    const auto scaled = history({4, 1, 2, 1}, {2.0 * 3.5, 1.0 * 3.5, 3.0 * 3.5, 0.5 * 3.5});
    for (int t = 1; t <= 3; ++t) EXPECT_NEAR(scaling_factor(t, scaled), 3.5 * scaling_factor(t, base), 1e-12);
}

TEST(ScalingFactor, MissingHistoryOrStepZero) {
    EXPECT_THROW(scaling_factor(0, history({4}, {1.0})), ConfigError);
    EXPECT_THROW(scaling_factor(2, history({4}, {1.0})), ConfigError);
}

// --- self augmentation ------------------------------------------------------------

TEST(SelfAugment, ZeroScaleReturnsPrototype) {
    SeededRandom rng(1);
    const std::vector<double> eta{1, -2, 3};
    EXPECT_EQ(self_augment(2, eta, 0.0, rng).vector, eta);
}

TEST(SelfAugment, ZeroNoiseReturnsPrototype) {
    ConstantRandom zero;
    const std::vector<double> eta{1, -2, 3};
    const auto a = self_augment(2, eta, 4.0, zero);
    EXPECT_EQ(a.vector, eta);
    EXPECT_EQ(a.kind, AugKind::self);
    EXPECT_EQ(a.source_class, 2);
}

TEST(SelfAugment, ReplaysRecordedDraws) {
    SeededRandom rng(99), replay(99);
    const std::vector<double> eta{0.5, -1.5};
    const auto a = self_augment(1, eta, 0.3, rng);
    const double m0 = replay.normal(), m1 = replay.normal();
    EXPECT_EQ(a.vector[0], eta[0] + 0.3 * m0);
    EXPECT_EQ(a.vector[1], eta[1] + 0.3 * m1);
}

TEST(SelfAugment, NegativeScaleRejected) {
    ConstantRandom zero;
    const std::vector<double> eta{1};
    EXPECT_THROW(self_augment(1, eta, -1.0, zero), ConfigError);
}

// --- inter augmentation ------------------------------------------------------------

TEST(InterAugment, Endpoints) {
    const std::vector<double> a{2, 0}, b{0, 4};
    ConstantRandom one;
    one.u = 1.0;
    EXPECT_EQ(inter_augment(1, a, 2, b, one).vector, a);
    ConstantRandom half;
    half.u = 0.5;
    const auto mid = inter_augment(1, a, 2, b, half);
    EXPECT_EQ(mid.vector, (std::vector<double>{1, 2}));
    EXPECT_EQ(mid.lambda, 0.5);
    EXPECT_EQ(mid.partner_class, 2);
}

TEST(InterAugment, StaysOnTheSegment) {
    SeededRandom rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a(5), b(5);
        for (auto& v : a) v = 3 * rng.normal();
        for (auto& v : b) v = 3 * rng.normal();
        const auto p = inter_augment(1, a, 3, b, rng);
        EXPECT_GE(p.lambda, 0.0);
        EXPECT_LE(p.lambda, 1.0);
        EXPECT_NEAR(norm(p.vector, a) + norm(p.vector, b), norm(a, b), 1e-9);
    }
}

TEST(InterAugment, RejectsSameClassAndBackground) {
    ConstantRandom r;
    const std::vector<double> a{1}, b{2};
    EXPECT_THROW(inter_augment(2, a, 2, b, r), InputError);
    EXPECT_THROW(inter_augment(0, a, 2, b, r), InputError);
    EXPECT_THROW(inter_augment(1, a, 0, b, r), InputError);
}

// --- replay draws -------------------------------------------------------------------

TEST(DrawReplay, OrderAndStreams) {
    PrototypeStore s;
    s.prototypes = {{1, {0, 0}}, {2, {1, 0}}, {3, {0, 1}}};
    ScriptedRandom self_rng, inter_rng;
    self_rng.normals = {1, 0, 0, 1, 2, 2};
    inter_rng.indices = {0, 1, 1};
    inter_rng.uniforms = {0.25, 0.5, 1.0};
    const auto r = draw_replay(s, 0.5, self_rng, inter_rng);
    ASSERT_EQ(r.size(), 6u);
    EXPECT_EQ(r[0].vector, (std::vector<double>{0.5, 0}));
    EXPECT_EQ(r[1].partner_class, 2);  // others of 1 are {2,3}, index 0
    EXPECT_EQ(r[1].lambda, 0.25);
    EXPECT_EQ(r[3].partner_class, 3);  // others of 2 are {1,3}, index 1
    EXPECT_EQ(r[5].partner_class, 2);  // others of 3 are {1,2}, index 1
    EXPECT_EQ(r[4].vector, (std::vector<double>{1, 2}));
    for (const auto& a : r) {
        EXPECT_NE(a.source_class, 0);
        if (a.kind == AugKind::inter) {
            EXPECT_NE(a.partner_class, a.source_class);
            EXPECT_NE(a.partner_class, 0);
        }
    }
    EXPECT_TRUE(self_rng.normals.empty());
    EXPECT_TRUE(inter_rng.uniforms.empty());
}

TEST(DrawReplay, SingleOldClassSkipsInter) {
    PrototypeStore s;
    s.prototypes = {{1, {0, 0}}};
    ConstantRandom r;
    const auto out = draw_replay(s, 1.0, r, r);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].kind, AugKind::self);
}

TEST(DrawReplay, DisabledTermsDoNotConsumeTheirStream) {
    PrototypeStore s;
    s.prototypes = {{1, {0, 0}}, {2, {1, 0}}};
    ScriptedRandom empty, inter_rng;
    inter_rng.indices = {0, 0};
    inter_rng.uniforms = {0.1, 0.2};
    const auto out = draw_replay(s, 1.0, empty, inter_rng, {false, true});
    EXPECT_EQ(out.size(), 2u);
    ScriptedRandom self_rng;
    self_rng.normals = {0, 0, 0, 0};
    EXPECT_EQ(draw_replay(s, 1.0, self_rng, empty, {true, false}).size(), 2u);
}

// --- loss_pa -------------------------------------------------------------------------

TEST(LossPa, NoOldClassesIsZero) {
    const Model m = random_model(small_config(), 3, 1);
    ConstantRandom r;
    EXPECT_EQ(loss_pa(m, PrototypeStore{}, 1.0, r, r), 0.0);
}

TEST(LossPa, HandEvaluatedTwoClassSum) {
    const Model m = random_model(small_config(3, {4}, 2), 4, 7);
    PrototypeStore s;
    s.prototypes = {{1, {1.0, -0.5}}, {2, {-0.25, 2.0}}};
    ScriptedRandom self_rng, inter_rng;
    self_rng.normals = {0.3, -0.1, 0.2, 0.4};
    inter_rng.indices = {0, 0};
    inter_rng.uniforms = {0.3, 0.8};
    const double scale = 0.5;
    const double got = loss_pa(m, s, scale, self_rng, inter_rng);

    const std::vector<double> g1{1.0 + 0.5 * 0.3, -0.5 + 0.5 * -0.1};
    const std::vector<double> g2{-0.25 + 0.5 * 0.2, 2.0 + 0.5 * 0.4};
    const std::vector<double> p1{0.3 * 1.0 + 0.7 * -0.25, 0.3 * -0.5 + 0.7 * 2.0};
    const std::vector<double> p2{0.8 * -0.25 + 0.2 * 1.0, 0.8 * 2.0 + 0.2 * -0.5};
    const double want = (ce(m, g1, 1) + 0.3 * ce(m, p1, 1) + 0.7 * ce(m, p1, 2) + ce(m, g2, 2) +
                         0.8 * ce(m, p2, 2) + 0.2 * ce(m, p2, 1)) /
                        2.0;
    EXPECT_NEAR(got, want, 1e-12);
}

TEST(LossPa, LambdaOneDropsPartnerTerm) {
    const Model m = random_model(small_config(3, {4}, 2), 3, 8);
    AugmentedPrototype pi;
    pi.vector = {0.4, 0.9};
    pi.source_class = 1;
    pi.kind = AugKind::inter;
    pi.partner_class = 2;
    pi.lambda = 1.0;
    EXPECT_NEAR(replay_loss(m, {pi}, 1), ce(m, pi.vector, 1), 1e-12);
}

TEST(LossPa, ExtractorGradientIsZero) {
    const Model m = random_model(small_config(), 4, 9);
    PrototypeStore s;
    s.prototypes = {{1, {1, 2, 3}}, {2, {0, 1, 0}}, {3, {-1, 0, 2}}};
    SeededRandom a(1), b(2);
    std::vector<double> grad(m.params().size(), 0.0);
    loss_pa(m, s, 0.7, a, b, {}, grad);
    for (std::size_t i = 0; i < m.extractor_size(); ++i) EXPECT_EQ(grad[i], 0.0);
    double classifier_mass = 0;
    for (std::size_t i = m.extractor_size(); i < grad.size(); ++i) classifier_mass += std::abs(grad[i]);
    EXPECT_GT(classifier_mass, 0.0);
}

TEST(LossPa, MixtureWeightsSumToOne) {
    PrototypeStore s;
    s.prototypes = {{1, {1, 0}}, {2, {0, 1}}, {3, {1, 1}}};
    SeededRandom a(3), b(4);
    for (const auto& r : draw_replay(s, 1.0, a, b)) {
        if (r.kind != AugKind::inter) continue;
        EXPECT_EQ(r.lambda + (1.0 - r.lambda), 1.0);
        EXPECT_GE(r.lambda, 0.0);
        EXPECT_LT(r.lambda, 1.0);
    }
}

TEST(LossPa, BackgroundOrUnknownLabelRejected) {
    const Model m = random_model(small_config(3, {4}, 2), 3, 8);
    AugmentedPrototype a;
    a.vector = {0, 0};
    a.source_class = 0;
    EXPECT_THROW(replay_loss(m, {a}, 1), InputError);
    a.source_class = 5;
    EXPECT_THROW(replay_loss(m, {a}, 1), InputError);
}
