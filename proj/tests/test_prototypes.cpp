#include "cs2k/errors.hpp"
#include "cs2k/prototypes.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace cs2k;
using namespace testing_support;

namespace {

// Identity extractor on D-dimensional input so embeddings equal features.
Model identity_model(std::size_t d, std::size_t outputs) {
    Model m = Model::zeros(small_config(d, {d}, d), outputs);
    auto& p = m.params().values;
    for (const auto& l : m.layers()) {
        for (std::size_t i = 0; i < d; ++i) p[l.weight_offset + i * d + i] = 1.0;
    }
    return m;
}

ImageSample image_from(const std::vector<std::vector<double>>& pixels, std::vector<int> gt_step) {
    const std::size_t d = pixels.front().size();
    std::vector<double> flat;
    for (const auto& p : pixels) flat.insert(flat.end(), p.begin(), p.end());
    ImageSample img;
    img.features = Tensor({1, pixels.size(), d}, flat);
    img.gt_full = gt_step;
    img.gt_step = std::move(gt_step);
    return img;
}

PrototypeStore store_with(std::vector<double> bg, std::vector<std::vector<double>> fg) {
    PrototypeStore s;
    s.bg_prototype = std::move(bg);
    for (std::size_t c = 0; c < fg.size(); ++c) s.prototypes[static_cast<int>(c) + 1] = fg[c];
    return s;
}

} // namespace

// --- prototypes ---------------------------------------------------------------

TEST(Prototypes, SinglePixelIsItsEmbedding) {
    StepDataset ds{0, {2}, {image_from({{1.0, 2.0}, {5.0, 5.0}}, {0, 2})}};
    PrototypeStore store;
    compute_prototypes(identity_model(2, 3), ds, store);
    EXPECT_EQ(store.prototypes.at(2), (std::vector<double>{5.0, 5.0}));
}

TEST(Prototypes, TwoPixelsAverage) {
    StepDataset ds{0, {1}, {image_from({{1.0, 0.5}, {3.0, 1.0}, {4.0, 4.0}}, {1, 1, 0})}};
    PrototypeStore store;
    compute_prototypes(identity_model(2, 2), ds, store);
    EXPECT_EQ(store.prototypes.at(1), (std::vector<double>{2.0, 0.75}));
    EXPECT_EQ(store.class_counts.at(0), 1);
}

TEST(Prototypes, MatchesNaiveLoopOnAStep) {
    const Scenario sc = generate_scenario(tiny_spec(3));
    const auto& ds = sc.steps[0];
    const Model m = random_model(small_config(4, {6}, 3), 3, 2);
    PrototypeStore store;
    compute_prototypes(m, ds, store);
    for (int c : ds.classes) {
        std::vector<double> sum(3, 0.0);
        double n = 0;
        for (const auto& img : ds.images) {
            for (std::size_t i = 0; i < img.pixels(); ++i) {
                if (img.gt_step[i] != c) continue;
                const auto row = img.features.row(i);
                const auto e = naive_pixel(m, {row.begin(), row.end()}).embedding;
                for (std::size_t j = 0; j < 3; ++j) sum[j] += e[j];
                n += 1;
            }
        }
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(store.prototypes.at(c)[j], sum[j] / n, 1e-10);
    }
    EXPECT_EQ(store.class_counts.at(0), 2);
    EXPECT_NEAR(store.sigma_history.at(0), feature_std(m, ds, ds.classes), 1e-15);
}

TEST(Prototypes, MissingClassIsAConfigError) {
    StepDataset ds{0, {1, 2}, {image_from({{1.0}, {2.0}}, {1, 0})}};
    PrototypeStore store;
    EXPECT_THROW(compute_prototypes(identity_model(1, 3), ds, store), ConfigError);
}

// --- background prototype -----------------------------------------------------

TEST(BackgroundPrototype, SharedEmbedding) {
    Tensor emb({3, 2}, {1, 2, 1, 2, 9, 9});
    const auto bg = background_mean(emb, {0, 0, 3}, {0, 0, 0});
    ASSERT_TRUE(bg);
    EXPECT_EQ(*bg, (std::vector<double>{1, 2}));
}

TEST(BackgroundPrototype, NoQualifyingPixelKeepsPrevious) {
    Tensor emb({2, 1}, {1, 2});
    EXPECT_FALSE(background_mean(emb, {0, 1}, {2, 1}));

    // Old model predicts class 1 everywhere: nothing qualifies.
    Model old = identity_model(1, 2);
    old.params().values[old.classifier_offset() + 2 + 1] = 5.0;  // bias of channel 1
    StepDataset ds{1, {2}, {image_from({{0.3}, {0.4}}, {0, 0})}};
    PrototypeStore store;
    store.bg_prototype = std::vector<double>{7.0};
    compute_background_prototype(old, ds, store);
    EXPECT_EQ(*store.bg_prototype, (std::vector<double>{7.0}));
}

TEST(BackgroundPrototype, MatchesFilteredMean) {
    const Tensor emb = random_matrix(200, 3, 4);
    const auto gt = random_labels(200, 3, 5);
    const auto pred = random_labels(200, 2, 6);
    std::vector<double> sum(3, 0.0);
    double n = 0;
    for (std::size_t i = 0; i < 200; ++i) {
        if (gt[i] == 0 && pred[i] == 0) {
            for (std::size_t j = 0; j < 3; ++j) sum[j] += emb.at(i, j);
            n += 1;
        }
    }
    const auto bg = background_mean(emb, gt, pred);
    ASSERT_TRUE(bg);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR((*bg)[j], sum[j] / n, 1e-10);
}

// --- similarity ---------------------------------------------------------------

TEST(Similarity, EquidistantIsUniform) {
    const std::vector<double> a{1, 0}, b{-1, 0}, c{0, 1}, e{0, 0};
    const auto w = similarity_weights(e, {a, b, c});
    for (double v : w) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Similarity, SinglePrototype) {
    const std::vector<double> a{3, 4}, e{0, 0};
    EXPECT_EQ(similarity_weights(e, {a}), (std::vector<double>{1.0}));
}

TEST(Similarity, DistancesZeroOneTwo) {
    const std::vector<double> p0{0}, p1{1}, p2{-2}, e{0};
    const auto w = similarity_weights(e, {p0, p1, p2});
    const double z = 1 + std::exp(-1.0) + std::exp(-2.0);
    EXPECT_NEAR(w[0], 1 / z, 1e-15);
    EXPECT_NEAR(w[1], std::exp(-1.0) / z, 1e-15);
    EXPECT_NEAR(w[2], std::exp(-2.0) / z, 1e-15);
}

TEST(Similarity, RowsSumToOneAndShiftInvariant) {
    SeededRandom rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<double>> protos(4, std::vector<double>(3));
        for (auto& p : protos) {
            for (auto& v : p) v = 20 * rng.normal();
        }
        std::vector<double> e(3);
        for (auto& v : e) v = 20 * rng.normal();
        const std::vector<std::span<const double>> rows(protos.begin(), protos.end());
        const double tau = 0.5 + rng.uniform();
        const auto w = similarity_weights(e, rows, tau);
        double s = 0;
        for (double v : w) s += v;
        EXPECT_NEAR(s, 1.0, 1e-6);

        // Direct evaluation without the min-distance shift.
        std::vector<double> raw;
        double z = 0;
        for (const auto& p : protos) {
            double d = 0;
            for (std::size_t j = 0; j < 3; ++j) d += (e[j] - p[j]) * (e[j] - p[j]);
            raw.push_back(std::exp(-std::sqrt(d) / tau));
            z += raw.back();
        }
        if (z > 0 && std::isfinite(z)) {
            for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(w[c], raw[c] / z, 1e-9);
        }
    }
}

TEST(Similarity, BadInputs) {
    const std::vector<double> a{1, 0}, e{0, 0}, short_e{0};
    EXPECT_THROW(similarity_weights(e, {a}, 0.0), ConfigError);
    EXPECT_THROW(similarity_weights(e, {}), ConfigError);
    EXPECT_THROW(similarity_weights(short_e, {a}), ConfigError);
}

TEST(Similarity, StoreTableNeedsBackgroundAndContiguousIds) {
    PrototypeStore s;
    s.prototypes[1] = {0.0};
    EXPECT_THROW(s.table(), ConfigError);
    s.bg_prototype = std::vector<double>{1.0};
    EXPECT_EQ(s.table().size(), 2u);
    s.prototypes[3] = {0.0};
    EXPECT_THROW(s.table(), ConfigError);
}

// --- pseudo labels ------------------------------------------------------------

TEST(PseudoLabels, ForegroundKeepsGtStep) {
    const Tensor probs({2, 3}, {0.9, 0.05, 0.05, 0.1, 0.8, 0.1});
    const Tensor kappa({2, 3}, {1, 0, 0, 1, 0, 0});
    const std::vector<int> gt{3, 5};
    EXPECT_EQ(rectified_labels(probs, kappa, gt), gt);
    EXPECT_EQ(naive_pseudo_labels(probs, gt), gt);
    const EntropyMedians med{{0, 0.0}, {1, 0.0}};
    EXPECT_EQ(median_entropy_pseudo_labels(probs, gt, med).labels, gt);
}

TEST(PseudoLabels, HandSetKappaAndProbs) {
    // Two old classes: the product argmax differs from the plain argmax on
    // the first pixel.
    const Tensor probs({3, 3}, {0.5, 0.3, 0.2, 0.2, 0.3, 0.5, 0.4, 0.4, 0.2});
    const Tensor kappa({3, 3}, {0.2, 0.7, 0.1, 0.1, 0.1, 0.8, 0.6, 0.1, 0.3});
    const auto got = rectified_labels(probs, kappa, {0, 0, 0});
    for (std::size_t i = 0; i < 3; ++i) {
        int best = 0;
        for (int c = 1; c < 3; ++c) {
            if (kappa.at(i, c) * probs.at(i, c) > kappa.at(i, best) * probs.at(i, best)) best = c;
        }
        EXPECT_EQ(got[i], best) << i;
    }
    EXPECT_EQ(got, (std::vector<int>{1, 2, 0}));
}

TEST(PseudoLabels, UniformKappaReproducesNaive) {
    SeededRandom rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor probs = softmax(random_matrix(64, 4, 100 + trial, 3.0));
        Tensor kappa({64, 4});
        for (auto& v : kappa.data()) v = 0.25;
        auto gt = random_labels(64, 6, 200 + trial);
        for (auto& y : gt) y = y >= 4 ? y : 0;
        EXPECT_EQ(rectified_labels(probs, kappa, gt), naive_pseudo_labels(probs, gt));
    }
}

TEST(PseudoLabels, PrototypeProximityWinsOverUniformOldModel) {
    // Old model with all-zero classifier is uniform; the pixel sits on the
    // class-2 prototype.
    const Model old = identity_model(2, 3);
    const PrototypeStore store = store_with({0, 0}, {{5, 0}, {0, 5}});
    const ImageSample img = image_from({{0, 5}, {5, 0}, {0, 0}}, {0, 0, 0});
    EXPECT_EQ(pseudo_labels(img, old, store), (std::vector<int>{2, 1, 0}));
    EXPECT_EQ(naive_pseudo_labels(img, old), (std::vector<int>{0, 0, 0}));
}

TEST(PseudoLabels, BackgroundEverywhereKeepsGtStep) {
    Model old = identity_model(2, 3);
    old.params().values[old.classifier_offset() + 2] = 10.0;  // channel-0 bias
    const ImageSample img = image_from({{1, 1}, {2, 2}, {3, 3}}, {0, 4, 0});
    EXPECT_EQ(naive_pseudo_labels(img, old), img.gt_step);
}

TEST(PseudoLabels, AllStrategiesKeepForegroundOnRandomImages) {
    const Scenario sc = generate_scenario(tiny_spec(12));
    const Model old = random_model(small_config(4, {6}, 3), 3, 4);
    PrototypeStore store;
    compute_prototypes(old, sc.steps[0], store);
    compute_background_prototype(old, sc.steps[1], store);
    const auto medians = entropy_medians(old, sc.steps[1]);
    for (const auto& img : sc.steps[1].images) {
        const PixelBatch b = make_batch(img);
        const auto out = forward(old, b.features);
        const auto probs = softmax(out.logits);
        const auto a = pseudo_labels(out, b.gt_step, store);
        const auto n = naive_pseudo_labels(probs, b.gt_step);
        const auto m = median_entropy_pseudo_labels(probs, b.gt_step, medians);
        for (std::size_t i = 0; i < b.gt_step.size(); ++i) {
            if (b.gt_step[i] == 0) continue;
            EXPECT_EQ(a[i], b.gt_step[i]);
            EXPECT_EQ(n[i], b.gt_step[i]);
            EXPECT_EQ(m.labels[i], b.gt_step[i]);
            EXPECT_FALSE(m.ignore[i]);
        }
    }
}

TEST(PseudoLabels, OldModelWidthMustMatchStore) {
    const Tensor probs({1, 4}, {0.25, 0.25, 0.25, 0.25});
    const Tensor kappa({1, 3}, {0.3, 0.3, 0.4});
    EXPECT_THROW(rectified_labels(probs, kappa, {0}), ConfigError);
}

// --- median entropy -----------------------------------------------------------

TEST(MedianEntropy, EqualEntropiesIgnoreEveryBackgroundPixel) {
    Tensor probs({4, 2});
    for (auto& v : probs.data()) v = 0.5;
    const std::vector<int> gt{0, 0, 3, 0};
    const auto med = entropy_medians(probs, gt);
    const auto out = median_entropy_pseudo_labels(probs, gt, med);
    EXPECT_EQ(out.ignore, (std::vector<bool>{true, true, false, true}));
}

TEST(MedianEntropy, OneHotPredictionsAccepted) {
    const Tensor probs({3, 2}, {1, 0, 0, 1, 1, 0});
    const std::vector<int> gt{0, 0, 0};
    const EntropyMedians med{{0, 0.3}, {1, 0.3}};
    const auto out = median_entropy_pseudo_labels(probs, gt, med);
    EXPECT_EQ(out.ignore, (std::vector<bool>(3, false)));
    EXPECT_EQ(out.labels, (std::vector<int>{0, 1, 0}));
}

TEST(MedianEntropy, MatchesTwoPassOracle) {
    const Tensor probs = softmax(random_matrix(301, 3, 21, 2.0));
    auto gt = random_labels(301, 5, 22);
    for (auto& y : gt) y = y >= 3 ? y : 0;
    const auto med = entropy_medians(probs, gt);
    const auto out = median_entropy_pseudo_labels(probs, gt, med);

    // Pass 1: sorted entropies per predicted class. Pass 2: accept below median.
    std::map<int, std::vector<double>> by_class;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt[i] != 0) continue;
        const auto p = probs.row(i);
        by_class[static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin())].push_back(entropy(p));
    }
    std::map<int, double> oracle;
    for (auto& [c, v] : by_class) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        oracle[c] = n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
        EXPECT_DOUBLE_EQ(med.at(c), oracle[c]);
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt[i] != 0) continue;
        const auto p = probs.row(i);
        const int c = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        EXPECT_EQ(out.ignore[i], !(entropy(p) < oracle[c])) << i;
    }
}

TEST(Entropy, KnownValues) {
    const std::vector<double> u{0.25, 0.25, 0.25, 0.25}, one{1, 0};
    EXPECT_NEAR(entropy(u), std::log(4.0), 1e-15);
    EXPECT_EQ(entropy(one), 0.0);
}

// --- loss_pl --------------------------------------------------------------------

TEST(LossPl, OneHotCorrectModelIsZero) {
    Model m = identity_model(1, 2);
    auto& p = m.params().values;
    p[m.classifier_offset() + 1] = 500.0;   // channel 0 bias
    p[m.classifier_offset() + 2] = 1000.0;  // channel 1 weight
    const Tensor x({2, 1}, {1.0, 0.0});
    EXPECT_NEAR(loss_pl(m, x, {1, 0}), 0.0, 1e-12);
}

TEST(LossPl, UniformModelIsLnK) {
    const Model m = Model::zeros(small_config(), 5);
    EXPECT_NEAR(loss_pl(m, random_matrix(7, 3, 1), random_labels(7, 5, 2)), std::log(5.0), 1e-15);
}

TEST(LossPl, EqualsCrossEntropyOnConcatenatedPixels) {
    const Scenario sc = generate_scenario(tiny_spec(2));
    const Model m = random_model(small_config(4, {6}, 3), 3, 3);
    const auto& imgs = sc.steps[0].images;
    const ImageSample* two[] = {&imgs[0], &imgs[1]};
    const PixelBatch b = make_batch(two);
    std::vector<bool> ignore(b.gt_step.size(), false);
    for (std::size_t i = 0; i < ignore.size(); i += 3) ignore[i] = true;
    EXPECT_DOUBLE_EQ(loss_pl(m, b.features, b.gt_step, &ignore),
                     cross_entropy(softmax(forward(m, b.features).logits), b.gt_step, &ignore));
}

// --- feature std ----------------------------------------------------------------

TEST(FeatureStd, IdenticalEmbeddingsGiveZero) {
    Tensor emb({3, 2}, {4, -1, 4, -1, 4, -1});
    EXPECT_EQ(pooled_std(emb, {true, true, true}), 0.0);
}

TEST(FeatureStd, ZeroAndTwoGiveOne) {
    StepDataset ds{0, {1}, {image_from({{0.0}, {2.0}, {9.0}}, {1, 1, 0})}};
    EXPECT_DOUBLE_EQ(feature_std(identity_model(1, 2), ds, {1}), 1.0);
}

TEST(FeatureStd, MatchesTwoPassFormula) {
    const Tensor emb = random_matrix(150, 4, 31, 3.0);
    std::vector<bool> sel(150);
    for (std::size_t i = 0; i < sel.size(); ++i) sel[i] = i % 3 != 0;
    std::vector<double> mean(4, 0.0);
    double n = 0;
    for (std::size_t i = 0; i < 150; ++i) {
        if (!sel[i]) continue;
        for (std::size_t j = 0; j < 4; ++j) mean[j] += emb.at(i, j);
        n += 1;
    }
    for (auto& v : mean) v /= n;
    double sq = 0;
    for (std::size_t i = 0; i < 150; ++i) {
        if (!sel[i]) continue;
        for (std::size_t j = 0; j < 4; ++j) sq += (emb.at(i, j) - mean[j]) * (emb.at(i, j) - mean[j]);
    }
    EXPECT_NEAR(pooled_std(emb, sel), std::sqrt(sq / (n * 4)), 1e-10);
}

TEST(FeatureStd, EmptySetIsAConfigError) {
    Tensor emb({2, 1}, {1, 2});
    EXPECT_THROW(pooled_std(emb, {false, false}), ConfigError);
}

// --- store file -------------------------------------------------------------------

TEST(PrototypeFile, RoundTrip) {
    PrototypeStore s = store_with({0.5, -1}, {{1, 2}, {3, 4}});
    s.sigma_history = {{0, 1.25}, {1, 0.5}};
    s.class_counts = {{0, 2}, {1, 1}};
    std::stringstream buf;
    write_prototypes(buf, s);
    EXPECT_EQ(read_prototypes(buf), s);

    PrototypeStore empty;
    std::stringstream buf2;
    write_prototypes(buf2, empty);
    EXPECT_EQ(read_prototypes(buf2), empty);

    std::stringstream junk("CS2KSCENxxxx");
    EXPECT_THROW(read_prototypes(junk), FormatError);
}
