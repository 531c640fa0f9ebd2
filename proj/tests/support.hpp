#pragma once

// Shared helpers for the unit suites: scripted randomness, small random
// models, and scalar-loop oracles that do not go through the kernels.

#include "cs2k/model.hpp"
#include "cs2k/numgrad.hpp"
#include "cs2k/rng.hpp"
#include "cs2k/scenario.hpp"
#include "cs2k/tensor.hpp"

#include <cmath>
#include <deque>
#include <stdexcept>
#include <vector>

namespace testing_support {

// Replays fixed draws; throws when a consumer asks for more than scripted.
class ScriptedRandom final : public cs2k::RandomSource {
public:
    std::deque<double> normals;
    std::deque<double> uniforms;
    std::deque<std::size_t> indices;

    double normal() override { return pop(normals); }
    double uniform() override { return pop(uniforms); }
    std::size_t below(std::size_t n) override {
        const std::size_t v = pop(indices);
        if (v >= n) throw std::logic_error("scripted index out of range");
        return v;
    }

private:
    template <class T>
    static T pop(std::deque<T>& q) {
        if (q.empty()) throw std::logic_error("scripted random source exhausted");
        T v = q.front();
        q.pop_front();
        return v;
    }
};

// Constant draws, for "mu forced to 0" style cases.
class ConstantRandom final : public cs2k::RandomSource {
public:
    double n = 0.0, u = 0.0;
    std::size_t idx = 0;
    double normal() override { return n; }
    double uniform() override { return u; }
    std::size_t below(std::size_t) override { return idx; }
};

inline cs2k::ModelConfig small_config(std::size_t in = 3, std::vector<std::size_t> hidden = {5, 4},
                                      std::size_t emb = 3) {
    cs2k::ModelConfig c;
    c.input_dim = in;
    c.hidden = std::move(hidden);
    c.embedding_dim = emb;
    return c;
}

// Random model with non-trivial biases and classifier rows so every
// parameter influences the output.
inline cs2k::Model random_model(const cs2k::ModelConfig& cfg, std::size_t outputs, std::uint64_t seed) {
    cs2k::SeededRandom rng(seed);
    cs2k::Model m(cfg, outputs, rng);
    for (auto& v : m.params().values) v = 0.5 * rng.normal();
    return m;
}

inline cs2k::Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
    cs2k::SeededRandom rng(seed);
    cs2k::Tensor t = cs2k::Tensor::matrix(rows, cols);
    for (auto& v : t.data()) v = scale * rng.normal();
    return t;
}

inline std::vector<int> random_labels(std::size_t n, int k, std::uint64_t seed) {
    cs2k::SeededRandom rng(seed);
    std::vector<int> out(n);
    for (auto& y : out) y = static_cast<int>(rng.below(static_cast<std::size_t>(k)));
    return out;
}

// Per-pixel scalar evaluation straight from the layer views.
struct NaiveOut {
    std::vector<double> embedding;
    std::vector<double> logits;
};

inline NaiveOut naive_pixel(const cs2k::Model& m, const std::vector<double>& x) {
    const auto& p = m.params().values;
    std::vector<double> a = x;
    for (const auto& l : m.layers()) {
        std::vector<double> z(l.out);
        for (std::size_t o = 0; o < l.out; ++o) {
            double s = p[l.bias_offset + o];
            for (std::size_t i = 0; i < l.in; ++i) s += p[l.weight_offset + o * l.in + i] * a[i];
            z[o] = l.relu ? std::max(0.0, s) : s;
        }
        a = std::move(z);
    }
    NaiveOut out;
    out.embedding = a;
    const std::size_t stride = m.classifier_row_stride();
    for (std::size_t k = 0; k < m.num_outputs(); ++k) {
        const std::size_t base = m.classifier_offset() + k * stride;
        double s = p[base + m.embedding_dim()];
        for (std::size_t j = 0; j < m.embedding_dim(); ++j) s += p[base + j] * a[j];
        out.logits.push_back(s);
    }
    return out;
}

// Mean cross entropy evaluated pixel by pixel; used by finite differences.
inline double naive_mean_ce(const cs2k::Model& m, const cs2k::Tensor& x, const std::vector<int>& labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto row = x.row(i);
        const auto out = naive_pixel(m, std::vector<double>(row.begin(), row.end()));
        double zmax = out.logits[0];
        for (double z : out.logits) zmax = std::max(zmax, z);
        double sum = 0.0;
        for (double z : out.logits) sum += std::exp(z - zmax);
        total += -(out.logits[static_cast<std::size_t>(labels[i])] - zmax - std::log(sum));
    }
    return total / static_cast<double>(x.rows());
}

inline cs2k::ScenarioSpec tiny_spec(std::uint64_t seed = 0) {
    cs2k::ScenarioSpec s;
    s.total_classes = 4;
    s.schedule = {2, 1, 1};
    s.images_per_step = 6;
    s.test_images = 16;
    s.height = 8;
    s.width = 8;
    s.feature_dim = 4;
    s.seed = seed;
    return s;
}

} // namespace testing_support
