#include "cs2k/consolidation.hpp"

#include "cs2k/binio.hpp"
#include "cs2k/errors.hpp"
#include "cs2k/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace cs2k {

namespace {

constexpr char kMagic[] = "CS2KFISH";

void check_layout(const ParamVector& theta_old, const ParamVector& theta_new) {
    if (!theta_old.is_layout_prefix_of(theta_new)) {
        throw ConfigError("old parameter layout is not a prefix of the new layout");
    }
}

double interpolate(double old_v, double new_v, double omega) { return omega * old_v + (1.0 - omega) * new_v; }

} // namespace

void write_fisher(std::ostream& out, const FisherDiag& fisher) {
    binio::write_header(out, kMagic, kFisherVersion);
    binio::write_u64(out, fisher.sample_count);
    binio::write_f64s(out, fisher.values);
}

FisherDiag read_fisher(std::istream& in) {
    const auto version = binio::read_header(in, kMagic);
    if (version != kFisherVersion) throw FormatError("unsupported Fisher version");
    FisherDiag f;
    f.sample_count = binio::read_u64(in);
    f.values = binio::read_f64s(in);
    return f;
}

FisherDiag fisher_diagonal(const Model& model, const StepDataset& dataset) {
    if (dataset.images.empty()) throw ConfigError("Fisher needs a non-empty dataset");
    const std::size_t p = model.params().size();
    const std::size_t n = dataset.images.size();
    std::vector<std::vector<double>> squared(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        const auto& img = dataset.images[static_cast<std::size_t>(i)];
        const PixelBatch b = make_batch(img);
        std::vector<double> g(p, 0.0);
        kernels::loss_and_gradient(model, b.features, PixelTargets::mean(b.gt_step), g);
        for (auto& v : g) v *= v;
        squared[static_cast<std::size_t>(i)] = std::move(g);
    }
    FisherDiag f;
    f.values.assign(p, 0.0);
    for (const auto& g : squared) {
        for (std::size_t j = 0; j < p; ++j) f.values[j] += g[j];
    }
    for (auto& v : f.values) v /= static_cast<double>(n);
    for (const auto& img : dataset.images) f.sample_count += img.pixels();
    return f;
}

double beta(const std::vector<int>& class_counts) {
    if (class_counts.size() < 2) throw ConfigError("beta is defined for steps >= 1");
    const double current = class_counts.back();
    const double old = std::accumulate(class_counts.begin(), class_counts.end() - 1, 0.0);
    const double total = old + current;
    return 1.0 / (1.0 + std::exp((current - old - 1.0) / (total + 1.0)));
}

double omega(const std::vector<int>& class_counts) {
    if (class_counts.empty()) throw ConfigError("omega needs at least one step");
    const double current = class_counts.back();
    const double total = std::accumulate(class_counts.begin(), class_counts.end(), 0.0);
    return 1.0 - std::sqrt(current / (total + 1.0));
}

double topk_threshold(const std::vector<double>& values, std::size_t k) {
    if (k < 1 || k > values.size()) throw ConfigError("TopK rank out of range");
    std::vector<double> v = values;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<>());
    return v[k - 1];
}

std::size_t topk_count(double beta, std::size_t n) {
    if (n == 0) throw ConfigError("TopK over an empty vector");
    const auto k = static_cast<std::size_t>(std::floor(beta * static_cast<double>(n)));
    return std::clamp<std::size_t>(k, 1, n);
}

MergeResult selective_merge(const ParamVector& theta_old, const ParamVector& theta_new, const FisherDiag& fisher,
                            double beta, double omega) {
    if (fisher.size() == 0) throw ConfigError("Fisher is empty");
    return merge_above(theta_old, theta_new, fisher, topk_threshold(fisher.values, topk_count(beta, fisher.size())),
                       omega);
}

MergeResult merge_above(const ParamVector& theta_old, const ParamVector& theta_new, const FisherDiag& fisher,
                        double threshold, double omega) {
    check_layout(theta_old, theta_new);
    if (fisher.size() != theta_old.size()) throw ConfigError("Fisher length differs from the old parameters");
    MergeResult r;
    r.params = theta_new;
    r.threshold = threshold;
    for (std::size_t i = 0; i < theta_old.size(); ++i) {
        if (fisher.values[i] > r.threshold) {
            r.params.values[i] = interpolate(theta_old.values[i], theta_new.values[i], omega);
            ++r.merged;
        }
    }
    return r;
}

ParamVector uniform_fusion(const ParamVector& theta_old, const ParamVector& theta_new, double omega) {
    check_layout(theta_old, theta_new);
    ParamVector out = theta_new;
    for (std::size_t i = 0; i < theta_old.size(); ++i) {
        out.values[i] = interpolate(theta_old.values[i], theta_new.values[i], omega);
    }
    return out;
}

} // namespace cs2k
