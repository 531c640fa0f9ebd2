#include "cs2k/prototypes.hpp"

#include "cs2k/binio.hpp"
#include "cs2k/errors.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

namespace cs2k {

namespace {

constexpr char kMagic[] = "CS2KPROT";

std::vector<const ImageSample*> image_ptrs(const StepDataset& ds) {
    std::vector<const ImageSample*> out;
    for (const auto& img : ds.images) out.push_back(&img);
    return out;
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

} // namespace

std::vector<int> PrototypeStore::foreground_classes() const {
    std::vector<int> out;
    for (const auto& [c, v] : prototypes) out.push_back(c);
    return out;
}

std::vector<std::span<const double>> PrototypeStore::table() const {
    if (!bg_prototype) throw ConfigError("prototype table needs a background prototype");
    std::vector<std::span<const double>> rows{*bg_prototype};
    int expected = 1;
    for (const auto& [c, v] : prototypes) {
        if (c != expected++) throw ConfigError("foreground prototypes must cover classes 1..n without gaps");
        rows.emplace_back(v);
    }
    return rows;
}

void write_prototypes(std::ostream& out, const PrototypeStore& store) {
    binio::write_header(out, kMagic, kPrototypeVersion);
    binio::write_u32(out, static_cast<std::uint32_t>(store.prototypes.size()));
    for (const auto& [c, v] : store.prototypes) {
        binio::write_i32(out, c);
        binio::write_f64s(out, v);
    }
    binio::write_u32(out, store.bg_prototype ? 1 : 0);
    if (store.bg_prototype) binio::write_f64s(out, *store.bg_prototype);
    binio::write_u32(out, static_cast<std::uint32_t>(store.sigma_history.size()));
    for (const auto& [t, s] : store.sigma_history) {
        binio::write_i32(out, t);
        binio::write_f64(out, s);
    }
    binio::write_u32(out, static_cast<std::uint32_t>(store.class_counts.size()));
    for (const auto& [t, n] : store.class_counts) {
        binio::write_i32(out, t);
        binio::write_i32(out, n);
    }
}

PrototypeStore read_prototypes(std::istream& in) {
    const auto version = binio::read_header(in, kMagic);
    if (version != kPrototypeVersion) throw FormatError("unsupported prototype store version");
    PrototypeStore store;
    const auto n = binio::read_u32(in);
    for (std::uint32_t i = 0; i < n; ++i) {
        const int c = binio::read_i32(in);
        store.prototypes[c] = binio::read_f64s(in);
    }
    if (binio::read_u32(in) != 0) store.bg_prototype = binio::read_f64s(in);
    const auto ns = binio::read_u32(in);
    for (std::uint32_t i = 0; i < ns; ++i) {
        const int t = binio::read_i32(in);
        store.sigma_history[t] = binio::read_f64(in);
    }
    const auto nc = binio::read_u32(in);
    for (std::uint32_t i = 0; i < nc; ++i) {
        const int t = binio::read_i32(in);
        store.class_counts[t] = binio::read_i32(in);
    }
    return store;
}

void compute_prototypes(const Model& extractor, const StepDataset& dataset, PrototypeStore& store) {
    const auto ptrs = image_ptrs(dataset);
    const PixelBatch batch = make_batch(ptrs);
    const Tensor emb = forward(extractor, batch.features).embeddings;
    const std::size_t d = emb.cols();

    std::map<int, std::vector<double>> sums;
    std::map<int, std::size_t> counts;
    for (int c : dataset.classes) {
        sums[c].assign(d, 0.0);
        counts[c] = 0;
    }
    std::vector<bool> selected(batch.gt_step.size(), false);
    for (std::size_t i = 0; i < batch.gt_step.size(); ++i) {
        auto it = sums.find(batch.gt_step[i]);
        if (it == sums.end()) continue;
        const auto row = emb.row(i);
        for (std::size_t j = 0; j < d; ++j) it->second[j] += row[j];
        ++counts[batch.gt_step[i]];
        selected[i] = true;
    }
    for (auto& [c, sum] : sums) {
        if (counts[c] == 0) throw ConfigError("class " + std::to_string(c) + " has no labeled pixels");
        for (auto& v : sum) v /= static_cast<double>(counts[c]);
        store.prototypes[c] = sum;
    }
    store.sigma_history[dataset.step] = pooled_std(emb, selected);
    store.class_counts[dataset.step] = static_cast<int>(dataset.classes.size());
}

std::optional<std::vector<double>> background_mean(const Tensor& embeddings, const std::vector<int>& gt_step,
                                                   const std::vector<int>& predicted) {
    const std::size_t d = embeddings.cols();
    std::vector<double> sum(d, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < gt_step.size(); ++i) {
        if (gt_step[i] != 0 || predicted[i] != 0) continue;
        const auto row = embeddings.row(i);
        for (std::size_t j = 0; j < d; ++j) sum[j] += row[j];
        ++n;
    }
    if (n == 0) return std::nullopt;
    for (auto& v : sum) v /= static_cast<double>(n);
    return sum;
}

void compute_background_prototype(const Model& old_model, const StepDataset& dataset, PrototypeStore& store) {
    const auto ptrs = image_ptrs(dataset);
    const PixelBatch batch = make_batch(ptrs);
    const ForwardResult out = forward(old_model, batch.features);
    auto bg = background_mean(out.embeddings, batch.gt_step, argmax_rows(out.logits));
    if (bg) store.bg_prototype = std::move(bg);
}

std::vector<double> similarity_weights(std::span<const double> embedding,
                                       const std::vector<std::span<const double>>& prototypes, double tau) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    if (prototypes.empty()) throw ConfigError("similarity needs at least one prototype");
    std::vector<double> dist(prototypes.size());
    for (std::size_t c = 0; c < prototypes.size(); ++c) {
        if (prototypes[c].size() != embedding.size()) throw ConfigError("prototype dimension mismatch");
        double s = 0.0;
        for (std::size_t j = 0; j < embedding.size(); ++j) {
            const double diff = embedding[j] - prototypes[c][j];
            s += diff * diff;
        }
        dist[c] = std::sqrt(s);
    }
    const double dmin = *std::min_element(dist.begin(), dist.end());
    double total = 0.0;
    for (auto& v : dist) {
        v = std::exp(-(v - dmin) / tau);
        total += v;
    }
    for (auto& v : dist) v /= total;
    return dist;
}

Tensor similarity_matrix(const Tensor& embeddings, const PrototypeStore& store, double tau) {
    const auto rows = store.table();
    Tensor kappa = Tensor::matrix(embeddings.rows(), rows.size());
    for (std::size_t i = 0; i < embeddings.rows(); ++i) {
        const auto w = similarity_weights(embeddings.row(i), rows, tau);
        std::copy(w.begin(), w.end(), kappa.row(i).begin());
    }
    return kappa;
}

std::vector<int> rectified_labels(const Tensor& old_probs, const Tensor& kappa, const std::vector<int>& gt_step) {
    if (old_probs.rows() != gt_step.size() || kappa.rows() != gt_step.size()) {
        throw ConfigError("pseudo-label inputs disagree on pixel count");
    }
    if (kappa.cols() != old_probs.cols()) {
        throw ConfigError("old model width must equal 1 + number of old classes");
    }
    const std::size_t k = old_probs.cols();
    std::vector<int> out(gt_step.size());
    std::vector<double> r(k);
    for (std::size_t i = 0; i < gt_step.size(); ++i) {
        if (gt_step[i] > 0) {
            out[i] = gt_step[i];
            continue;
        }
        const auto p = old_probs.row(i);
        const auto w = kappa.row(i);
        for (std::size_t c = 0; c < k; ++c) r[c] = w[c] * p[c];
        out[i] = static_cast<int>(argmax(r));
    }
    return out;
}

std::vector<int> pseudo_labels(const ForwardResult& old_out, const std::vector<int>& gt_step,
                               const PrototypeStore& store, double tau) {
    return rectified_labels(softmax(old_out.logits), similarity_matrix(old_out.embeddings, store, tau), gt_step);
}

std::vector<int> pseudo_labels(const ImageSample& image, const Model& old_model, const PrototypeStore& store,
                               double tau) {
    const PixelBatch b = make_batch(image);
    return pseudo_labels(forward(old_model, b.features), b.gt_step, store, tau);
}

std::vector<int> naive_pseudo_labels(const Tensor& old_probs, const std::vector<int>& gt_step) {
    if (old_probs.rows() != gt_step.size()) throw ConfigError("pseudo-label inputs disagree on pixel count");
    std::vector<int> out(gt_step.size());
    for (std::size_t i = 0; i < gt_step.size(); ++i) {
        out[i] = gt_step[i] > 0 ? gt_step[i] : static_cast<int>(argmax(old_probs.row(i)));
    }
    return out;
}

std::vector<int> naive_pseudo_labels(const ImageSample& image, const Model& old_model) {
    const PixelBatch b = make_batch(image);
    return naive_pseudo_labels(softmax(forward(old_model, b.features).logits), b.gt_step);
}

double entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

EntropyMedians entropy_medians(const Tensor& old_probs, const std::vector<int>& gt_step) {
    std::map<int, std::vector<double>> by_class;
    for (std::size_t i = 0; i < gt_step.size(); ++i) {
        if (gt_step[i] != 0) continue;
        const auto p = old_probs.row(i);
        by_class[static_cast<int>(argmax(p))].push_back(entropy(p));
    }
    EntropyMedians out;
    for (auto& [c, v] : by_class) {
        const std::size_t mid = v.size() / 2;
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
        double m = v[mid];
        if (v.size() % 2 == 0) {
            const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
            m = 0.5 * (lower + m);
        }
        out[c] = m;
    }
    return out;
}

EntropyMedians entropy_medians(const Model& old_model, const StepDataset& dataset) {
    const auto ptrs = image_ptrs(dataset);
    const PixelBatch batch = make_batch(ptrs);
    return entropy_medians(softmax(forward(old_model, batch.features).logits), batch.gt_step);
}

MaskedLabels median_entropy_pseudo_labels(const Tensor& old_probs, const std::vector<int>& gt_step,
                                          const EntropyMedians& medians) {
    if (old_probs.rows() != gt_step.size()) throw ConfigError("pseudo-label inputs disagree on pixel count");
    MaskedLabels out{std::vector<int>(gt_step.size()), std::vector<bool>(gt_step.size(), false)};
    for (std::size_t i = 0; i < gt_step.size(); ++i) {
        if (gt_step[i] > 0) {
            out.labels[i] = gt_step[i];
            continue;
        }
        const auto p = old_probs.row(i);
        const int c = static_cast<int>(argmax(p));
        out.labels[i] = c;
        auto it = medians.find(c);
        out.ignore[i] = it == medians.end() || !(entropy(p) < it->second);
    }
    return out;
}

double loss_pl(const Model& model, const Tensor& pixel_features, const std::vector<int>& labels,
               const std::vector<bool>* ignore) {
    return cross_entropy(softmax(forward(model, pixel_features).logits), labels, ignore);
}

double pooled_std(const Tensor& embeddings, const std::vector<bool>& selected) {
    const std::size_t d = embeddings.cols();
    std::vector<double> mean(d, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < selected.size(); ++i) {
        if (!selected[i]) continue;
        const auto row = embeddings.row(i);
        for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
        ++n;
    }
    if (n == 0) throw ConfigError("feature_std over an empty pixel set");
    for (auto& m : mean) m /= static_cast<double>(n);
    double sq = 0.0;
    for (std::size_t i = 0; i < selected.size(); ++i) {
        if (!selected[i]) continue;
        const auto row = embeddings.row(i);
        for (std::size_t j = 0; j < d; ++j) sq += (row[j] - mean[j]) * (row[j] - mean[j]);
    }
    return std::sqrt(sq / static_cast<double>(n * d));
}

double feature_std(const Model& extractor, const StepDataset& dataset, const std::vector<int>& class_set) {
    const auto ptrs = image_ptrs(dataset);
    const PixelBatch batch = make_batch(ptrs);
    const Tensor emb = forward(extractor, batch.features).embeddings;
    std::vector<bool> selected(batch.gt_step.size(), false);
    for (std::size_t i = 0; i < selected.size(); ++i) {
        selected[i] = std::find(class_set.begin(), class_set.end(), batch.gt_step[i]) != class_set.end();
    }
    return pooled_std(emb, selected);
}

} // namespace cs2k
