#pragma once

#include "cs2k/model.hpp"
#include "cs2k/numgrad.hpp"
#include "cs2k/scenario.hpp"
#include "cs2k/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cs2k {

/// Per-class state carried between steps. Mean embeddings per foreground
/// class plus the background prototype; sigma and |C| are kept per step.
struct PrototypeStore {
    std::map<int, std::vector<double>> prototypes;
    std::optional<std::vector<double>> bg_prototype;
    std::map<int, double> sigma_history;  // step -> sigma^t
    std::map<int, int> class_counts;      // step -> |C^t|

    std::vector<int> foreground_classes() const;
    /// Rows ordered by channel: background first, then every foreground class
    /// in ascending id. Requires a background prototype.
    std::vector<std::span<const double>> table() const;

    bool operator==(const PrototypeStore&) const = default;
};

void write_prototypes(std::ostream& out, const PrototypeStore& store);
PrototypeStore read_prototypes(std::istream& in);

inline constexpr std::uint32_t kPrototypeVersion = 1;

/// Mean embedding per class of `dataset.classes` (labels are gt_step), plus
/// sigma and class count for the dataset's step.
void compute_prototypes(const Model& extractor, const StepDataset& dataset, PrototypeStore& store);

/// Mean embedding over pixels of `dataset` that are labeled background and
/// predicted background by `old_model`. Keeps the previous value when no
/// pixel qualifies.
void compute_background_prototype(const Model& old_model, const StepDataset& dataset, PrototypeStore& store);

/// Same rule on precomputed embeddings / predictions.
std::optional<std::vector<double>> background_mean(const Tensor& embeddings, const std::vector<int>& gt_step,
                                                   const std::vector<int>& predicted);

/// Softmax over negative Euclidean distances to each prototype row.
std::vector<double> similarity_weights(std::span<const double> embedding,
                                       const std::vector<std::span<const double>>& prototypes, double tau = 1.0);

/// Per-pixel rectification weights, one similarity row per pixel.
Tensor similarity_matrix(const Tensor& embeddings, const PrototypeStore& store, double tau = 1.0);

/// Labeled pixels keep gt_step; background pixels take argmax(kappa * p)
/// over {background} ∪ old classes.
std::vector<int> rectified_labels(const Tensor& old_probs, const Tensor& kappa, const std::vector<int>& gt_step);

/// Prototype-guided pseudo labels from old-model outputs.
std::vector<int> pseudo_labels(const ForwardResult& old_out, const std::vector<int>& gt_step,
                               const PrototypeStore& store, double tau = 1.0);
std::vector<int> pseudo_labels(const ImageSample& image, const Model& old_model, const PrototypeStore& store,
                               double tau = 1.0);

/// Labeled pixels keep gt_step; background pixels take argmax of the old
/// probabilities.
std::vector<int> naive_pseudo_labels(const Tensor& old_probs, const std::vector<int>& gt_step);
std::vector<int> naive_pseudo_labels(const ImageSample& image, const Model& old_model);

double entropy(std::span<const double> probs);

/// Predicted class -> median entropy over background pixels predicted as
/// that class.
using EntropyMedians = std::map<int, double>;
EntropyMedians entropy_medians(const Tensor& old_probs, const std::vector<int>& gt_step);
EntropyMedians entropy_medians(const Model& old_model, const StepDataset& dataset);

struct MaskedLabels {
    std::vector<int> labels;
    std::vector<bool> ignore;
};

/// Background pixels are accepted with argmax p when their entropy is
/// strictly below the median of their predicted class, ignored otherwise.
MaskedLabels median_entropy_pseudo_labels(const Tensor& old_probs, const std::vector<int>& gt_step,
                                          const EntropyMedians& medians);

/// Mean cross entropy of the current model against pseudo labels over every
/// non-ignored pixel of the batch.
double loss_pl(const Model& model, const Tensor& pixel_features, const std::vector<int>& labels,
               const std::vector<bool>* ignore = nullptr);

/// Pooled population standard deviation of the embeddings of pixels whose
/// gt_step is in `class_set`: squared deviations from the per-dimension mean,
/// averaged over every pixel and dimension.
double feature_std(const Model& extractor, const StepDataset& dataset, const std::vector<int>& class_set);
double pooled_std(const Tensor& embeddings, const std::vector<bool>& selected);

} // namespace cs2k
