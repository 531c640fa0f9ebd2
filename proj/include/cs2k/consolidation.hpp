#pragma once

#include "cs2k/model.hpp"
#include "cs2k/scenario.hpp"

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace cs2k {

/// Per-parameter importance, aligned index-for-index with the ParamVector
/// of the model it was measured on.
struct FisherDiag {
    std::vector<double> values;
    std::uint64_t sample_count = 0;  // pixels accumulated

    std::size_t size() const { return values.size(); }
    bool operator==(const FisherDiag&) const = default;
};

void write_fisher(std::ostream& out, const FisherDiag& fisher);
FisherDiag read_fisher(std::istream& in);

inline constexpr std::uint32_t kFisherVersion = 1;

/// Empirical diagonal Fisher: mean over images of the squared per-image
/// gradient of the mean pixel cross entropy against gt_step.
FisherDiag fisher_diagonal(const Model& model, const StepDataset& dataset);

/// Class counts |C^0|, ..., |C^t|; the last entry is the current step.
double beta(const std::vector<int>& class_counts);
double omega(const std::vector<int>& class_counts);

/// k-th largest value of `values` (1-based).
double topk_threshold(const std::vector<double>& values, std::size_t k);

/// floor(beta * n) clamped to [1, n].
std::size_t topk_count(double beta, std::size_t n);

struct MergeResult {
    ParamVector params;
    double threshold = 0.0;
    std::size_t merged = 0;  // indices pulled toward the old model
};

/// theta_i <- omega theta_old_i + (1 - omega) theta_new_i where F_i exceeds
/// the TopK threshold (strictly); every other index, including parameters
/// created this step, keeps its new value.
MergeResult selective_merge(const ParamVector& theta_old, const ParamVector& theta_new, const FisherDiag& fisher,
                            double beta, double omega);

/// Interpolation rule with an explicit threshold: indices whose F is
/// strictly above `threshold` are merged.
MergeResult merge_above(const ParamVector& theta_old, const ParamVector& theta_new, const FisherDiag& fisher,
                        double threshold, double omega);

/// Interpolates every index that has an old counterpart.
ParamVector uniform_fusion(const ParamVector& theta_old, const ParamVector& theta_new, double omega);

} // namespace cs2k
