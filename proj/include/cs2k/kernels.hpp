#pragma once

#include "cs2k/model.hpp"
#include "cs2k/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace cs2k {

/// Weighted per-row cross-entropy targets:
///   loss = sum_i weights[i] * -log p[i, labels[i]] / normalizer
/// A zero weight removes the row from the loss and from the gradient.
struct PixelTargets {
    std::vector<int> labels;
    std::vector<double> weights;
    double normalizer = 1.0;

    /// Mean over the rows not flagged in `ignore`. All rows ignored gives a
    /// zero loss.
    static PixelTargets mean(std::vector<int> labels, const std::vector<bool>* ignore = nullptr);
};

struct ForwardResult {
    Tensor embeddings;  // N x D_emb
    Tensor logits;      // N x K
};

// Kernels over pixel rows. Work is split into fixed chunks of kChunk rows;
// per-chunk partial gradients are summed in chunk order, so results are
// bit-identical for any OpenMP thread count.
namespace kernels {

inline constexpr std::size_t kChunk = 64;

ForwardResult forward(const Model& model, const Tensor& x);
Tensor classify(const Model& model, const Tensor& embeddings);

/// Adds d(loss)/d(params) into `grad` (aligned with model.params()) and
/// returns the loss.
double loss_and_gradient(const Model& model, const Tensor& x, const PixelTargets& targets,
                         std::span<double> grad);

/// Same, but `embeddings` enter the classifier directly; only classifier
/// entries of `grad` are touched.
double classifier_loss_and_gradient(const Model& model, const Tensor& embeddings,
                                    const PixelTargets& targets, std::span<double> grad);

} // namespace kernels

// Serial per-pixel scalar loops. Kept as the correctness reference for the
// chunked kernels and as the benchmark baseline.
namespace reference {

ForwardResult forward(const Model& model, const Tensor& x);
double loss_and_gradient(const Model& model, const Tensor& x, const PixelTargets& targets,
                         std::span<double> grad);

} // namespace reference

void check_targets(const PixelTargets& targets, std::size_t rows, std::size_t num_outputs);

} // namespace cs2k
