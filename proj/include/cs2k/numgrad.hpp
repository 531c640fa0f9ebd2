#pragma once

#include "cs2k/kernels.hpp"
#include "cs2k/model.hpp"
#include "cs2k/tensor.hpp"

#include <optional>
#include <vector>

namespace cs2k {

ForwardResult forward(const Model& model, const Tensor& pixel_features);

/// Row-wise softmax with max subtraction.
Tensor softmax(const Tensor& logits);

/// Mean of -log p[i, label_i] over non-ignored rows; 0 when every row is
/// ignored. Throws InputError for a label outside [0, K).
double cross_entropy(const Tensor& probs, const std::vector<int>& labels,
                     const std::vector<bool>* ignore_mask = nullptr);

/// Gradient of the targets' loss with respect to every parameter.
std::vector<double> backward(const Model& model, const Tensor& pixel_features, const PixelTargets& targets);

/// params <- params - lr * grads.
void sgd_step(Model& model, const std::vector<double>& grads, double lr);

/// Copy of `model` with `k_new` extra output channels tagged with `step`.
Model extend_classifier(const Model& model, std::size_t k_new, int step, RandomSource& rng);

std::vector<int> argmax_rows(const Tensor& t);

} // namespace cs2k
