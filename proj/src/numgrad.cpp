#include "cs2k/numgrad.hpp"

#include "cs2k/errors.hpp"

#include <algorithm>
#include <cmath>

namespace cs2k {

ForwardResult forward(const Model& model, const Tensor& pixel_features) {
    return kernels::forward(model, pixel_features);
}

Tensor softmax(const Tensor& logits) {
    Tensor out = logits;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        const double zmax = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double& v : row) {
            v = std::exp(v - zmax);
            sum += v;
        }
        for (double& v : row) v /= sum;
    }
    return out;
}

double cross_entropy(const Tensor& probs, const std::vector<int>& labels, const std::vector<bool>* ignore_mask) {
    if (labels.size() != probs.rows()) throw InputError("labels do not match the number of rows");
    if (ignore_mask != nullptr && ignore_mask->size() != labels.size()) {
        throw InputError("ignore mask length differs from labels");
    }
    const std::size_t k = probs.cols();
    double total = 0.0;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (ignore_mask != nullptr && (*ignore_mask)[i]) continue;
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw InputError("label " + std::to_string(y) + " out of range");
        }
        total -= std::log(probs.at(i, static_cast<std::size_t>(y)));
        ++kept;
    }
    return kept == 0 ? 0.0 : total / static_cast<double>(kept);
}

std::vector<double> backward(const Model& model, const Tensor& pixel_features, const PixelTargets& targets) {
    std::vector<double> grad(model.params().size(), 0.0);
    kernels::loss_and_gradient(model, pixel_features, targets, grad);
    return grad;
}

void sgd_step(Model& model, const std::vector<double>& grads, double lr) {
    auto& values = model.params().values;
    if (grads.size() != values.size()) throw ConfigError("gradient length does not match parameters");
    if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * grads[i];
}

Model extend_classifier(const Model& model, std::size_t k_new, int step, RandomSource& rng) {
    Model out = model;
    out.extend_classifier(k_new, step, rng);
    return out;
}

std::vector<int> argmax_rows(const Tensor& t) {
    std::vector<int> out(t.rows());
    for (std::size_t i = 0; i < t.rows(); ++i) {
        auto row = t.row(i);
        out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

} // namespace cs2k
