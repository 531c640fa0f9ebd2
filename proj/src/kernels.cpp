#include "cs2k/kernels.hpp"

#include "cs2k/errors.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cs2k {

PixelTargets PixelTargets::mean(std::vector<int> labels, const std::vector<bool>* ignore) {
    PixelTargets t;
    t.weights.assign(labels.size(), 1.0);
    std::size_t kept = labels.size();
    if (ignore != nullptr) {
        if (ignore->size() != labels.size()) throw InputError("ignore mask length differs from labels");
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if ((*ignore)[i]) {
                t.weights[i] = 0.0;
                --kept;
            }
        }
    }
    t.labels = std::move(labels);
    t.normalizer = kept == 0 ? 1.0 : static_cast<double>(kept);
    return t;
}

void check_targets(const PixelTargets& targets, std::size_t rows, std::size_t num_outputs) {
    if (targets.labels.size() != rows || targets.weights.size() != rows) {
        throw InputError("targets do not match the number of rows");
    }
    if (!(targets.normalizer > 0.0)) throw InputError("target normalizer must be positive");
    for (std::size_t i = 0; i < rows; ++i) {
        if (targets.weights[i] == 0.0) continue;
        const int y = targets.labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= num_outputs) {
            throw InputError("label " + std::to_string(y) + " out of range [0," + std::to_string(num_outputs) + ")");
        }
    }
}

namespace {

void check_input(const Model& model, const Tensor& x, std::size_t expected_cols) {
    if (x.shape().size() < 2 || x.cols() != expected_cols) {
        throw ConfigError("input has " + std::to_string(x.cols()) + " columns, model expects " +
                          std::to_string(expected_cols));
    }
    (void)model;
}

std::size_t chunk_count(std::size_t rows) { return (rows + kernels::kChunk - 1) / kernels::kChunk; }

// Dense layer over a block of n rows: out[i] = act(W in[i] + b).
void dense_block(const double* params, const LayerView& layer, const double* in, std::size_t n, double* out) {
    const double* w = params + layer.weight_offset;
    const double* b = params + layer.bias_offset;
    for (std::size_t i = 0; i < n; ++i) {
        const double* xi = in + i * layer.in;
        double* yi = out + i * layer.out;
        for (std::size_t o = 0; o < layer.out; ++o) {
            const double* wo = w + o * layer.in;
            double acc = b[o];
            for (std::size_t j = 0; j < layer.in; ++j) acc += wo[j] * xi[j];
            yi[o] = (layer.relu && acc < 0.0) ? 0.0 : acc;
        }
    }
}

void classifier_block(const Model& model, const double* emb, std::size_t n, double* logits) {
    const double* base = model.params().values.data() + model.classifier_offset();
    const std::size_t d = model.embedding_dim();
    const std::size_t stride = model.classifier_row_stride();
    const std::size_t k = model.num_outputs();
    for (std::size_t i = 0; i < n; ++i) {
        const double* ei = emb + i * d;
        for (std::size_t c = 0; c < k; ++c) {
            const double* row = base + c * stride;
            double acc = row[d];
            for (std::size_t j = 0; j < d; ++j) acc += row[j] * ei[j];
            logits[i * k + c] = acc;
        }
    }
}

// Turns logits into d(loss)/d(logits) in place and returns the block loss.
double softmax_ce_block(const PixelTargets& t, std::size_t first, std::size_t n, std::size_t k, double* logits) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double* z = logits + i * k;
        const double w = t.weights[first + i];
        if (w == 0.0) {
            std::fill(z, z + k, 0.0);
            continue;
        }
        const double zmax = *std::max_element(z, z + k);
        double sum = 0.0;
        for (std::size_t c = 0; c < k; ++c) sum += std::exp(z[c] - zmax);
        const double lse = zmax + std::log(sum);
        const auto y = static_cast<std::size_t>(t.labels[first + i]);
        loss += w * (lse - z[y]);
        const double scale = w / t.normalizer;
        for (std::size_t c = 0; c < k; ++c) z[c] = scale * std::exp(z[c] - lse);
        z[y] -= scale;
    }
    return loss / t.normalizer;
}

// Classifier gradient for a block; also writes d(loss)/d(embedding) when
// `d_emb` is non-null.
void classifier_backward_block(const Model& model, const double* emb, const double* d_logits, std::size_t n,
                               double* grad, double* d_emb) {
    const std::size_t d = model.embedding_dim();
    const std::size_t stride = model.classifier_row_stride();
    const std::size_t k = model.num_outputs();
    const double* w = model.params().values.data() + model.classifier_offset();
    double* g = grad + model.classifier_offset();
    for (std::size_t i = 0; i < n; ++i) {
        const double* ei = emb + i * d;
        const double* gi = d_logits + i * k;
        for (std::size_t c = 0; c < k; ++c) {
            const double gc = gi[c];
            if (gc == 0.0) continue;
            double* row = g + c * stride;
            for (std::size_t j = 0; j < d; ++j) row[j] += gc * ei[j];
            row[d] += gc;
        }
        if (d_emb != nullptr) {
            double* de = d_emb + i * d;
            std::fill(de, de + d, 0.0);
            for (std::size_t c = 0; c < k; ++c) {
                const double gc = gi[c];
                if (gc == 0.0) continue;
                const double* row = w + c * stride;
                for (std::size_t j = 0; j < d; ++j) de[j] += gc * row[j];
            }
        }
    }
}

struct ChunkWork {
    std::vector<std::vector<double>> acts;  // acts[0] unused; acts[l+1] = output of layer l
    std::vector<double> logits;
    std::vector<double> delta;
    std::vector<double> delta_prev;
};

double chunk_loss_and_gradient(const Model& model, const Tensor& x, const PixelTargets& targets,
                               std::size_t first, std::size_t n, ChunkWork& work, double* grad) {
    const auto& layers = model.layers();
    const double* params = model.params().values.data();
    work.acts.resize(layers.size() + 1);
    const double* input = x.data().data() + first * x.cols();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        work.acts[l + 1].resize(n * layers[l].out);
        dense_block(params, layers[l], l == 0 ? input : work.acts[l].data(), n, work.acts[l + 1].data());
    }
    const std::size_t k = model.num_outputs();
    work.logits.resize(n * k);
    const double* emb = work.acts.back().data();
    classifier_block(model, emb, n, work.logits.data());
    const double loss = softmax_ce_block(targets, first, n, k, work.logits.data());

    work.delta.resize(n * model.embedding_dim());
    classifier_backward_block(model, emb, work.logits.data(), n, grad, work.delta.data());

    for (std::size_t l = layers.size(); l-- > 0;) {
        const LayerView& layer = layers[l];
        const double* a_out = work.acts[l + 1].data();
        const double* a_in = l == 0 ? input : work.acts[l].data();
        double* dz = work.delta.data();
        if (layer.relu) {
            for (std::size_t i = 0; i < n * layer.out; ++i) {
                if (a_out[i] <= 0.0) dz[i] = 0.0;
            }
        }
        double* gw = grad + layer.weight_offset;
        double* gb = grad + layer.bias_offset;
        for (std::size_t i = 0; i < n; ++i) {
            const double* dzi = dz + i * layer.out;
            const double* ai = a_in + i * layer.in;
            for (std::size_t o = 0; o < layer.out; ++o) {
                const double g = dzi[o];
                if (g == 0.0) continue;
                double* row = gw + o * layer.in;
                for (std::size_t j = 0; j < layer.in; ++j) row[j] += g * ai[j];
                gb[o] += g;
            }
        }
        if (l == 0) break;
        const double* w = params + layer.weight_offset;
        work.delta_prev.assign(n * layer.in, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* dzi = dz + i * layer.out;
            double* dp = work.delta_prev.data() + i * layer.in;
            for (std::size_t o = 0; o < layer.out; ++o) {
                const double g = dzi[o];
                if (g == 0.0) continue;
                const double* row = w + o * layer.in;
                for (std::size_t j = 0; j < layer.in; ++j) dp[j] += g * row[j];
            }
        }
        std::swap(work.delta, work.delta_prev);
    }
    return loss;
}

// Runs `body(chunk, partial)` for every chunk in parallel, then adds the
// partial gradients into `grad` in chunk order.
template <class Body>
double reduce_chunks(std::size_t rows, std::span<double> grad, Body body) {
    const std::size_t chunks = chunk_count(rows);
    const std::size_t p = grad.size();
    std::vector<double> partial(chunks * p, 0.0);
    std::vector<double> losses(chunks, 0.0);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
        losses[c] = body(static_cast<std::size_t>(c), partial.data() + static_cast<std::size_t>(c) * p);
    }
    double loss = 0.0;
    for (std::size_t c = 0; c < chunks; ++c) {
        const double* src = partial.data() + c * p;
        for (std::size_t i = 0; i < p; ++i) grad[i] += src[i];
        loss += losses[c];
    }
    return loss;
}

} // namespace

namespace kernels {

ForwardResult forward(const Model& model, const Tensor& x) {
    check_input(model, x, model.input_dim());
    const std::size_t n = x.rows();
    if (n == 0) throw ConfigError("forward needs at least one pixel");
    ForwardResult out{Tensor::matrix(n, model.embedding_dim()), Tensor::matrix(n, model.num_outputs())};
    const auto& layers = model.layers();
    const double* params = model.params().values.data();
    const std::size_t chunks = chunk_count(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
        const std::size_t first = static_cast<std::size_t>(c) * kChunk;
        const std::size_t m = std::min(kChunk, n - first);
        std::vector<double> a(x.data().begin() + static_cast<std::ptrdiff_t>(first * x.cols()),
                              x.data().begin() + static_cast<std::ptrdiff_t>((first + m) * x.cols()));
        std::vector<double> b;
        for (const auto& layer : layers) {
            b.resize(m * layer.out);
            dense_block(params, layer, a.data(), m, b.data());
            std::swap(a, b);
        }
        std::copy(a.begin(), a.end(), out.embeddings.data().begin() +
                                          static_cast<std::ptrdiff_t>(first * model.embedding_dim()));
        classifier_block(model, a.data(), m, out.logits.data().data() + first * model.num_outputs());
    }
    return out;
}

Tensor classify(const Model& model, const Tensor& embeddings) {
    check_input(model, embeddings, model.embedding_dim());
    Tensor logits = Tensor::matrix(embeddings.rows(), model.num_outputs());
    classifier_block(model, embeddings.data().data(), embeddings.rows(), logits.data().data());
    return logits;
}

double loss_and_gradient(const Model& model, const Tensor& x, const PixelTargets& targets, std::span<double> grad) {
    check_input(model, x, model.input_dim());
    check_targets(targets, x.rows(), model.num_outputs());
    if (grad.size() != model.params().size()) throw ConfigError("gradient buffer does not match parameters");
    const std::size_t n = x.rows();
    return reduce_chunks(n, grad, [&](std::size_t c, double* partial) {
        ChunkWork work;
        const std::size_t first = c * kChunk;
        return chunk_loss_and_gradient(model, x, targets, first, std::min(kChunk, n - first), work, partial);
    });
}

double classifier_loss_and_gradient(const Model& model, const Tensor& embeddings, const PixelTargets& targets,
                                    std::span<double> grad) {
    check_input(model, embeddings, model.embedding_dim());
    check_targets(targets, embeddings.rows(), model.num_outputs());
    if (grad.size() != model.params().size()) throw ConfigError("gradient buffer does not match parameters");
    const std::size_t n = embeddings.rows();
    const std::size_t k = model.num_outputs();
    std::vector<double> logits(n * k);
    classifier_block(model, embeddings.data().data(), n, logits.data());
    const double loss = softmax_ce_block(targets, 0, n, k, logits.data());
    classifier_backward_block(model, embeddings.data().data(), logits.data(), n, grad.data(), nullptr);
    return loss;
}

} // namespace kernels

namespace reference {

namespace {

struct PixelTrace {
    std::vector<std::vector<double>> acts;  // acts[0] = input, acts[l+1] = layer l output
    std::vector<double> logits;
};

PixelTrace trace_pixel(const Model& model, std::span<const double> input) {
    const auto& p = model.params().values;
    PixelTrace t;
    t.acts.emplace_back(input.begin(), input.end());
    for (const auto& layer : model.layers()) {
        std::vector<double> out(layer.out);
        for (std::size_t o = 0; o < layer.out; ++o) {
            double acc = p[layer.bias_offset + o];
            for (std::size_t j = 0; j < layer.in; ++j) {
                acc += p[layer.weight_offset + o * layer.in + j] * t.acts.back()[j];
            }
            out[o] = layer.relu ? std::max(acc, 0.0) : acc;
        }
        t.acts.push_back(std::move(out));
    }
    const std::size_t d = model.embedding_dim();
    const std::size_t stride = model.classifier_row_stride();
    for (std::size_t c = 0; c < model.num_outputs(); ++c) {
        const std::size_t row = model.classifier_offset() + c * stride;
        double acc = p[row + d];
        for (std::size_t j = 0; j < d; ++j) acc += p[row + j] * t.acts.back()[j];
        t.logits.push_back(acc);
    }
    return t;
}

} // namespace

ForwardResult forward(const Model& model, const Tensor& x) {
    check_input(model, x, model.input_dim());
    const std::size_t n = x.rows();
    ForwardResult out{Tensor::matrix(n, model.embedding_dim()), Tensor::matrix(n, model.num_outputs())};
    for (std::size_t i = 0; i < n; ++i) {
        PixelTrace t = trace_pixel(model, x.row(i));
        std::copy(t.acts.back().begin(), t.acts.back().end(), out.embeddings.row(i).begin());
        std::copy(t.logits.begin(), t.logits.end(), out.logits.row(i).begin());
    }
    return out;
}

double loss_and_gradient(const Model& model, const Tensor& x, const PixelTargets& targets, std::span<double> grad) {
    check_input(model, x, model.input_dim());
    check_targets(targets, x.rows(), model.num_outputs());
    const auto& p = model.params().values;
    const std::size_t d = model.embedding_dim();
    const std::size_t stride = model.classifier_row_stride();
    const std::size_t k = model.num_outputs();
    double loss = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double w = targets.weights[i];
        if (w == 0.0) continue;
        PixelTrace t = trace_pixel(model, x.row(i));
        const double zmax = *std::max_element(t.logits.begin(), t.logits.end());
        double sum = 0.0;
        for (double z : t.logits) sum += std::exp(z - zmax);
        const double lse = zmax + std::log(sum);
        const auto y = static_cast<std::size_t>(targets.labels[i]);
        loss += w * (lse - t.logits[y]) / targets.normalizer;

        std::vector<double> dz(k);
        for (std::size_t c = 0; c < k; ++c) {
            dz[c] = w / targets.normalizer * (std::exp(t.logits[c] - lse) - (c == y ? 1.0 : 0.0));
        }
        std::vector<double> delta(d, 0.0);
        for (std::size_t c = 0; c < k; ++c) {
            const std::size_t row = model.classifier_offset() + c * stride;
            for (std::size_t j = 0; j < d; ++j) {
                grad[row + j] += dz[c] * t.acts.back()[j];
                delta[j] += dz[c] * p[row + j];
            }
            grad[row + d] += dz[c];
        }
        const auto& layers = model.layers();
        for (std::size_t l = layers.size(); l-- > 0;) {
            const LayerView& layer = layers[l];
            for (std::size_t o = 0; o < layer.out; ++o) {
                if (layer.relu && t.acts[l + 1][o] <= 0.0) delta[o] = 0.0;
            }
            std::vector<double> prev(layer.in, 0.0);
            for (std::size_t o = 0; o < layer.out; ++o) {
                for (std::size_t j = 0; j < layer.in; ++j) {
                    grad[layer.weight_offset + o * layer.in + j] += delta[o] * t.acts[l][j];
                    prev[j] += delta[o] * p[layer.weight_offset + o * layer.in + j];
                }
                grad[layer.bias_offset + o] += delta[o];
            }
            delta = std::move(prev);
        }
    }
    return loss;
}

} // namespace reference

} // namespace cs2k
