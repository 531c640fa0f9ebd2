#include "cs2k/model.hpp"

#include "cs2k/errors.hpp"

#include <cmath>

namespace cs2k {

std::size_t ParamVector::append_segment(std::string name, std::size_t length, int step) {
    const std::size_t offset = values.size();
    segments.push_back({std::move(name), offset, length, step});
    values.resize(offset + length, 0.0);
    return offset;
}

const Segment& ParamVector::segment(const std::string& name) const {
    for (const auto& s : segments) {
        if (s.name == name) return s;
    }
    throw ConfigError("no parameter segment named '" + name + "'");
}

bool ParamVector::is_layout_prefix_of(const ParamVector& larger) const {
    if (segments.size() > larger.segments.size()) return false;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        if (!(segments[i] == larger.segments[i])) return false;
    }
    return true;
}

void ParamVector::validate() const {
    std::size_t cursor = 0;
    for (const auto& s : segments) {
        if (s.offset != cursor) throw ConfigError("parameter segments are not contiguous at '" + s.name + "'");
        cursor += s.length;
    }
    if (cursor != values.size()) throw ConfigError("parameter segments do not cover the vector");
}

Model::Model(const ModelConfig& config, std::size_t num_outputs, RandomSource& init) : config_(config) {
    build_layout(num_outputs);
    for (const auto& layer : layers_) {
        const double std = std::sqrt(2.0 / static_cast<double>(layer.in));
        for (std::size_t i = 0; i < layer.in * layer.out; ++i) {
            params_.values[layer.weight_offset + i] = std * init.normal();
        }
    }
    const std::size_t stride = classifier_row_stride();
    for (std::size_t k = 0; k < num_outputs; ++k) {
        double* row = params_.values.data() + classifier_offset_ + k * stride;
        for (std::size_t j = 0; j < config_.embedding_dim; ++j) row[j] = kClassifierInitStd * init.normal();
    }
}

Model Model::zeros(const ModelConfig& config, std::size_t num_outputs) {
    Model m;
    m.config_ = config;
    m.build_layout(num_outputs);
    return m;
}

Model Model::from_params(const ModelConfig& config, ParamVector params) {
    params.validate();
    Model m;
    m.config_ = config;
    m.build_layout(1);
    const std::size_t extractor_segments = m.layers_.size() * 2;
    if (params.segments.size() <= extractor_segments) throw ConfigError("saved parameters have no classifier");
    for (std::size_t i = 0; i < extractor_segments; ++i) {
        if (!(params.segments[i] == m.params_.segments[i])) {
            throw ConfigError("saved parameters do not match the model configuration");
        }
    }
    const std::size_t classifier = params.size() - m.classifier_offset_;
    if (classifier % m.classifier_row_stride() != 0) throw ConfigError("classifier block has a partial row");
    m.num_outputs_ = classifier / m.classifier_row_stride();
    m.params_ = std::move(params);
    return m;
}

void Model::build_layout(std::size_t num_outputs) {
    if (config_.input_dim == 0 || config_.embedding_dim == 0 || num_outputs == 0) {
        throw ConfigError("model dimensions must be positive");
    }
    layers_.clear();
    params_ = ParamVector{};
    std::vector<std::size_t> dims{config_.input_dim};
    dims.insert(dims.end(), config_.hidden.begin(), config_.hidden.end());
    dims.push_back(config_.embedding_dim);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        LayerView v;
        v.in = dims[l];
        v.out = dims[l + 1];
        if (v.in == 0 || v.out == 0) throw ConfigError("model dimensions must be positive");
        v.relu = l + 2 < dims.size();
        v.weight_offset = params_.append_segment("extractor." + std::to_string(l) + ".weight", v.in * v.out, -1);
        v.bias_offset = params_.append_segment("extractor." + std::to_string(l) + ".bias", v.out, -1);
        layers_.push_back(v);
    }
    classifier_offset_ = params_.size();
    num_outputs_ = 0;
    params_.append_segment("classifier.step0", num_outputs * classifier_row_stride(), 0);
    num_outputs_ = num_outputs;
}

void Model::extend_classifier(std::size_t k_new, int step, RandomSource& rng) {
    if (k_new == 0) throw ConfigError("extend_classifier needs at least one new channel");
    const std::size_t stride = classifier_row_stride();
    const std::string name = "classifier.step" + std::to_string(step);
    const std::size_t offset = [&] {
        // Repeated extension within one step grows the same tagged block.
        auto& segs = params_.segments;
        if (!segs.empty() && segs.back().name == name) {
            const std::size_t off = params_.size();
            segs.back().length += k_new * stride;
            params_.values.resize(off + k_new * stride, 0.0);
            return off;
        }
        return params_.append_segment(name, k_new * stride, step);
    }();
    for (std::size_t k = 0; k < k_new; ++k) {
        double* row = params_.values.data() + offset + k * stride;
        for (std::size_t j = 0; j < config_.embedding_dim; ++j) row[j] = kClassifierInitStd * rng.normal();
    }
    num_outputs_ += k_new;
}

} // namespace cs2k
