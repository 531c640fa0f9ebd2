#pragma once

#include "cs2k/rng.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cs2k {

/// Named range inside a ParamVector. `step` is the incremental step that
/// introduced a classifier block; extractor segments use -1.
struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::size_t length = 0;
    int step = -1;

    bool operator==(const Segment&) const = default;
};

/// Flat view of every trainable parameter. Segments are disjoint, contiguous
/// and cover the whole vector; growth only ever appends.
class ParamVector {
public:
    std::vector<double> values;
    std::vector<Segment> segments;

    std::size_t size() const { return values.size(); }

    std::size_t append_segment(std::string name, std::size_t length, int step);
    const Segment& segment(const std::string& name) const;
    std::span<double> slice(const Segment& s) { return {values.data() + s.offset, s.length}; }
    std::span<const double> slice(const Segment& s) const { return {values.data() + s.offset, s.length}; }

    /// True when every segment of `*this` appears, with the same name and
    /// range, at the start of `larger`'s segment list.
    bool is_layout_prefix_of(const ParamVector& larger) const;

    void validate() const;
};

struct ModelConfig {
    std::size_t input_dim = 8;
    std::vector<std::size_t> hidden{32, 32};
    std::size_t embedding_dim = 16;
};

/// Dense layer inside the flat parameter vector. Weights are stored
/// out x in, row-major, followed by `out` biases.
struct LayerView {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
    bool relu = false;
};

/// Per-pixel segmentation network: an MLP feature extractor (ReLU hidden
/// layers, identity embedding layer) followed by a linear classifier whose
/// channel 0 is background.
///
/// Classifier rows are stored as [weights..., bias] blocks, one per output
/// channel, so that appending channels never moves existing parameters.
class Model {
public:
    Model() = default;
    /// He-normal extractor weights, zero biases, classifier rows from
    /// N(0, 0.01^2) with zero bias.
    Model(const ModelConfig& config, std::size_t num_outputs, RandomSource& init);

    /// All-zero parameters; handy for tests.
    static Model zeros(const ModelConfig& config, std::size_t num_outputs);

    /// Rebuilds a model around a saved parameter vector. Throws ConfigError
    /// when the layout does not match `config`.
    static Model from_params(const ModelConfig& config, ParamVector params);

    const ModelConfig& config() const { return config_; }
    std::size_t input_dim() const { return config_.input_dim; }
    std::size_t embedding_dim() const { return config_.embedding_dim; }
    std::size_t num_outputs() const { return num_outputs_; }

    const std::vector<LayerView>& layers() const { return layers_; }
    std::size_t classifier_offset() const { return classifier_offset_; }
    std::size_t classifier_row_stride() const { return config_.embedding_dim + 1; }
    /// Number of parameters belonging to the feature extractor.
    std::size_t extractor_size() const { return classifier_offset_; }

    ParamVector& params() { return params_; }
    const ParamVector& params() const { return params_; }

    /// Appends `k_new` output channels tagged with `step`. Existing entries
    /// keep their indices and values.
    void extend_classifier(std::size_t k_new, int step, RandomSource& rng);

    static constexpr double kClassifierInitStd = 0.01;

private:
    void build_layout(std::size_t num_outputs);

    ModelConfig config_;
    std::vector<LayerView> layers_;
    std::size_t classifier_offset_ = 0;
    std::size_t num_outputs_ = 0;
    ParamVector params_;
};

} // namespace cs2k
