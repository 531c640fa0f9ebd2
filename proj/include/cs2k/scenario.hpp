#pragma once

#include "cs2k/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace cs2k {

/// Synthetic incremental segmentation scenario parameters. `schedule` uses
/// X-Y notation: [4, 1, 1] learns classes 1-4, then 5, then 6.
struct ScenarioSpec {
    int total_classes = 6;
    std::vector<int> schedule{4, 1, 1};
    int images_per_step = 48;
    int test_images = 30;
    int height = 12;
    int width = 12;
    int feature_dim = 8;
    double class_separation = 3.0;
    double noise_sigma = 1.0;
    /// Probability that a training image also shows an earlier-class region,
    /// and (independently) a later-class region.
    double overlap_probability = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
    std::string to_json() const;
    static ScenarioSpec from_json(const std::string& text);
    bool operator==(const ScenarioSpec&) const = default;
};

struct ImageSample {
    Tensor features;            // H x W x D
    std::vector<int> gt_full;   // all classes, background 0
    std::vector<int> gt_step;   // labels visible at the owning step

    std::size_t pixels() const { return gt_full.size(); }
    bool operator==(const ImageSample& o) const {
        return features.shape() == o.features.shape() && features.data() == o.features.data() &&
               gt_full == o.gt_full && gt_step == o.gt_step;
    }
};

struct StepDataset {
    int step = 0;
    std::vector<int> classes;   // C^t, ascending
    std::vector<ImageSample> images;
    bool operator==(const StepDataset&) const = default;
};

struct Scenario {
    ScenarioSpec spec;
    /// class_means[c] for c in 0..total_classes; index 0 is background.
    std::vector<std::vector<double>> class_means;
    std::vector<StepDataset> steps;
    std::vector<ImageSample> test_set;  // gt_step == gt_full

    /// C^0 ∪ ... ∪ C^t.
    std::vector<int> classes_through(int step) const;
    bool operator==(const Scenario&) const = default;
};

Scenario generate_scenario(const ScenarioSpec& spec);

/// Pixels of several images stacked into one N x D matrix.
struct PixelBatch {
    Tensor features;
    std::vector<int> gt_step;
    std::vector<int> gt_full;
};

PixelBatch make_batch(std::span<const ImageSample* const> images);
PixelBatch make_batch(const ImageSample& image);

/// Identity on pixels whose class is in `class_set`, background elsewhere.
std::vector<int> relabel_for_step(const std::vector<int>& gt_full, const std::vector<int>& class_set);

void write_scenario(std::ostream& out, const Scenario& scenario);
Scenario read_scenario(std::istream& in);
void save_scenario(const std::string& path, const Scenario& scenario);
Scenario load_scenario(const std::string& path);

inline constexpr std::uint32_t kScenarioVersion = 1;

} // namespace cs2k
