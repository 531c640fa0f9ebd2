#pragma once

#include "cs2k/consolidation.hpp"
#include "cs2k/metrics.hpp"
#include "cs2k/model.hpp"
#include "cs2k/prototypes.hpp"
#include "cs2k/scenario.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cs2k {

enum class PseudoLabelStrategy { none, naive, median_entropy, prototype_guided };
enum class ConsolidationMode { none, uniform, selective };

/// Which mechanisms a run uses. Presets: ft, joint, naive, median, wf, cs2k.
struct MethodConfig {
    PseudoLabelStrategy pseudo_labels = PseudoLabelStrategy::none;
    bool use_pca_self = false;
    bool use_pca_inter = false;
    ConsolidationMode consolidation = ConsolidationMode::none;
    bool joint_training = false;

    void validate() const;
    std::string to_json() const;
    static MethodConfig from_json(const std::string& text);
    bool operator==(const MethodConfig&) const = default;
};

/// Throws ConfigError for an unknown name.
MethodConfig method_preset(const std::string& name);

/// Removes one mechanism: "ppl" (prototype-guided -> naive pseudo labels),
/// "pca-sa", "pca-ia", "wsc" (no consolidation).
MethodConfig ablate(MethodConfig method, const std::string& flag);

std::string to_string(PseudoLabelStrategy s);
std::string to_string(ConsolidationMode m);

struct TrainConfig {
    int epochs = 20;
    int batch_images = 8;
    double lr = 0.05;
    double tau = 1.0;
    ModelConfig model;
    bool background_in_old = true;
    /// Test hooks for the merge endpoints.
    std::optional<double> omega_override;
    std::optional<double> merge_threshold_override;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

struct StepLog {
    int step = 0;
    double last_epoch_loss = 0.0;
    double beta = 0.0;
    double omega = 0.0;
    double threshold = 0.0;
    std::size_t merged = 0;
};

/// Everything carried across steps. `old_model` and `fisher` describe the
/// previous step and are never modified while a step trains.
struct RunState {
    std::uint64_t seed = 0;
    int step = -1;  // last completed step
    Model model;
    std::optional<Model> old_model;
    PrototypeStore store;
    std::optional<FisherDiag> fisher;
    std::vector<int> class_counts;  // |C^0|, ..., |C^step|
    std::vector<StepLog> log;
};

RunState initial_state(const TrainConfig& hyper, std::size_t first_step_classes, std::uint64_t seed);

/// Freezes the current model as the old model and appends |C^t| classifier
/// channels. No-op for step 0.
void prepare_step(RunState& state, const StepDataset& dataset);

/// Trains one step on L_pl + L_pa, merges with the old model when enabled,
/// then records prototypes, sigma and Fisher for the next step.
void train_step(RunState& state, const StepDataset& dataset, const MethodConfig& method, const TrainConfig& hyper);

/// Labels the current model is trained against for one batch.
MaskedLabels batch_targets(const RunState& state, const PixelBatch& batch, const MethodConfig& method,
                           const TrainConfig& hyper, const EntropyMedians* medians);

/// Test-set evaluation at `step`. Pixels of classes not yet introduced are
/// left out of the confusion matrix.
MetricsReport evaluate(const Model& model, const Scenario& scenario, int step, bool background_in_old = true);

struct RunOptions {
    std::optional<std::filesystem::path> checkpoint_dir;
    int from_step = 0;  // resume from checkpoint from_step - 1
};

std::vector<MetricsReport> run_scenario(const Scenario& scenario, const MethodConfig& method,
                                        const TrainConfig& hyper, std::uint64_t seed, const RunOptions& options = {});

/// Fraction of pixels labeled background at the step whose true class is an
/// old class and whose pseudo label equals that class.
double relabel_accuracy(const std::vector<int>& labels, const std::vector<int>& gt_step,
                        const std::vector<int>& gt_full, int first_new_class);

// Checkpoint file: model parameters, prototypes, Fisher, and the step's report.
struct Checkpoint {
    RunState state;
    MetricsReport report;
};

void write_checkpoint(std::ostream& out, const RunState& state, const TrainConfig& hyper,
                      const MetricsReport& report);
Checkpoint read_checkpoint(std::istream& in, const TrainConfig& hyper);
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int step);

inline constexpr std::uint32_t kCheckpointVersion = 1;

} // namespace cs2k
