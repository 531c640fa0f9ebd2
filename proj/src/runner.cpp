#include "cs2k/runner.hpp"

#include "cs2k/binio.hpp"
#include "cs2k/errors.hpp"
#include "cs2k/numgrad.hpp"
#include "cs2k/protoaug.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>

namespace cs2k {

namespace {

constexpr char kCheckpointMagic[] = "CS2KCKPT";

PseudoLabelStrategy strategy_from(const std::string& s) {
    if (s == "none") return PseudoLabelStrategy::none;
    if (s == "naive") return PseudoLabelStrategy::naive;
    if (s == "median_entropy") return PseudoLabelStrategy::median_entropy;
    if (s == "prototype_guided") return PseudoLabelStrategy::prototype_guided;
    throw ConfigError("unknown pseudo-label strategy '" + s + "'");
}

ConsolidationMode consolidation_from(const std::string& s) {
    if (s == "none") return ConsolidationMode::none;
    if (s == "uniform") return ConsolidationMode::uniform;
    if (s == "selective") return ConsolidationMode::selective;
    throw ConfigError("unknown consolidation mode '" + s + "'");
}

std::vector<const ImageSample*> shuffled(const std::vector<const ImageSample*>& images, RandomSource& rng) {
    std::vector<const ImageSample*> out = images;
    for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
    return out;
}

bool uses_replay(const MethodConfig& m) { return m.use_pca_self || m.use_pca_inter; }

bool needs_prototypes(const MethodConfig& m) {
    return m.pseudo_labels == PseudoLabelStrategy::prototype_guided || uses_replay(m);
}

// Plain supervised epochs over `images` against `labels_of(image)`.
template <class Labels>
double supervised_epochs(Model& model, const std::vector<const ImageSample*>& images, const TrainConfig& hyper,
                         RandomSource& shuffle_rng, Labels labels_of) {
    double last = 0.0;
    const auto batch = static_cast<std::size_t>(hyper.batch_images);
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        const auto order = shuffled(images, shuffle_rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t first = 0; first < order.size(); first += batch) {
            const std::span<const ImageSample* const> chunk(order.data() + first,
                                                             std::min(batch, order.size() - first));
            const PixelBatch b = make_batch(chunk);
            std::vector<int> labels;
            labels.reserve(b.gt_full.size());
            for (const auto* img : chunk) {
                const auto l = labels_of(*img);
                labels.insert(labels.end(), l.begin(), l.end());
            }
            std::vector<double> grad(model.params().size(), 0.0);
            total += kernels::loss_and_gradient(model, b.features, PixelTargets::mean(std::move(labels)), grad);
            sgd_step(model, grad, hyper.lr);
            ++batches;
        }
        last = total / static_cast<double>(batches);
    }
    return last;
}

std::vector<MetricsReport> run_joint(const Scenario& scenario, const TrainConfig& hyper, std::uint64_t seed) {
    std::vector<MetricsReport> reports;
    for (int t = 0; t < static_cast<int>(scenario.steps.size()); ++t) {
        const std::vector<int> seen = scenario.classes_through(t);
        auto init = make_stream(seed, Stream::init, 0);
        Model model(hyper.model, seen.size() + 1, init);
        std::vector<const ImageSample*> images;
        for (int u = 0; u <= t; ++u) {
            for (const auto& img : scenario.steps[static_cast<std::size_t>(u)].images) images.push_back(&img);
        }
        auto shuffle_rng = make_stream(seed, Stream::shuffle, static_cast<std::uint64_t>(t));
        supervised_epochs(model, images, hyper, shuffle_rng,
                          [&](const ImageSample& img) { return relabel_for_step(img.gt_full, seen); });
        reports.push_back(evaluate(model, scenario, t, hyper.background_in_old));
    }
    return reports;
}

void write_param_vector(std::ostream& out, const ParamVector& p) {
    binio::write_u32(out, static_cast<std::uint32_t>(p.segments.size()));
    for (const auto& s : p.segments) {
        binio::write_string(out, s.name);
        binio::write_u64(out, s.offset);
        binio::write_u64(out, s.length);
        binio::write_i32(out, s.step);
    }
    binio::write_f64s(out, p.values);
}

ParamVector read_param_vector(std::istream& in) {
    ParamVector p;
    const auto n = binio::read_u32(in);
    for (std::uint32_t i = 0; i < n; ++i) {
        Segment s;
        s.name = binio::read_string(in);
        s.offset = binio::read_u64(in);
        s.length = binio::read_u64(in);
        s.step = binio::read_i32(in);
        p.segments.push_back(std::move(s));
    }
    p.values = binio::read_f64s(in);
    try {
        p.validate();
    } catch (const ConfigError& e) {
        throw FormatError(e.what());
    }
    return p;
}

} // namespace

// ---------------------------------------------------------------------------
// Method configuration
// ---------------------------------------------------------------------------

std::string to_string(PseudoLabelStrategy s) {
    switch (s) {
    case PseudoLabelStrategy::none: return "none";
    case PseudoLabelStrategy::naive: return "naive";
    case PseudoLabelStrategy::median_entropy: return "median_entropy";
    case PseudoLabelStrategy::prototype_guided: return "prototype_guided";
    }
    return "?";
}

std::string to_string(ConsolidationMode m) {
    switch (m) {
    case ConsolidationMode::none: return "none";
    case ConsolidationMode::uniform: return "uniform";
    case ConsolidationMode::selective: return "selective";
    }
    return "?";
}

void MethodConfig::validate() const {
    if (joint_training && (pseudo_labels != PseudoLabelStrategy::none || use_pca_self || use_pca_inter ||
                           consolidation != ConsolidationMode::none)) {
        throw ConfigError("joint training excludes every other mechanism");
    }
}

std::string MethodConfig::to_json() const {
    nlohmann::ordered_json j;
    j["pseudo_label_strategy"] = to_string(pseudo_labels);
    j["use_pca_self"] = use_pca_self;
    j["use_pca_inter"] = use_pca_inter;
    j["consolidation"] = to_string(consolidation);
    j["joint_training"] = joint_training;
    return j.dump();
}

MethodConfig MethodConfig::from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        MethodConfig m;
        m.pseudo_labels = strategy_from(j.at("pseudo_label_strategy").get<std::string>());
        m.use_pca_self = j.at("use_pca_self").get<bool>();
        m.use_pca_inter = j.at("use_pca_inter").get<bool>();
        m.consolidation = consolidation_from(j.at("consolidation").get<std::string>());
        m.joint_training = j.at("joint_training").get<bool>();
        m.validate();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad method config: ") + e.what());
    }
}

MethodConfig method_preset(const std::string& name) {
    MethodConfig m;
    if (name == "ft") return m;
    if (name == "joint") {
        m.joint_training = true;
        return m;
    }
    if (name == "naive") {
        m.pseudo_labels = PseudoLabelStrategy::naive;
        return m;
    }
    if (name == "median") {
        m.pseudo_labels = PseudoLabelStrategy::median_entropy;
        return m;
    }
    if (name == "wf") {
        m.consolidation = ConsolidationMode::uniform;
        return m;
    }
    if (name == "cs2k") {
        m.pseudo_labels = PseudoLabelStrategy::prototype_guided;
        m.use_pca_self = true;
        m.use_pca_inter = true;
        m.consolidation = ConsolidationMode::selective;
        return m;
    }
    throw ConfigError("unknown method '" + name + "' (expected ft|joint|naive|median|wf|cs2k)");
}

MethodConfig ablate(MethodConfig method, const std::string& flag) {
    if (flag == "ppl") {
        if (method.pseudo_labels == PseudoLabelStrategy::prototype_guided) {
            method.pseudo_labels = PseudoLabelStrategy::naive;
        }
    } else if (flag == "pca-sa") {
        method.use_pca_self = false;
    } else if (flag == "pca-ia") {
        method.use_pca_inter = false;
    } else if (flag == "wsc") {
        method.consolidation = ConsolidationMode::none;
    } else {
        throw ConfigError("unknown ablation '" + flag + "' (expected ppl|pca-sa|pca-ia|wsc)");
    }
    return method;
}

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_images < 1) throw ConfigError("batch_images must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
}

std::string TrainConfig::to_json() const {
    nlohmann::ordered_json j;
    j["epochs"] = epochs;
    j["batch_images"] = batch_images;
    j["lr"] = lr;
    j["tau"] = tau;
    j["input_dim"] = model.input_dim;
    j["hidden"] = model.hidden;
    j["embedding_dim"] = model.embedding_dim;
    j["background_in_old"] = background_in_old;
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    TrainConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        if (!j.is_object()) throw ConfigError("training config must be a JSON object");
        for (const auto& [key, value] : j.items()) {
            if (key == "epochs") c.epochs = value.get<int>();
            else if (key == "batch_images") c.batch_images = value.get<int>();
            else if (key == "lr") c.lr = value.get<double>();
            else if (key == "tau") c.tau = value.get<double>();
            else if (key == "input_dim") c.model.input_dim = value.get<std::size_t>();
            else if (key == "hidden") c.model.hidden = value.get<std::vector<std::size_t>>();
            else if (key == "embedding_dim") c.model.embedding_dim = value.get<std::size_t>();
            else if (key == "background_in_old") c.background_in_old = value.get<bool>();
            else throw ConfigError("unknown training config field '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad training config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

RunState initial_state(const TrainConfig& hyper, std::size_t first_step_classes, std::uint64_t seed) {
    RunState s;
    s.seed = seed;
    auto init = make_stream(seed, Stream::init, 0);
    s.model = Model(hyper.model, first_step_classes + 1, init);
    return s;
}

void prepare_step(RunState& state, const StepDataset& dataset) {
    if (dataset.step != state.step + 1) {
        throw ConfigError("step " + std::to_string(dataset.step) + " does not follow step " +
                          std::to_string(state.step));
    }
    if (dataset.step == 0) return;
    state.old_model = state.model;
    auto init = make_stream(state.seed, Stream::init, static_cast<std::uint64_t>(dataset.step));
    state.model.extend_classifier(dataset.classes.size(), dataset.step, init);
}

MaskedLabels batch_targets(const RunState& state, const PixelBatch& batch, const MethodConfig& method,
                           const TrainConfig& hyper, const EntropyMedians* medians) {
    MaskedLabels out{batch.gt_step, std::vector<bool>(batch.gt_step.size(), false)};
    if (!state.old_model || method.pseudo_labels == PseudoLabelStrategy::none) return out;
    const ForwardResult old_out = forward(*state.old_model, batch.features);
    switch (method.pseudo_labels) {
    case PseudoLabelStrategy::naive:
        out.labels = naive_pseudo_labels(softmax(old_out.logits), batch.gt_step);
        break;
    case PseudoLabelStrategy::prototype_guided:
        out.labels = pseudo_labels(old_out, batch.gt_step, state.store, hyper.tau);
        break;
    case PseudoLabelStrategy::median_entropy:
        if (medians == nullptr) throw ConfigError("median-entropy pseudo labels need entropy medians");
        out = median_entropy_pseudo_labels(softmax(old_out.logits), batch.gt_step, *medians);
        break;
    case PseudoLabelStrategy::none:
        break;
    }
    return out;
}

void train_step(RunState& state, const StepDataset& dataset, const MethodConfig& method, const TrainConfig& hyper) {
    method.validate();
    hyper.validate();
    if (method.joint_training) throw ConfigError("joint training runs through run_scenario");
    const int t = dataset.step;
    const std::size_t seen = std::accumulate(state.class_counts.begin(), state.class_counts.end(), std::size_t{0}) +
                             dataset.classes.size();
    if (state.model.num_outputs() != seen + 1) {
        throw ConfigError("classifier must be extended to 1 + seen classes before training");
    }
    if (t > 0 && !state.old_model) throw ConfigError("steps after 0 need a frozen old model");

    StepLog log;
    log.step = t;
    const bool incremental = t > 0;

    if (incremental && method.pseudo_labels == PseudoLabelStrategy::prototype_guided) {
        compute_background_prototype(*state.old_model, dataset, state.store);
        if (!state.store.bg_prototype) throw ConfigError("no pixel qualifies for the background prototype");
    }
    std::optional<EntropyMedians> medians;
    if (incremental && method.pseudo_labels == PseudoLabelStrategy::median_entropy) {
        medians = entropy_medians(*state.old_model, dataset);
    }
    const bool replay = incremental && uses_replay(method) && !state.store.prototypes.empty();
    const double scale = replay ? scaling_factor(t, state.store) : 0.0;
    const ReplayOptions replay_opts{method.use_pca_self, method.use_pca_inter};

    auto shuffle_rng = make_stream(state.seed, Stream::shuffle, static_cast<std::uint64_t>(t));
    auto self_rng = make_stream(state.seed, Stream::self_aug, static_cast<std::uint64_t>(t));
    auto inter_rng = make_stream(state.seed, Stream::inter_aug, static_cast<std::uint64_t>(t));

    std::vector<const ImageSample*> images;
    for (const auto& img : dataset.images) images.push_back(&img);
    const auto batch_size = static_cast<std::size_t>(hyper.batch_images);

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        const auto order = shuffled(images, shuffle_rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t first = 0; first < order.size(); first += batch_size) {
            const std::span<const ImageSample* const> chunk(order.data() + first,
                                                             std::min(batch_size, order.size() - first));
            const PixelBatch batch = make_batch(chunk);
            MaskedLabels targets = batch_targets(state, batch, method, hyper, medians ? &*medians : nullptr);

            std::vector<double> grad(state.model.params().size(), 0.0);
            total += kernels::loss_and_gradient(state.model, batch.features,
                                                PixelTargets::mean(std::move(targets.labels), &targets.ignore), grad);
            if (replay) {
                total += loss_pa(state.model, state.store, scale, self_rng, inter_rng, replay_opts, grad);
            }
            sgd_step(state.model, grad, hyper.lr);
            ++batches;
        }
        log.last_epoch_loss = batches == 0 ? 0.0 : total / static_cast<double>(batches);
    }

    std::vector<int> counts = state.class_counts;
    counts.push_back(static_cast<int>(dataset.classes.size()));
    if (incremental && method.consolidation != ConsolidationMode::none) {
        log.beta = beta(counts);
        log.omega = hyper.omega_override.value_or(omega(counts));
        const ParamVector& old_params = state.old_model->params();
        if (method.consolidation == ConsolidationMode::uniform) {
            state.model.params() = uniform_fusion(old_params, state.model.params(), log.omega);
            log.merged = old_params.size();
        } else {
            if (!state.fisher) throw ConfigError("selective consolidation needs the previous step's Fisher");
            MergeResult merged =
                hyper.merge_threshold_override
                    ? merge_above(old_params, state.model.params(), *state.fisher, *hyper.merge_threshold_override,
                                  log.omega)
                    : selective_merge(old_params, state.model.params(), *state.fisher, log.beta, log.omega);
            state.model.params() = std::move(merged.params);
            log.threshold = merged.threshold;
            log.merged = merged.merged;
        }
    }

    if (needs_prototypes(method)) compute_prototypes(state.model, dataset, state.store);
    if (method.consolidation == ConsolidationMode::selective) {
        state.fisher = fisher_diagonal(state.model, dataset);
    } else {
        state.fisher.reset();
    }
    state.class_counts = std::move(counts);
    state.step = t;
    state.log.push_back(log);
}

// ---------------------------------------------------------------------------
// Evaluation and orchestration
// ---------------------------------------------------------------------------

MetricsReport evaluate(const Model& model, const Scenario& scenario, int step, bool background_in_old) {
    const std::vector<int> seen = scenario.classes_through(step);
    const std::vector<int>& current = scenario.steps.at(static_cast<std::size_t>(step)).classes;
    std::vector<int> old_classes;
    for (int c : seen) {
        if (std::find(current.begin(), current.end(), c) == current.end()) old_classes.push_back(c);
    }
    if (model.num_outputs() != seen.size() + 1) throw ConfigError("model width does not match the evaluated step");
    const std::size_t k = model.num_outputs();
    std::vector<ConfusionMatrix> parts(scenario.test_set.size(), ConfusionMatrix(k));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(parts.size()); ++i) {
        const auto& img = scenario.test_set[static_cast<std::size_t>(i)];
        const PixelBatch b = make_batch(img);
        const auto pred = argmax_rows(kernels::forward(model, b.features).logits);
        std::vector<bool> skip(pred.size());
        for (std::size_t p = 0; p < pred.size(); ++p) skip[p] = b.gt_full[p] >= static_cast<int>(k);
        parts[static_cast<std::size_t>(i)] = confusion(pred, b.gt_full, k, &skip);
    }
    ConfusionMatrix total(k);
    for (const auto& p : parts) total += p;
    return make_report(step, total, old_classes, current, background_in_old);
}

std::vector<MetricsReport> run_scenario(const Scenario& scenario, const MethodConfig& method,
                                        const TrainConfig& hyper, std::uint64_t seed, const RunOptions& options) {
    method.validate();
    hyper.validate();
    if (scenario.steps.empty()) throw ConfigError("scenario has no steps");
    if (static_cast<std::size_t>(scenario.spec.feature_dim) != hyper.model.input_dim) {
        throw ConfigError("scenario feature_dim does not match the model input_dim");
    }
    if (method.joint_training) return run_joint(scenario, hyper, seed);

    std::vector<MetricsReport> reports;
    RunState state;
    const int num_steps = static_cast<int>(scenario.steps.size());
    if (options.from_step > 0) {
        if (!options.checkpoint_dir) throw ConfigError("resuming needs a checkpoint directory");
        if (options.from_step >= num_steps) throw ConfigError("--from-step is past the last step");
        for (int t = 0; t < options.from_step; ++t) {
            std::ifstream in(checkpoint_path(*options.checkpoint_dir, t), std::ios::binary);
            if (!in) throw ConfigError("missing checkpoint for step " + std::to_string(t));
            Checkpoint c = read_checkpoint(in, hyper);
            reports.push_back(c.report);
            if (t == options.from_step - 1) state = std::move(c.state);
        }
        if (state.seed != seed) throw ConfigError("checkpoint was written with a different seed");
    } else {
        state = initial_state(hyper, scenario.steps.front().classes.size(), seed);
    }

    for (int t = options.from_step; t < num_steps; ++t) {
        const StepDataset& dataset = scenario.steps[static_cast<std::size_t>(t)];
        prepare_step(state, dataset);
        train_step(state, dataset, method, hyper);
        reports.push_back(evaluate(state.model, scenario, t, hyper.background_in_old));
        if (options.checkpoint_dir) {
            std::filesystem::create_directories(*options.checkpoint_dir);
            std::ofstream out(checkpoint_path(*options.checkpoint_dir, t), std::ios::binary);
            if (!out) throw std::runtime_error("cannot write checkpoint for step " + std::to_string(t));
            write_checkpoint(out, state, hyper, reports.back());
        }
    }
    return reports;
}

double relabel_accuracy(const std::vector<int>& labels, const std::vector<int>& gt_step,
                        const std::vector<int>& gt_full, int first_new_class) {
    std::size_t hits = 0;
    std::size_t total = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (gt_step[i] != 0 || gt_full[i] == 0 || gt_full[i] >= first_new_class) continue;
        ++total;
        if (labels[i] == gt_full[i]) ++hits;
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int step) {
    return dir / ("step_" + std::to_string(step) + ".ckpt");
}

void write_checkpoint(std::ostream& out, const RunState& state, const TrainConfig& hyper,
                      const MetricsReport& report) {
    binio::write_header(out, kCheckpointMagic, kCheckpointVersion);
    binio::write_string(out, hyper.to_json());
    binio::write_u64(out, state.seed);
    binio::write_i32(out, state.step);
    binio::write_i32s(out, state.class_counts);
    write_param_vector(out, state.model.params());
    write_prototypes(out, state.store);
    binio::write_u32(out, state.fisher ? 1 : 0);
    if (state.fisher) write_fisher(out, *state.fisher);
    binio::write_string(out, reports_json({report}));
}

Checkpoint read_checkpoint(std::istream& in, const TrainConfig& hyper) {
    const auto version = binio::read_header(in, kCheckpointMagic);
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
    const std::string saved_hyper = binio::read_string(in);
    if (saved_hyper != hyper.to_json()) throw ConfigError("checkpoint was written with different hyperparameters");
    Checkpoint c;
    c.state.seed = binio::read_u64(in);
    c.state.step = binio::read_i32(in);
    c.state.class_counts = binio::read_i32s(in);
    c.state.model = Model::from_params(hyper.model, read_param_vector(in));
    c.state.store = read_prototypes(in);
    if (binio::read_u32(in) != 0) c.state.fisher = read_fisher(in);
    const auto reports = reports_from_json(binio::read_string(in));
    if (reports.size() != 1) throw FormatError("checkpoint must hold exactly one report");
    c.report = reports.front();
    return c;
}

} // namespace cs2k
