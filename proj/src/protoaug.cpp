#include "cs2k/protoaug.hpp"

#include "cs2k/errors.hpp"
#include "cs2k/kernels.hpp"

namespace cs2k {

double scaling_factor(int step, const PrototypeStore& store) {
    if (step < 1) throw ConfigError("scaling factor is defined for steps >= 1");
    auto sigma = [&](int t) {
        auto it = store.sigma_history.find(t);
        if (it == store.sigma_history.end()) throw ConfigError("missing sigma for step " + std::to_string(t));
        return it->second;
    };
    auto count = [&](int t) {
        auto it = store.class_counts.find(t);
        if (it == store.class_counts.end()) throw ConfigError("missing class count for step " + std::to_string(t));
        return static_cast<double>(it->second);
    };
    if (step == 1) return sigma(0);
    double before = 0.0;  // sum_{m=0}^{t-2} |C^m|
    for (int m = 0; m <= step - 2; ++m) before += count(m);
    const double latest = count(step - 1);
    return (latest * sigma(step - 1) + before * sigma(step - 2)) / (before + latest);
}

AugmentedPrototype self_augment(int cls, std::span<const double> eta, double scale, RandomSource& rng) {
    if (scale < 0.0) throw ConfigError("scaling factor must be non-negative");
    AugmentedPrototype a;
    a.source_class = cls;
    a.kind = AugKind::self;
    a.vector.resize(eta.size());
    for (std::size_t j = 0; j < eta.size(); ++j) a.vector[j] = eta[j] + rng.normal() * scale;
    return a;
}

AugmentedPrototype inter_augment(int cls, std::span<const double> eta, int partner,
                                 std::span<const double> eta_partner, RandomSource& rng) {
    if (cls == partner) throw InputError("inter augmentation needs two different classes");
    if (cls <= 0 || partner <= 0) throw InputError("prototype augmentation never uses the background");
    if (eta.size() != eta_partner.size()) throw ConfigError("prototype dimension mismatch");
    AugmentedPrototype a;
    a.source_class = cls;
    a.kind = AugKind::inter;
    a.partner_class = partner;
    a.lambda = rng.uniform();
    a.vector.resize(eta.size());
    for (std::size_t j = 0; j < eta.size(); ++j) a.vector[j] = a.lambda * eta[j] + (1.0 - a.lambda) * eta_partner[j];
    return a;
}

std::vector<AugmentedPrototype> draw_replay(const PrototypeStore& store, double scale, RandomSource& self_rng,
                                            RandomSource& inter_rng, const ReplayOptions& options) {
    const std::vector<int> old = store.foreground_classes();
    std::vector<AugmentedPrototype> out;
    for (int c : old) {
        const auto& eta = store.prototypes.at(c);
        if (options.use_self) out.push_back(self_augment(c, eta, scale, self_rng));
        if (options.use_inter && old.size() >= 2) {
            // Partner drawn uniformly among the other old classes.
            std::size_t k = inter_rng.below(old.size() - 1);
            int partner = old[k];
            if (partner >= c) partner = old[k + 1];
            out.push_back(inter_augment(c, eta, partner, store.prototypes.at(partner), inter_rng));
        }
    }
    return out;
}

double replay_loss(const Model& model, const std::vector<AugmentedPrototype>& replay, std::size_t old_classes,
                   std::span<double> grad) {
    if (replay.empty() || old_classes == 0) return 0.0;
    const std::size_t d = model.embedding_dim();
    std::size_t rows = 0;
    for (const auto& a : replay) rows += a.kind == AugKind::self ? 1 : 2;
    Tensor emb = Tensor::matrix(rows, d);
    PixelTargets targets;
    targets.normalizer = static_cast<double>(old_classes);
    std::size_t r = 0;
    auto add = [&](const AugmentedPrototype& a, int label, double weight) {
        if (a.vector.size() != d) throw ConfigError("augmented prototype dimension mismatch");
        std::copy(a.vector.begin(), a.vector.end(), emb.row(r++).begin());
        targets.labels.push_back(label);
        targets.weights.push_back(weight);
    };
    for (const auto& a : replay) {
        if (a.kind == AugKind::self) {
            add(a, a.source_class, 1.0);
        } else {
            add(a, a.source_class, a.lambda);
            add(a, a.partner_class, 1.0 - a.lambda);
        }
    }
    // A zero mixture weight would drop the row from validation; keep labels
    // checked regardless.
    for (int y : targets.labels) {
        if (y <= 0 || static_cast<std::size_t>(y) >= model.num_outputs()) {
            throw InputError("replay label " + std::to_string(y) + " is not an old foreground class");
        }
    }
    if (grad.empty()) {
        std::vector<double> scratch(model.params().size(), 0.0);
        return kernels::classifier_loss_and_gradient(model, emb, targets, scratch);
    }
    return kernels::classifier_loss_and_gradient(model, emb, targets, grad);
}

double loss_pa(const Model& model, const PrototypeStore& store, double scale, RandomSource& self_rng,
               RandomSource& inter_rng, const ReplayOptions& options, std::span<double> grad) {
    const std::size_t old = store.prototypes.size();
    if (old == 0) return 0.0;
    return replay_loss(model, draw_replay(store, scale, self_rng, inter_rng, options), old, grad);
}

} // namespace cs2k
