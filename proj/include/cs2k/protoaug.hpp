#pragma once

#include "cs2k/model.hpp"
#include "cs2k/prototypes.hpp"
#include "cs2k/rng.hpp"

#include <span>
#include <vector>

namespace cs2k {

enum class AugKind { self, inter };

struct AugmentedPrototype {
    std::vector<double> vector;
    int source_class = 0;
    AugKind kind = AugKind::self;
    int partner_class = 0;  // inter only
    double lambda = 1.0;    // inter only
};

/// Noise scale for self augmentation at step t >= 1:
///   t == 1: sigma^0
///   t > 1:  (|C^{t-1}| sigma^{t-1} + (sum_{m<=t-2} |C^m|) sigma^{t-2}) / sum_{m<=t-1} |C^m|
double scaling_factor(int step, const PrototypeStore& store);

/// eta + s * mu with mu ~ N(0, I).
AugmentedPrototype self_augment(int cls, std::span<const double> eta, double scale, RandomSource& rng);

/// lambda * eta_c + (1 - lambda) * eta_partner with lambda ~ U(0, 1).
AugmentedPrototype inter_augment(int cls, std::span<const double> eta, int partner,
                                 std::span<const double> eta_partner, RandomSource& rng);

struct ReplayOptions {
    bool use_self = true;
    bool use_inter = true;
};

/// Draws the augmented prototypes for one optimization iteration: per old
/// class (ascending), one self-augmented prototype from `self_rng`, then one
/// inter-augmented prototype whose partner and lambda come from `inter_rng`.
/// With a single old class no inter prototype is drawn.
std::vector<AugmentedPrototype> draw_replay(const PrototypeStore& store, double scale, RandomSource& self_rng,
                                            RandomSource& inter_rng, const ReplayOptions& options = {});

/// Replay loss on the classifier only:
///   sum_c [CE(Gamma_c, c) + lambda CE(Pi_c, c) + (1 - lambda) CE(Pi_c, c')] / #old classes
/// When `grad` is non-empty the classifier gradient is added to it; the
/// extractor entries are never touched.
double replay_loss(const Model& model, const std::vector<AugmentedPrototype>& replay, std::size_t old_classes,
                   std::span<double> grad = {});

/// Draw + loss in one call. Returns 0 when there are no old classes.
double loss_pa(const Model& model, const PrototypeStore& store, double scale, RandomSource& self_rng,
               RandomSource& inter_rng, const ReplayOptions& options = {}, std::span<double> grad = {});

} // namespace cs2k
