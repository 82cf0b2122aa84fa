#pragma once

#include <array>
#include <optional>
#include <vector>

#include "dadm/autodiff.hpp"

namespace dadm {

struct AngleLossParams {
    double tau_live = 1.0;
    double tau_spoof = 0.85;
    void validate() const;
};

/// Per-modality top-level features of a batch: features[m] is (B, d) for
/// modality m in {RGB, D, I}.
struct ModalityFeatures {
    std::array<Var, 3> features;
    std::vector<int> labels;  // 1 live, 0 spoof
    std::vector<int> envs;
};

/// Angle-margin alignment loss. Features are unit-normalized first. Terms,
/// over unordered sample pairs (a, b) from different environments:
///   live pairs, per modality:   (cos(z_a^m, z_b^m) - tau_live)^2
///   spoof pairs, per modality:  (cos(z_a^m, z_b^m) - tau_spoof)^2
///   same-label pairs, per modality pair (i, j):
///                               (cos(z_a^i, z_a^j) - cos(z_b^i, z_b^j))^2
/// The result is the sum of all terms divided by their count. Returns nullopt
/// when the batch has fewer than two environments or no contributing pair.
std::optional<Var> angle_loss(const ModalityFeatures& batch, const AngleLossParams& params);

/// Mean softmax cross-entropy of logits (B, 2) against labels in {0, 1}.
Var ce_loss(const Var& logits, const std::vector<int>& labels);

struct LossWeights {
    double lambda_mi = 0.1;
    double lambda_angle = 0.3;
};

/// ce + lambda_mi * mi + lambda_angle * angle; an absent angle term is dropped.
Var total_loss(const Var& ce, const Var& mi, const std::optional<Var>& angle, const LossWeights& w);

}  // namespace dadm
