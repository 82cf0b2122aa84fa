#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <memory>
#include <vector>

#include "dadm/autodiff.hpp"

namespace dadm {

// ------------------------------------------------------------------ ReGrad

enum class ReGradBranch {
    conflict_weak1 = 1,   // g1.g2 < 0, mi1 <= mi2
    agree_weak1 = 2,      // g1.g2 > 0, mi1 <= mi2
    conflict_weak2 = 3,   // g1.g2 < 0, mi1 > mi2
    agree_weak2 = 4,      // g1.g2 > 0, mi1 > mi2
    orthogonal = 5,       // g1.g2 == 0: g1 + g2 * max(mi1, mi2)
};

struct ReGradResult {
    Tensor grad;
    ReGradBranch branch;
    /// A projection norm was zero; grad is the plain sum g1 + g2.
    bool degenerate = false;
};

/// MI-weighted gradient modulation of g1 against g2. mi1, mi2 are the
/// squashed reliabilities in (0, 1).
ReGradResult regrad(const Tensor& g1, const Tensor& g2, double mi1, double mi2);

enum class ReGradScope {
    per_sample,  // one modulation per sample's gradient slice
    batch,       // one modulation of the whole accumulated batch gradient
};

/// Filled by the forward pass once the MI tokens exist; read by the gate
/// during backward.
struct ReGradSlot {
    Tensor mi1, mi2;  // raw MI tokens (B)
    bool ready = false;
    std::array<long, 6> branch_counts{};
    long degenerate = 0;
};

struct GatedPair {
    Var z1, z2;
    std::shared_ptr<ReGradSlot> slot;
};

/// Identity in the forward direction. In backward, the incoming pair
/// (g1, g2) becomes (regrad(g1, g2), regrad(g2, g1)) with mi = sigmoid(token).
GatedPair regrad_gate(const Var& z1, const Var& z2, ReGradScope scope);

// ------------------------------------------------------------------ PG-IRM

/// One linear classifier [w; b] per training environment.
struct HyperplaneSet {
    std::vector<int> envs;
    std::vector<Tensor> betas;  // each (d_f + 1)

    HyperplaneSet() = default;
    HyperplaneSet(std::vector<int> envs, std::size_t feature_dim);
    std::size_t feature_dim() const;
    std::size_t index_of(int env) const;
    /// Arithmetic mean of the betas, computed on each call.
    Tensor mean() const;
    /// Largest pairwise L2 distance between betas.
    double max_pairwise_distance() const;
    void validate() const;
};

struct PgIrmConfig {
    double alpha = 0.9;
    int t_alpha = 5;
    double lr = 0.05;
    int epochs = 50;
    void validate() const;
};

struct PgIrmStepInfo {
    double alpha_used = 1.0;
    std::vector<std::size_t> farthest;   // index of e-bar per environment
    std::vector<double> dist_before;     // |beta~_e - beta_ebar_old|
    std::vector<double> dist_after;      // |beta_e_new - beta_ebar_old|
};

/// Gradient step followed by the alpha-adjacency projection toward the
/// farthest other environment's pre-step classifier. Epoch t <= t_alpha uses
/// alpha' = 1. All environments update from the same old set.
HyperplaneSet pgirm_step(const HyperplaneSet& betas, const std::map<int, Tensor>& grads, const PgIrmConfig& cfg,
                         int epoch, PgIrmStepInfo* info = nullptr);

/// Mean-hyperplane score of one fused feature (d_f).
double inference_score(const Tensor& features, const HyperplaneSet& betas);
/// Scores of a (B, d_f) batch.
std::vector<double> inference_scores(const Tensor& features, const HyperplaneSet& betas);

}  // namespace dadm
