#pragma once

#include <cstddef>
#include <vector>

#include "dadm/nn.hpp"

namespace dadm {

struct MimConfig {
    std::size_t dim = 16;
    std::size_t fuse_kernel = 3;
    /// 0 keeps the fusion convolution vanilla; > 0 makes it a CDC.
    double fuse_theta = 0.0;
    nn::Activation act = nn::Activation::gelu;
};

/// Per-sample result of one MIM module on a batch.
struct MimOutput {
    Var mask1, mask2;        // (B, hw), each entry in (0, 1)
    Var aligned1, aligned2;  // (B, hw, d)
    Var mi1, mi2;            // (B), mean of the aligned map
    Var out1, out2;          // (B, hw, d)
};

struct MimModule {
    nn::CdcConv fuse;       // 2d -> d
    nn::CdcConv mg_conv;    // d -> d, 3x3
    nn::CdcConv mg_head;    // d -> 2, 1x1
    nn::CdcConv out1, out2; // 2d -> d, 1x1
    MimConfig cfg;

    MimModule() = default;
    MimModule(const std::string& name, const MimConfig& cfg, Rng& rng);

    /// z1, z2: patch tokens (B, hw, d) of the two modalities.
    MimOutput forward(Tape& t, const Var& z1, const Var& z2, std::size_t grid_h, std::size_t grid_w) const;
    void collect(nn::ParamList& out);
};

/// Negative Donsker-Varadhan bound with the mean of the two MI tokens as the
/// critic. `marginal_perm` pairs t1[i] with t2[perm[i]].
Var mi_loss_paper(const Var& t1, const Var& t2, const std::vector<std::size_t>& marginal_perm);
/// Same, drawing the pairing as a derangement from `rng`.
Var mi_loss_paper(const Var& t1, const Var& t2, Rng& rng);

/// Mean of mi_loss_paper over every (layer, pair). Each inner vector holds the
/// MIM outputs of one layer.
Var layer_mi_loss(const std::vector<std::vector<const MimOutput*>>& layers, Rng& rng);

/// log(mean(exp(x))) over all entries, shifted by the max for stability.
Var log_mean_exp(const Var& x);

struct MineCritic {
    nn::Mlp net;  // 2k -> hidden -> 1

    MineCritic() = default;
    MineCritic(std::size_t k, std::size_t hidden, Rng& rng);
    /// Scores (N) for pairs (x[i], y[i]).
    Var score(Tape& t, const Var& x, const Var& y) const;
    void collect(nn::ParamList& out);
};

struct MineOptions {
    std::size_t steps = 2000;
    double lr = 1e-3;
    /// Samples per ascent step, drawn without replacement each epoch over the
    /// N rows; 0 or >= N uses the full batch every step.
    std::size_t batch = 512;
    /// Marginal pairings averaged for the reported value.
    std::size_t eval_draws = 4;
    /// Bound recorded every this many steps (0 disables the trace).
    std::size_t trace_every = 100;
};

struct MineResult {
    double estimate = 0.0;
    std::vector<double> trace;  // full-sample bound at trace points
};

/// DV bound E_joint[f] - log E_marginal[e^f] on a batch with marginal pairing `perm`.
Var mine_bound(Tape& t, const MineCritic& critic, const Tensor& x, const Tensor& y,
               const std::vector<std::size_t>& perm);

/// Trains the critic by gradient ascent on the bound and returns the final
/// value on a fresh marginal pairing.
MineResult mine_estimate(const Tensor& x, const Tensor& y, MineCritic& critic, const MineOptions& opt, Rng& rng);

}  // namespace dadm
