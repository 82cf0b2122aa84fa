#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "dadm/losses.hpp"
#include "dadm/model.hpp"
#include "dadm/optim.hpp"
#include "dadm/synth.hpp"

namespace dadm {

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
    int epochs = 50;
    std::size_t batch = 32;
    OptimizerKind optimizer = OptimizerKind::adam;
    double lr = 1e-3;
    double weight_decay = 1e-3;
    LossWeights weights;
    AngleLossParams angle;
    /// alpha, t_alpha and the beta learning rate; `epochs` is kept in sync.
    PgIrmConfig pgirm;
    /// Per-sample, per-modality drop probability during training.
    double drop_prob = 0.0;
    std::uint64_t seed = 1;

    void validate() const;
};

/// One minibatch in model layout.
struct Batch {
    std::array<Tensor, 3> images;
    std::vector<Presence> presence;  // empty when every modality is present
    std::vector<int> labels;
    std::vector<int> envs;
};

/// Records `idx` of `data`. Presence combines each record's bits with `keep`,
/// then drops modalities with probability `drop_prob`. When every modality
/// would go, one of those present is kept, chosen uniformly.
Batch make_batch(const Dataset& data, const std::vector<std::size_t>& idx, const Presence& keep = {true, true, true},
                 double drop_prob = 0.0, Rng* rng = nullptr);

/// Shuffled batches of about `batch` samples, each drawing from every
/// environment in proportion to its share of `idx`.
std::vector<std::vector<std::size_t>> stratified_batches(const Dataset& data, const std::vector<std::size_t>& idx,
                                                         std::size_t batch, Rng& rng);

struct EpochStats {
    int epoch = 0;
    std::size_t batches = 0;
    double ce = 0.0, mi = 0.0, angle = 0.0, total = 0.0;  // batch means
    std::size_t angle_batches = 0;
    double beta_max_distance = 0.0;
    std::array<long, 6> branch_counts{};
    long degenerate = 0;
};

/// Loss terms of one batch on a recording tape.
struct BatchLoss {
    Var total, ce;
    std::optional<Var> mi, angle;
    Var beta_stack;  // (E, d_f + 1) leaf holding the environment classifiers
    ForwardResult forward;
};

BatchLoss batch_loss(Tape& t, const DadmModel& model, const Batch& batch, const TrainConfig& cfg, Rng& rng);

class Trainer {
public:
    Trainer(DadmModel& model, const TrainConfig& cfg);

    /// One pass over `train_idx`. `epoch` is 1-based and drives the PG-IRM
    /// alignment schedule. Throws ConfigError if a batch holds fewer than two
    /// environments while the model has two or more.
    EpochStats train_epoch(const Dataset& data, const std::vector<std::size_t>& train_idx, int epoch);

    const TrainConfig& config() const { return cfg_; }

private:
    DadmModel& model_;
    TrainConfig cfg_;
    std::optional<Adam> adam_;
    std::optional<Sgd> sgd_;
    Rng rng_;
};

/// Mean-hyperplane scores of `idx`, evaluated in chunks.
std::vector<double> score_records(const DadmModel& model, const Dataset& data, const std::vector<std::size_t>& idx,
                                  const Presence& keep = {true, true, true}, double drop_prob = 0.0,
                                  Rng* rng = nullptr);

}  // namespace dadm
