#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dadm/checkpoint.hpp"
#include "dadm/kvconfig.hpp"
#include "dadm/metrics.hpp"
#include "dadm/model.hpp"
#include "dadm/synth.hpp"
#include "dadm/train.hpp"

namespace dadm {

enum class Protocol { fixed, missing, flexible, limited };

struct ProtocolConfig {
    Protocol protocol = Protocol::fixed;
    std::vector<int> test_envs{3};
    /// Training environments; empty means every non-test environment. Only
    /// the limited protocol may name a strict subset.
    std::vector<int> source_envs;
    /// Modalities replaced by zeros at test time (missing protocol).
    std::vector<int> missing;
    double drop_prob = 0.3;
    /// Share of each source environment held out for model selection.
    double val_fraction = 0.2;
    std::uint64_t seed = 1;
    ModelConfig model;
    TrainConfig train;

    /// Keys are listed in the README; unknown keys are errors.
    static ProtocolConfig parse(const KeyValues& kv);
    static ProtocolConfig parse_text(const std::string& text);
    static ProtocolConfig load(const std::string& path);
    /// Canonical sorted key = value text; parse(echo()) reproduces the config.
    std::string echo() const;
    /// 16 hex digits derived from echo().
    std::string run_id() const;
    void validate() const;
};

const char* protocol_name(Protocol p);

struct EpochRecord {
    EpochStats stats;
    double val_auc = 0.0;
    double val_hter = 0.0;
};

struct MetricsReport {
    std::string run_id;
    std::uint64_t seed = 0;
    std::string protocol;
    Metrics test;          // threshold chosen on the source validation split
    double val_auc = 0.0;  // of the selected epoch
    int best_epoch = 0;
    std::vector<EpochRecord> epochs;
    std::string config_echo;
    double wall_seconds = 0.0;
};

struct RunOutput {
    MetricsReport report;
    Checkpoint best;  // selected weights, betas and config metadata
};

/// Source/validation/test index split of `data` under `cfg`.
struct Split {
    std::vector<std::size_t> train, val, test;
    std::vector<int> source_envs;
};
Split make_split(const ProtocolConfig& cfg, const Dataset& data);

/// Trains on the source environments, selects the epoch with the best source
/// validation AUC, and evaluates on the test environments. With a non-empty
/// run_dir, writes config.txt, log.jsonl (one record per epoch),
/// report.json and best.ckpt there.
RunOutput run_protocol(const ProtocolConfig& cfg, const Dataset& data, const std::string& run_dir = {});

/// Scores the test environments of `cfg` with a trained checkpoint, using the
/// threshold stored in it.
MetricsReport evaluate_checkpoint(const Checkpoint& ckpt, const ProtocolConfig& cfg, const Dataset& data);
/// Rebuilds the training config stored in a checkpoint.
ProtocolConfig config_from_checkpoint(const Checkpoint& ckpt);

std::string report_json(const MetricsReport& r);
std::string epoch_json(const std::string& run_id, const EpochRecord& e);

}  // namespace dadm
