#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dadm/tensor.hpp"

namespace dadm {

struct AttackType {
    std::string name;
    /// How strongly each modality (RGB, D, I) reveals the attack, in [0, 1].
    /// 0 leaves the live pattern intact in that modality.
    std::array<double, 3> reliability{1.0, 1.0, 1.0};
};

struct EnvShift {
    std::array<double, 3> gain{1.0, 1.0, 1.0};  // per modality
    std::array<double, 3> bias{0.0, 0.0, 0.0};
    int blur_radius = 0;
    double noise = 0.0;
    /// Relative frequency of each attack among this environment's spoofs;
    /// empty means uniform.
    std::vector<double> attack_mix;
    /// Label-correlated offset added to the infrared images: live +cue,
    /// spoof -cue. Zero disables it.
    double cue = 0.0;
};

struct SynthSpec {
    int n_envs = 4;
    int samples_per_env = 800;
    int height = 32;
    int width = 32;
    std::vector<AttackType> attacks;
    std::vector<EnvShift> shifts;  // one per environment
    double live_ratio = 0.5;
    /// Amplitude of the dataset-wide planted live pattern.
    double pattern = 1.0;
    /// Amplitude of a per-sample live field shared by all three modalities.
    double shared = 0.5;
    /// Amplitude of the per-sample, per-modality nuisance field.
    double nuisance = 0.5;
    std::uint64_t seed = 1;

    /// 4 environments x 800 samples, 32x32, print/replay/mask3d, with
    /// per-environment shifts and attack mixes. Field defaults above are the
    /// easier unshifted amplitudes.
    static SynthSpec defaults();
    void validate() const;
};

/// One tri-modal sample. Images are (3, H, W) row-major, stored as float so
/// a file round trip is exact.
struct Record {
    int env = 0;
    int label = 0;    // 1 live, 0 spoof
    int attack = -1;  // index into SynthSpec::attacks, -1 for live
    std::uint8_t presence = 0b111;  // bit m set: modality m present
    int height = 0, width = 0;
    std::array<std::vector<float>, 3> images;
};

using Dataset = std::vector<Record>;

/// Pure function of the spec (including its seed).
Dataset generate(const SynthSpec& spec);

void write_dataset(const Dataset& data, const std::string& path);
/// Throws FormatError on bad magic, unsupported version, truncation or
/// trailing bytes.
Dataset read_dataset(const std::string& path);

/// Byte image of the file format, for hashing and tests.
std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);

/// Key-value text spec: n_envs, samples_per_env, height, width, live_ratio,
/// pattern, shared, nuisance, seed, attack.<name> = r_rgb,r_d,r_i, env<e>.gain = g,g,g,
/// env<e>.bias, env<e>.blur, env<e>.noise, env<e>.mix, env<e>.cue.
SynthSpec parse_synth_spec(const std::string& text);
SynthSpec load_synth_spec(const std::string& path);

/// (B, 3, H, W) tensor of modality m for the selected records.
Tensor stack_modality(const Dataset& data, const std::vector<std::size_t>& idx, int modality);

}  // namespace dadm
