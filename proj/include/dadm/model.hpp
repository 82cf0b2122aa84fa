#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dadm/checkpoint.hpp"
#include "dadm/mim.hpp"
#include "dadm/nn.hpp"
#include "dadm/pgirm.hpp"

namespace dadm {

enum class MimMerge { replace, additive };
enum class SubstituteMode { zero, learnable };

struct ModelConfig {
    std::size_t image_h = 32, image_w = 32;
    std::size_t patch = 8;
    std::size_t dim = 16;
    std::size_t layers = 4;
    std::size_t fused_dim = 32;
    std::size_t mlp_ratio = 4;
    double cdc_theta = 0.7;
    bool adapter = true;
    /// Train only the MIM modules, adapters, fusion head and substitutes.
    bool freeze_backbone = false;
    nn::Activation act = nn::Activation::gelu;
    bool use_mim = true;
    MimMerge merge = MimMerge::replace;
    double mim_fuse_theta = 0.0;
    bool regrad = true;
    ReGradScope regrad_scope = ReGradScope::per_sample;
    SubstituteMode substitute = SubstituteMode::zero;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Modality order used throughout: RGB, depth, infrared.
inline constexpr std::array<const char*, 3> kModalityNames = {"rgb", "depth", "ir"};
/// MIM pairs per layer.
inline constexpr std::array<std::array<int, 2>, 3> kMimPairs = {{{0, 1}, {0, 2}, {1, 2}}};

using Presence = std::array<bool, 3>;

struct ForwardResult {
    Var fused;                         // (B, d_f), unit rows
    std::array<Var, 3> class_features; // (B, d) per modality
    std::vector<std::array<MimOutput, 3>> mims;  // per layer, in kMimPairs order
    std::vector<std::shared_ptr<ReGradSlot>> slots;
};

class DadmModel {
public:
    DadmModel(const ModelConfig& cfg, std::vector<int> train_envs);
    DadmModel(const DadmModel&) = delete;
    DadmModel& operator=(const DadmModel&) = delete;

    /// images[m] is (B, 3, H, W). presence may be empty (all present);
    /// otherwise one entry per sample. Absent modalities are replaced by the
    /// configured substitute before the encoder.
    ForwardResult forward(Tape& t, const std::array<Tensor, 3>& images, const std::vector<Presence>& presence) const;

    /// Score s per sample against the given per-sample beta rows:
    /// s_i = beta_{env_i} . [f_i, 1].
    Var env_scores(Tape& t, const Var& fused, const Var& beta_stack, const std::vector<std::size_t>& env_rows) const;

    /// Mean-hyperplane scores, higher is more live.
    std::vector<double> predict(const std::array<Tensor, 3>& images, const std::vector<Presence>& presence) const;

    /// Every shared-weight parameter (betas are kept separately).
    nn::ParamList params();
    std::size_t parameter_count();

    Checkpoint to_checkpoint() const;
    /// Names and shapes must match this model exactly.
    void load_checkpoint(const Checkpoint& ckpt);

    const ModelConfig& config() const { return cfg_; }
    HyperplaneSet betas;

private:
    Var substitute(Tape& t, const Tensor& images, int m, const std::vector<Presence>& presence) const;

    ModelConfig cfg_;
    std::array<nn::PatchEmbed, 3> embed_;
    std::vector<std::array<nn::EncoderBlock, 3>> blocks_;
    std::vector<std::array<MimModule, 3>> mims_;
    nn::Linear head_;
    std::array<Parameter, 3> substitutes_;
};

}  // namespace dadm
