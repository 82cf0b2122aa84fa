#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dadm/autodiff.hpp"
#include "dadm/rng.hpp"

namespace dadm::nn {

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);

/// Collects raw pointers to every Parameter of a module tree. Pointers stay
/// valid as long as the module is not moved.
using ParamList = std::vector<Parameter*>;

enum class Activation { relu, gelu };
Var activate(const Var& x, Activation a);

/// Affine map over the last axis: x (..., in) -> (..., out).
struct Linear {
    Parameter weight;  // (in, out)
    Parameter bias;    // (out) when has_bias
    bool has_bias = true;

    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
    Var forward(Tape& t, const Var& x) const;
    void collect(ParamList& out);
    std::size_t in() const { return weight.value.dim(0); }
    std::size_t out() const { return weight.value.dim(1); }
};

/// Same-padded stride-1 convolution with central-difference blending
/// (theta = 0 is vanilla). Optional per-channel bias.
struct CdcConv {
    Parameter weight;  // (out, in, k, k)
    Parameter bias;    // (out) when has_bias
    double theta = 0.0;
    bool has_bias = false;

    CdcConv() = default;
    CdcConv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, double theta, bool with_bias,
            Rng& rng);
    Var forward(Tape& t, const Var& x) const;
    void collect(ParamList& out);
};

struct PatchEmbed {
    std::size_t patch = 8;
    std::size_t grid_h = 0, grid_w = 0;
    Linear proj;         // 3*P*P -> d
    Parameter pos;       // (hw+1, d)
    Parameter cls;       // (d)

    PatchEmbed() = default;
    PatchEmbed(const std::string& name, std::size_t image_h, std::size_t image_w, std::size_t patch, std::size_t dim,
               Rng& rng);
    /// images (B, 3, H, W) -> tokens (B, hw+1, d); row 0 is the class token.
    Var forward(Tape& t, const Var& images) const;
    void collect(ParamList& out);
    std::size_t tokens() const { return grid_h * grid_w; }
};

/// Token grid conversion for convolutions over patch tokens.
/// (B, hw, d) -> (B, d, h, w) and back.
Var tokens_to_grid(const Var& tokens, std::size_t h, std::size_t w);
Var grid_to_tokens(const Var& grid);

struct CdcAdapter {
    CdcConv conv1, conv2;
    Activation act = Activation::gelu;

    CdcAdapter() = default;
    CdcAdapter(const std::string& name, std::size_t dim, double theta, Rng& rng);
    /// Residual branch only: conv2(act(conv1(x))) for a grid (B, d, h, w).
    Var branch(Tape& t, const Var& grid) const;
    void collect(ParamList& out);
};

struct BlockConfig {
    std::size_t dim = 16;
    std::size_t mlp_ratio = 4;
    double cdc_theta = 0.7;
    bool adapter = true;
    Activation act = Activation::gelu;
};

/// Pre-norm single-head transformer block with a CDC adapter on patch tokens.
struct EncoderBlock {
    Parameter ln1_gain, ln1_shift, ln2_gain, ln2_shift;
    Linear wq, wk, wv, wo, mlp1, mlp2;
    CdcAdapter adapter;
    BlockConfig cfg;

    EncoderBlock() = default;
    EncoderBlock(const std::string& name, const BlockConfig& cfg, Rng& rng);
    /// tokens (B, n, d) with n = hw+1 -> (B, n, d).
    Var forward(Tape& t, const Var& tokens, std::size_t grid_h, std::size_t grid_w) const;
    void collect(ParamList& out);
};

/// Two-layer perceptron head with an activation in between.
struct Mlp {
    Linear l1, l2;
    Activation act = Activation::relu;

    Mlp() = default;
    Mlp(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Activation act, Rng& rng);
    Var forward(Tape& t, const Var& x) const;
    void collect(ParamList& out);
};

}  // namespace dadm::nn
