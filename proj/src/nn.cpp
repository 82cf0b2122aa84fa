#include "dadm/nn.hpp"

#include <cmath>

#include "dadm/errors.hpp"
#include "dadm/ops.hpp"

namespace dadm::nn {

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

Var activate(const Var& x, Activation a) { return a == Activation::relu ? ops::relu(x) : ops::gelu(x); }

// ---------------------------------------------------------------- Linear

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool with_bias)
    : weight{name + ".w", init_uniform({in, out}, in, rng)}, has_bias(with_bias) {
    if (has_bias) bias = Parameter{name + ".b", init_uniform({out}, in, rng)};
}

Var Linear::forward(Tape& t, const Var& x) const {
    const Shape& s = x.shape();
    if (s.empty() || s.back() != in())
        throw ShapeError(weight.name + ": input " + shape_str(s) + " does not end in " + std::to_string(in()));
    Var flat = s.size() == 2 ? x : ops::reshape(x, {x.size() / in(), in()});
    Var y = ops::matmul(flat, t.param(weight));
    if (has_bias) y = ops::add_bias(y, t.param(bias));
    if (s.size() == 2) return y;
    Shape os = s;
    os.back() = out();
    return ops::reshape(y, os);
}

void Linear::collect(ParamList& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
}

// ---------------------------------------------------------------- CdcConv

CdcConv::CdcConv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, double theta_,
                 bool with_bias, Rng& rng)
    : weight{name + ".w", init_uniform({out, in, k, k}, in * k * k, rng)}, theta(theta_), has_bias(with_bias) {
    if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError(name + ": theta must lie in [0, 1]");
    if (k % 2 == 0) throw ConfigError(name + ": kernel size must be odd for same padding");
    if (has_bias) bias = Parameter{name + ".b", init_uniform({out}, in * k * k, rng)};
}

Var CdcConv::forward(Tape& t, const Var& x) const {
    Var y = ops::conv2d(x, t.param(weight), theta);
    return has_bias ? ops::add_channel_bias(y, t.param(bias)) : y;
}

void CdcConv::collect(ParamList& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
}

// ---------------------------------------------------------------- PatchEmbed

PatchEmbed::PatchEmbed(const std::string& name, std::size_t image_h, std::size_t image_w, std::size_t patch_,
                       std::size_t dim, Rng& rng)
    : patch(patch_) {
    if (patch == 0 || image_h % patch != 0 || image_w % patch != 0)
        throw ConfigError(name + ": image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                          " is not divisible by patch size " + std::to_string(patch));
    grid_h = image_h / patch;
    grid_w = image_w / patch;
    proj = Linear(name + ".proj", 3 * patch * patch, dim, rng);
    pos = Parameter{name + ".pos", init_uniform({tokens() + 1, dim}, dim, rng)};
    cls = Parameter{name + ".cls", init_uniform({1, dim}, dim, rng)};
}

Var PatchEmbed::forward(Tape& t, const Var& images) const {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != grid_h * patch || s[3] != grid_w * patch)
        throw ShapeError(proj.weight.name + ": expected (B,3," + std::to_string(grid_h * patch) + "," +
                         std::to_string(grid_w * patch) + "), got " + shape_str(s));
    const std::size_t b = s[0];
    Var patches = proj.forward(t, ops::patchify(images, patch));  // (B, hw, d)
    // Positional rows 1..hw go to the patches; the class row is z0 alone, so
    // row 0 of the table is carried for shape only.
    Var pos_patch = ops::slice(t.param(pos), 0, 1, tokens());
    Var cls_rows = ops::gather_rows(t.param(cls), std::vector<std::size_t>(b, 0));
    cls_rows = ops::reshape(cls_rows, {b, 1, cls.value.dim(1)});
    return ops::concat({cls_rows, ops::add_leading(patches, pos_patch)}, 1);
}

void PatchEmbed::collect(ParamList& out) {
    proj.collect(out);
    out.push_back(&pos);
    out.push_back(&cls);
}

// ---------------------------------------------------------------- grids

Var tokens_to_grid(const Var& tokens, std::size_t h, std::size_t w) {
    const Shape& s = tokens.shape();
    if (s.size() != 3 || s[1] != h * w) throw ShapeError("tokens_to_grid: " + shape_str(s) + " is not (B, h*w, d)");
    return ops::reshape(ops::transpose12(tokens), {s[0], s[2], h, w});
}

Var grid_to_tokens(const Var& grid) {
    const Shape& s = grid.shape();
    if (s.size() != 4) throw ShapeError("grid_to_tokens: expected (B, d, h, w), got " + shape_str(s));
    return ops::transpose12(ops::reshape(grid, {s[0], s[1], s[2] * s[3]}));
}

// ---------------------------------------------------------------- CdcAdapter

CdcAdapter::CdcAdapter(const std::string& name, std::size_t dim, double theta, Rng& rng)
    : conv1(name + ".cdc1", dim, dim, 3, theta, false, rng), conv2(name + ".cdc2", dim, dim, 3, theta, false, rng) {}

Var CdcAdapter::branch(Tape& t, const Var& grid) const {
    return conv2.forward(t, activate(conv1.forward(t, grid), act));
}

void CdcAdapter::collect(ParamList& out) {
    conv1.collect(out);
    conv2.collect(out);
}

// ---------------------------------------------------------------- EncoderBlock

EncoderBlock::EncoderBlock(const std::string& name, const BlockConfig& c, Rng& rng) : cfg(c) {
    const std::size_t d = cfg.dim;
    ln1_gain = Parameter{name + ".ln1.g", Tensor({d}, 1.0)};
    ln1_shift = Parameter{name + ".ln1.s", Tensor({d}, 0.0)};
    ln2_gain = Parameter{name + ".ln2.g", Tensor({d}, 1.0)};
    ln2_shift = Parameter{name + ".ln2.s", Tensor({d}, 0.0)};
    wq = Linear(name + ".wq", d, d, rng);
    // A key bias shifts every score of a query row equally, which the softmax
    // cancels, so the key projection has none.
    wk = Linear(name + ".wk", d, d, rng, false);
    wv = Linear(name + ".wv", d, d, rng);
    wo = Linear(name + ".wo", d, d, rng);
    mlp1 = Linear(name + ".mlp1", d, cfg.mlp_ratio * d, rng);
    mlp2 = Linear(name + ".mlp2", cfg.mlp_ratio * d, d, rng);
    if (cfg.adapter) {
        adapter = CdcAdapter(name + ".adapter", d, cfg.cdc_theta, rng);
        adapter.act = cfg.act;
    }
}

Var EncoderBlock::forward(Tape& t, const Var& x, std::size_t grid_h, std::size_t grid_w) const {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[2] != cfg.dim || s[1] == 0)
        throw ShapeError("EncoderBlock: expected (B, n, " + std::to_string(cfg.dim) + "), got " + shape_str(s));
    const std::size_t n = s[1], d = cfg.dim;

    Var h = ops::add_bias(ops::mul_cols(ops::layer_norm_rows(x), t.param(ln1_gain)), t.param(ln1_shift));
    Var q = wq.forward(t, h), k = wk.forward(t, h), v = wv.forward(t, h);
    Var scores = ops::scale(ops::bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(d)));
    Var attn = ops::bmm(ops::softmax_rows(scores), v);
    Var y = ops::add(x, wo.forward(t, attn));

    h = ops::add_bias(ops::mul_cols(ops::layer_norm_rows(y), t.param(ln2_gain)), t.param(ln2_shift));
    y = ops::add(y, mlp2.forward(t, activate(mlp1.forward(t, h), cfg.act)));

    if (!cfg.adapter || n == 1) return y;
    if (n != grid_h * grid_w + 1)
        throw ShapeError("EncoderBlock: " + std::to_string(n) + " tokens do not match a " + std::to_string(grid_h) +
                         "x" + std::to_string(grid_w) + " grid plus class token");
    Var cls = ops::slice(y, 1, 0, 1);
    Var patches = ops::slice(y, 1, 1, n - 1);
    Var delta = grid_to_tokens(adapter.branch(t, tokens_to_grid(patches, grid_h, grid_w)));
    return ops::concat({cls, ops::add(patches, delta)}, 1);
}

void EncoderBlock::collect(ParamList& out) {
    for (Parameter* p : {&ln1_gain, &ln1_shift, &ln2_gain, &ln2_shift}) out.push_back(p);
    for (Linear* l : {&wq, &wk, &wv, &wo, &mlp1, &mlp2}) l->collect(out);
    if (cfg.adapter) adapter.collect(out);
}

// ---------------------------------------------------------------- Mlp

Mlp::Mlp(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Activation a, Rng& rng)
    : l1(name + ".l1", in, hidden, rng), l2(name + ".l2", hidden, out, rng), act(a) {}

Var Mlp::forward(Tape& t, const Var& x) const { return l2.forward(t, activate(l1.forward(t, x), act)); }

void Mlp::collect(ParamList& out) {
    l1.collect(out);
    l2.collect(out);
}

}  // namespace dadm::nn
