#include "dadm/mim.hpp"

#include <algorithm>
#include <cmath>

#include "dadm/errors.hpp"
#include "dadm/ops.hpp"
#include "dadm/optim.hpp"

namespace dadm {

MimModule::MimModule(const std::string& name, const MimConfig& c, Rng& rng) : cfg(c) {
    const std::size_t d = cfg.dim;
    fuse = nn::CdcConv(name + ".fuse", 2 * d, d, cfg.fuse_kernel, cfg.fuse_theta, true, rng);
    // No bias: the instance norm that follows would cancel it.
    mg_conv = nn::CdcConv(name + ".mg_conv", d, d, 3, 0.0, false, rng);
    mg_head = nn::CdcConv(name + ".mg_head", d, 2, 1, 0.0, true, rng);
    out1 = nn::CdcConv(name + ".out1", 2 * d, d, 1, 0.0, true, rng);
    out2 = nn::CdcConv(name + ".out2", 2 * d, d, 1, 0.0, true, rng);
}

namespace {

/// mask (B, hw) times tokens (B, hw, d), row by row.
Var reweight(const Var& mask, const Var& z) {
    const Shape& s = z.shape();
    Var rows = ops::reshape(z, {s[0] * s[1], s[2]});
    return ops::reshape(ops::mul_rows(rows, ops::reshape(mask, {s[0] * s[1]})), s);
}

}  // namespace

MimOutput MimModule::forward(Tape& t, const Var& z1, const Var& z2, std::size_t gh, std::size_t gw) const {
    if (z1.shape() != z2.shape())
        throw ShapeError("MIM: modality streams differ, " + shape_str(z1.shape()) + " vs " + shape_str(z2.shape()));
    const Shape& s = z1.shape();
    if (s.size() != 3 || s[1] != gh * gw || s[2] != cfg.dim)
        throw ShapeError("MIM: expected (B, " + std::to_string(gh * gw) + ", " + std::to_string(cfg.dim) + "), got " +
                         shape_str(s));
    const std::size_t b = s[0], hw = s[1];

    Var g1 = nn::tokens_to_grid(z1, gh, gw);
    Var g2 = nn::tokens_to_grid(z2, gh, gw);
    Var fused = fuse.forward(t, ops::concat_channels(g1, g2));
    Var mg = mg_head.forward(t, nn::activate(ops::instance_norm(mg_conv.forward(t, fused)), cfg.act));
    Var masks = ops::sigmoid(mg);  // (B, 2, h, w)

    MimOutput o;
    o.mask1 = ops::reshape(ops::slice(masks, 1, 0, 1), {b, hw});
    o.mask2 = ops::reshape(ops::slice(masks, 1, 1, 1), {b, hw});
    o.aligned1 = reweight(o.mask1, z1);
    o.aligned2 = reweight(o.mask2, z2);
    o.mi1 = ops::row_mean(o.aligned1);
    o.mi2 = ops::row_mean(o.aligned2);
    o.out1 = nn::grid_to_tokens(out1.forward(t, ops::concat_channels(fused, nn::tokens_to_grid(o.aligned1, gh, gw))));
    o.out2 = nn::grid_to_tokens(out2.forward(t, ops::concat_channels(fused, nn::tokens_to_grid(o.aligned2, gh, gw))));
    return o;
}

void MimModule::collect(nn::ParamList& out) {
    fuse.collect(out);
    mg_conv.collect(out);
    mg_head.collect(out);
    out1.collect(out);
    out2.collect(out);
}

// ---------------------------------------------------------------- MI losses

Var log_mean_exp(const Var& x) {
    const auto v = x.value().data();
    const double mx = *std::max_element(v.begin(), v.end());
    // The shift is a constant: d/dx of log mean exp(x - c) + c is independent of c.
    return ops::add_scalar(ops::log(ops::mean(ops::exp(ops::add_scalar(x, -mx)))), mx);
}

Var mi_loss_paper(const Var& t1, const Var& t2, const std::vector<std::size_t>& perm) {
    if (t1.shape() != t2.shape() || t1.shape().size() != 1)
        throw ShapeError("mi_loss_paper: token batches must be equal-length vectors");
    if (t1.size() < 2) throw ShapeError("mi_loss_paper: batch size must be at least 2");
    Var joint = ops::scale(ops::add(t1, t2), 0.5);
    Var marginal = ops::scale(ops::add(t1, ops::permute_rows(t2, perm)), 0.5);
    // Both terms are centred on the marginal max, so constant tokens give exactly 0.
    const auto v = marginal.value().data();
    const double mx = *std::max_element(v.begin(), v.end());
    Var j = ops::mean(ops::add_scalar(joint, -mx));
    Var m = ops::log(ops::mean(ops::exp(ops::add_scalar(marginal, -mx))));
    return ops::sub(m, j);
}

Var mi_loss_paper(const Var& t1, const Var& t2, Rng& rng) {
    if (t1.size() < 2) throw ShapeError("mi_loss_paper: batch size must be at least 2");
    return mi_loss_paper(t1, t2, rng.derangement(t1.size()));
}

Var layer_mi_loss(const std::vector<std::vector<const MimOutput*>>& layers, Rng& rng) {
    if (layers.empty()) throw ShapeError("layer_mi_loss: no layers");
    std::vector<Var> terms;
    for (const auto& layer : layers) {
        if (layer.empty()) throw ShapeError("layer_mi_loss: layer without MIM outputs");
        for (const MimOutput* o : layer) terms.push_back(mi_loss_paper(o->mi1, o->mi2, rng));
    }
    Var total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
    return ops::scale(total, 1.0 / static_cast<double>(terms.size()));
}

// ---------------------------------------------------------------- MINE

MineCritic::MineCritic(std::size_t k, std::size_t hidden, Rng& rng)
    : net("mine", 2 * k, hidden, 1, nn::Activation::relu, rng) {}

Var MineCritic::score(Tape& t, const Var& x, const Var& y) const {
    Var s = net.forward(t, ops::concat({x, y}, 1));
    return ops::reshape(s, {s.shape()[0]});
}

void MineCritic::collect(nn::ParamList& out) { net.collect(out); }

Var mine_bound(Tape& t, const MineCritic& critic, const Tensor& x, const Tensor& y,
               const std::vector<std::size_t>& perm) {
    if (x.rank() != 2 || x.shape() != y.shape()) throw ShapeError("mine_bound: x and y must both be (N, k)");
    Var xv = t.constant(x);
    Var yv = t.constant(y);
    Var joint = ops::mean(critic.score(t, xv, yv));
    Var marg = log_mean_exp(critic.score(t, xv, ops::permute_rows(yv, perm)));
    return ops::sub(joint, marg);
}

namespace {

Tensor take_rows(const Tensor& src, const std::vector<std::size_t>& idx, std::size_t from, std::size_t count) {
    const std::size_t k = src.dim(1);
    Tensor out = Tensor::uninitialized({count, k});
    for (std::size_t r = 0; r < count; ++r)
        for (std::size_t c = 0; c < k; ++c) out[r * k + c] = src[idx[from + r] * k + c];
    return out;
}

}  // namespace

MineResult mine_estimate(const Tensor& x, const Tensor& y, MineCritic& critic, const MineOptions& opt, Rng& rng) {
    if (x.rank() != 2 || x.dim(0) < 64) throw ShapeError("mine_estimate: need at least 64 samples");
    if (x.shape() != y.shape()) throw ShapeError("mine_estimate: x and y must share shape");
    if (opt.steps < 1) throw ConfigError("mine_estimate: steps must be at least 1");
    const std::size_t n = x.dim(0);
    const std::size_t bs = (opt.batch == 0 || opt.batch >= n) ? n : std::max<std::size_t>(opt.batch, 2);
    nn::ParamList params;
    critic.collect(params);
    Adam adam({.lr = opt.lr});
    MineResult res;
    auto full_bound = [&] {
        const std::size_t draws = std::max<std::size_t>(opt.eval_draws, 1);
        double acc = 0.0;
        for (std::size_t d = 0; d < draws; ++d) {
            Tape t(false);
            acc += mine_bound(t, critic, x, y, rng.derangement(n)).value().item();
        }
        return acc / static_cast<double>(draws);
    };

    std::vector<std::size_t> order = rng.permutation(n);
    std::size_t cursor = 0;
    for (std::size_t step = 1; step <= opt.steps; ++step) {
        Tensor xb = x, yb = y;
        if (bs < n) {
            if (cursor + bs > n) {
                order = rng.permutation(n);
                cursor = 0;
            }
            xb = take_rows(x, order, cursor, bs);
            yb = take_rows(y, order, cursor, bs);
            cursor += bs;
        }
        Tape t;
        Var bound = mine_bound(t, critic, xb, yb, rng.derangement(bs));
        Gradients g = t.backward(bound);
        std::vector<Tensor> grads;
        for (Parameter* p : params) grads.push_back(g.of(*p));
        adam.ascend(params, grads);
        if (opt.trace_every > 0 && step % opt.trace_every == 0) res.trace.push_back(full_bound());
    }
    res.estimate = full_bound();
    return res;
}

}  // namespace dadm
