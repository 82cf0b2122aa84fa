#include "dadm/model.hpp"

#include <sstream>

#include "dadm/errors.hpp"
#include "dadm/ops.hpp"

namespace dadm {

void ModelConfig::validate() const {
    if (patch == 0 || image_h % patch != 0 || image_w % patch != 0)
        throw ConfigError("model: image size must be a multiple of the patch size");
    if (dim == 0 || fused_dim == 0 || mlp_ratio == 0) throw ConfigError("model: widths must be positive");
    if (layers == 0) throw ConfigError("model: at least one layer is required");
    if (!(cdc_theta >= 0.0 && cdc_theta <= 1.0) || !(mim_fuse_theta >= 0.0 && mim_fuse_theta <= 1.0))
        throw ConfigError("model: theta must lie in [0, 1]");
}

DadmModel::DadmModel(const ModelConfig& cfg, std::vector<int> train_envs) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed, 0x6d6f64656cULL);
    nn::BlockConfig bc{cfg_.dim, cfg_.mlp_ratio, cfg_.cdc_theta, cfg_.adapter, cfg_.act};
    MimConfig mc{cfg_.dim, 3, cfg_.mim_fuse_theta, cfg_.act};
    for (int m = 0; m < 3; ++m)
        embed_[static_cast<std::size_t>(m)] =
            nn::PatchEmbed(std::string(kModalityNames[static_cast<std::size_t>(m)]) + ".embed", cfg_.image_h,
                           cfg_.image_w, cfg_.patch, cfg_.dim, rng);
    blocks_.resize(cfg_.layers);
    if (cfg_.use_mim) mims_.resize(cfg_.layers);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        for (int m = 0; m < 3; ++m)
            blocks_[l][static_cast<std::size_t>(m)] = nn::EncoderBlock(
                "layer" + std::to_string(l) + "." + kModalityNames[static_cast<std::size_t>(m)], bc, rng);
        if (cfg_.use_mim)
            for (std::size_t p = 0; p < 3; ++p)
                mims_[l][p] = MimModule("layer" + std::to_string(l) + ".mim" + std::to_string(p), mc, rng);
    }
    head_ = nn::Linear("head", 3 * cfg_.dim, cfg_.fused_dim, rng);
    for (int m = 0; m < 3; ++m)
        substitutes_[static_cast<std::size_t>(m)] =
            Parameter{std::string("substitute.") + kModalityNames[static_cast<std::size_t>(m)],
                      Tensor({3, cfg_.image_h, cfg_.image_w}), cfg_.substitute == SubstituteMode::learnable};
    betas = HyperplaneSet(std::move(train_envs), cfg_.fused_dim);
    if (cfg_.freeze_backbone) {
        for (auto& e : embed_) {
            nn::ParamList ps;
            e.collect(ps);
            for (Parameter* p : ps) p->trainable = false;
        }
        for (auto& layer : blocks_)
            for (auto& b : layer) {
                nn::ParamList ps;
                b.collect(ps);
                for (Parameter* p : ps)
                    if (p->name.find(".adapter.") == std::string::npos) p->trainable = false;
            }
    }
}

Var DadmModel::substitute(Tape& t, const Tensor& images, int m, const std::vector<Presence>& presence) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_h || images.dim(3) != cfg_.image_w)
        throw ShapeError(std::string("model: ") + kModalityNames[static_cast<std::size_t>(m)] + " images must be (B,3," +
                         std::to_string(cfg_.image_h) + "," + std::to_string(cfg_.image_w) + "), got " +
                         shape_str(images.shape()));
    const std::size_t b = images.dim(0);
    bool all = true;
    for (const auto& p : presence) all = all && p[static_cast<std::size_t>(m)];
    if (all) return t.constant(images);

    Tensor keep({b});
    for (std::size_t i = 0; i < b; ++i) keep[i] = presence[i][static_cast<std::size_t>(m)] ? 1.0 : 0.0;
    Tensor kept = images;
    const std::size_t plane = images.size() / b;
    for (std::size_t i = 0; i < b; ++i)
        if (keep[i] == 0.0) std::fill_n(kept.ptr() + i * plane, plane, 0.0);
    Var x = t.constant(std::move(kept));
    if (cfg_.substitute == SubstituteMode::zero) return x;
    Tensor drop({b});
    for (std::size_t i = 0; i < b; ++i) drop[i] = 1.0 - keep[i];
    Var fill = ops::add_leading(t.constant(Tensor(images.shape())), t.param(substitutes_[static_cast<std::size_t>(m)]));
    return ops::add(x, ops::mul_rows(fill, t.constant(std::move(drop))));
}

ForwardResult DadmModel::forward(Tape& t, const std::array<Tensor, 3>& images,
                                 const std::vector<Presence>& presence) const {
    const std::size_t b = images[0].rank() > 0 ? images[0].dim(0) : 0;
    if (b == 0) throw ShapeError("model: empty batch");
    for (const auto& im : images)
        if (im.rank() == 0 || im.dim(0) != b) throw ShapeError("model: modalities differ in batch size");
    if (!presence.empty() && presence.size() != b) throw ShapeError("model: presence flags do not match the batch");
    for (const auto& p : presence)
        if (!p[0] && !p[1] && !p[2]) throw ConfigError("model: a sample has all three modalities absent");

    const std::size_t gh = embed_[0].grid_h, gw = embed_[0].grid_w, hw = gh * gw, d = cfg_.dim;
    std::array<Var, 3> tok;
    for (int m = 0; m < 3; ++m) {
        const auto mi = static_cast<std::size_t>(m);
        Var x = presence.empty() ? t.constant(images[mi]) : substitute(t, images[mi], m, presence);
        tok[mi] = embed_[mi].forward(t, x);
    }

    ForwardResult r;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        for (std::size_t m = 0; m < 3; ++m) tok[m] = blocks_[l][m].forward(t, tok[m], gh, gw);
        if (!cfg_.use_mim) continue;

        std::array<Var, 3> cls, patches;
        for (std::size_t m = 0; m < 3; ++m) {
            cls[m] = ops::slice(tok[m], 1, 0, 1);
            patches[m] = ops::slice(tok[m], 1, 1, hw);
        }
        std::array<MimOutput, 3> outs;
        for (std::size_t p = 0; p < 3; ++p) {
            const auto i = static_cast<std::size_t>(kMimPairs[p][0]), j = static_cast<std::size_t>(kMimPairs[p][1]);
            Var z1 = patches[i], z2 = patches[j];
            std::shared_ptr<ReGradSlot> slot;
            if (cfg_.regrad && t.recording()) {
                GatedPair g = regrad_gate(z1, z2, cfg_.regrad_scope);
                z1 = g.z1;
                z2 = g.z2;
                slot = g.slot;
            }
            outs[p] = mims_[l][p].forward(t, z1, z2, gh, gw);
            if (slot) {
                slot->mi1 = outs[p].mi1.value();
                slot->mi2 = outs[p].mi2.value();
                slot->ready = true;
                r.slots.push_back(slot);
            }
        }
        // Each modality takes part in two pairs; average its two outputs.
        std::array<Var, 3> merged = {
            ops::scale(ops::add(outs[0].out1, outs[1].out1), 0.5),
            ops::scale(ops::add(outs[0].out2, outs[2].out1), 0.5),
            ops::scale(ops::add(outs[1].out2, outs[2].out2), 0.5),
        };
        for (std::size_t m = 0; m < 3; ++m) {
            Var next = cfg_.merge == MimMerge::replace ? merged[m] : ops::add(patches[m], merged[m]);
            tok[m] = ops::concat({cls[m], next}, 1);
        }
        r.mims.push_back(std::move(outs));
    }

    for (std::size_t m = 0; m < 3; ++m) r.class_features[m] = ops::reshape(ops::slice(tok[m], 1, 0, 1), {b, d});
    Var cat = ops::concat({r.class_features[0], r.class_features[1], r.class_features[2]}, 1);
    r.fused = ops::l2_normalize_rows(head_.forward(t, cat));
    return r;
}

Var DadmModel::env_scores(Tape& t, const Var& fused, const Var& beta_stack,
                          const std::vector<std::size_t>& env_rows) const {
    const std::size_t b = fused.shape()[0];
    if (env_rows.size() != b) throw ShapeError("model: one beta row per sample is required");
    if (beta_stack.shape().size() != 2 || beta_stack.shape()[1] != cfg_.fused_dim + 1)
        throw ShapeError("model: beta width does not match the fused feature width");
    Var aug = ops::concat({fused, t.constant(Tensor({b, 1}, 1.0))}, 1);
    return ops::row_dot(ops::gather_rows(beta_stack, env_rows), aug);
}

std::vector<double> DadmModel::predict(const std::array<Tensor, 3>& images,
                                       const std::vector<Presence>& presence) const {
    Tape t(false);
    const ForwardResult r = forward(t, images, presence);
    return inference_scores(r.fused.value(), betas);
}

nn::ParamList DadmModel::params() {
    nn::ParamList out;
    for (auto& e : embed_) e.collect(out);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        for (auto& blk : blocks_[l]) blk.collect(out);
        if (cfg_.use_mim)
            for (auto& mim : mims_[l]) mim.collect(out);
    }
    head_.collect(out);
    for (auto& s : substitutes_) out.push_back(&s);
    return out;
}

std::size_t DadmModel::parameter_count() {
    std::size_t n = 0;
    for (const Parameter* p : params()) n += p->value.size();
    return n;
}

Checkpoint DadmModel::to_checkpoint() const {
    Checkpoint c;
    for (const Parameter* p : const_cast<DadmModel*>(this)->params()) c.add(p->name, p->value);
    for (std::size_t e = 0; e < betas.betas.size(); ++e) c.add("beta.env" + std::to_string(betas.envs[e]), betas.betas[e]);
    std::ostringstream envs;
    for (std::size_t e = 0; e < betas.envs.size(); ++e) envs << (e ? "," : "") << betas.envs[e];
    c.meta.emplace_back("train_envs", envs.str());
    return c;
}

void DadmModel::load_checkpoint(const Checkpoint& ckpt) {
    std::size_t expected = 0;
    for (Parameter* p : params()) {
        const Tensor& v = ckpt.get(p->name);
        if (v.shape() != p->value.shape())
            throw FormatError("checkpoint: '" + p->name + "' has shape " + shape_str(v.shape()) + ", model expects " +
                              shape_str(p->value.shape()));
        p->value = v;
        ++expected;
    }
    for (std::size_t e = 0; e < betas.betas.size(); ++e) {
        const std::string name = "beta.env" + std::to_string(betas.envs[e]);
        const Tensor& v = ckpt.get(name);
        if (v.shape() != betas.betas[e].shape()) throw FormatError("checkpoint: '" + name + "' has the wrong width");
        betas.betas[e] = v;
        ++expected;
    }
    if (expected != ckpt.tensors.size()) throw FormatError("checkpoint: holds tensors this model does not define");
}

}  // namespace dadm
