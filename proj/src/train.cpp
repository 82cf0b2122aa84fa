#include "dadm/train.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "dadm/errors.hpp"
#include "dadm/ops.hpp"

namespace dadm {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
    if (batch < 2) throw ConfigError("train: batch must hold at least two samples");
    if (!(lr > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight decay must be non-negative");
    if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ConfigError("train: drop probability outside [0, 1]");
    if (weights.lambda_mi < 0.0 || weights.lambda_angle < 0.0) throw ConfigError("train: loss weights must be >= 0");
    angle.validate();
    PgIrmConfig p = pgirm;
    p.epochs = epochs;
    p.validate();
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& idx, const Presence& keep, double drop_prob,
                 Rng* rng) {
    Batch b;
    for (int m = 0; m < 3; ++m) b.images[static_cast<std::size_t>(m)] = stack_modality(data, idx, m);
    bool any_absent = false;
    std::vector<Presence> presence;
    presence.reserve(idx.size());
    for (std::size_t i : idx) {
        const Record& r = data[i];
        b.labels.push_back(r.label);
        b.envs.push_back(r.env);
        Presence p;
        for (std::size_t m = 0; m < 3; ++m) p[m] = keep[m] && ((r.presence >> m) & 1u);
        if (drop_prob > 0.0 && rng != nullptr) {
            Presence dropped = p;
            for (std::size_t m = 0; m < 3; ++m)
                if (rng->uniform() < drop_prob) dropped[m] = false;
            if (!(dropped[0] || dropped[1] || dropped[2])) {
                // Everything dropped: keep one of the modalities that was present.
                std::vector<std::size_t> avail;
                for (std::size_t m = 0; m < 3; ++m)
                    if (p[m]) avail.push_back(m);
                if (!avail.empty()) dropped[avail[rng->below(avail.size())]] = true;
            }
            p = dropped;
        }
        any_absent = any_absent || !(p[0] && p[1] && p[2]);
        presence.push_back(p);
    }
    if (any_absent) b.presence = std::move(presence);
    return b;
}

std::vector<std::vector<std::size_t>> stratified_batches(const Dataset& data, const std::vector<std::size_t>& idx,
                                                         std::size_t batch, Rng& rng) {
    if (idx.empty()) return {};
    std::map<int, std::vector<std::size_t>> by_env;
    for (std::size_t i : idx) by_env[data[i].env].push_back(i);
    const std::size_t nb = (idx.size() + batch - 1) / batch;
    std::vector<std::vector<std::size_t>> out(nb);
    std::size_t offset = 0;
    for (auto& [env, list] : by_env) {
        const auto perm = rng.permutation(list.size());
        // Round-robin with a per-environment offset keeps batch sizes even.
        for (std::size_t k = 0; k < list.size(); ++k) out[(k + offset) % nb].push_back(list[perm[k]]);
        offset += list.size();
    }
    for (auto& bt : out) {
        const auto perm = rng.permutation(bt.size());
        std::vector<std::size_t> shuffled(bt.size());
        for (std::size_t k = 0; k < bt.size(); ++k) shuffled[k] = bt[perm[k]];
        bt = std::move(shuffled);
    }
    return out;
}

BatchLoss batch_loss(Tape& t, const DadmModel& model, const Batch& batch, const TrainConfig& cfg, Rng& rng) {
    BatchLoss L;
    L.forward = model.forward(t, batch.images, batch.presence);
    const HyperplaneSet& hs = model.betas;
    const std::size_t width = hs.feature_dim() + 1;
    Tensor stack({hs.betas.size(), width});
    for (std::size_t e = 0; e < hs.betas.size(); ++e) std::copy_n(hs.betas[e].ptr(), width, stack.ptr() + e * width);
    L.beta_stack = t.variable(std::move(stack));

    std::vector<std::size_t> rows;
    rows.reserve(batch.envs.size());
    for (int e : batch.envs) rows.push_back(hs.index_of(e));
    const std::size_t b = batch.labels.size();
    Var s = model.env_scores(t, L.forward.fused, L.beta_stack, rows);
    Var logits = ops::concat({t.constant(Tensor({b, 1})), ops::reshape(s, {b, 1})}, 1);
    L.ce = ce_loss(logits, batch.labels);
    L.total = L.ce;

    if (cfg.weights.lambda_mi > 0.0 && !L.forward.mims.empty()) {
        std::vector<std::vector<const MimOutput*>> layers;
        for (const auto& layer : L.forward.mims) layers.push_back({&layer[0], &layer[1], &layer[2]});
        L.mi = layer_mi_loss(layers, rng);
        L.total = ops::add(L.total, ops::scale(*L.mi, cfg.weights.lambda_mi));
    }
    if (cfg.weights.lambda_angle > 0.0) {
        ModalityFeatures mf{L.forward.class_features, batch.labels, batch.envs};
        L.angle = angle_loss(mf, cfg.angle);
        if (L.angle) L.total = ops::add(L.total, ops::scale(*L.angle, cfg.weights.lambda_angle));
    }
    return L;
}

Trainer::Trainer(DadmModel& model, const TrainConfig& cfg) : model_(model), cfg_(cfg), rng_(cfg.seed, 0x747261696eULL) {
    cfg_.pgirm.epochs = cfg_.epochs;
    cfg_.validate();
    if (cfg_.optimizer == OptimizerKind::adam)
        adam_.emplace(Adam::Options{cfg_.lr, 0.9, 0.999, 1e-8, cfg_.weight_decay});
    else
        sgd_.emplace(Sgd::Options{cfg_.lr, cfg_.weight_decay});
}

EpochStats Trainer::train_epoch(const Dataset& data, const std::vector<std::size_t>& train_idx, int epoch) {
    EpochStats st;
    st.epoch = epoch;
    const auto params = model_.params();
    const bool need_two = model_.betas.envs.size() >= 2;
    for (const auto& idx : stratified_batches(data, train_idx, cfg_.batch, rng_)) {
        if (idx.size() < 2) continue;
        const Batch batch = make_batch(data, idx, {true, true, true}, cfg_.drop_prob, &rng_);
        if (need_two && std::set<int>(batch.envs.begin(), batch.envs.end()).size() < 2)
            throw ConfigError("train: a batch holds a single environment; two or more are required");

        Tape t;
        BatchLoss L = batch_loss(t, model_, batch, cfg_, rng_);
        const Gradients g = t.backward(L.total);

        std::vector<Tensor> grads;
        grads.reserve(params.size());
        for (const Parameter* p : params) grads.push_back(g.of(*p));
        if (adam_) adam_->step(params, grads);
        else sgd_->step(params, grads);

        const Tensor& gb = g.of(L.beta_stack);
        const std::size_t width = model_.betas.feature_dim() + 1;
        std::map<int, Tensor> beta_grads;
        for (std::size_t e = 0; e < model_.betas.envs.size(); ++e) {
            Tensor row({width});
            std::copy_n(gb.ptr() + e * width, width, row.ptr());
            beta_grads.emplace(model_.betas.envs[e], std::move(row));
        }
        model_.betas = pgirm_step(model_.betas, beta_grads, cfg_.pgirm, epoch);

        ++st.batches;
        st.ce += L.ce.value().item();
        if (L.mi) st.mi += L.mi->value().item();
        if (L.angle) {
            st.angle += L.angle->value().item();
            ++st.angle_batches;
        }
        st.total += L.total.value().item();
        for (const auto& slot : L.forward.slots) {
            for (std::size_t k = 0; k < st.branch_counts.size(); ++k) st.branch_counts[k] += slot->branch_counts[k];
            st.degenerate += slot->degenerate;
        }
    }
    if (st.batches > 0) {
        const double n = static_cast<double>(st.batches);
        st.ce /= n;
        st.mi /= n;
        st.total /= n;
    }
    if (st.angle_batches > 0) st.angle /= static_cast<double>(st.angle_batches);
    st.beta_max_distance = model_.betas.max_pairwise_distance();
    return st;
}

std::vector<double> score_records(const DadmModel& model, const Dataset& data, const std::vector<std::size_t>& idx,
                                  const Presence& keep, double drop_prob, Rng* rng) {
    constexpr std::size_t kChunk = 128;
    std::vector<double> out;
    out.reserve(idx.size());
    for (std::size_t s = 0; s < idx.size(); s += kChunk) {
        const std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(s),
                                            idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + kChunk)));
        const Batch b = make_batch(data, part, keep, drop_prob, rng);
        const auto sc = model.predict(b.images, b.presence);
        out.insert(out.end(), sc.begin(), sc.end());
    }
    return out;
}

}  // namespace dadm
