#include "dadm/pgirm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dadm/errors.hpp"
#include "dadm/kernels.hpp"
#include "dadm/ops.hpp"

namespace dadm {

namespace {

double dot(const double* a, const double* b, std::size_t n) { return kernels::active().dot(a, b, n); }

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// regrad over raw spans; writes into out (may not alias inputs).
ReGradBranch regrad_into(const double* g1, const double* g2, std::size_t n, double mi1, double mi2, double* out,
                         bool& degenerate) {
    const double d12 = dot(g1, g2, n);
    degenerate = false;
    if (d12 == 0.0) {
        const double m = std::max(mi1, mi2);
        for (std::size_t i = 0; i < n; ++i) out[i] = g1[i] + g2[i] * m;
        return ReGradBranch::orthogonal;
    }
    const bool weak1 = mi1 <= mi2;
    const double nn = weak1 ? dot(g1, g1, n) : dot(g2, g2, n);
    const ReGradBranch branch = d12 < 0.0 ? (weak1 ? ReGradBranch::conflict_weak1 : ReGradBranch::conflict_weak2)
                                          : (weak1 ? ReGradBranch::agree_weak1 : ReGradBranch::agree_weak2);
    if (nn == 0.0) {
        degenerate = true;
        for (std::size_t i = 0; i < n; ++i) out[i] = g1[i] + g2[i];
        return branch;
    }
    const double c = d12 / nn;
    switch (branch) {
        case ReGradBranch::conflict_weak1:
            for (std::size_t i = 0; i < n; ++i) out[i] = g1[i] + c * g1[i] * mi2;
            break;
        case ReGradBranch::agree_weak1:
            for (std::size_t i = 0; i < n; ++i) out[i] = g1[i] + (g2[i] - c * g1[i]) * mi2;
            break;
        case ReGradBranch::conflict_weak2:
            for (std::size_t i = 0; i < n; ++i) out[i] = c * g2[i] * mi1 + g2[i];
            break;
        case ReGradBranch::agree_weak2:
            for (std::size_t i = 0; i < n; ++i) out[i] = (g1[i] - c * g2[i]) * mi1 + g2[i];
            break;
        case ReGradBranch::orthogonal:
            break;
    }
    return branch;
}

}  // namespace

ReGradResult regrad(const Tensor& g1, const Tensor& g2, double mi1, double mi2) {
    if (g1.shape() != g2.shape())
        throw ShapeError("regrad: gradient shapes differ, " + shape_str(g1.shape()) + " vs " + shape_str(g2.shape()));
    if (!g1.all_finite() || !g2.all_finite()) throw NumericError("regrad: non-finite gradient");
    ReGradResult r{Tensor::uninitialized(g1.shape()), ReGradBranch::orthogonal, false};
    r.branch = regrad_into(g1.ptr(), g2.ptr(), g1.size(), mi1, mi2, r.grad.ptr(), r.degenerate);
    return r;
}

GatedPair regrad_gate(const Var& z1, const Var& z2, ReGradScope scope) {
    if (z1.shape() != z2.shape()) throw ShapeError("regrad_gate: streams differ in shape");
    if (z1.tape() != z2.tape()) throw TapeError("regrad_gate: streams live on different tapes");
    Tape& t = *z1.tape();
    const std::size_t n = z1.size();
    const std::size_t batch = z1.shape().empty() ? 1 : z1.shape()[0];
    Shape stacked_shape = z1.shape();
    stacked_shape.insert(stacked_shape.begin(), 2);
    Tensor stacked = Tensor::uninitialized(stacked_shape);
    std::copy_n(z1.value().ptr(), n, stacked.ptr());
    std::copy_n(z2.value().ptr(), n, stacked.ptr() + n);

    auto slot = std::make_shared<ReGradSlot>();
    const int i1 = z1.id(), i2 = z2.id();
    Var s = t.record("regrad_gate", std::move(stacked), {i1, i2},
                     [=](Tape& tp, const Tensor& g, const Tensor&) {
                         const double* g1 = g.ptr();
                         const double* g2 = g.ptr() + n;
                         if (!slot->ready) {
                             // No MI tokens were attached: pass gradients through.
                             if (tp.requires_grad(i1)) kernels::active().axpy(1.0, g1, tp.grad_buffer(i1).ptr(), n);
                             if (tp.requires_grad(i2)) kernels::active().axpy(1.0, g2, tp.grad_buffer(i2).ptr(), n);
                             return;
                         }
                         std::vector<double> o1(n), o2(n);
                         auto run = [&](std::size_t off, std::size_t len, double m1, double m2) {
                             bool deg1 = false, deg2 = false;
                             const auto b1 = regrad_into(g1 + off, g2 + off, len, m1, m2, o1.data() + off, deg1);
                             regrad_into(g2 + off, g1 + off, len, m2, m1, o2.data() + off, deg2);
                             ++slot->branch_counts[static_cast<std::size_t>(b1)];
                             slot->degenerate += deg1 + deg2;
                         };
                         if (scope == ReGradScope::per_sample) {
                             const std::size_t len = n / batch;
                             for (std::size_t b = 0; b < batch; ++b)
                                 run(b * len, len, sigmoid(slot->mi1[b]), sigmoid(slot->mi2[b]));
                         } else {
                             double m1 = 0.0, m2 = 0.0;
                             for (std::size_t b = 0; b < batch; ++b) {
                                 m1 += sigmoid(slot->mi1[b]);
                                 m2 += sigmoid(slot->mi2[b]);
                             }
                             run(0, n, m1 / static_cast<double>(batch), m2 / static_cast<double>(batch));
                         }
                         if (tp.requires_grad(i1)) kernels::active().axpy(1.0, o1.data(), tp.grad_buffer(i1).ptr(), n);
                         if (tp.requires_grad(i2)) kernels::active().axpy(1.0, o2.data(), tp.grad_buffer(i2).ptr(), n);
                     });
    return {ops::reshape(ops::slice(s, 0, 0, 1), z1.shape()), ops::reshape(ops::slice(s, 0, 1, 1), z2.shape()), slot};
}

// ------------------------------------------------------------------ PG-IRM

HyperplaneSet::HyperplaneSet(std::vector<int> e, std::size_t feature_dim) : envs(std::move(e)) {
    if (envs.empty()) throw ConfigError("HyperplaneSet: no environments");
    betas.assign(envs.size(), Tensor(Shape{feature_dim + 1}));
}

std::size_t HyperplaneSet::feature_dim() const {
    if (betas.empty()) throw ConfigError("HyperplaneSet: empty");
    return betas.front().size() - 1;
}

std::size_t HyperplaneSet::index_of(int env) const {
    auto it = std::find(envs.begin(), envs.end(), env);
    if (it == envs.end()) throw ConfigError("HyperplaneSet: unknown environment " + std::to_string(env));
    return static_cast<std::size_t>(it - envs.begin());
}

Tensor HyperplaneSet::mean() const {
    validate();
    Tensor m(betas.front().shape());
    for (const Tensor& b : betas) kernels::active().axpy(1.0, b.ptr(), m.ptr(), m.size());
    kernels::active().scale(1.0 / static_cast<double>(betas.size()), m.ptr(), m.ptr(), m.size());
    return m;
}

double HyperplaneSet::max_pairwise_distance() const {
    double best = 0.0;
    for (std::size_t i = 0; i < betas.size(); ++i)
        for (std::size_t j = i + 1; j < betas.size(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < betas[i].size(); ++k) s += (betas[i][k] - betas[j][k]) * (betas[i][k] - betas[j][k]);
            best = std::max(best, std::sqrt(s));
        }
    return best;
}

void HyperplaneSet::validate() const {
    if (betas.empty()) throw ConfigError("HyperplaneSet: empty");
    if (betas.size() != envs.size()) throw ConfigError("HyperplaneSet: betas and envs differ in count");
    for (const Tensor& b : betas)
        if (b.shape() != betas.front().shape()) throw ShapeError("HyperplaneSet: betas differ in shape");
}

void PgIrmConfig::validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("PG-IRM: alpha must lie in (0, 1)");
    if (t_alpha >= epochs) throw ConfigError("PG-IRM: t_alpha must be below the epoch count");
    if (!(lr > 0.0)) throw ConfigError("PG-IRM: learning rate must be positive");
}

HyperplaneSet pgirm_step(const HyperplaneSet& old, const std::map<int, Tensor>& grads, const PgIrmConfig& cfg,
                         int epoch, PgIrmStepInfo* info) {
    old.validate();
    cfg.validate();
    const std::size_t e_count = old.betas.size();
    HyperplaneSet next = old;
    for (std::size_t e = 0; e < e_count; ++e) {
        auto it = grads.find(old.envs[e]);
        if (it == grads.end()) throw ConfigError("PG-IRM: no gradient for environment " + std::to_string(old.envs[e]));
        if (it->second.shape() != old.betas[e].shape()) throw ShapeError("PG-IRM: gradient shape mismatch");
        // Plain loop rather than the dispatched axpy: the step must not depend on FMA availability.
        Tensor& b = next.betas[e];
        for (std::size_t k = 0; k < b.size(); ++k) b[k] = old.betas[e][k] - cfg.lr * it->second[k];
    }
    const double a = epoch > cfg.t_alpha ? cfg.alpha : 1.0;
    if (info != nullptr) *info = PgIrmStepInfo{a, {}, {}, {}};
    if (e_count < 2) return next;

    auto dist = [](const Tensor& x, const Tensor& y) {
        double s = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) s += (x[k] - y[k]) * (x[k] - y[k]);
        return std::sqrt(s);
    };
    for (std::size_t e = 0; e < e_count; ++e) {
        std::size_t far = e == 0 ? 1 : 0;
        double far_d = -1.0;
        for (std::size_t o = 0; o < e_count; ++o) {
            if (o == e) continue;
            const double d = dist(next.betas[e], old.betas[o]);
            if (d > far_d) {
                far_d = d;
                far = o;
            }
        }
        if (a != 1.0) {
            Tensor& b = next.betas[e];
            const Tensor& anchor = old.betas[far];
            for (std::size_t k = 0; k < b.size(); ++k) b[k] = a * b[k] + (1.0 - a) * anchor[k];
        }
        if (info != nullptr) {
            info->farthest.push_back(far);
            info->dist_before.push_back(far_d);
            info->dist_after.push_back(dist(next.betas[e], old.betas[far]));
        }
    }
    return next;
}

double inference_score(const Tensor& features, const HyperplaneSet& betas) {
    const Tensor m = betas.mean();
    if (features.size() + 1 != m.size())
        throw ShapeError("inference_score: feature width " + std::to_string(features.size()) +
                         " does not match hyperplane width " + std::to_string(m.size() - 1));
    return dot(m.ptr(), features.ptr(), features.size()) + m[features.size()];
}

std::vector<double> inference_scores(const Tensor& features, const HyperplaneSet& betas) {
    if (features.rank() != 2) throw ShapeError("inference_scores: expected (B, d_f)");
    const Tensor m = betas.mean();
    const std::size_t d = features.dim(1);
    if (d + 1 != m.size()) throw ShapeError("inference_scores: feature width does not match hyperplanes");
    std::vector<double> out(features.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = dot(m.ptr(), features.ptr() + i * d, d) + m[d];
    return out;
}

}  // namespace dadm
