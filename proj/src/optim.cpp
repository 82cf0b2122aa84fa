#include "dadm/optim.hpp"

#include <cmath>

#include "dadm/errors.hpp"

namespace dadm {

void Adam::step(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads) { apply(params, grads, 1.0); }

void Adam::ascend(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads) {
    apply(params, grads, -1.0);
}

void Adam::apply(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads, double sign) {
    if (params.size() != grads.size()) throw ShapeError("Adam: parameter and gradient counts differ");
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        if (!p.trainable) continue;
        const Tensor& g = grads[i];
        if (g.shape() != p.value.shape()) throw ShapeError("Adam: gradient shape mismatch for " + p.name);
        auto [it, fresh] = state_.try_emplace(&p);
        if (fresh) it->second = Moments{Tensor(p.value.shape()), Tensor(p.value.shape())};
        Tensor& m = it->second.m;
        Tensor& v = it->second.v;
        for (std::size_t k = 0; k < g.size(); ++k) {
            const double gk = sign * g[k];
            m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk;
            v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk;
            const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + opt_.eps);
            p.value[k] -= opt_.lr * (update + opt_.weight_decay * p.value[k]);
        }
    }
}

void Sgd::step(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw ShapeError("Sgd: parameter and gradient counts differ");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        if (!p.trainable) continue;
        const Tensor& g = grads[i];
        if (g.shape() != p.value.shape()) throw ShapeError("Sgd: gradient shape mismatch for " + p.name);
        for (std::size_t k = 0; k < g.size(); ++k) p.value[k] -= opt_.lr * (g[k] + opt_.weight_decay * p.value[k]);
    }
}

}  // namespace dadm
