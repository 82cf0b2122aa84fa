#pragma once

#include <unordered_map>
#include <vector>

#include "dadm/autodiff.hpp"

namespace dadm {

/// Adam with decoupled weight decay. Moment state is keyed by Parameter
/// address, so the parameters must not move between steps.
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    explicit Adam(Options opt) : opt_(opt) {}

    /// Descends along `grads[i]` for `params[i]`; frozen parameters are skipped.
    void step(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads);
    /// Ascent variant, for maximizing objectives.
    void ascend(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads);

    long steps() const { return t_; }
    const Options& options() const { return opt_; }

private:
    void apply(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads, double sign);

    struct Moments {
        Tensor m, v;
    };
    Options opt_;
    long t_ = 0;
    std::unordered_map<const Parameter*, Moments> state_;
};

/// Plain gradient descent with decoupled weight decay.
class Sgd {
public:
    struct Options {
        double lr = 5e-4;
        double weight_decay = 0.0;
    };

    explicit Sgd(Options opt) : opt_(opt) {}
    void step(const std::vector<Parameter*>& params, const std::vector<Tensor>& grads);
    const Options& options() const { return opt_; }

private:
    Options opt_;
};

}  // namespace dadm
