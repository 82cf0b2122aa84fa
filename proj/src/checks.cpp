#include "dadm/checks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "dadm/errors.hpp"
#include "dadm/gradcheck.hpp"
#include "dadm/losses.hpp"
#include "dadm/mim.hpp"
#include "dadm/model.hpp"
#include "dadm/ops.hpp"
#include "dadm/pgirm.hpp"
#include "dadm/train.hpp"

namespace dadm {

namespace {

constexpr double kShallowTol = 1e-4;
constexpr double kDeepTol = 1e-3;
constexpr double kStep = 1e-5;

Tensor uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

Tensor away_from_zero(Rng& rng, Shape shape, double margin) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) {
        const double m = rng.uniform(margin, 1.0);
        v = rng.uniform() < 0.5 ? -m : m;
    }
    return t;
}

/// Reduces a tensor output to a scalar with fixed random weights.
Var contract(Tape& t, const Var& y, std::uint64_t seed) {
    if (y.size() == 1 && y.shape().empty()) return y;
    Rng r(seed);
    return ops::sum(ops::mul(y, t.constant(uniform_tensor(r, y.shape(), -1.0, 1.0))));
}

struct Spec {
    std::string name;
    std::function<std::vector<Tensor>(Rng&)> make;
    std::function<Var(const std::vector<Var>&)> body;
};

std::function<std::vector<Tensor>(Rng&)> shapes(std::vector<Shape> s, double lo = -1.0, double hi = 1.0) {
    return [=](Rng& r) {
        std::vector<Tensor> out;
        for (const auto& sh : s) out.push_back(uniform_tensor(r, sh, lo, hi));
        return out;
    };
}

std::vector<Spec> primitive_specs() {
    using V = const std::vector<Var>&;
    std::vector<Spec> s = {
        {"add", shapes({{3, 4}, {3, 4}}), [](V v) { return ops::add(v[0], v[1]); }},
        {"sub", shapes({{3, 4}, {3, 4}}), [](V v) { return ops::sub(v[0], v[1]); }},
        {"mul", shapes({{3, 4}, {3, 4}}), [](V v) { return ops::mul(v[0], v[1]); }},
        {"scale", shapes({{5}}), [](V v) { return ops::scale(v[0], -1.7); }},
        {"add_scalar", shapes({{5}}), [](V v) { return ops::add_scalar(v[0], 0.3); }},
        {"exp", shapes({{6}}, -3, 3), [](V v) { return ops::exp(v[0]); }},
        {"log", shapes({{6}}, 0.1, 3), [](V v) { return ops::log(v[0]); }},
        {"sigmoid", shapes({{6}}, -5, 5), [](V v) { return ops::sigmoid(v[0]); }},
        {"relu", [](Rng& r) { return std::vector{away_from_zero(r, {6}, 0.05)}; }, [](V v) { return ops::relu(v[0]); }},
        {"gelu", shapes({{6}}, -3, 3), [](V v) { return ops::gelu(v[0]); }},
        {"square", shapes({{6}}), [](V v) { return ops::square(v[0]); }},
        {"sum", shapes({{2, 3}}), [](V v) { return ops::sum(v[0]); }},
        {"mean", shapes({{2, 3}}), [](V v) { return ops::mean(v[0]); }},
        {"row_mean", shapes({{3, 2, 2}}), [](V v) { return ops::row_mean(v[0]); }},
        {"row_sum", shapes({{3, 4}}), [](V v) { return ops::row_sum(v[0]); }},
        {"reshape", shapes({{2, 6}}), [](V v) { return ops::reshape(v[0], {3, 4}); }},
        {"transpose12", shapes({{2, 3, 4}}), [](V v) { return ops::transpose12(v[0]); }},
        {"slice", shapes({{2, 5, 3}}), [](V v) { return ops::slice(v[0], 1, 1, 3); }},
        {"concat", shapes({{2, 2, 3}, {2, 2, 1}}), [](V v) { return ops::concat({v[0], v[1], v[0]}, 2); }},
        {"concat_channels", shapes({{2, 2, 3, 3}, {2, 1, 3, 3}}), [](V v) { return ops::concat_channels(v[0], v[1]); }},
        {"permute_rows", shapes({{4, 3}}), [](V v) { return ops::permute_rows(v[0], {2, 0, 3, 1}); }},
        {"gather_rows", shapes({{3, 2}}), [](V v) { return ops::gather_rows(v[0], {2, 0, 2, 1, 2}); }},
        {"patchify", shapes({{2, 2, 4, 6}}), [](V v) { return ops::patchify(v[0], 2); }},
        {"add_bias", shapes({{3, 4}, {4}}), [](V v) { return ops::add_bias(v[0], v[1]); }},
        {"mul_cols", shapes({{3, 4}, {4}}), [](V v) { return ops::mul_cols(v[0], v[1]); }},
        {"add_leading", shapes({{3, 2, 2}, {2, 2}}), [](V v) { return ops::add_leading(v[0], v[1]); }},
        {"mul_rows", shapes({{3, 4}, {3}}), [](V v) { return ops::mul_rows(v[0], v[1]); }},
        {"add_channel_bias", shapes({{2, 3, 2, 2}, {3}}), [](V v) { return ops::add_channel_bias(v[0], v[1]); }},
        {"layer_norm_rows", shapes({{3, 5}}, -2, 2), [](V v) { return ops::layer_norm_rows(v[0]); }},
        {"instance_norm", shapes({{2, 2, 3, 3}}, -2, 2), [](V v) { return ops::instance_norm(v[0]); }},
        {"softmax_rows", shapes({{3, 5}}, -3, 3), [](V v) { return ops::softmax_rows(v[0]); }},
        {"log_softmax_rows", shapes({{3, 5}}, -3, 3), [](V v) { return ops::log_softmax_rows(v[0]); }},
        {"l2_normalize_rows", [](Rng& r) { return std::vector{away_from_zero(r, {3, 4}, 0.2)}; },
         [](V v) { return ops::l2_normalize_rows(v[0]); }},
        {"row_dot", shapes({{3, 4}, {3, 4}}), [](V v) { return ops::row_dot(v[0], v[1]); }},
        {"cosine", [](Rng& r) { return std::vector{away_from_zero(r, {5}, 0.2), away_from_zero(r, {5}, 0.2)}; },
         [](V v) { return ops::cosine(v[0], v[1]); }},
        {"pairwise_sqdiff", shapes({{4}}), [](V v) { return ops::pairwise_sqdiff(v[0]); }},
        {"conv2d_cdc", shapes({{2, 2, 4, 3}, {3, 2, 3, 3}}), [](V v) { return ops::conv2d(v[0], v[1], 0.7); }},
        {"conv2d_1x1", shapes({{1, 3, 3, 3}, {2, 3, 1, 1}}), [](V v) { return ops::conv2d(v[0], v[1], 0.0); }},
    };
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb) {
            const Shape a = ta ? Shape{4, 3} : Shape{3, 4};
            const Shape b = tb ? Shape{2, 4} : Shape{4, 2};
            s.push_back({"matmul_" + std::to_string(ta) + std::to_string(tb), shapes({a, b}),
                         [=](V v) { return ops::matmul(v[0], v[1], ta, tb); }});
            const Shape ba = ta ? Shape{2, 4, 3} : Shape{2, 3, 4};
            const Shape bb = tb ? Shape{2, 2, 4} : Shape{2, 4, 2};
            s.push_back({"bmm_" + std::to_string(ta) + std::to_string(tb), shapes({ba, bb}),
                         [=](V v) { return ops::bmm(v[0], v[1], ta, tb); }});
        }
    return s;
}

/// Runs `spec` at `points` random points and folds them into one result.
CheckResult run_spec(const std::string& module, const Spec& spec, Rng& rng, std::size_t points, double tol) {
    CheckResult res{module, spec.name, true, 0.0, tol, 0, {}};
    for (std::size_t p = 0; p < points; ++p) {
        const auto inputs = spec.make(rng);
        const std::uint64_t cseed = rng.next_u64();
        const auto rep = grad_check([&](Tape& t, const std::vector<Var>& v) { return contract(t, spec.body(v), cseed); },
                                    inputs, kStep, tol);
        res.coordinates += rep.coordinates;
        if (rep.max_rel_error >= res.max_rel_error) {
            res.max_rel_error = rep.max_rel_error;
            res.detail = rep.summary();
        }
        res.passed = res.passed && rep.passed;
    }
    return res;
}

CheckResult from_report(const std::string& module, const std::string& name, const GradCheckReport& rep, double tol) {
    return {module, name, rep.passed, rep.max_rel_error, tol, rep.coordinates, rep.summary()};
}

/// Every coordinate of every parameter when the total is small, otherwise an
/// evenly strided sample of about `fraction` of them.
std::vector<ParamCoord> param_coords(const std::vector<Parameter*>& params, double fraction, Rng& rng) {
    std::vector<ParamCoord> out;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p]->value.size(); ++i)
            if (fraction >= 1.0 || rng.uniform() < fraction) out.push_back({p, i});
    return out;
}

/// Smallest |pre-activation| of the critic's hidden layer over joint and
/// shuffled pairs.
double min_preactivation(const MineCritic& critic, const Tensor& x, const Tensor& y,
                         const std::vector<std::size_t>& perm) {
    const Tensor& w = critic.net.l1.weight.value;  // (2, hidden)
    const Tensor& b = critic.net.l1.bias.value;
    const std::size_t hidden = w.dim(1);
    double best = 1e300;
    for (std::size_t i = 0; i < x.dim(0); ++i)
        for (std::size_t yi : {i, perm[i]})
            for (std::size_t h = 0; h < hidden; ++h)
                best = std::min(best, std::abs(x[i] * w[h] + y[yi] * w[hidden + h] + b[h]));
    return best;
}

std::vector<CheckResult> tensor_checks(Rng& rng, std::size_t points) {
    std::vector<CheckResult> out;
    for (const auto& s : primitive_specs()) out.push_back(run_spec("tensor", s, rng, points, kShallowTol));
    return out;
}

std::vector<CheckResult> mim_checks(Rng& rng, std::size_t points) {
    std::vector<CheckResult> out;
    MimConfig cfg;
    cfg.dim = 4;
    Rng init = rng.fork(1);
    MimModule mim("mim", cfg, init);
    const std::size_t gh = 2, gw = 3, b = 2;

    Spec inputs{"mim_forward_inputs", shapes({{b, gh * gw, cfg.dim}, {b, gh * gw, cfg.dim}}),
                [&](const std::vector<Var>& v) {
                    MimOutput o = mim.forward(*v[0].tape(), v[0], v[1], gh, gw);
                    Var all = ops::concat({ops::reshape(o.out1, {o.out1.size()}), ops::reshape(o.out2, {o.out2.size()}),
                                           o.mi1, o.mi2, ops::reshape(o.mask1, {o.mask1.size()}),
                                           ops::reshape(o.aligned2, {o.aligned2.size()})},
                                          0);
                    return all;
                }};
    out.push_back(run_spec("mim", inputs, rng, points, kShallowTol));

    nn::ParamList params;
    mim.collect(params);
    Rng coord_rng = rng.fork(2);
    const auto coords = param_coords(params, 1.0, coord_rng);
    const Tensor z1 = uniform_tensor(rng, {b, gh * gw, cfg.dim}, -1, 1), z2 = uniform_tensor(rng, {b, gh * gw, cfg.dim}, -1, 1);
    const std::uint64_t cseed = rng.next_u64();
    auto f = [&](Tape& t) {
        MimOutput o = mim.forward(t, t.constant(z1), t.constant(z2), gh, gw);
        return ops::add(contract(t, o.out1, cseed), contract(t, o.out2, cseed + 1));
    };
    out.push_back(from_report("mim", "mim_forward_weights", grad_check_params(f, params, coords, kStep, kShallowTol),
                              kShallowTol));

    Spec mi{"mi_loss_paper", shapes({{6}, {6}}, -2, 2),
            [](const std::vector<Var>& v) { return mi_loss_paper(v[0], v[1], {3, 0, 5, 1, 2, 4}); }};
    out.push_back(run_spec("mim", mi, rng, points, kShallowTol));

    Spec layered{"layer_mi_loss", shapes({{b, gh * gw, cfg.dim}, {b, gh * gw, cfg.dim}}),
                 [&](const std::vector<Var>& v) {
                     MimOutput o = mim.forward(*v[0].tape(), v[0], v[1], gh, gw);
                     Rng r(99);
                     return layer_mi_loss({{&o}}, r);
                 }};
    out.push_back(run_spec("mim", layered, rng, points, kShallowTol));

    Rng crit_rng = rng.fork(3);
    MineCritic critic(1, 8, crit_rng);
    nn::ParamList cp;
    critic.collect(cp);
    // Redraw until no hidden pre-activation sits within 1e-3 of the ReLU kink.
    Tensor x, y;
    std::vector<std::size_t> perm;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        x = uniform_tensor(rng, {16, 1}, -2, 2);
        y = uniform_tensor(rng, {16, 1}, -2, 2);
        perm = rng.derangement(16);
        if (min_preactivation(critic, x, y, perm) > 1e-3) break;
    }
    auto bound = [&](Tape& t) { return mine_bound(t, critic, x, y, perm); };
    // The bound is invariant to the critic's output bias, so its derivative is
    // exactly zero and finite differences only see rounding; check it apart.
    std::vector<ParamCoord> coords_no_shift;
    for (const auto& c : param_coords(cp, 1.0, coord_rng))
        if (cp[c.param] != &critic.net.l2.bias) coords_no_shift.push_back(c);
    out.push_back(from_report("mim", "mine_bound_critic", grad_check_params(bound, cp, coords_no_shift, kStep, kShallowTol),
                              kShallowTol));
    {
        Tape t;
        Var v = bound(t);
        const double g = t.backward(v).of(critic.net.l2.bias)[0];
        out.push_back({"mim", "mine_bound_shift_invariance", std::abs(g) <= 1e-12, std::abs(g), 1e-12, 1,
                       "d bound / d output bias = " + std::to_string(g)});
    }
    return out;
}

std::vector<CheckResult> loss_checks(Rng& rng, std::size_t points) {
    std::vector<CheckResult> out;
    const std::vector<int> labels = {1, 0, 1, 0, 1, 0};
    const std::vector<int> envs = {0, 0, 1, 1, 2, 2};
    AngleLossParams ap;
    Spec angle{"angle_loss",
               [](Rng& r) {
                   return std::vector{away_from_zero(r, {6, 4}, 0.2), away_from_zero(r, {6, 4}, 0.2),
                                      away_from_zero(r, {6, 4}, 0.2)};
               },
               [&](const std::vector<Var>& v) {
                   ModalityFeatures mf{{v[0], v[1], v[2]}, labels, envs};
                   return *angle_loss(mf, ap);
               }};
    out.push_back(run_spec("losses", angle, rng, points, kShallowTol));

    Spec ce{"ce_loss", shapes({{6, 2}}, -3, 3), [&](const std::vector<Var>& v) { return ce_loss(v[0], labels); }};
    out.push_back(run_spec("losses", ce, rng, points, kShallowTol));

    Spec total{"total_loss", shapes({{6, 2}, {6}, {6}}, -2, 2),
               [&](const std::vector<Var>& v) {
                   const Var c = ce_loss(v[0], labels);
                   const Var m = mi_loss_paper(v[1], v[2], {1, 2, 0, 4, 5, 3});
                   return total_loss(c, m, std::optional<Var>(ops::sum(ops::square(v[1]))), LossWeights{});
               }};
    out.push_back(run_spec("losses", total, rng, points, kShallowTol));
    return out;
}

std::vector<CheckResult> model_checks(Rng& rng) {
    ModelConfig mc;
    // ReGrad deliberately replaces the gradient, so the end-to-end check
    // measures the unmodulated derivative.
    mc.regrad = false;
    mc.seed = rng.next_u64();
    DadmModel model(mc, {0, 1});
    Rng beta_rng = rng.fork(4);
    for (auto& b : model.betas.betas)
        for (auto& v : b.data()) v = beta_rng.uniform(-1, 1);

    SynthSpec ss = SynthSpec::defaults();
    ss.n_envs = 2;
    ss.shifts.resize(2);
    ss.samples_per_env = 2;
    ss.seed = rng.next_u64();
    const Dataset data = generate(ss);
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const Batch batch = make_batch(data, idx);
    TrainConfig tc;
    const std::uint64_t mi_seed = rng.next_u64();

    auto params = model.params();
    Rng coord_rng = rng.fork(5);
    const auto coords = param_coords(params, 0.01, coord_rng);
    auto f = [&](Tape& t) {
        Rng r(mi_seed);
        return batch_loss(t, model, batch, tc, r).total;
    };
    return {from_report("model", "end_to_end_total_loss", grad_check_params(f, params, coords, kStep, kDeepTol),
                        kDeepTol)};
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
    static const std::vector<std::string> m = {"tensor", "mim", "losses", "model"};
    return m;
}

std::vector<CheckResult> run_gradchecks(const std::string& module, std::uint64_t seed, std::size_t points) {
    bool known = module == "all";
    for (const auto& m : gradcheck_modules()) known = known || m == module;
    if (!known) throw ConfigError("gradcheck: unknown module '" + module + "'");
    Rng rng(seed, 0x67726164ULL);
    std::vector<CheckResult> out;
    auto append = [&](std::vector<CheckResult> r) { out.insert(out.end(), r.begin(), r.end()); };
    if (module == "all" || module == "tensor") append(tensor_checks(rng, points));
    if (module == "all" || module == "mim") append(mim_checks(rng, points));
    if (module == "all" || module == "losses") append(loss_checks(rng, points));
    if (module == "all" || module == "model") append(model_checks(rng));
    return out;
}

CosineExpectation validate_cosine_expectation(double mu, double sigma, std::size_t n, std::uint64_t seed) {
    if (!(sigma >= 0.0)) throw ConfigError("cosine expectation: sigma must be non-negative");
    if (n < 100000) throw ConfigError("cosine expectation: n must be at least 1e5");
    Rng rng(seed, 0x636f73ULL);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::cos(sigma == 0.0 ? mu : rng.normal(mu, sigma));
    CosineExpectation r;
    r.monte_carlo = acc / static_cast<double>(n);
    r.analytic = std::exp(-0.5 * sigma * sigma) * std::cos(mu);
    r.abs_error = std::abs(r.monte_carlo - r.analytic);
    return r;
}

MiBenchResult mi_bench(double rho, std::size_t n, const MineOptions& opt, std::uint64_t seed) {
    if (!(rho > -1.0 && rho < 1.0)) throw ConfigError("mi-bench: rho must lie in (-1, 1)");
    Rng data_rng(seed, 0x6d6962ULL);
    Tensor x({n, 1}), y({n, 1});
    const double c = std::sqrt(1.0 - rho * rho);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = data_rng.normal();
        y[i] = rho * x[i] + c * data_rng.normal();
    }
    Rng init(seed, 0x637269ULL);
    MineCritic critic(1, 64, init);
    Rng train(seed, 0x747261ULL);
    MineResult r = mine_estimate(x, y, critic, opt, train);
    return {-0.5 * std::log(1.0 - rho * rho), r.estimate, std::move(r.trace)};
}

std::vector<CheckResult> validate_identities(std::uint64_t seed) {
    std::vector<CheckResult> out;
    auto add = [&](const std::string& name, bool ok, double err, double tol, const std::string& detail) {
        out.push_back({"identities", name, ok, err, tol, 1, detail});
    };
    {
        const auto r = validate_cosine_expectation(0.0, 0.0, 100000, seed);
        add("cosine_degenerate", r.monte_carlo == 1.0 && r.analytic == 1.0, r.abs_error, 0.0,
            "mc " + std::to_string(r.monte_carlo) + " analytic " + std::to_string(r.analytic));
    }
    {
        const auto r = validate_cosine_expectation(0.0, 0.5, 1000000, seed);
        add("cosine_sigma_0.5", r.abs_error <= 1e-3, r.abs_error, 1e-3,
            "mc " + std::to_string(r.monte_carlo) + " analytic " + std::to_string(r.analytic));
    }
    {
        const std::size_t n = 1000000;
        const auto r = validate_cosine_expectation(std::acos(0.0), 0.8, n, seed);
        const double tol = 3.0 / std::sqrt(static_cast<double>(n));
        add("cosine_mu_pi_2", std::abs(r.monte_carlo) <= tol, std::abs(r.monte_carlo), tol,
            "mc " + std::to_string(r.monte_carlo) + " analytic " + std::to_string(r.analytic));
    }
    {
        Rng rng(seed, 0x706769ULL);
        HyperplaneSet hs({0, 1, 2, 3}, 6);
        for (auto& b : hs.betas)
            for (auto& v : b.data()) v = rng.uniform(-2, 2);
        std::map<int, Tensor> grads;
        for (int e : hs.envs) grads[e] = uniform_tensor(rng, {7}, -1, 1);
        PgIrmConfig cfg;
        PgIrmStepInfo info;
        pgirm_step(hs, grads, cfg, cfg.t_alpha + 1, &info);
        double worst = 0.0;
        for (std::size_t e = 0; e < info.dist_before.size(); ++e)
            worst = std::max(worst, std::abs(info.dist_after[e] - cfg.alpha * info.dist_before[e]));
        add("pgirm_contraction", worst <= 1e-12, worst, 1e-12, "max |d_after - alpha d_before|");
    }
    return out;
}

}  // namespace dadm
