#include <gtest/gtest.h>

#include <cmath>

#include "dadm/errors.hpp"
#include "dadm/ops.hpp"
#include "dadm/pgirm.hpp"
#include "test_util.hpp"

using namespace dadm;

namespace {

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
    return out;
}

/// Branch formulas written out directly from the case table.
Tensor regrad_oracle(const Tensor& g1, const Tensor& g2, double mi1, double mi2, ReGradBranch& branch) {
    const double d = dot(g1, g2);
    if (d == 0.0) {
        branch = ReGradBranch::orthogonal;
        return axpby(1.0, g1, std::max(mi1, mi2), g2);
    }
    if (mi1 <= mi2) {
        const double c = d / dot(g1, g1);
        if (d < 0.0) {
            branch = ReGradBranch::conflict_weak1;
            return axpby(1.0 + c * mi2, g1, 0.0, g2);
        }
        branch = ReGradBranch::agree_weak1;
        return axpby(1.0 - c * mi2, g1, mi2, g2);
    }
    const double c = d / dot(g2, g2);
    if (d < 0.0) {
        branch = ReGradBranch::conflict_weak2;
        return axpby(0.0, g1, 1.0 + c * mi1, g2);
    }
    branch = ReGradBranch::agree_weak2;
    return axpby(mi1, g1, 1.0 - c * mi1, g2);
}

/// Random pair forced into the requested branch.
void draw_case(Rng& rng, ReGradBranch want, Tensor& g1, Tensor& g2, double& mi1, double& mi2) {
    const std::size_t n = 1 + rng.below(12);
    const bool conflict = want == ReGradBranch::conflict_weak1 || want == ReGradBranch::conflict_weak2;
    const bool weak1 = want == ReGradBranch::conflict_weak1 || want == ReGradBranch::agree_weak1;
    do {
        g1 = testutil::random_tensor(rng, {n});
        g2 = testutil::random_tensor(rng, {n});
    } while (std::abs(dot(g1, g2)) < 1e-3 || (dot(g1, g2) < 0.0) != conflict);
    mi1 = rng.uniform(0.01, 0.99);
    mi2 = rng.uniform(0.01, 0.99);
    if ((mi1 <= mi2) != weak1) std::swap(mi1, mi2);
}

constexpr ReGradBranch kFourBranches[] = {ReGradBranch::conflict_weak1, ReGradBranch::agree_weak1,
                                          ReGradBranch::conflict_weak2, ReGradBranch::agree_weak2};

}  // namespace

TEST(ReGrad, HandExampleConflictWeak1) {
    const auto r = regrad(Tensor::from({1, 0}), Tensor::from({-2, 0}), 0.2, 0.5);
    EXPECT_EQ(r.branch, ReGradBranch::conflict_weak1);
    EXPECT_EQ(r.grad, Tensor::from({0, 0}));
}

TEST(ReGrad, HandExampleAgreeWeak1) {
    const auto r = regrad(Tensor::from({1, 0}), Tensor::from({1, 1}), 0.2, 0.5);
    EXPECT_EQ(r.branch, ReGradBranch::agree_weak1);
    EXPECT_EQ(r.grad, Tensor::from({1, 0.5}));
    // The added part (0, 0.5) is orthogonal to g1.
    EXPECT_EQ(r.grad[0] - 1.0, 0.0);
}

TEST(ReGrad, MirroredConflictUsesBranchThree) {
    const auto r = regrad(Tensor::from({-2, 0}), Tensor::from({1, 0}), 0.5, 0.2);
    EXPECT_EQ(r.branch, ReGradBranch::conflict_weak2);
    EXPECT_EQ(r.grad, Tensor::from({0, 0}));
}

TEST(ReGrad, TieFallsToWeak1Branches) {
    EXPECT_EQ(regrad(Tensor::from({1, 0}), Tensor::from({-2, 0}), 0.4, 0.4).branch, ReGradBranch::conflict_weak1);
    EXPECT_EQ(regrad(Tensor::from({1, 0}), Tensor::from({1, 1}), 0.4, 0.4).branch, ReGradBranch::agree_weak1);
}

TEST(ReGrad, OrthogonalInputsAddScaledByStrongerMi) {
    const auto r = regrad(Tensor::from({1, 0}), Tensor::from({0, 2}), 0.3, 0.6);
    EXPECT_EQ(r.branch, ReGradBranch::orthogonal);
    EXPECT_EQ(r.grad, Tensor::from({1, 1.2}));
}

TEST(ReGrad, ZeroNormWeakGradientReturnsPlainSum) {
    // g1 . g2 != 0 is impossible with g1 = 0, so the only zero-norm path is the
    // orthogonal branch; a zero weak gradient must never divide by zero.
    const auto r = regrad(Tensor::from({0, 0}), Tensor::from({1, 2}), 0.2, 0.5);
    EXPECT_EQ(r.branch, ReGradBranch::orthogonal);
    EXPECT_TRUE(r.grad.all_finite());
    EXPECT_EQ(r.grad, Tensor::from({0.5, 1.0}));
}

TEST(ReGrad, RejectsMismatchedShapes) {
    EXPECT_THROW(regrad(Tensor::from({1, 0}), Tensor::from({1, 0, 0}), 0.5, 0.5), ShapeError);
}

TEST(ReGrad, MatchesCaseTableOracle) {
    Rng rng(11);
    for (ReGradBranch want : kFourBranches) {
        for (int k = 0; k < 1000; ++k) {
            Tensor g1, g2;
            double mi1, mi2;
            draw_case(rng, want, g1, g2, mi1, mi2);
            ReGradBranch oracle_branch{};
            const Tensor expect = regrad_oracle(g1, g2, mi1, mi2, oracle_branch);
            const auto got = regrad(g1, g2, mi1, mi2);
            ASSERT_EQ(got.branch, want);
            ASSERT_EQ(oracle_branch, want);
            ASSERT_FALSE(got.degenerate);
            for (std::size_t i = 0; i < expect.size(); ++i) ASSERT_NEAR(got.grad[i], expect[i], 1e-12);
        }
    }
}

TEST(ReGrad, BranchSelectionIsExhaustiveAndExclusive) {
    Rng rng(12);
    for (int k = 0; k < 4000; ++k) {
        const std::size_t n = 1 + rng.below(6);
        Tensor g1 = testutil::random_tensor(rng, {n});
        Tensor g2 = testutil::random_tensor(rng, {n});
        const double mi1 = rng.uniform(), mi2 = rng.uniform();
        const double d = dot(g1, g2);
        int fired = 0;
        fired += d < 0 && mi1 <= mi2;
        fired += d > 0 && mi1 <= mi2;
        fired += d < 0 && mi1 > mi2;
        fired += d > 0 && mi1 > mi2;
        fired += d == 0;
        ASSERT_EQ(fired, 1);
        const auto b = regrad(g1, g2, mi1, mi2).branch;
        const ReGradBranch expect = d == 0 ? ReGradBranch::orthogonal
                                    : d < 0 ? (mi1 <= mi2 ? ReGradBranch::conflict_weak1 : ReGradBranch::conflict_weak2)
                                            : (mi1 <= mi2 ? ReGradBranch::agree_weak1 : ReGradBranch::agree_weak2);
        ASSERT_EQ(b, expect);
    }
}

TEST(ReGrad, PositivelyHomogeneousOfDegreeOne) {
    Rng rng(13);
    for (ReGradBranch want : kFourBranches) {
        for (int k = 0; k < 1000; ++k) {
            Tensor g1, g2;
            double mi1, mi2;
            draw_case(rng, want, g1, g2, mi1, mi2);
            const double c = rng.uniform(0.01, 100.0);
            const auto base = regrad(g1, g2, mi1, mi2);
            const auto scaled = regrad(axpby(c, g1, 0.0, g1), axpby(c, g2, 0.0, g2), mi1, mi2);
            ASSERT_EQ(scaled.branch, base.branch);
            for (std::size_t i = 0; i < g1.size(); ++i)
                ASSERT_NEAR(scaled.grad[i], c * base.grad[i], 1e-10 * std::max(1.0, c));
        }
    }
}

TEST(ReGrad, AgreementAddsComponentOrthogonalToWeakGradient) {
    Rng rng(14);
    for (ReGradBranch want : {ReGradBranch::agree_weak1, ReGradBranch::agree_weak2}) {
        for (int k = 0; k < 1000; ++k) {
            Tensor g1, g2;
            double mi1, mi2;
            draw_case(rng, want, g1, g2, mi1, mi2);
            const auto r = regrad(g1, g2, mi1, mi2);
            const Tensor& weak = want == ReGradBranch::agree_weak1 ? g1 : g2;
            const Tensor added = axpby(1.0, r.grad, -1.0, weak);
            ASSERT_NEAR(dot(added, weak) / norm(weak), 0.0, 1e-10);
        }
    }
}

TEST(ReGrad, ConflictNeverReducesAlignmentWithStrongGradient) {
    Rng rng(15);
    for (int k = 0; k < 1000; ++k) {
        Tensor g1, g2;
        double mi1, mi2;
        draw_case(rng, ReGradBranch::conflict_weak1, g1, g2, mi1, mi2);
        const auto r = regrad(g1, g2, mi1, mi2);
        ASSERT_GE(dot(r.grad, g2), dot(g1, g2) - 1e-12);
    }
}

TEST(ReGradGate, ForwardIsIdentityAndPassesGradientsWithoutTokens) {
    Rng rng(16);
    Tape t;
    Var a = t.variable(testutil::random_tensor(rng, {2, 3}));
    Var b = t.variable(testutil::random_tensor(rng, {2, 3}));
    auto gp = regrad_gate(a, b, ReGradScope::per_sample);
    EXPECT_EQ(gp.z1.value(), a.value());
    EXPECT_EQ(gp.z2.value(), b.value());
    Var w = t.constant(testutil::random_tensor(rng, {2, 3}));
    Var loss = ops::add(ops::sum(ops::mul(gp.z1, w)), ops::sum(ops::scale(gp.z2, 2.0)));
    auto g = t.backward(loss);
    EXPECT_EQ(g.of(a), w.value());
    EXPECT_EQ(g.of(b), Tensor({2, 3}, 2.0));
}

TEST(ReGradGate, BackwardAppliesRegradPerSample) {
    Rng rng(17);
    Tape t;
    Var a = t.variable(testutil::random_tensor(rng, {2, 4}));
    Var b = t.variable(testutil::random_tensor(rng, {2, 4}));
    auto gp = regrad_gate(a, b, ReGradScope::per_sample);
    gp.slot->mi1 = Tensor::from({0.3, -1.0});
    gp.slot->mi2 = Tensor::from({-0.2, 2.0});
    gp.slot->ready = true;
    const Tensor w1 = testutil::random_tensor(rng, {2, 4});
    const Tensor w2 = testutil::random_tensor(rng, {2, 4});
    Var loss = ops::add(ops::sum(ops::mul(gp.z1, t.constant(w1))), ops::sum(ops::mul(gp.z2, t.constant(w2))));
    auto g = t.backward(loss);
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    for (std::size_t s = 0; s < 2; ++s) {
        Tensor g1({4}), g2({4});
        for (std::size_t i = 0; i < 4; ++i) {
            g1[i] = w1[s * 4 + i];
            g2[i] = w2[s * 4 + i];
        }
        const double m1 = sig(gp.slot->mi1[s]), m2 = sig(gp.slot->mi2[s]);
        const auto e1 = regrad(g1, g2, m1, m2);
        const auto e2 = regrad(g2, g1, m2, m1);
        for (std::size_t i = 0; i < 4; ++i) {
            EXPECT_NEAR(g.of(a)[s * 4 + i], e1.grad[i], 1e-14);
            EXPECT_NEAR(g.of(b)[s * 4 + i], e2.grad[i], 1e-14);
        }
    }
    long counted = 0;
    for (long c : gp.slot->branch_counts) counted += c;
    EXPECT_EQ(counted, 2);
}

// ------------------------------------------------------------------ PG-IRM

namespace {

HyperplaneSet random_set(Rng& rng, std::size_t envs, std::size_t d) {
    std::vector<int> ids;
    for (std::size_t e = 0; e < envs; ++e) ids.push_back(static_cast<int>(e));
    HyperplaneSet s(ids, d);
    for (auto& b : s.betas) b = testutil::random_tensor(rng, {d + 1});
    return s;
}

std::map<int, Tensor> random_grads(Rng& rng, const HyperplaneSet& s) {
    std::map<int, Tensor> g;
    for (int e : s.envs) g[e] = testutil::random_tensor(rng, {s.feature_dim() + 1});
    return g;
}

double distance(const Tensor& a, const Tensor& b) { return norm(axpby(1.0, a, -1.0, b)); }

}  // namespace

TEST(PgIrm, WarmupEpochIsPureGradientStepBitExact) {
    Rng rng(21);
    const auto s = random_set(rng, 3, 5);
    const auto g = random_grads(rng, s);
    PgIrmConfig cfg;
    cfg.t_alpha = 5;
    cfg.lr = 0.05;
    PgIrmStepInfo info;
    const auto next = pgirm_step(s, g, cfg, 5, &info);
    EXPECT_EQ(info.alpha_used, 1.0);
    for (std::size_t e = 0; e < 3; ++e)
        for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(next.betas[e][k], s.betas[e][k] - 0.05 * g.at(int(e))[k]);
}

TEST(PgIrm, ContractionIsExactAfterWarmup) {
    Rng rng(22);
    for (int trial = 0; trial < 200; ++trial) {
        const auto s = random_set(rng, 2 + rng.below(4), 1 + rng.below(8));
        const auto g = random_grads(rng, s);
        PgIrmConfig cfg;
        cfg.alpha = rng.uniform(0.05, 0.999);
        cfg.t_alpha = 0;
        PgIrmStepInfo info;
        const auto next = pgirm_step(s, g, cfg, 1, &info);
        ASSERT_EQ(info.alpha_used, cfg.alpha);
        for (std::size_t e = 0; e < s.betas.size(); ++e) {
            // Independent search for the farthest pre-step classifier.
            Tensor stepped = axpby(1.0, s.betas[e], -cfg.lr, g.at(s.envs[e]));
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t o = 0; o < s.betas.size(); ++o) {
                if (o == e) continue;
                const double d = distance(stepped, s.betas[o]);
                if (d > far_d) far_d = d, far = o;
            }
            ASSERT_EQ(info.farthest[e], far);
            const double after = distance(next.betas[e], s.betas[far]);
            ASSERT_NEAR(after, cfg.alpha * far_d, 1e-12 * std::max(1.0, far_d));
        }
    }
}

TEST(PgIrm, DistanceTwoContractsToOnePointEight) {
    HyperplaneSet s({0, 1}, 1);
    s.betas[0] = Tensor::from({2.0, 0.0});
    s.betas[1] = Tensor::from({0.0, 0.0});
    std::map<int, Tensor> g{{0, Tensor::from({0, 0})}, {1, Tensor::from({0, 0})}};
    PgIrmConfig cfg;
    cfg.alpha = 0.9;
    cfg.t_alpha = 5;
    const auto next = pgirm_step(s, g, cfg, 6);
    EXPECT_NEAR(distance(next.betas[0], s.betas[1]), 1.8, 1e-12);
    EXPECT_NEAR(distance(next.betas[1], s.betas[0]), 1.8, 1e-12);
}

TEST(PgIrm, IdenticalBetasAndGradientsStayIdentical) {
    Rng rng(23);
    const Tensor b = testutil::random_tensor(rng, {5});
    const Tensor gr = testutil::random_tensor(rng, {5});
    HyperplaneSet s({0, 1, 2}, 4);
    for (auto& x : s.betas) x = b;
    std::map<int, Tensor> g{{0, gr}, {1, gr}, {2, gr}};
    PgIrmConfig cfg;
    cfg.t_alpha = 0;
    const auto next = pgirm_step(s, g, cfg, 3);
    EXPECT_EQ(next.betas[0], next.betas[1]);
    EXPECT_EQ(next.betas[1], next.betas[2]);
}

TEST(PgIrm, SingleEnvironmentSkipsProjection) {
    HyperplaneSet s({4}, 2);
    s.betas[0] = Tensor::from({1, 2, 3});
    PgIrmConfig cfg;
    cfg.t_alpha = 0;
    cfg.alpha = 0.5;
    cfg.lr = 0.1;
    const auto next = pgirm_step(s, {{4, Tensor::from({1, 1, 1})}}, cfg, 10);
    EXPECT_EQ(next.betas[0], Tensor::from({1 - 0.1, 2 - 0.1, 3 - 0.1}));
}

TEST(PgIrm, MissingEnvironmentGradientIsAnError) {
    Rng rng(24);
    const auto s = random_set(rng, 2, 3);
    EXPECT_THROW(pgirm_step(s, {{0, Tensor({4})}}, PgIrmConfig{}, 1), ConfigError);
}

TEST(PgIrm, SmallerAlphaShrinksSpreadFaster) {
    Rng rng(25);
    const auto start = random_set(rng, 3, 4);
    auto run = [&](double alpha) {
        HyperplaneSet s = start;
        PgIrmConfig cfg;
        cfg.alpha = alpha;
        cfg.t_alpha = 0;
        std::map<int, Tensor> zero;
        for (int e : s.envs) zero[e] = Tensor({5});
        for (int t = 1; t <= 10; ++t) s = pgirm_step(s, zero, cfg, t);
        return s.max_pairwise_distance();
    };
    EXPECT_LT(2.0 * run(0.5), run(0.999));
}

TEST(Inference, EqualBetasGiveSingleHyperplaneScore) {
    HyperplaneSet s({0, 1}, 2);
    s.betas[0] = s.betas[1] = Tensor::from({0.5, -1.0, 0.25});
    EXPECT_DOUBLE_EQ(inference_score(Tensor::from({2, 3}), s), 0.5 * 2 - 3 + 0.25);
}

TEST(Inference, MeanOfPerEnvironmentScores) {
    HyperplaneSet s({0, 1, 2}, 1);
    s.betas[0] = Tensor::from({1, 0});
    s.betas[1] = Tensor::from({2, 0});
    s.betas[2] = Tensor::from({3, 0});
    EXPECT_DOUBLE_EQ(inference_score(Tensor::from({1}), s), 2.0);
}

TEST(Inference, MatchesLoopAndAverageOracle) {
    Rng rng(26);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = 1 + rng.below(10);
        const auto s = random_set(rng, 1 + rng.below(5), d);
        const Tensor f = testutil::random_tensor(rng, {3, d});
        const auto scores = inference_scores(f, s);
        for (std::size_t i = 0; i < 3; ++i) {
            double acc = 0.0;
            for (const auto& b : s.betas) {
                double sc = b[d];
                for (std::size_t k = 0; k < d; ++k) sc += b[k] * f[i * d + k];
                acc += sc;
            }
            ASSERT_NEAR(scores[i], acc / static_cast<double>(s.betas.size()), 1e-12);
        }
    }
}

TEST(Inference, LinearInFeatures) {
    Rng rng(27);
    HyperplaneSet s = random_set(rng, 3, 4);
    for (auto& b : s.betas) b[4] = 0.0;  // linear, not affine
    const Tensor x = testutil::random_tensor(rng, {4});
    const Tensor y = testutil::random_tensor(rng, {4});
    const double a = 1.7, c = -0.4;
    EXPECT_NEAR(inference_score(axpby(a, x, c, y), s), a * inference_score(x, s) + c * inference_score(y, s), 1e-12);
}

TEST(Inference, WidthMismatchIsAnError) {
    HyperplaneSet s({0}, 3);
    EXPECT_THROW(inference_score(Tensor({2}), s), ShapeError);
}
