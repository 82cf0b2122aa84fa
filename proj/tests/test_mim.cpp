#include <gtest/gtest.h>

#include <cmath>

#include "dadm/checks.hpp"
#include "dadm/errors.hpp"
#include "dadm/mim.hpp"
#include "dadm/ops.hpp"
#include "test_util.hpp"

using namespace dadm;

namespace {

MimModule make_mim(std::uint64_t seed, std::size_t dim = 16) {
    Rng rng(seed);
    MimConfig cfg;
    cfg.dim = dim;
    return MimModule("mim", cfg, rng);
}

Tensor first(const Tensor& x) {
    Tensor out({1, x.dim(1), x.dim(2)});
    std::copy_n(x.ptr(), out.size(), out.ptr());
    return out;
}

}  // namespace

TEST(Mim, OutputShapesAndRanges) {
    const auto mim = make_mim(41);
    Rng rng(42);
    Tape t(false);
    Var z1 = t.constant(testutil::random_tensor(rng, {3, 16, 16}));
    Var z2 = t.constant(testutil::random_tensor(rng, {3, 16, 16}));
    const auto o = mim.forward(t, z1, z2, 4, 4);
    EXPECT_EQ(o.mask1.shape(), (Shape{3, 16}));
    EXPECT_EQ(o.mask2.shape(), (Shape{3, 16}));
    EXPECT_EQ(o.aligned1.shape(), (Shape{3, 16, 16}));
    EXPECT_EQ(o.out2.shape(), (Shape{3, 16, 16}));
    EXPECT_EQ(o.mi1.shape(), (Shape{3}));
    for (const Var* m : {&o.mask1, &o.mask2})
        for (double v : m->value().data()) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
}

TEST(Mim, TokensAreMeanOfMaskedFeatures) {
    const auto mim = make_mim(43);
    Rng rng(44);
    Tape t(false);
    Var z1 = t.constant(testutil::random_tensor(rng, {2, 16, 16}));
    Var z2 = t.constant(testutil::random_tensor(rng, {2, 16, 16}));
    const auto o = mim.forward(t, z1, z2, 4, 4);
    for (std::size_t b = 0; b < 2; ++b) {
        double s1 = 0, s2 = 0;
        for (std::size_t p = 0; p < 16; ++p)
            for (std::size_t k = 0; k < 16; ++k) {
                const std::size_t i = (b * 16 + p) * 16 + k;
                EXPECT_NEAR(o.aligned1.value()[i], o.mask1.value()[b * 16 + p] * z1.value()[i], 1e-15);
                s1 += o.mask1.value()[b * 16 + p] * z1.value()[i];
                s2 += o.mask2.value()[b * 16 + p] * z2.value()[i];
            }
        EXPECT_NEAR(o.mi1.value()[b], s1 / 256, 1e-14);
        EXPECT_NEAR(o.mi2.value()[b], s2 / 256, 1e-14);
    }
}

TEST(Mim, PerSampleIndependence) {
    const auto mim = make_mim(45);
    Rng rng(46);
    const Tensor a = testutil::random_tensor(rng, {2, 16, 16});
    const Tensor b = testutil::random_tensor(rng, {2, 16, 16});
    Tape t1(false), t2(false);
    const auto full = mim.forward(t1, t1.constant(a), t1.constant(b), 4, 4);
    const auto one = mim.forward(t2, t2.constant(first(a)), t2.constant(first(b)), 4, 4);
    for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(full.out1.value()[i], one.out1.value()[i]);
    EXPECT_EQ(full.mi1.value()[0], one.mi1.value()[0]);
}

TEST(Mim, RejectsMismatchedStreams) {
    const auto mim = make_mim(47);
    Tape t(false);
    EXPECT_THROW(mim.forward(t, t.constant(Tensor({1, 16, 16})), t.constant(Tensor({1, 9, 16})), 4, 4), ShapeError);
    EXPECT_THROW(mim.forward(t, t.constant(Tensor({1, 9, 16})), t.constant(Tensor({1, 9, 16})), 4, 4), ShapeError);
}

TEST(MiLoss, ConstantTokensGiveExactlyZero) {
    Rng rng(48);
    for (double c : {0.0, 0.3, -7.25, 1e3, 0.1}) {
        for (std::size_t n : {2u, 7u, 4096u}) {
            Tape t;
            Var a = t.variable(Tensor({n}, c));
            Var b = t.variable(Tensor({n}, c));
            EXPECT_EQ(mi_loss_paper(a, b, rng).value().item(), 0.0) << "c=" << c << " n=" << n;
        }
    }
}

TEST(MiLoss, IndependentTokensStayAboveLowerBound) {
    Rng rng(49);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x({4096}), y({4096});
        for (std::size_t i = 0; i < 4096; ++i) x[i] = rng.normal(), y[i] = rng.normal();
        Tape t;
        EXPECT_GE(mi_loss_paper(t.variable(x), t.variable(y), rng).value().item(), -0.05);
    }
}

TEST(MiLoss, MatchesDirectFormula) {
    Rng rng(51);
    const Tensor x = testutil::random_tensor(rng, {9}, -3, 3);
    const Tensor y = testutil::random_tensor(rng, {9}, -3, 3);
    const auto perm = rng.derangement(9);
    Tape t;
    const double got = mi_loss_paper(t.variable(x), t.variable(y), perm).value().item();
    double joint = 0, marg = 0;
    for (std::size_t i = 0; i < 9; ++i) {
        joint += 0.5 * (x[i] + y[i]) / 9;
        marg += std::exp(0.5 * (x[i] + y[perm[i]])) / 9;
    }
    EXPECT_NEAR(got, -(joint - std::log(marg)), 1e-13);
}

TEST(MiLoss, TooSmallBatchIsAnError) {
    Rng rng(52);
    Tape t;
    EXPECT_THROW(mi_loss_paper(t.variable(Tensor({1})), t.variable(Tensor({1})), rng), ShapeError);
}

TEST(LogMeanExp, StableForLargeInputs) {
    Tape t;
    Var x = t.variable(Tensor::from({1000.0, 1000.0, 1000.0 + std::log(4.0)}));
    EXPECT_NEAR(log_mean_exp(x).value().item(), 1000.0 + std::log(2.0), 1e-12);
}

TEST(Mine, GaussianBenchmarkBracketsAnalyticValue) {
    const auto r = mi_bench(0.8, 8192, MineOptions{}, 1);
    EXPECT_NEAR(r.analytic, 0.5108, 1e-4);
    EXPECT_GE(r.estimate, 0.35);
    EXPECT_LE(r.estimate, r.analytic + 0.02);
}

TEST(Mine, IndependentVariablesGiveNearZero) {
    const auto r = mi_bench(0.0, 8192, MineOptions{}, 2);
    EXPECT_EQ(r.analytic, 0.0);
    EXPECT_LE(std::abs(r.estimate), 0.05);
}
