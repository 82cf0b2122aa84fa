#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dadm/errors.hpp"
#include "dadm/ops.hpp"
#include "dadm/rng.hpp"
#include "test_util.hpp"

using namespace dadm;

TEST(Tensor, ShapeAndSize) {
    Tensor t(Shape{2, 3}, 1.5);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_EQ(t.dim(1), 3u);
    EXPECT_THROW(t.dim(2), ShapeError);
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_THROW(Tensor(Shape{0, 2}), ShapeError);
    EXPECT_EQ(Tensor().size(), 1u);
}

TEST(Tensor, ReshapeKeepsData) {
    Tensor t(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor r = t.reshaped(Shape{4});
    EXPECT_EQ(r.shape(), Shape{4});
    EXPECT_EQ(r[3], 4.0);
    EXPECT_THROW(t.reshaped(Shape{3}), ShapeError);
}

TEST(Rng, DeterministicAndForked) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_NE(Rng(42).next_u64(), c.next_u64());
    EXPECT_NE(Rng(42).fork(1).next_u64(), Rng(42).fork(2).next_u64());
    EXPECT_EQ(Rng(42).fork(7).next_u64(), Rng(42).fork(7).next_u64());
}

TEST(Rng, UniformAndNormalMoments) {
    Rng r(1);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        s += z;
        s2 += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}

TEST(Rng, DerangementHasNoFixedPoints) {
    Rng r(5);
    for (std::size_t n = 2; n < 40; ++n) {
        auto p = r.derangement(n);
        std::set<std::size_t> seen(p.begin(), p.end());
        EXPECT_EQ(seen.size(), n);
        for (std::size_t i = 0; i < n; ++i) EXPECT_NE(p[i], i);
    }
}

TEST(Autodiff, SigmoidAtZero) {
    Tape t;
    Var x = t.variable(Tensor::scalar(0.0));
    Var y = ops::sigmoid(x);
    EXPECT_DOUBLE_EQ(y.value().item(), 0.5);
    auto g = t.backward(y);
    EXPECT_DOUBLE_EQ(g.of(x).item(), 0.25);
}

TEST(Autodiff, CosineSelfIsOne) {
    Rng r(3);
    for (int i = 0; i < 20; ++i) {
        Tape t;
        Var v = t.variable(testutil::random_away_from_zero(r, Shape{7}));
        EXPECT_NEAR(ops::cosine(v, v).value().item(), 1.0, 1e-15);
    }
}

TEST(Autodiff, CosineOfZeroVectorIsError) {
    Tape t;
    Var z = t.variable(Tensor(Shape{3}));
    Var v = t.variable(Tensor::from({1, 2, 3}));
    EXPECT_THROW(ops::cosine(z, v), NumericError);
}

TEST(Autodiff, MeanDistributesQuarter) {
    Tape t;
    Var x = t.variable(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3, 4}));
    Var m = ops::mean(x);
    EXPECT_DOUBLE_EQ(m.value().item(), 2.5);
    auto g = t.backward(m);
    for (double v : g.of(x).data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Autodiff, LinearForm) {
    Tape t;
    Var w = t.variable(Tensor::from({1, 2}));
    Var x = t.constant(Tensor::from({3, 4}));
    auto g = t.backward(ops::sum(ops::mul(w, x)));
    EXPECT_EQ(g.of(w), Tensor::from({3, 4}));
}

TEST(Autodiff, SigmoidOfZeroDotProduct) {
    Tape t;
    Var w = t.variable(Tensor(Shape{1, 3}));
    Var x = t.constant(Tensor(Shape{3, 1}, std::vector<double>{0.5, -1.0, 2.0}));
    auto g = t.backward(ops::sigmoid(ops::matmul(w, x)));
    EXPECT_DOUBLE_EQ(g.of(w)[0], 0.125);
    EXPECT_DOUBLE_EQ(g.of(w)[1], -0.25);
    EXPECT_DOUBLE_EQ(g.of(w)[2], 0.5);
}

TEST(Autodiff, TapeIsSingleUse) {
    Tape t;
    Var x = t.variable(Tensor::scalar(2.0));
    Var y = ops::square(x);
    t.backward(y);
    EXPECT_THROW(t.backward(y), TapeError);
    EXPECT_THROW(ops::square(x), TapeError);
}

TEST(Autodiff, NonScalarLossIsError) {
    Tape t;
    Var x = t.variable(Tensor::from({1, 2}));
    EXPECT_THROW(t.backward(ops::square(x)), TapeError);
}

TEST(Autodiff, NonFiniteIsError) {
    Tape t;
    Var x = t.variable(Tensor::from({800.0}));
    EXPECT_THROW(ops::exp(x), NumericError);
    Var n = t.variable(Tensor::from({-1.0}));
    EXPECT_THROW(ops::log(n), NumericError);
    EXPECT_THROW(t.variable(Tensor::from({NAN})), NumericError);
}

TEST(Autodiff, UnreachedParameterGetsZero) {
    Parameter a{"a", Tensor::from({1, 2}), true};
    Parameter b{"b", Tensor::from({3, 4, 5}), true};
    Tape t;
    Var va = t.param(a);
    t.param(b);
    auto g = t.backward(ops::sum(va));
    EXPECT_EQ(g.of(b), Tensor(Shape{3}));
    EXPECT_EQ(g.of(a), Tensor::from({1, 1}));
    Parameter c{"c", Tensor::from({1.0}), true};
    EXPECT_EQ(g.of(c), Tensor(Shape{1}));
}

TEST(Autodiff, FrozenParameterHasNoGradient) {
    Parameter a{"a", Tensor::from({1, 2}), false};
    Tape t;
    Var va = t.param(a);
    Var w = t.variable(Tensor::from({1, 1}));
    auto g = t.backward(ops::sum(ops::mul(va, w)));
    EXPECT_FALSE(g.reached(va));
    EXPECT_EQ(g.of(w), Tensor::from({1, 2}));
}

TEST(Autodiff, BackwardIsLinearInTheLoss) {
    Rng r(11);
    const Tensor a0 = testutil::random_tensor(r, Shape{3, 4});
    const Tensor b0 = testutil::random_tensor(r, Shape{4, 2});
    auto loss1 = [](const Var& a, const Var& b) { return ops::sum(ops::sigmoid(ops::matmul(a, b))); };
    auto loss2 = [](const Var& a, const Var& b) { return ops::mean(ops::square(ops::matmul(a, b))); };
    auto grads = [&](int which) {
        Tape t;
        Var a = t.variable(a0), b = t.variable(b0);
        Var l = which == 0 ? loss1(a, b) : which == 1 ? loss2(a, b) : ops::add(loss1(a, b), loss2(a, b));
        auto g = t.backward(l);
        return std::pair{g.of(a), g.of(b)};
    };
    auto [a1, b1] = grads(0);
    auto [a2, b2] = grads(1);
    auto [a12, b12] = grads(2);
    for (std::size_t i = 0; i < a0.size(); ++i) EXPECT_NEAR(a12[i], a1[i] + a2[i], 1e-14);
    for (std::size_t i = 0; i < b0.size(); ++i) EXPECT_NEAR(b12[i], b1[i] + b2[i], 1e-14);
}

TEST(Autodiff, SharedNodeAccumulates) {
    Tape t;
    Var x = t.variable(Tensor::scalar(3.0));
    auto g = t.backward(ops::mul(x, x));
    EXPECT_DOUBLE_EQ(g.of(x).item(), 6.0);
}

TEST(Ops, ShapeMismatchesThrow) {
    Tape t;
    Var a = t.variable(Tensor(Shape{2, 3}));
    Var b = t.variable(Tensor(Shape{3, 2}));
    EXPECT_THROW(ops::add(a, b), ShapeError);
    EXPECT_THROW(ops::matmul(a, a), ShapeError);
    EXPECT_THROW(ops::conv2d(a, a), ShapeError);
    Var x = t.variable(Tensor(Shape{1, 2, 4, 4}));
    Var w = t.variable(Tensor(Shape{1, 3, 3, 3}));
    EXPECT_THROW(ops::conv2d(x, w), ShapeError);
    Tape other;
    Var c = other.variable(Tensor(Shape{2, 3}));
    EXPECT_THROW(ops::add(a, c), TapeError);
}

TEST(Ops, Conv1x1IdentityIsIdentity) {
    Rng r(2);
    Tape t;
    const Tensor x0 = testutil::random_tensor(r, Shape{2, 3, 5, 4});
    Tensor w0(Shape{3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) w0[c * 3 + c] = 1.0;
    Var y = ops::conv2d(t.constant(x0), t.constant(w0), 0.0);
    EXPECT_EQ(y.value(), x0);
}

TEST(Ops, SoftmaxRowsSumToOne) {
    Rng r(4);
    Tape t;
    Var s = ops::softmax_rows(t.constant(testutil::random_tensor(r, Shape{5, 7}, -30, 30)));
    for (std::size_t i = 0; i < 5; ++i) {
        double acc = 0;
        for (std::size_t j = 0; j < 7; ++j) acc += s.value()[i * 7 + j];
        EXPECT_NEAR(acc, 1.0, 1e-14);
    }
}

TEST(Ops, ConcatAndSliceRoundTrip) {
    Rng r(6);
    Tape t;
    Var a = t.constant(testutil::random_tensor(r, Shape{2, 3, 4}));
    Var b = t.constant(testutil::random_tensor(r, Shape{2, 5, 4}));
    Var c = ops::concat({a, b}, 1);
    EXPECT_EQ(c.shape(), (Shape{2, 8, 4}));
    EXPECT_EQ(ops::slice(c, 1, 0, 3).value(), a.value());
    EXPECT_EQ(ops::slice(c, 1, 3, 5).value(), b.value());
}

TEST(Ops, PatchifyLayout) {
    // 1 sample, 1 channel, 4x4 image with value = flat index; P = 2.
    Tensor img(Shape{1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i);
    Tape t;
    Var p = ops::patchify(t.constant(img), 2);
    EXPECT_EQ(p.shape(), (Shape{1, 4, 4}));
    const std::vector<double> expected{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(p.value()[i], expected[i]);
    EXPECT_THROW(ops::patchify(t.constant(img), 3), ShapeError);
}
