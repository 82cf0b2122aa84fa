#include "dadm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dadm/errors.hpp"
#include "dadm/kernels.hpp"

namespace dadm::ops {

namespace {

constexpr double kNormFloor = 1e-12;

const kernels::KernelTable& K() { return kernels::active(); }

Tape& tape_of(const Var& a) {
    if (!a.valid()) throw TapeError("operand is an uninitialized Var");
    return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
    Tape& t = tape_of(a);
    if (b.tape() != &t) throw TapeError("operands live on different tapes");
    return t;
}

void require_same(const char* op, const Var& a, const Var& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const char* op, const Var& x, std::size_t rank) {
    if (x.shape().size() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
}

std::size_t last_dim(const char* op, const Var& x) {
    if (x.shape().empty()) throw ShapeError(std::string(op) + ": scalar operand has no last axis");
    return x.shape().back();
}

std::size_t lead_dim(const char* op, const Var& x) {
    if (x.shape().empty()) throw ShapeError(std::string(op) + ": scalar operand has no leading axis");
    return x.shape().front();
}

/// Pointwise op whose derivative is expressed through input and output.
template <class Fwd, class Deriv>
Var pointwise(const char* op, const Var& x, Fwd fwd, Deriv deriv) {
    Tape& t = tape_of(x);
    const Tensor& xv = x.value();
    Tensor y = Tensor::uninitialized(xv.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xv[i]);
    const int ix = x.id();
    return t.record(op, std::move(y), {ix}, [ix, deriv](Tape& tp, const Tensor& g, const Tensor& out) {
        const Tensor& in = tp.value(ix);
        Tensor& gx = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(in[i], out[i]);
    });
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    require_same("add", a, b);
    Tensor y = Tensor::uninitialized(a.shape());
    K().add(a.value().ptr(), b.value().ptr(), y.ptr(), y.size());
    const int ia = a.id(), ib = b.id();
    return t.record("add", std::move(y), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g, const Tensor&) {
        tp.accumulate(ia, g);
        tp.accumulate(ib, g);
    });
}

Var sub(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    require_same("sub", a, b);
    Tensor y = Tensor::uninitialized(a.shape());
    K().sub(a.value().ptr(), b.value().ptr(), y.ptr(), y.size());
    const int ia = a.id(), ib = b.id();
    return t.record("sub", std::move(y), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g, const Tensor&) {
        tp.accumulate(ia, g);
        if (tp.requires_grad(ib)) K().axpy(-1.0, g.ptr(), tp.grad_buffer(ib).ptr(), g.size());
    });
}

Var mul(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    require_same("mul", a, b);
    Tensor y = Tensor::uninitialized(a.shape());
    K().mul(a.value().ptr(), b.value().ptr(), y.ptr(), y.size());
    const int ia = a.id(), ib = b.id();
    return t.record("mul", std::move(y), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g, const Tensor&) {
        if (tp.requires_grad(ia)) K().mul_acc(g.ptr(), tp.value(ib).ptr(), tp.grad_buffer(ia).ptr(), g.size());
        if (tp.requires_grad(ib)) K().mul_acc(g.ptr(), tp.value(ia).ptr(), tp.grad_buffer(ib).ptr(), g.size());
    });
}

Var scale(const Var& x, double c) {
    Tape& t = tape_of(x);
    Tensor y = Tensor::uninitialized(x.shape());
    K().scale(c, x.value().ptr(), y.ptr(), y.size());
    const int ix = x.id();
    return t.record("scale", std::move(y), {ix}, [ix, c](Tape& tp, const Tensor& g, const Tensor&) {
        K().axpy(c, g.ptr(), tp.grad_buffer(ix).ptr(), g.size());
    });
}

Var add_scalar(const Var& x, double c) {
    Tape& t = tape_of(x);
    Tensor y = x.value();
    for (auto& v : y.data()) v += c;
    const int ix = x.id();
    return t.record("add_scalar", std::move(y), {ix},
                    [ix](Tape& tp, const Tensor& g, const Tensor&) { tp.accumulate(ix, g); });
}

Var exp(const Var& x) {
    return pointwise("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
    for (double v : x.value().data())
        if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
    return pointwise("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sigmoid(const Var& x) {
    return pointwise(
        "sigmoid", x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var relu(const Var& x) {
    return pointwise("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                     [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return pointwise(
        "gelu", x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [=](double v, double) {
            return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
        });
}

Var square(const Var& x) {
    return pointwise("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ----------------------------------------------------------------- reductions

Var sum(const Var& x) {
    Tape& t = tape_of(x);
    const double s = K().sum(x.value().ptr(), x.size());
    const int ix = x.id();
    return t.record("sum", Tensor::scalar(s), {ix}, [ix](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor& gx = tp.grad_buffer(ix);
        const double gv = g[0];
        for (auto& v : gx.data()) v += gv;
    });
}

Var mean(const Var& x) {
    Tape& t = tape_of(x);
    const double n = static_cast<double>(x.size());
    const double s = K().sum(x.value().ptr(), x.size()) / n;
    const int ix = x.id();
    return t.record("mean", Tensor::scalar(s), {ix}, [ix, n](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor& gx = tp.grad_buffer(ix);
        const double gv = g[0] / n;
        for (auto& v : gx.data()) v += gv;
    });
}

namespace {

Var row_reduce(const char* op, const Var& x, bool average) {
    Tape& t = tape_of(x);
    const std::size_t rows = lead_dim(op, x);
    const std::size_t cols = x.size() / rows;
    const double factor = average ? 1.0 / static_cast<double>(cols) : 1.0;
    Tensor y = Tensor::uninitialized(Shape{rows});
    const double* xp = x.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) y[r] = K().sum(xp + r * cols, cols) * factor;
    const int ix = x.id();
    return t.record(op, std::move(y), {ix}, [ix, rows, cols, factor](Tape& tp, const Tensor& g, const Tensor&) {
        double* gx = tp.grad_buffer(ix).ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            const double gv = g[r] * factor;
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gv;
        }
    });
}

}  // namespace

Var row_mean(const Var& x) { return row_reduce("row_mean", x, true); }
Var row_sum(const Var& x) { return row_reduce("row_sum", x, false); }

// ------------------------------------------------------------- linear algebra

namespace {

struct MatDims {
    std::size_t m, n, k;
};

MatDims product_dims(const char* op, const Shape& a, const Shape& b, bool ta, bool tb) {
    const std::size_t ar = a[a.size() - 2], ac = a[a.size() - 1];
    const std::size_t br = b[b.size() - 2], bc = b[b.size() - 1];
    const std::size_t m = ta ? ac : ar, ka = ta ? ar : ac;
    const std::size_t kb = tb ? bc : br, n = tb ? br : bc;
    if (ka != kb)
        throw ShapeError(std::string(op) + ": inner dimensions differ, " + shape_str(a) + " x " + shape_str(b));
    return {m, n, ka};
}

/// Accumulates dA and dB of C = op(A) op(B) for one matrix pair.
void product_backward(bool ta, bool tb, const MatDims& d, const double* a, const double* b, const double* gc,
                      double* ga, double* gb) {
    const auto& k = K();
    if (ga != nullptr) {
        if (!ta) {
            if (!tb) k.gemm(false, true, d.m, d.k, d.n, gc, b, ga, true);
            else k.gemm(false, false, d.m, d.k, d.n, gc, b, ga, true);
        } else {
            if (!tb) k.gemm(false, true, d.k, d.m, d.n, b, gc, ga, true);
            else k.gemm(true, true, d.k, d.m, d.n, b, gc, ga, true);
        }
    }
    if (gb != nullptr) {
        if (!tb) {
            if (!ta) k.gemm(true, false, d.k, d.n, d.m, a, gc, gb, true);
            else k.gemm(false, false, d.k, d.n, d.m, a, gc, gb, true);
        } else {
            if (!ta) k.gemm(true, false, d.n, d.k, d.m, gc, a, gb, true);
            else k.gemm(true, true, d.n, d.k, d.m, gc, a, gb, true);
        }
    }
}

}  // namespace

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
    Tape& t = tape_of(a, b);
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const MatDims d = product_dims("matmul", a.shape(), b.shape(), ta, tb);
    Tensor y = Tensor::uninitialized(Shape{d.m, d.n});
    K().gemm(ta, tb, d.m, d.n, d.k, a.value().ptr(), b.value().ptr(), y.ptr(), false);
    const int ia = a.id(), ib = b.id();
    return t.record("matmul", std::move(y), {ia, ib}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        double* ga = tp.requires_grad(ia) ? tp.grad_buffer(ia).ptr() : nullptr;
        double* gb = tp.requires_grad(ib) ? tp.grad_buffer(ib).ptr() : nullptr;
        product_backward(ta, tb, d, tp.value(ia).ptr(), tp.value(ib).ptr(), g.ptr(), ga, gb);
    });
}

Var bmm(const Var& a, const Var& b, bool ta, bool tb) {
    Tape& t = tape_of(a, b);
    require_rank("bmm", a, 3);
    require_rank("bmm", b, 3);
    const std::size_t batch = a.shape()[0];
    if (b.shape()[0] != batch)
        throw ShapeError("bmm: batch sizes differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const MatDims d = product_dims("bmm", a.shape(), b.shape(), ta, tb);
    const std::size_t sa = a.shape()[1] * a.shape()[2], sb = b.shape()[1] * b.shape()[2], sc = d.m * d.n;
    Tensor y = Tensor::uninitialized(Shape{batch, d.m, d.n});
    for (std::size_t i = 0; i < batch; ++i)
        K().gemm(ta, tb, d.m, d.n, d.k, a.value().ptr() + i * sa, b.value().ptr() + i * sb, y.ptr() + i * sc, false);
    const int ia = a.id(), ib = b.id();
    return t.record("bmm", std::move(y), {ia, ib}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        double* ga = tp.requires_grad(ia) ? tp.grad_buffer(ia).ptr() : nullptr;
        double* gb = tp.requires_grad(ib) ? tp.grad_buffer(ib).ptr() : nullptr;
        const double* av = tp.value(ia).ptr();
        const double* bv = tp.value(ib).ptr();
        for (std::size_t i = 0; i < batch; ++i)
            product_backward(ta, tb, d, av + i * sa, bv + i * sb, g.ptr() + i * sc, ga ? ga + i * sa : nullptr,
                             gb ? gb + i * sb : nullptr);
    });
}

// ---------------------------------------------------------------------- shape

Var reshape(const Var& x, Shape shape) {
    Tape& t = tape_of(x);
    if (shape_size(shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
    const int ix = x.id();
    return t.record("reshape", x.value().reshaped(std::move(shape)), {ix},
                    [ix](Tape& tp, const Tensor& g, const Tensor&) {
                        Tensor& gx = tp.grad_buffer(ix);
                        K().add(gx.ptr(), g.ptr(), gx.ptr(), g.size());
                    });
}

Var transpose12(const Var& x) {
    Tape& t = tape_of(x);
    require_rank("transpose12", x, 3);
    const std::size_t b = x.shape()[0], m = x.shape()[1], n = x.shape()[2];
    Tensor y = Tensor::uninitialized(Shape{b, n, m});
    const double* xp = x.value().ptr();
    for (std::size_t s = 0; s < b; ++s)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) y[s * m * n + j * m + i] = xp[s * m * n + i * n + j];
    const int ix = x.id();
    return t.record("transpose12", std::move(y), {ix}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        double* gx = tp.grad_buffer(ix).ptr();
        for (std::size_t s = 0; s < b; ++s)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[s * m * n + i * n + j] += g[s * m * n + j * m + i];
    });
}

namespace {

struct AxisSplit {
    std::size_t outer, dim, inner;
};

AxisSplit split_at(const char* op, const Shape& s, std::size_t axis) {
    if (axis >= s.size())
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSplit a{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}

}  // namespace

Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length) {
    Tape& t = tape_of(x);
    const AxisSplit a = split_at("slice", x.shape(), axis);
    if (length == 0 || start + length > a.dim)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of length " + std::to_string(a.dim));
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    Tensor y = Tensor::uninitialized(out_shape);
    const double* xp = x.value().ptr();
    const std::size_t chunk = length * a.inner;
    for (std::size_t o = 0; o < a.outer; ++o)
        std::copy_n(xp + (o * a.dim + start) * a.inner, chunk, y.ptr() + o * chunk);
    const int ix = x.id();
    return t.record("slice", std::move(y), {ix}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        double* gx = tp.grad_buffer(ix).ptr();
        for (std::size_t o = 0; o < a.outer; ++o)
            K().add(gx + (o * a.dim + start) * a.inner, g.ptr() + o * chunk, gx + (o * a.dim + start) * a.inner,
                    chunk);
    });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    Tape& t = tape_of(parts.front());
    const Shape& ref = parts.front().shape();
    std::size_t total = 0;
    std::vector<int> ids;
    std::vector<std::size_t> dims;
    for (const Var& p : parts) {
        if (p.tape() != &t) throw TapeError("concat: operands live on different tapes");
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size() && axis < s.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
        if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s));
        total += s[axis];
        ids.push_back(p.id());
        dims.push_back(s[axis]);
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    const AxisSplit a = split_at("concat", out_shape, axis);
    Tensor y = Tensor::uninitialized(out_shape);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const double* src = parts[p].value().ptr();
        const std::size_t chunk = dims[p] * a.inner;
        for (std::size_t o = 0; o < a.outer; ++o)
            std::copy_n(src + o * chunk, chunk, y.ptr() + (o * total + offset) * a.inner);
        offset += dims[p];
    }
    return t.record("concat", std::move(y), ids, [=](Tape& tp, const Tensor& g, const Tensor&) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            const std::size_t chunk = dims[p] * a.inner;
            if (tp.requires_grad(ids[p])) {
                double* gx = tp.grad_buffer(ids[p]).ptr();
                for (std::size_t o = 0; o < a.outer; ++o)
                    K().add(gx + o * chunk, g.ptr() + (o * total + off) * a.inner, gx + o * chunk, chunk);
            }
            off += dims[p];
        }
    });
}

Var concat_channels(const Var& a, const Var& b) { return concat({a, b}, 1); }

Var permute_rows(const Var& x, const std::vector<std::size_t>& perm) {
    Tape& t = tape_of(x);
    const std::size_t rows = lead_dim("permute_rows", x);
    if (perm.size() != rows) throw ShapeError("permute_rows: permutation length does not match leading axis");
    std::vector<bool> seen(rows, false);
    for (auto p : perm) {
        if (p >= rows || seen[p]) throw ShapeError("permute_rows: not a permutation");
        seen[p] = true;
    }
    const std::size_t cols = x.size() / rows;
    Tensor y = Tensor::uninitialized(x.shape());
    const double* xp = x.value().ptr();
    for (std::size_t i = 0; i < rows; ++i) std::copy_n(xp + perm[i] * cols, cols, y.ptr() + i * cols);
    const int ix = x.id();
    return t.record("permute_rows", std::move(y), {ix}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        double* gx = tp.grad_buffer(ix).ptr();
        for (std::size_t i = 0; i < rows; ++i)
            K().add(gx + perm[i] * cols, g.ptr() + i * cols, gx + perm[i] * cols, cols);
    });
}

Var gather_rows(const Var& x, const std::vector<std::size_t>& index) {
    Tape& t = tape_of(x);
    const std::size_t rows = lead_dim("gather_rows", x);
    if (index.empty()) throw ShapeError("gather_rows: empty index");
    for (auto i : index)
        if (i >= rows) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
    const std::size_t cols = x.size() / rows;
    Shape out_shape = x.shape();
    out_shape[0] = index.size();
    Tensor y = Tensor::uninitialized(out_shape);
    const double* xp = x.value().ptr();
    for (std::size_t i = 0; i < index.size(); ++i) std::copy_n(xp + index[i] * cols, cols, y.ptr() + i * cols);
    const int ix = x.id();
    return t.record("gather_rows", std::move(y), {ix}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        double* gx = tp.grad_buffer(ix).ptr();
        for (std::size_t i = 0; i < index.size(); ++i)
            K().add(gx + index[i] * cols, g.ptr() + i * cols, gx + index[i] * cols, cols);
    });
}

namespace {

/// Flat source offset of every output element of patchify, per sample.
std::vector<std::size_t> patch_map(std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
    const std::size_t gh = h / p, gw = w / p;
    std::vector<std::size_t> map;
    map.reserve(c * h * w);
    for (std::size_t pi = 0; pi < gh; ++pi)
        for (std::size_t pj = 0; pj < gw; ++pj)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < p; ++i)
                    for (std::size_t j = 0; j < p; ++j) map.push_back((ch * h + pi * p + i) * w + pj * p + j);
    return map;
}

}  // namespace

Var patchify(const Var& x, std::size_t patch) {
    Tape& t = tape_of(x);
    require_rank("patchify", x, 4);
    const std::size_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw ShapeError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by patch size " + std::to_string(patch));
    const auto map = patch_map(c, h, w, patch);
    const std::size_t per = c * h * w;
    Tensor y = Tensor::uninitialized(Shape{b, (h / patch) * (w / patch), c * patch * patch});
    const double* xp = x.value().ptr();
    for (std::size_t s = 0; s < b; ++s)
        for (std::size_t k = 0; k < per; ++k) y[s * per + k] = xp[s * per + map[k]];
    const int ix = x.id();
    return t.record("patchify", std::move(y), {ix}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        double* gx = tp.grad_buffer(ix).ptr();
        for (std::size_t s = 0; s < b; ++s)
            for (std::size_t k = 0; k < per; ++k) gx[s * per + map[k]] += g[s * per + k];
    });
}

// ----------------------------------------------------------- explicit aligning

Var add_bias(const Var& x, const Var& b) {
    Tape& t = tape_of(x, b);
    const std::size_t d = last_dim("add_bias", x);
    if (b.shape() != Shape{d})
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
    const std::size_t rows = x.size() / d;
    Tensor y = Tensor::uninitialized(x.shape());
    for (std::size_t r = 0; r < rows; ++r) K().add(x.value().ptr() + r * d, b.value().ptr(), y.ptr() + r * d, d);
    const int ix = x.id(), ib = b.id();
    return t.record("add_bias", std::move(y), {ix, ib}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        tp.accumulate(ix, g);
        if (tp.requires_grad(ib)) {
            double* gb = tp.grad_buffer(ib).ptr();
            for (std::size_t r = 0; r < rows; ++r) K().add(gb, g.ptr() + r * d, gb, d);
        }
    });
}

Var mul_cols(const Var& x, const Var& gvec) {
    Tape& t = tape_of(x, gvec);
    const std::size_t d = last_dim("mul_cols", x);
    if (gvec.shape() != Shape{d})
        throw ShapeError("mul_cols: scale " + shape_str(gvec.shape()) + " does not match " + shape_str(x.shape()));
    const std::size_t rows = x.size() / d;
    Tensor y = Tensor::uninitialized(x.shape());
    for (std::size_t r = 0; r < rows; ++r) K().mul(x.value().ptr() + r * d, gvec.value().ptr(), y.ptr() + r * d, d);
    const int ix = x.id(), ig = gvec.id();
    return t.record("mul_cols", std::move(y), {ix, ig}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        const double* xv = tp.value(ix).ptr();
        const double* gv = tp.value(ig).ptr();
        if (tp.requires_grad(ix)) {
            double* gx = tp.grad_buffer(ix).ptr();
            for (std::size_t r = 0; r < rows; ++r) K().mul_acc(g.ptr() + r * d, gv, gx + r * d, d);
        }
        if (tp.requires_grad(ig)) {
            double* gg = tp.grad_buffer(ig).ptr();
            for (std::size_t r = 0; r < rows; ++r) K().mul_acc(g.ptr() + r * d, xv + r * d, gg, d);
        }
    });
}

Var add_leading(const Var& x, const Var& y) {
    Tape& t = tape_of(x, y);
    const Shape& xs = x.shape();
    const Shape rest(xs.begin() + (xs.empty() ? 0 : 1), xs.end());
    if (xs.empty() || y.shape() != rest)
        throw ShapeError("add_leading: " + shape_str(y.shape()) + " does not match trailing axes of " +
                         shape_str(xs));
    const std::size_t batch = xs[0], n = y.size();
    Tensor out = Tensor::uninitialized(xs);
    for (std::size_t b = 0; b < batch; ++b) K().add(x.value().ptr() + b * n, y.value().ptr(), out.ptr() + b * n, n);
    const int ix = x.id(), iy = y.id();
    return t.record("add_leading", std::move(out), {ix, iy}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        tp.accumulate(ix, g);
        if (tp.requires_grad(iy)) {
            double* gy = tp.grad_buffer(iy).ptr();
            for (std::size_t b = 0; b < batch; ++b) K().add(gy, g.ptr() + b * n, gy, n);
        }
    });
}

Var mul_rows(const Var& x, const Var& s) {
    Tape& t = tape_of(x, s);
    const std::size_t rows = lead_dim("mul_rows", x);
    if (s.shape() != Shape{rows})
        throw ShapeError("mul_rows: scales " + shape_str(s.shape()) + " do not match " + shape_str(x.shape()));
    const std::size_t cols = x.size() / rows;
    Tensor y = Tensor::uninitialized(x.shape());
    for (std::size_t r = 0; r < rows; ++r) K().scale(s.value()[r], x.value().ptr() + r * cols, y.ptr() + r * cols, cols);
    const int ix = x.id(), is = s.id();
    return t.record("mul_rows", std::move(y), {ix, is}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        const Tensor& sv = tp.value(is);
        const double* xv = tp.value(ix).ptr();
        if (tp.requires_grad(ix)) {
            double* gx = tp.grad_buffer(ix).ptr();
            for (std::size_t r = 0; r < rows; ++r) K().axpy(sv[r], g.ptr() + r * cols, gx + r * cols, cols);
        }
        if (tp.requires_grad(is)) {
            Tensor& gs = tp.grad_buffer(is);
            for (std::size_t r = 0; r < rows; ++r) gs[r] += K().dot(g.ptr() + r * cols, xv + r * cols, cols);
        }
    });
}

Var add_channel_bias(const Var& x, const Var& b) {
    Tape& t = tape_of(x, b);
    require_rank("add_channel_bias", x, 4);
    const std::size_t batch = x.shape()[0], ch = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (b.shape() != Shape{ch})
        throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
    Tensor y = x.value();
    for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t c = 0; c < ch; ++c) {
            double* p = y.ptr() + (s * ch + c) * hw;
            const double bv = b.value()[c];
            for (std::size_t i = 0; i < hw; ++i) p[i] += bv;
        }
    const int ix = x.id(), ib = b.id();
    return t.record("add_channel_bias", std::move(y), {ix, ib}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        tp.accumulate(ix, g);
        if (tp.requires_grad(ib)) {
            Tensor& gb = tp.grad_buffer(ib);
            for (std::size_t s = 0; s < batch; ++s)
                for (std::size_t c = 0; c < ch; ++c) gb[c] += K().sum(g.ptr() + (s * ch + c) * hw, hw);
        }
    });
}

// ------------------------------------------------ normalization and similarity

Var layer_norm_rows(const Var& x, double eps) {
    Tape& t = tape_of(x);
    const std::size_t d = last_dim("layer_norm_rows", x);
    const std::size_t rows = x.size() / d;
    Tensor y = Tensor::uninitialized(x.shape());
    std::vector<double> inv_std(rows);
    const double* xp = x.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xp + r * d;
        const double mu = K().sum(row, d) / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) y[r * d + i] = (row[i] - mu) * inv_std[r];
    }
    const int ix = x.id();
    return t.record("layer_norm_rows", std::move(y), {ix},
                    [=, inv_std = std::move(inv_std)](Tape& tp, const Tensor& g, const Tensor& out) {
                        double* gx = tp.grad_buffer(ix).ptr();
                        const double nd = static_cast<double>(d);
                        for (std::size_t r = 0; r < rows; ++r) {
                            const double* gr = g.ptr() + r * d;
                            const double* yr = out.ptr() + r * d;
                            const double gm = K().sum(gr, d) / nd;
                            const double gy = K().dot(gr, yr, d) / nd;
                            for (std::size_t i = 0; i < d; ++i)
                                gx[r * d + i] += inv_std[r] * (gr[i] - gm - yr[i] * gy);
                        }
                    });
}

Var instance_norm(const Var& x, double eps) {
    require_rank("instance_norm", x, 4);
    const Shape s = x.shape();
    Var flat = reshape(x, Shape{s[0] * s[1], s[2] * s[3]});
    return reshape(layer_norm_rows(flat, eps), s);
}

Var softmax_rows(const Var& x) {
    Tape& t = tape_of(x);
    const std::size_t d = last_dim("softmax_rows", x);
    const std::size_t rows = x.size() / d;
    Tensor y = Tensor::uninitialized(x.shape());
    const double* xp = x.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xp + r * d;
        const double mx = *std::max_element(row, row + d);
        double z = 0.0;
        for (std::size_t i = 0; i < d; ++i) z += (y[r * d + i] = std::exp(row[i] - mx));
        for (std::size_t i = 0; i < d; ++i) y[r * d + i] /= z;
    }
    const int ix = x.id();
    return t.record("softmax_rows", std::move(y), {ix}, [=](Tape& tp, const Tensor& g, const Tensor& out) {
        double* gx = tp.grad_buffer(ix).ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.ptr() + r * d;
            const double* yr = out.ptr() + r * d;
            const double dotv = K().dot(gr, yr, d);
            for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += yr[i] * (gr[i] - dotv);
        }
    });
}

Var log_softmax_rows(const Var& x) {
    Tape& t = tape_of(x);
    const std::size_t d = last_dim("log_softmax_rows", x);
    const std::size_t rows = x.size() / d;
    Tensor y = Tensor::uninitialized(x.shape());
    const double* xp = x.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xp + r * d;
        const std::size_t am = static_cast<std::size_t>(std::max_element(row, row + d) - row);
        const double mx = row[am];
        // The max term contributes exactly 1; log1p keeps confident rows accurate.
        double z = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            if (i != am) z += std::exp(row[i] - mx);
        const double lz = std::log1p(z);
        for (std::size_t i = 0; i < d; ++i) y[r * d + i] = (row[i] - mx) - lz;
    }
    const int ix = x.id();
    return t.record("log_softmax_rows", std::move(y), {ix}, [=](Tape& tp, const Tensor& g, const Tensor& out) {
        double* gx = tp.grad_buffer(ix).ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.ptr() + r * d;
            const double gs = K().sum(gr, d);
            for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += gr[i] - std::exp(out[r * d + i]) * gs;
        }
    });
}

Var l2_normalize_rows(const Var& x) {
    Tape& t = tape_of(x);
    const std::size_t d = last_dim("l2_normalize_rows", x);
    const std::size_t rows = x.size() / d;
    Tensor y = Tensor::uninitialized(x.shape());
    std::vector<double> norms(rows);
    const double* xp = x.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        norms[r] = std::sqrt(K().dot(xp + r * d, xp + r * d, d));
        if (norms[r] < kNormFloor) throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(r));
        K().scale(1.0 / norms[r], xp + r * d, y.ptr() + r * d, d);
    }
    const int ix = x.id();
    return t.record("l2_normalize_rows", std::move(y), {ix},
                    [=, norms = std::move(norms)](Tape& tp, const Tensor& g, const Tensor& out) {
                        double* gx = tp.grad_buffer(ix).ptr();
                        for (std::size_t r = 0; r < rows; ++r) {
                            const double* gr = g.ptr() + r * d;
                            const double* yr = out.ptr() + r * d;
                            const double proj = K().dot(gr, yr, d);
                            for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += (gr[i] - yr[i] * proj) / norms[r];
                        }
                    });
}

Var row_dot(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    require_rank("row_dot", a, 2);
    require_same("row_dot", a, b);
    const std::size_t rows = a.shape()[0], d = a.shape()[1];
    Tensor y = Tensor::uninitialized(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) y[r] = K().dot(a.value().ptr() + r * d, b.value().ptr() + r * d, d);
    const int ia = a.id(), ib = b.id();
    return t.record("row_dot", std::move(y), {ia, ib}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        const double* av = tp.value(ia).ptr();
        const double* bv = tp.value(ib).ptr();
        if (tp.requires_grad(ia)) {
            double* ga = tp.grad_buffer(ia).ptr();
            for (std::size_t r = 0; r < rows; ++r) K().axpy(g[r], bv + r * d, ga + r * d, d);
        }
        if (tp.requires_grad(ib)) {
            double* gb = tp.grad_buffer(ib).ptr();
            for (std::size_t r = 0; r < rows; ++r) K().axpy(g[r], av + r * d, gb + r * d, d);
        }
    });
}

Var cosine(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    require_same("cosine", a, b);
    const std::size_t n = a.size();
    const double* av = a.value().ptr();
    const double* bv = b.value().ptr();
    const double na = std::sqrt(K().dot(av, av, n));
    const double nb = std::sqrt(K().dot(bv, bv, n));
    if (na < kNormFloor || nb < kNormFloor) throw NumericError("cosine: zero vector (norm < 1e-12)");
    const double c = K().dot(av, bv, n) / (na * nb);
    const int ia = a.id(), ib = b.id();
    return t.record("cosine", Tensor::scalar(c), {ia, ib}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        const double* x = tp.value(ia).ptr();
        const double* y = tp.value(ib).ptr();
        const double gv = g[0];
        if (tp.requires_grad(ia)) {
            double* ga = tp.grad_buffer(ia).ptr();
            for (std::size_t i = 0; i < n; ++i) ga[i] += gv * (y[i] / (na * nb) - c * x[i] / (na * na));
        }
        if (tp.requires_grad(ib)) {
            double* gb = tp.grad_buffer(ib).ptr();
            for (std::size_t i = 0; i < n; ++i) gb[i] += gv * (x[i] / (na * nb) - c * y[i] / (nb * nb));
        }
    });
}

Var pairwise_sqdiff(const Var& c) {
    Tape& t = tape_of(c);
    require_rank("pairwise_sqdiff", c, 1);
    const std::size_t n = c.shape()[0];
    Tensor y = Tensor::uninitialized(Shape{n, n});
    const Tensor& cv = c.value();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] = (cv[i] - cv[j]) * (cv[i] - cv[j]);
    const int ic = c.id();
    return t.record("pairwise_sqdiff", std::move(y), {ic}, [=](Tape& tp, const Tensor& g, const Tensor&) {
        const Tensor& v = tp.value(ic);
        Tensor& gc = tp.grad_buffer(ic);
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += 2.0 * (v[i] - v[j]) * (g[i * n + j] + g[j * n + i]);
            gc[i] += acc;
        }
    });
}

// ------------------------------------------------------------------ convolution

namespace {

struct ConvGeom {
    std::size_t batch, in_ch, h, w, out_ch, k;
    std::size_t hw() const { return h * w; }
    std::size_t patch() const { return in_ch * k * k; }
};

/// Column matrix (C*k*k, H*W) for one sample; column p holds the
/// neighbourhood of pixel p with the central-difference blend applied.
void im2col(const ConvGeom& g, const double* x, double theta, double* col) {
    const long r = static_cast<long>(g.k / 2);
    const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        const double* xc = x + c * g.hw();
        for (long di = -r; di <= r; ++di)
            for (long dj = -r; dj <= r; ++dj) {
                const std::size_t row = (c * g.k + static_cast<std::size_t>(di + r)) * g.k + static_cast<std::size_t>(dj + r);
                double* dst = col + row * g.hw();
                for (long i = 0; i < H; ++i)
                    for (long j = 0; j < W; ++j) {
                        const long ii = i + di, jj = j + dj;
                        const std::size_t p = static_cast<std::size_t>(i * W + j);
                        if (ii < 0 || ii >= H || jj < 0 || jj >= W) {
                            dst[p] = 0.0;
                        } else {
                            dst[p] = xc[ii * W + jj] - theta * xc[p];
                        }
                    }
            }
    }
}

void col2im(const ConvGeom& g, const double* col, double theta, double* gx) {
    const long r = static_cast<long>(g.k / 2);
    const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        double* gc = gx + c * g.hw();
        for (long di = -r; di <= r; ++di)
            for (long dj = -r; dj <= r; ++dj) {
                const std::size_t row = (c * g.k + static_cast<std::size_t>(di + r)) * g.k + static_cast<std::size_t>(dj + r);
                const double* src = col + row * g.hw();
                for (long i = 0; i < H; ++i)
                    for (long j = 0; j < W; ++j) {
                        const long ii = i + di, jj = j + dj;
                        if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                        const std::size_t p = static_cast<std::size_t>(i * W + j);
                        gc[ii * W + jj] += src[p];
                        gc[p] -= theta * src[p];
                    }
            }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, double theta) {
    Tape& t = tape_of(x, w);
    require_rank("conv2d", x, 4);
    require_rank("conv2d", w, 4);
    if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("conv2d: theta must lie in [0, 1]");
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0)
        throw ShapeError("conv2d: kernel " + shape_str(ws) + " incompatible with input " + shape_str(xs) +
                         " (need matching channels and an odd square kernel)");
    const ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2]};
    Tensor y = Tensor::uninitialized(Shape{g.batch, g.out_ch, g.h, g.w});
    std::vector<double> col(g.patch() * g.hw());
    for (std::size_t s = 0; s < g.batch; ++s) {
        im2col(g, x.value().ptr() + s * g.in_ch * g.hw(), theta, col.data());
        K().gemm(false, false, g.out_ch, g.hw(), g.patch(), w.value().ptr(), col.data(),
                 y.ptr() + s * g.out_ch * g.hw(), false);
    }
    const int ix = x.id(), iw = w.id();
    return t.record("conv2d", std::move(y), {ix, iw}, [=](Tape& tp, const Tensor& gy, const Tensor&) {
        std::vector<double> cbuf(g.patch() * g.hw());
        std::vector<double> gcol(g.patch() * g.hw());
        const double* xv = tp.value(ix).ptr();
        const double* wv = tp.value(iw).ptr();
        double* gw = tp.requires_grad(iw) ? tp.grad_buffer(iw).ptr() : nullptr;
        double* gx = tp.requires_grad(ix) ? tp.grad_buffer(ix).ptr() : nullptr;
        for (std::size_t s = 0; s < g.batch; ++s) {
            const double* gys = gy.ptr() + s * g.out_ch * g.hw();
            if (gw != nullptr) {
                im2col(g, xv + s * g.in_ch * g.hw(), theta, cbuf.data());
                K().gemm(false, true, g.out_ch, g.patch(), g.hw(), gys, cbuf.data(), gw, true);
            }
            if (gx != nullptr) {
                K().gemm(true, false, g.patch(), g.hw(), g.out_ch, wv, gys, gcol.data(), false);
                col2im(g, gcol.data(), theta, gx + s * g.in_ch * g.hw());
            }
        }
    });
}

}  // namespace dadm::ops
