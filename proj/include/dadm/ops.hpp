#pragma once

#include <cstddef>
#include <vector>

#include "dadm/autodiff.hpp"

// Differentiable primitives. Every function records its result on the tape of
// its first operand together with the matching gradient rule. Operands must
// share a tape. Shapes never broadcast implicitly; the few operations that
// align a smaller operand against a larger one say so in their name.

namespace dadm::ops {

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

// Scalar-tensor.
Var scale(const Var& x, double c);
Var add_scalar(const Var& x, double c);

// Pointwise nonlinearities.
Var exp(const Var& x);
/// Natural log; NumericError on non-positive input.
Var log(const Var& x);
Var sigmoid(const Var& x);
Var relu(const Var& x);
/// Exact GELU, x * Phi(x).
Var gelu(const Var& x);
Var square(const Var& x);

// Reductions.
Var sum(const Var& x);
Var mean(const Var& x);
/// (R, ...) -> (R): mean over everything but the leading axis.
Var row_mean(const Var& x);
/// (R, ...) -> (R): sum over everything but the leading axis.
Var row_sum(const Var& x);

// Linear algebra.
/// 2-D product op(a) * op(b).
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
/// Batched 3-D product over the leading axis.
Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

// Shape manipulation.
Var reshape(const Var& x, Shape shape);
/// (B, M, N) -> (B, N, M).
Var transpose12(const Var& x);
Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& parts, std::size_t axis);
/// Concatenation along axis 1, e.g. channels of (B, C, H, W) maps.
Var concat_channels(const Var& a, const Var& b);
/// out[i] = x[perm[i]] along axis 0.
Var permute_rows(const Var& x, const std::vector<std::size_t>& perm);
/// out[i] = x[index[i]] along axis 0; indices may repeat.
Var gather_rows(const Var& x, const std::vector<std::size_t>& index);
/// (B, C, H, W) -> (B, (H/P)*(W/P), C*P*P), patches in raster order, each
/// flattened channel-major.
Var patchify(const Var& x, std::size_t patch);

// Explicit alignment of a smaller operand.
/// x (..., d) + b (d) on every row of the last axis.
Var add_bias(const Var& x, const Var& b);
/// x (..., d) * g (d) on every row of the last axis.
Var mul_cols(const Var& x, const Var& g);
/// x (B, rest...) + y (rest...) for every b.
Var add_leading(const Var& x, const Var& y);
/// x (R, ...) with row r scaled by s (R)[r].
Var mul_rows(const Var& x, const Var& s);
/// x (B, C, H, W) + b (C) on every channel.
Var add_channel_bias(const Var& x, const Var& b);

// Normalization and similarity.
/// Zero mean, unit variance over the last axis (no affine part).
Var layer_norm_rows(const Var& x, double eps = 1e-5);
/// Per-sample, per-channel normalization of (B, C, H, W) over H*W.
Var instance_norm(const Var& x, double eps = 1e-5);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
/// Rows of the last axis scaled to unit L2 norm; NumericError for norm < 1e-12.
Var l2_normalize_rows(const Var& x);
/// (R, d) . (R, d) -> (R).
Var row_dot(const Var& a, const Var& b);
/// Cosine similarity of two equally shaped tensors viewed as vectors.
Var cosine(const Var& a, const Var& b);
/// (B) -> (B, B), entry (i, j) = (c_i - c_j)^2.
Var pairwise_sqdiff(const Var& c);

/// Stride-1 same-padded 2-D convolution of x (B, C, H, W) with w (O, C, k, k),
/// k odd, blended with its central-difference form:
///   y(p0) = sum_n w(pn) * (x(p0+pn) - theta * x(p0))
/// where pn ranges over in-bounds neighbours. theta = 0 is plain convolution.
Var conv2d(const Var& x, const Var& w, double theta = 0.0);

}  // namespace dadm::ops
