#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "stella/numcore/tensor.hpp"

// Differentiable primitives. Every op validates its inputs, checks that the
// forward result is finite (NumericError otherwise) and, when grad mode is on
// and some input requires grad, records a backward rule.
namespace stella::nc {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& t, double factor);
Tensor div_scalar(const Tensor& t, double divisor);
Tensor add_scalar(const Tensor& t, double value);
Tensor neg(const Tensor& t);
Tensor square(const Tensor& t);
Tensor exp(const Tensor& t);
Tensor log(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor gelu(const Tensor& t);
/// Clamps into [lo, hi]; zero gradient outside.
Tensor clamp(const Tensor& t, double lo, double hi);

// Reductions. Negative axes count from the end.
Tensor sum(const Tensor& t, int axis, bool keepdim = false);
Tensor mean(const Tensor& t, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);

/// Numerically stable softmax along `axis` (max subtraction).
Tensor softmax(const Tensor& t, int axis);
Tensor log_softmax(const Tensor& t, int axis);

/// Batched matrix product: a[..., n, k] x b[k, m] or a[..., n, k] x b[..., k, m].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[..., in] * w[in, out] + b[out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Layer normalization over the last axis with learnable per-feature scale
/// and shift.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor reshape(const Tensor& t, Shape shape);
Tensor permute(const Tensor& t, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& t, int axis0, int axis1);

Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);
Tensor slice(const Tensor& t, int axis, std::size_t begin, std::size_t end);

/// Selects entries along `axis` (same indices for every outer position).
Tensor index_select(const Tensor& t, int axis, const std::vector<std::size_t>& indices);

/// Per-row gather along axis 1: out[b, j, ...] = t[b, idx[b*k + j], ...].
Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx, std::size_t k);

/// Inverse of gather_rows: writes src rows into a copy of `base` at the given
/// positions. Not differentiable; used for diagnostics and round-trip checks.
Tensor scatter_rows(const Tensor& base, const Tensor& src, const std::vector<std::size_t>& idx,
                    std::size_t k);

Tensor l2_normalize(const Tensor& t, int axis = -1, double eps = 1e-12);

/// Mean of squared differences over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

/// Mean binary cross-entropy of probabilities against {0,1} targets, with
/// log arguments clamped at eps.
Tensor binary_cross_entropy(const Tensor& prob, const Tensor& target, double eps = 1e-12);

/// sum(w * t) / sum(w) along `axis`; plain mean when weights is empty.
/// Weights have the extent of `axis` and broadcast over the other axes, or
/// match the reduced-over shape of t exactly.
Tensor weighted_mean_pool(const Tensor& t, int axis, const std::optional<Tensor>& weights = std::nullopt);

/// Scaled dot-product logits q k^T / (beta * sqrt(d)) for q[B,H,nq,d], k[B,H,nk,d].
Tensor attention_logits(const Tensor& q, const Tensor& k, double beta);

}  // namespace stella::nc
