#pragma once

#include "headspec/tensor.hpp"

namespace headspec {

// Elementwise binary ops with NumPy-style right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);

// Elementwise unary.
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor clamp_min(const Tensor& x, double lo);
/// log(clamp_min(x, lo)); lo defaults to the delta used by the losses.
Tensor safe_log(const Tensor& x, double lo = 1e-6);

/// Numerically stable softmax over the last axis (max subtraction).
Tensor softmax_lastdim(const Tensor& x);

/// x - logsumexp(x) over the last axis, via a constant max shift.
Tensor log_softmax_lastdim(const Tensor& x);

// Reductions. Axes are inserted-order-independent; keepdims keeps size-1 dims.
Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

/// out[..., j, ...] = x[..., idx[j], ...] along `axis`.
Tensor index_select(const Tensor& x, int axis, const std::vector<int>& idx);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reshape(const Tensor& x, const Shape& s);

/// [B, T, H*D] -> [B, H, T, D] and back.
Tensor split_heads(const Tensor& x, int heads);
Tensor merge_heads(const Tensor& x);

// Batched matrix products over the trailing two axes. The right operand may
// be 2-D (a shared weight) or carry the same batch prefix as the left.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a [*, m, k] x b [*, n, k]^T -> [*, m, n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// matmul_nt with a fused scalar factor (attention logits).
Tensor matmul_nt_scaled(const Tensor& a, const Tensor& b, double scale);

/// x * rsqrt(mean(x^2, last) + eps); the normalization used ahead of K/V maps.
Tensor rmsnorm(const Tensor& x, double eps = 1e-6);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(neg(a), c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace headspec
