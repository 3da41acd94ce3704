#pragma once
// Differentiable op set. Every op defines forward values and exact
// reverse-mode gradients for all differentiable inputs; shape errors carry
// the op name and the offending shapes. Binary ops broadcast numpy-style
// (align from the trailing axis, size-1 axes expand).

#include <vector>

#include "flowgate/tensor.hpp"

namespace flowgate {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor sigmoid(const Tensor& x);
// Smooth gating nonlinearity (x * sigmoid(x)); used wherever a GELU-class
// activation is called for.
Tensor silu(const Tensor& x);
Tensor ln_op(const Tensor& x);  // natural log, elementwise
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);

// a: [..., M, K]; b: [K, N] (shared) or [..., K, N] (batched, leading dims
// equal to a's). trans_b swaps b's last two axes logically.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_b = false);

// Scaled-dot-product multi-head attention. q: [B, Lq, D], k/v: [B, Lk, D].
// If probs_out is non-null it receives a detached [B, H, Lq, Lk] copy of the
// softmax rows.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 Tensor* probs_out = nullptr);

// table: [V, D]; ids indexes rows; output shape is prefix + [D].
Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids,
                 const Shape& prefix);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);   // removes the axis
Tensor mean_axis(const Tensor& x, int axis);  // removes the axis

Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);

// 2D ops use channel-last layout [..., H, W, C].
Tensor area_downsample2d(const Tensor& x, int k);
Tensor bilinear_upsample2d(const Tensor& x, int k);
// x: [B, H, W, Ci], w: [3, 3, Ci, Co], b: [Co]; stride 1, zero-padded.
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor stop_gradient(const Tensor& x);

}  // namespace flowgate
