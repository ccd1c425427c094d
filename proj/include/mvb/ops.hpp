#ifndef MVB_OPS_HPP
#define MVB_OPS_HPP

#include "mvb/tensor.hpp"

#include <span>

namespace mvb {

// Elementwise / scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
// a*x + b*y with scalar coefficients (no grad through a, b).
Tensor affine(float a, const Tensor& x, float b, const Tensor& y);
Tensor silu(const Tensor& x);

// Shape manipulation (contiguous copies).
Tensor reshape(const Tensor& x, const Shape& s);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor stack0(const std::vector<Tensor>& xs);

// y = x·Wᵀ + b over the last axis. W is [out, in]; b is [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// y = x·W over the last axis with W stored [in, out] (attention projections).
Tensor matmul_in_out(const Tensor& x, const Tensor& w);

Tensor softmax_lastdim(const Tensor& x);

// x is [..., C, H, W]; per-group normalization with affine gamma/beta [C].
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps);

// 3x3 convolution over [..., C, H, W]; pad 1; stride 1 or 2.
Tensor conv2d_3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride = 1);
Tensor upsample_nearest_2x(const Tensor& x);
Tensor avg_pool2d(const Tensor& x, int factor);

// Conv over the frame axis of [B, N, C, H, W]; kernel [Cout, Cin, 3]; zero pad.
Tensor temporal_conv3(const Tensor& x, const Tensor& kernel, const Tensor& bias);

// x [B, N, C, H, W] + bias [B, C] broadcast over N, H, W.
Tensor add_bias_bc(const Tensor& x, const Tensor& bias);

// Multi-head scaled-dot-product attention core.
// q [Bq, Tq, C], k/v [Bkv, Tk, C] with Bq == Bkv * q_per_kv.
// Softmax is recomputed in backward; no O(Tq*Tk) state is kept.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, int heads, int q_per_kv = 1);

Tensor embedding(const Tensor& table, std::span<const int> ids);

// Reductions (f64 accumulation; scalar result keeps the widened value).
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mse_loss(const Tensor& pred, const Tensor& target);
// Mean of squared error restricted to frames with weight 1; pred/target are
// [B, N, C, H, W], frame_weight is [B, N] with entries in {0, 1}.
Tensor masked_frame_mse(const Tensor& pred, const Tensor& target, const Tensor& frame_weight);

}  // namespace mvb

#endif
