#pragma once

#include <cstdint>
#include <vector>

#include "spikesr/tensor.hpp"

// Differentiable primitives. Shapes follow numpy-style broadcasting for the
// elementwise binaries; spatial ops take NCHW.
namespace spikesr::ops {

// Elementwise binaries (broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
// c - a
Tensor rsub_scalar(double c, const Tensor& a);
Tensor neg(const Tensor& a);

// Elementwise unaries.
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

/// Heaviside step of (a) with the arctan surrogate derivative
/// w / (2 (1 + (pi w a / 2)^2)). When `relaxed`, the forward pass returns the
/// smooth arctan function whose derivative that is, so finite differences
/// agree with the backward pass.
Tensor spike(const Tensor& a, double width, bool relaxed);

/// Forward returns `hard` (treated as a constant); backward routes the
/// gradient to `soft` unchanged.
Tensor straight_through(const Tensor& hard, const Tensor& soft);

/// Replaces entries where mask != 0 with `value`; the gradient there is zero.
Tensor masked_fill(const Tensor& a, const std::vector<std::uint8_t>& mask, double value);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axes(const Tensor& a, std::vector<int> axes, bool keepdim = true);
Tensor mean_axes(const Tensor& a, std::vector<int> axes, bool keepdim = true);

// Structural.
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::vector<int> order);
Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Broadcasts `a` up to `shape`; the backward pass sums over expanded axes.
Tensor expand(const Tensor& a, Shape shape);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k)x(k,n)
Tensor bmm(const Tensor& a, const Tensor& b);     // (B,m,k)x(B,k,n)
Tensor transpose_last2(const Tensor& a);

Tensor softmax_lastdim(const Tensor& a);

enum class PadMode { reflect, zero };

/// 2-D cross-correlation on NCHW input with weight (Cout, Cin, kh, kw) and
/// optional bias (Cout). Odd kernels only.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad,
              PadMode mode = PadMode::reflect);

/// Pads H and W at the bottom/right up to the requested extents (reflect).
Tensor pad_to(const Tensor& x, std::int64_t h, std::int64_t w);
/// Crops the top-left h x w window.
Tensor crop(const Tensor& x, std::int64_t h, std::int64_t w);

/// (B, C r^2, H, W) -> (B, C, rH, rW).
Tensor pixel_shuffle(const Tensor& x, int r);
/// Inverse of pixel_shuffle.
Tensor pixel_unshuffle(const Tensor& x, int r);

/// Bilinear resampling with align_corners = false (no antialiasing).
Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
/// Output extents floor(H * scale), floor(W * scale).
Tensor bilinear_resize_scale(const Tensor& x, double scale);

/// Non-overlapping average pooling with window k (H, W divisible by k).
Tensor avg_pool2d(const Tensor& x, int k);

/// Deformable 3x3-style convolution (stride 1, dilation 1).
/// x: (N,C,H,W); offsets: (N, 2*kh*kw, H, W) with channel 2m = dy, 2m+1 = dx
/// for tap m in row-major kernel order; w: (Cout, C, kh, kw); b optional.
/// Samples bilinearly at p0 + p_m + offset, zero outside the image.
Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& w, const Tensor& b);

/// Local softmax attention over spatial tokens. q, k, v: (N, d, H, W). Tokens
/// attend within non-overlapping windows of side `window` (the last window
/// along each axis may be smaller). Scores are scaled by 1/sqrt(d).
Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, int window);

/// Patch descriptors: splits (N,C,H,W) into a g x g grid of patches, average
/// pools each patch to pool x pool cells and flattens to (N, g*g, C*pool*pool).
Tensor patch_descriptors(const Tensor& x, int grid, int pool);

/// Patch mixing: out patch i = sum_j weights(n,i,j) * patch_j(x), where x is
/// split into a g x g grid. weights: (N, g*g, g*g).
Tensor patch_mix(const Tensor& x, const Tensor& weights, int grid);

}  // namespace spikesr::ops
