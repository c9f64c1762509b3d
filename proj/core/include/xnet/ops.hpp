#pragma once

// Differentiable operations. Each op computes its result eagerly; when a tape
// is active on the calling thread and any operand requires a gradient, the op
// records a closure that propagates the output gradient back into its operands.
//
// Layout convention for image-like data is (N, C, H, W), row-major.

#include <cstdint>
#include <span>
#include <vector>

#include "xnet/tensor.hpp"

namespace xnet::ops {

enum class ElementwiseMode { add, sub, mul };
enum class ReduceMode { sum, mean };

/// a (op) b. b must match a, or have extent 1 on any axis other than the
/// channel axis (axis 1); broadcast axes are sum-reduced in backward.
template <typename T>
BasicTensor<T> elementwise(ElementwiseMode mode, const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseMode::add, a, b);
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseMode::sub, a, b);
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseMode::mul, a, b);
}

/// y = x·w + b over the last axis. x: (..., Cin), w: (Cin, Cout), b: (Cout) or undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b);

/// Position-wise linear map over axis 1 of (N, Cin, ...) data, with the same
/// (Cin, Cout) weight layout as linear(). Equivalent to a 1x1 convolution.
template <typename T>
BasicTensor<T> channel_linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                              const BasicTensor<T>& b);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Zero-padded cross-correlation. w: (Cout, Cin/groups, kh, kw); b: (Cout) or undefined.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                      Conv2dOptions opts = {});

/// Normalizes over `axis` with biased variance, then applies gamma/beta
/// (both with the extent of that axis).
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, int axis, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-6);

/// x·Φ(x) with the exact Gaussian CDF.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

/// Logistic function, clamped so the result stays strictly inside (0, 1).
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

/// Natural log; DomainError on non-positive input.
template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x);

/// sqrt(max(x, 0)); the gradient at 0 is taken as 0.
template <typename T>
BasicTensor<T> sqrt(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, double factor);

/// (N, C·r², H, W) -> (N, C, rH, rW); out[n,c,h·r+i,w·r+j] = in[n,c·r²+i·r+j,h,w].
template <typename T>
BasicTensor<T> pixel_shuffle(const BasicTensor<T>& x, int r);

/// Exact inverse of pixel_shuffle.
template <typename T>
BasicTensor<T> pixel_unshuffle(const BasicTensor<T>& x, int r);

/// Align-corners bilinear resize over the last two axes of (N, C, H, W).
template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, std::int64_t out_h, std::int64_t out_w);

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>> xs);

/// Reduction without keep-dims. An empty axis list is the identity.
template <typename T>
BasicTensor<T> reduce(ReduceMode mode, const BasicTensor<T>& x, std::vector<int> axes);

template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape);

/// Mean negative log-softmax over axis 1 of (N, K) or (N, K, H, W) logits.
/// labels holds one class index per position (N or N·H·W entries), or
/// ignore_index to exclude the position. Returns a rank-0 tensor.
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                                     std::int32_t ignore_index = -1);

}  // namespace xnet::ops
