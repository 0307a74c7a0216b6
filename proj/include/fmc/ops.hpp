#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fmc/autodiff.hpp"
#include "fmc/tensor.hpp"

namespace fmc {

enum class Padding { same, valid };
enum class PoolMode { max, avg };

struct Conv3dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  Padding padding = Padding::same;
};

/// Channel axis of a canonical layout: axis 0 of [C,D,H,W], axis 1 of [L,C].
/// Viewed as [outer, channels, inner] with the channel stride equal to inner.
struct ChannelView {
  std::size_t outer;
  std::size_t channels;
  std::size_t inner;
};
ChannelView channel_view(const Shape& shape, const char* what);

// Plain kernels. Deterministic; reduction order is fixed and documented per op.

/// Output voxel sums run over input channel, then kz, ky, kx; bias is added last.
Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor* bias,
              const Conv3dOptions& opt);
Shape conv3d_output_shape(const Shape& input, const Shape& kernel, const Conv3dOptions& opt);

/// Channel mixing at every position: y[o] = sum_i W[o,i] x[i] + b[o].
Tensor pointwise_linear(const Tensor& input, const Tensor& weight, const Tensor* bias);

Tensor group_pool(const Tensor& band, std::size_t groups, PoolMode mode);

double sigmoid(double x);
double silu(double x);
double softplus(double x);

// Differentiable ops recorded on the operands' tape.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
/// sum(a * w) for a fixed weight tensor; turns any op into a scalar probe.
Var weighted_sum(Var a, const Tensor& w);

Var sigmoid(Var x);
Var silu(Var x);
Var softplus(Var x);

Var softmax_channels(Var x);
Var layer_norm_channels(Var x, double eps = 1e-5);
Var group_norm(Var x, std::size_t groups, double eps = 1e-5);
/// y = x * gamma[c] + beta[c] along the channel axis.
Var channel_affine(Var x, Var gamma, Var beta);

/// `bias` may be a default (invalid) Var for no bias.
Var pointwise_linear(Var x, Var weight, Var bias = {});
Var conv3d(Var x, Var kernel, Var bias, const Conv3dOptions& opt);

Var concat_channels(std::span<const Var> parts);
Var slice_channels(Var x, std::size_t begin, std::size_t count);

/// [C,D,H,W] -> [L,C] with voxels in raster order (z slowest, x fastest).
Var to_sequence(Var x);
Var from_sequence(Var seq, std::size_t depth, std::size_t height, std::size_t width);

/// Contiguous channel groups pooled per voxel: [C,...] -> [groups,...].
/// Max routes the gradient to the first maximal channel.
Var group_pool(Var band, std::size_t groups, PoolMode mode);

/// 2x2x2 stride-2 max pooling; extents must be even.
Var max_pool2(Var x);
/// 2x trilinear upsampling with half-pixel centers and edge clamping.
Var upsample_trilinear2(Var x);

}  // namespace fmc
