#pragma once

#include <cstddef>
#include <string_view>

#include "adapterlab/tensor.hpp"

namespace adapterlab {

enum class Activation { relu, sigmoid, silu, identity };

std::string_view to_string(Activation kind);
/// Throws ConfigError on an unknown name.
Activation parse_activation(std::string_view name);

inline constexpr double kNormEps = 1e-5;

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

/// x: [n x d], bias: [d] (or [1 x d]); adds bias to every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// x: [C x H x W], bias: [C] (or [1 x C]); adds bias[c] over the whole plane.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);

/// Normalises each row of [n x d] over d, then applies gamma/beta [d].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = kNormEps);

/// x: [C x H x W]; statistics per group of C/groups channels; affine per channel.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps = kNormEps);

Tensor activation(const Tensor& x, Activation kind);

/// x: [Cin x H x W], w: [Cout x Cin x k x k] with k in {1, 3}, b: [Cout].
/// Stride 1, zero padding k/2, so the spatial size is preserved.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);

/// 2x2 average pooling; H and W must be even.
Tensor avg_pool2(const Tensor& x);
/// Nearest-neighbour 2x upsampling.
Tensor upsample2(const Tensor& x);
/// Channel concatenation of [Ca x H x W] and [Cb x H x W].
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// [C x H x W] -> [HW x C].
Tensor to_tokens(const Tensor& x);
/// [HW x C] -> [C x H x W].
Tensor from_tokens(const Tensor& tokens, std::size_t height, std::size_t width);
Tensor reshape(const Tensor& x, Shape shape);

/// [n x d] -> [1 x d] column means.
Tensor mean_rows(const Tensor& x);
/// [1 x d] -> [n x d].
Tensor broadcast_rows(const Tensor& row, std::size_t n);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean of squared differences, scalar.
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace adapterlab
