#pragma once

// Differentiable tensor operations. Images are batched NCHW throughout.
// Every op validates shapes up front and throws ShapeError with the
// offending shapes in the message.

#include "rin/tensor.hpp"

namespace rin {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Running statistics owned by a batchnorm layer (not trainable).
template <typename T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;

  static BatchNormStats init(std::size_t channels) {
    return {Tensor<T>(Shape{channels}, T(0)), Tensor<T>(Shape{channels}, T(1))};
  }
};

enum class NormMode { Train, Eval };

/// 3x3 convolution. input [N,Cin,H,W], weight [Cout,Cin,3,3], bias [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);

/// Per-channel batch normalization over (N, H, W). Train mode uses batch
/// statistics and updates `stats` by exponential moving average; eval mode
/// normalizes with `stats`.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, NormMode mode, double momentum = kBatchNormMomentum,
                    double eps = kBatchNormEps);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Nearest-neighbour 2x spatial upsampling.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& input);

/// y = W x + b for x [F] or a batch [B,F]; W [M,F], b [M].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product. Shapes must match, except that a 1-channel NCHW
/// operand broadcasts against a 3-channel one.
template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b);

/// min(max(x, 0), 1); gradient passes only strictly inside the interval.
template <typename T>
Tensor<T> clamp01(const Tensor<T>& input);

template <typename T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target);

template <typename T>
Tensor<T> sum(const Tensor<T>& input);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor);

/// Unit-normalizes each pixel's channel vector: x / sqrt(|x|^2 + eps).
template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& input, T eps = T(1e-12));

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape);

/// [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

}  // namespace rin
