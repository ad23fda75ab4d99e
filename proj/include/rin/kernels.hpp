#pragma once

// Raw numeric kernels behind the differentiable ops.
//
// Every kernel exists twice: `reference` is a plain serial loop nest kept
// as the test oracle, `parallel` is the production path (OpenMP over the
// batch/channel dimension, im2col + GEMM for convolutions). Reductions in
// the parallel path are partitioned so that each output element is owned
// by one thread and summed in a fixed order, so results do not depend on
// the thread count.
//
// Backward kernels accumulate (+=) into their gradient buffers; an empty
// span means "not requested".

#include <cstddef>
#include <span>

namespace rin::kernels {

enum class Backend { Parallel, Reference };

void set_backend(Backend b);
Backend backend();

/// Scoped backend override, used by tests and the benchmark.
class BackendGuard {
 public:
  explicit BackendGuard(Backend b) : previous_(backend()) { set_backend(b); }
  ~BackendGuard() { set_backend(previous_); }
  BackendGuard(const BackendGuard&) = delete;
  BackendGuard& operator=(const BackendGuard&) = delete;

 private:
  Backend previous_;
};

struct ConvGeometry {
  static constexpr std::size_t kernel = 3;
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  bool valid() const { return in_h + 2 * pad >= kernel && in_w + 2 * pad >= kernel && stride > 0; }
};

/// Per-channel statistics over (batch, spatial) for a [N, C, HW] layout.
struct ChannelLayout {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t spatial = 0;
  std::size_t count() const { return batch * spatial; }
};

#define RIN_KERNEL_DECLS                                                                         \
  template <typename T>                                                                          \
  void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight, \
                      std::span<const T> bias, std::span<T> out);                               \
  template <typename T>                                                                          \
  void conv2d_backward(const ConvGeometry& g, std::span<const T> input,                         \
                       std::span<const T> weight, std::span<const T> grad_out,                  \
                       std::span<T> grad_input, std::span<T> grad_weight,                       \
                       std::span<T> grad_bias);                                                 \
  /* Writes y, and the batch mean / inverse std per channel. */                                  \
  template <typename T>                                                                          \
  void batchnorm_forward_train(const ChannelLayout& l, std::span<const T> x,                    \
                               std::span<const T> gamma, std::span<const T> beta, double eps,   \
                               std::span<T> y, std::span<double> mean,                          \
                               std::span<double> invstd);                                       \
  template <typename T>                                                                          \
  void batchnorm_backward_train(const ChannelLayout& l, std::span<const T> x,                   \
                                std::span<const T> gamma, std::span<const double> mean,         \
                                std::span<const double> invstd, std::span<const T> grad_y,      \
                                std::span<T> grad_x, std::span<T> grad_gamma,                   \
                                std::span<T> grad_beta);

namespace reference {
RIN_KERNEL_DECLS
}  // namespace reference

namespace parallel {
RIN_KERNEL_DECLS
}  // namespace parallel

#undef RIN_KERNEL_DECLS

// Dispatch on the active backend.

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
  if (backend() == Backend::Reference) {
    reference::conv2d_forward<T>(g, input, weight, bias, out);
  } else {
    parallel::conv2d_forward<T>(g, input, weight, bias, out);
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_out, std::span<T> grad_input, std::span<T> grad_weight,
                     std::span<T> grad_bias) {
  if (backend() == Backend::Reference) {
    reference::conv2d_backward<T>(g, input, weight, grad_out, grad_input, grad_weight, grad_bias);
  } else {
    parallel::conv2d_backward<T>(g, input, weight, grad_out, grad_input, grad_weight, grad_bias);
  }
}

template <typename T>
void batchnorm_forward_train(const ChannelLayout& l, std::span<const T> x, std::span<const T> gamma,
                             std::span<const T> beta, double eps, std::span<T> y,
                             std::span<double> mean, std::span<double> invstd) {
  if (backend() == Backend::Reference) {
    reference::batchnorm_forward_train<T>(l, x, gamma, beta, eps, y, mean, invstd);
  } else {
    parallel::batchnorm_forward_train<T>(l, x, gamma, beta, eps, y, mean, invstd);
  }
}

template <typename T>
void batchnorm_backward_train(const ChannelLayout& l, std::span<const T> x,
                              std::span<const T> gamma, std::span<const double> mean,
                              std::span<const double> invstd, std::span<const T> grad_y,
                              std::span<T> grad_x, std::span<T> grad_gamma,
                              std::span<T> grad_beta) {
  if (backend() == Backend::Reference) {
    reference::batchnorm_backward_train<T>(l, x, gamma, mean, invstd, grad_y, grad_x, grad_gamma,
                                           grad_beta);
  } else {
    parallel::batchnorm_backward_train<T>(l, x, gamma, mean, invstd, grad_y, grad_x, grad_gamma,
                                          grad_beta);
  }
}

}  // namespace rin::kernels
