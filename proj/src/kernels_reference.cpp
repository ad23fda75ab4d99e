#include <cmath>

#include "rin/kernels.hpp"

namespace rin::kernels {

namespace {
Backend g_backend = Backend::Parallel;
}

void set_backend(Backend b) { g_backend = b; }
Backend backend() { return g_backend; }

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
  const std::size_t k = ConvGeometry::kernel;
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          T acc = bias.empty() ? T(0) : bias[o];
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = std::ptrdiff_t(y * g.stride + ky) - std::ptrdiff_t(g.pad);
              if (iy < 0 || iy >= std::ptrdiff_t(g.in_h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = std::ptrdiff_t(x * g.stride + kx) - std::ptrdiff_t(g.pad);
                if (ix < 0 || ix >= std::ptrdiff_t(g.in_w)) continue;
                acc += weight[((o * g.in_channels + c) * k + ky) * k + kx] *
                       input[((n * g.in_channels + c) * g.in_h + std::size_t(iy)) * g.in_w + std::size_t(ix)];
              }
            }
          }
          out[((n * g.out_channels + o) * oh + y) * ow + x] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_out, std::span<T> grad_input, std::span<T> grad_weight,
                     std::span<T> grad_bias) {
  const std::size_t k = ConvGeometry::kernel;
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          const T go = grad_out[((n * g.out_channels + o) * oh + y) * ow + x];
          if (!grad_bias.empty()) grad_bias[o] += go;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = std::ptrdiff_t(y * g.stride + ky) - std::ptrdiff_t(g.pad);
              if (iy < 0 || iy >= std::ptrdiff_t(g.in_h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = std::ptrdiff_t(x * g.stride + kx) - std::ptrdiff_t(g.pad);
                if (ix < 0 || ix >= std::ptrdiff_t(g.in_w)) continue;
                const std::size_t wi = ((o * g.in_channels + c) * k + ky) * k + kx;
                const std::size_t ii =
                    ((n * g.in_channels + c) * g.in_h + std::size_t(iy)) * g.in_w + std::size_t(ix);
                if (!grad_weight.empty()) grad_weight[wi] += go * input[ii];
                if (!grad_input.empty()) grad_input[ii] += go * weight[wi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void batchnorm_forward_train(const ChannelLayout& l, std::span<const T> x, std::span<const T> gamma,
                             std::span<const T> beta, double eps, std::span<T> y,
                             std::span<double> mean, std::span<double> invstd) {
  const double count = double(l.count());
  for (std::size_t c = 0; c < l.channels; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < l.batch; ++n) {
      const T* px = x.data() + (n * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) sum += double(px[i]);
    }
    const double mu = sum / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < l.batch; ++n) {
      const T* px = x.data() + (n * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) {
        const double d = double(px[i]) - mu;
        sq += d * d;
      }
    }
    const double is = 1.0 / std::sqrt(sq / count + eps);
    mean[c] = mu;
    invstd[c] = is;
    for (std::size_t n = 0; n < l.batch; ++n) {
      const T* px = x.data() + (n * l.channels + c) * l.spatial;
      T* py = y.data() + (n * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) {
        py[i] = T(double(gamma[c]) * (double(px[i]) - mu) * is + double(beta[c]));
      }
    }
  }
}

template <typename T>
void batchnorm_backward_train(const ChannelLayout& l, std::span<const T> x,
                              std::span<const T> gamma, std::span<const double> mean,
                              std::span<const double> invstd, std::span<const T> grad_y,
                              std::span<T> grad_x, std::span<T> grad_gamma,
                              std::span<T> grad_beta) {
  const double count = double(l.count());
  for (std::size_t c = 0; c < l.channels; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < l.batch; ++n) {
      const std::size_t base = (n * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) {
        const double xhat = (double(x[base + i]) - mean[c]) * invstd[c];
        sum_dy += double(grad_y[base + i]);
        sum_dy_xhat += double(grad_y[base + i]) * xhat;
      }
    }
    if (!grad_gamma.empty()) grad_gamma[c] += T(sum_dy_xhat);
    if (!grad_beta.empty()) grad_beta[c] += T(sum_dy);
    if (grad_x.empty()) continue;
    const double scale = double(gamma[c]) * invstd[c] / count;
    for (std::size_t n = 0; n < l.batch; ++n) {
      const std::size_t base = (n * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) {
        const double xhat = (double(x[base + i]) - mean[c]) * invstd[c];
        grad_x[base + i] +=
            T(scale * (count * double(grad_y[base + i]) - sum_dy - xhat * sum_dy_xhat));
      }
    }
  }
}

#define RIN_INSTANTIATE(T)                                                                        \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,    \
                                  std::span<const T>, std::span<T>);                              \
  template void conv2d_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,   \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>); \
  template void batchnorm_forward_train<T>(const ChannelLayout&, std::span<const T>,              \
                                           std::span<const T>, std::span<const T>, double,        \
                                           std::span<T>, std::span<double>, std::span<double>);   \
  template void batchnorm_backward_train<T>(const ChannelLayout&, std::span<const T>,             \
                                            std::span<const T>, std::span<const double>,          \
                                            std::span<const double>, std::span<const T>,          \
                                            std::span<T>, std::span<T>, std::span<T>);
RIN_INSTANTIATE(float)
RIN_INSTANTIATE(double)
#undef RIN_INSTANTIATE

}  // namespace reference
}  // namespace rin::kernels
