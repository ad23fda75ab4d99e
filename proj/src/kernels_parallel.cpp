#include <cmath>
#include <algorithm>
#include <cstring>
#include <vector>

#include <Eigen/Core>

#include "rin/kernels.hpp"

namespace rin::kernels::parallel {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Images are processed in chunks whose column matrix fits in L2; each
// chunk is independent, so chunks are the unit of OpenMP parallelism.
constexpr std::size_t kChunkFloats = std::size_t(1) << 19;

struct Chunking {
  std::size_t per_chunk;
  std::size_t count;
};

inline Chunking chunking(const ConvGeometry& g) {
  const std::size_t col_per_image =
      g.in_channels * ConvGeometry::kernel * ConvGeometry::kernel * g.out_h() * g.out_w();
  const std::size_t per = std::max<std::size_t>(1, std::min(g.batch, kChunkFloats / col_per_image));
  return {per, (g.batch + per - 1) / per};
}

// Output columns [x_begin, x_end) read in-bounds input for kernel column kx.
struct ValidRange {
  std::size_t begin, end;
};

inline ValidRange valid_range(std::size_t out_len, std::size_t in_len, std::size_t stride,
                              std::size_t pad, std::size_t k) {
  // ix = x * stride + k - pad must lie in [0, in_len).
  std::size_t begin = 0;
  while (begin < out_len && begin * stride + k < pad) ++begin;
  std::size_t end = begin;
  while (end < out_len && end * stride + k < pad + in_len) ++end;
  return {begin, end};
}

// Column matrix [C*9, n_images*OH*OW] for images [first, first + n_images);
// column i*P + p holds the receptive field of output pixel p of image i.
template <typename T>
void im2col(const ConvGeometry& g, std::span<const T> input, std::size_t first,
            std::size_t n_images, RowMat<T>& col) {
  const std::size_t k = ConvGeometry::kernel;
  const std::size_t oh = g.out_h(), ow = g.out_w(), plane = oh * ow;
  col.resize(Eigen::Index(g.in_channels * k * k), Eigen::Index(n_images * plane));
  for (std::size_t i = 0; i < n_images; ++i) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const T* src = input.data() + ((first + i) * g.in_channels + c) * g.in_h * g.in_w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const ValidRange ry = valid_range(oh, g.in_h, g.stride, g.pad, ky);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const ValidRange rx = valid_range(ow, g.in_w, g.stride, g.pad, kx);
          T* dst = col.data() + ((c * k + ky) * k + kx) * std::size_t(col.cols()) + i * plane;
          std::fill(dst, dst + ry.begin * ow, T(0));
          for (std::size_t y = ry.begin; y < ry.end; ++y) {
            T* row = dst + y * ow;
            const T* srow = src + (y * g.stride + ky - g.pad) * g.in_w + kx - g.pad;
            std::fill(row, row + rx.begin, T(0));
            if (g.stride == 1) {
              std::copy(srow + rx.begin, srow + rx.end, row + rx.begin);
            } else {
              for (std::size_t x = rx.begin; x < rx.end; ++x) row[x] = srow[x * g.stride];
            }
            std::fill(row + rx.end, row + ow, T(0));
          }
          std::fill(dst + ry.end * ow, dst + plane, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(const ConvGeometry& g, const RowMat<T>& col, std::size_t first,
                       std::size_t n_images, std::span<T> grad_input) {
  const std::size_t k = ConvGeometry::kernel;
  const std::size_t oh = g.out_h(), ow = g.out_w(), plane = oh * ow;
  for (std::size_t i = 0; i < n_images; ++i) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      T* dst = grad_input.data() + ((first + i) * g.in_channels + c) * g.in_h * g.in_w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const ValidRange ry = valid_range(oh, g.in_h, g.stride, g.pad, ky);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const ValidRange rx = valid_range(ow, g.in_w, g.stride, g.pad, kx);
          const T* src = col.data() + ((c * k + ky) * k + kx) * std::size_t(col.cols()) + i * plane;
          for (std::size_t y = ry.begin; y < ry.end; ++y) {
            T* drow = dst + (y * g.stride + ky - g.pad) * g.in_w + kx - g.pad;
            const T* row = src + y * ow;
            if (g.stride == 1) {
              for (std::size_t x = rx.begin; x < rx.end; ++x) drow[x] += row[x];
            } else {
              for (std::size_t x = rx.begin; x < rx.end; ++x) drow[x * g.stride] += row[x];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> out) {
  const std::size_t kk = g.in_channels * ConvGeometry::kernel * ConvGeometry::kernel;
  const std::size_t plane = g.out_h() * g.out_w();
  const Chunking ch = chunking(g);
  Eigen::Map<const RowMat<T>> w(weight.data(), Eigen::Index(g.out_channels), Eigen::Index(kk));
  const std::ptrdiff_t chunks = std::ptrdiff_t(ch.count);
#pragma omp parallel
  {
    RowMat<T> col, result;
#pragma omp for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < chunks; ++ci) {
      const std::size_t first = std::size_t(ci) * ch.per_chunk;
      const std::size_t n_images = std::min(ch.per_chunk, g.batch - first);
      im2col(g, input, first, n_images, col);
      result.resize(Eigen::Index(g.out_channels), col.cols());
      result.noalias() = w * col;
      for (std::size_t i = 0; i < n_images; ++i) {
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          const T b = bias.empty() ? T(0) : bias[o];
          const T* src = result.data() + o * std::size_t(result.cols()) + i * plane;
          T* dst = out.data() + ((first + i) * g.out_channels + o) * plane;
          for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_out, std::span<T> grad_input, std::span<T> grad_weight,
                     std::span<T> grad_bias) {
  const std::size_t kk = g.in_channels * ConvGeometry::kernel * ConvGeometry::kernel;
  const std::size_t plane = g.out_h() * g.out_w();
  const Chunking ch = chunking(g);

  if (!grad_bias.empty()) {
    const std::ptrdiff_t out_channels = std::ptrdiff_t(g.out_channels);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t o = 0; o < out_channels; ++o) {
      T acc = T(0);
      for (std::size_t n = 0; n < g.batch; ++n) {
        const T* row = grad_out.data() + (n * g.out_channels + std::size_t(o)) * plane;
        for (std::size_t p = 0; p < plane; ++p) acc += row[p];
      }
      grad_bias[std::size_t(o)] += acc;
    }
  }
  if (grad_weight.empty() && grad_input.empty()) return;

  Eigen::Map<const RowMat<T>> w(weight.data(), Eigen::Index(g.out_channels), Eigen::Index(kk));
  // One weight-gradient partial per chunk, summed in chunk order afterwards.
  std::vector<RowMat<T>> partial(grad_weight.empty() ? 0 : ch.count);
  const std::ptrdiff_t chunks = std::ptrdiff_t(ch.count);
#pragma omp parallel
  {
    RowMat<T> col, dy, dcol;
#pragma omp for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < chunks; ++ci) {
      const std::size_t first = std::size_t(ci) * ch.per_chunk;
      const std::size_t n_images = std::min(ch.per_chunk, g.batch - first);
      dy.resize(Eigen::Index(g.out_channels), Eigen::Index(n_images * plane));
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        for (std::size_t i = 0; i < n_images; ++i) {
          std::memcpy(dy.data() + o * std::size_t(dy.cols()) + i * plane,
                      grad_out.data() + ((first + i) * g.out_channels + o) * plane,
                      plane * sizeof(T));
        }
      }
      if (!grad_weight.empty()) {
        im2col(g, input, first, n_images, col);
        partial[std::size_t(ci)].noalias() = dy * col.transpose();
      }
      if (!grad_input.empty()) {
        dcol.resize(Eigen::Index(kk), dy.cols());
        dcol.noalias() = w.transpose() * dy;
        col2im_accumulate(g, dcol, first, n_images, grad_input);
      }
    }
  }
  if (!grad_weight.empty()) {
    Eigen::Map<RowMat<T>> gw(grad_weight.data(), Eigen::Index(g.out_channels), Eigen::Index(kk));
    for (const auto& p : partial) gw += p;
  }
}

// Batchnorm parallelizes over channels; the per-channel summation order
// matches the reference loop nest exactly.

template <typename T>
void batchnorm_forward_train(const ChannelLayout& l, std::span<const T> x, std::span<const T> gamma,
                             std::span<const T> beta, double eps, std::span<T> y,
                             std::span<double> mean, std::span<double> invstd) {
  const double count = double(l.count());
  const std::ptrdiff_t channels = std::ptrdiff_t(l.channels);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < channels; ++ci) {
    const std::size_t c = std::size_t(ci);
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
    const double gc = double(gamma[c]), bc = double(beta[c]);
    for (std::size_t n = 0; n < l.batch; ++n) {
      const T* px = x.data() + (n * l.channels + c) * l.spatial;
      T* py = y.data() + (n * l.channels + c) * l.spatial;
      for (std::size_t i = 0; i < l.spatial; ++i) py[i] = T(gc * (double(px[i]) - mu) * is + bc);
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
  const std::ptrdiff_t channels = std::ptrdiff_t(l.channels);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < channels; ++ci) {
    const std::size_t c = std::size_t(ci);
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

}  // namespace rin::kernels::parallel
