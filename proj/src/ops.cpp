#include "rin/ops.hpp"

#include <cmath>

#include "rin/kernels.hpp"

namespace rin {

namespace {

template <typename T>
std::span<T> grad_or_empty(Node<T>& n) {
  return n.requires_grad ? std::span<T>(n.grad_buffer()) : std::span<T>();
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d");
  require_rank(weight, 4, "conv2d weights");
  require_rank(bias, 1, "conv2d bias");
  if (weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw ShapeError("conv2d: kernel must be 3x3, weights are " + shape_str(weight.shape()));
  }
  if (weight.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) + " channels but weights " +
                     shape_str(weight.shape()) + " expect " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != weight.dim(0)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match weights " +
                     shape_str(weight.shape()));
  }
  kernels::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0),
                          stride, padding};
  if (!g.valid()) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " with padding " +
                     std::to_string(padding) + " is smaller than the kernel");
  }
  Shape out_shape{g.batch, g.out_channels, g.out_h(), g.out_w()};
  std::vector<T> out(shape_numel(out_shape));
  kernels::conv2d_forward<T>(g, input.data(), weight.data(), bias.data(), out);
  return make_result<T>(std::move(out_shape), std::move(out), {input, weight, bias},
                        [g](Node<T>& node) {
                          Node<T>& x = *node.inputs[0];
                          Node<T>& w = *node.inputs[1];
                          Node<T>& b = *node.inputs[2];
                          kernels::conv2d_backward<T>(g, x.value, w.value, node.grad,
                                                      grad_or_empty(x), grad_or_empty(w),
                                                      grad_or_empty(b));
                        });
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, NormMode mode, double momentum, double eps) {
  if (!input.defined() || input.rank() < 2) throw ShapeError("batchnorm: input must be at least rank 2");
  const std::size_t channels = input.dim(1);
  if (gamma.numel() != channels || beta.numel() != channels || stats.mean.numel() != channels ||
      stats.var.numel() != channels) {
    throw ShapeError("batchnorm: input " + shape_str(input.shape()) + " has " +
                     std::to_string(channels) + " channels but gamma/beta are " +
                     shape_str(gamma.shape()) + "/" + shape_str(beta.shape()));
  }
  kernels::ChannelLayout layout{input.dim(0), channels, input.numel() / (input.dim(0) * channels)};
  std::vector<T> out(input.numel());

  if (mode == NormMode::Train) {
    if (layout.count() < 2) {
      throw ShapeError("batchnorm: train mode needs more than one value per channel, input is " +
                       shape_str(input.shape()));
    }
    std::vector<double> mean(channels), invstd(channels);
    kernels::batchnorm_forward_train<T>(layout, input.data(), gamma.data(), beta.data(), eps, out,
                                        mean, invstd);
    const double unbias = double(layout.count()) / double(layout.count() - 1);
    auto rm = stats.mean.mutable_data();
    auto rv = stats.var.mutable_data();
    for (std::size_t c = 0; c < channels; ++c) {
      const double batch_var = 1.0 / (invstd[c] * invstd[c]) - eps;
      rm[c] = T((1.0 - momentum) * double(rm[c]) + momentum * mean[c]);
      rv[c] = T((1.0 - momentum) * double(rv[c]) + momentum * batch_var * unbias);
    }
    return make_result<T>(input.shape(), std::move(out), {input, gamma, beta},
                          [layout, mean = std::move(mean), invstd = std::move(invstd)](Node<T>& node) {
                            Node<T>& x = *node.inputs[0];
                            Node<T>& g = *node.inputs[1];
                            Node<T>& b = *node.inputs[2];
                            kernels::batchnorm_backward_train<T>(
                                layout, x.value, g.value, mean, invstd, node.grad, grad_or_empty(x),
                                grad_or_empty(g), grad_or_empty(b));
                          });
  }

  std::vector<double> mean(channels), invstd(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    mean[c] = double(stats.mean[c]);
    invstd[c] = 1.0 / std::sqrt(double(stats.var[c]) + eps);
  }
  const auto x = input.data();
  for (std::size_t n = 0; n < layout.batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * layout.spatial;
      const double gc = double(gamma[c]), bc = double(beta[c]);
      for (std::size_t i = 0; i < layout.spatial; ++i) {
        out[base + i] = T(gc * (double(x[base + i]) - mean[c]) * invstd[c] + bc);
      }
    }
  }
  return make_result<T>(input.shape(), std::move(out), {input, gamma, beta},
                        [layout, mean = std::move(mean), invstd = std::move(invstd)](Node<T>& node) {
                          Node<T>& x = *node.inputs[0];
                          Node<T>& g = *node.inputs[1];
                          Node<T>& b = *node.inputs[2];
                          auto gx = grad_or_empty(x);
                          auto gg = grad_or_empty(g);
                          auto gb = grad_or_empty(b);
                          for (std::size_t n = 0; n < layout.batch; ++n) {
                            for (std::size_t c = 0; c < layout.channels; ++c) {
                              const std::size_t base = (n * layout.channels + c) * layout.spatial;
                              for (std::size_t i = 0; i < layout.spatial; ++i) {
                                const double dy = double(node.grad[base + i]);
                                if (!gx.empty()) gx[base + i] += T(dy * double(g.value[c]) * invstd[c]);
                                if (!gg.empty()) {
                                  gg[c] += T(dy * (double(x.value[base + i]) - mean[c]) * invstd[c]);
                                }
                                if (!gb.empty()) gb[c] += T(dy);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.numel());
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return make_result<T>(input.shape(), std::move(out), {input}, [](Node<T>& node) {
    Node<T>& x = *node.inputs[0];
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (x.value[i] > T(0)) gx[i] += node.grad[i];
    }
  });
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& input) {
  require_rank(input, 4, "upsample2x");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t planes = n * c;
  std::vector<T> out(planes * 4 * h * w);
  const auto x = input.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    T* dst = out.data() + p * 4 * h * w;
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  return make_result<T>(Shape{n, c, 2 * h, 2 * w}, std::move(out), {input},
                        [planes, h, w](Node<T>& node) {
                          auto& gx = node.inputs[0]->grad_buffer();
                          for (std::size_t p = 0; p < planes; ++p) {
                            const T* src = node.grad.data() + p * 4 * h * w;
                            T* dst = gx.data() + p * h * w;
                            for (std::size_t y = 0; y < 2 * h; ++y) {
                              for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight, 2, "linear weights");
  require_rank(bias, 1, "linear bias");
  if (!input.defined() || (input.rank() != 1 && input.rank() != 2)) {
    throw ShapeError("linear: input must be [F] or [B,F]");
  }
  const bool batched = input.rank() == 2;
  const std::size_t batch = batched ? input.dim(0) : 1;
  const std::size_t in_f = batched ? input.dim(1) : input.dim(0);
  const std::size_t out_f = weight.dim(0);
  if (weight.dim(1) != in_f || bias.dim(0) != out_f) {
    throw ShapeError("linear: input " + shape_str(input.shape()) + " incompatible with weights " +
                     shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()));
  }
  std::vector<T> out(batch * out_f);
  const auto x = input.data(), w = weight.data(), b = bias.data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t m = 0; m < out_f; ++m) {
      T acc = b[m];
      for (std::size_t f = 0; f < in_f; ++f) acc += w[m * in_f + f] * x[n * in_f + f];
      out[n * out_f + m] = acc;
    }
  }
  Shape shape = batched ? Shape{batch, out_f} : Shape{out_f};
  return make_result<T>(std::move(shape), std::move(out), {input, weight, bias},
                        [batch, in_f, out_f](Node<T>& node) {
                          Node<T>& x = *node.inputs[0];
                          Node<T>& w = *node.inputs[1];
                          Node<T>& b = *node.inputs[2];
                          auto gx = grad_or_empty(x);
                          auto gw = grad_or_empty(w);
                          auto gb = grad_or_empty(b);
                          for (std::size_t n = 0; n < batch; ++n) {
                            for (std::size_t m = 0; m < out_f; ++m) {
                              const T go = node.grad[n * out_f + m];
                              if (!gb.empty()) gb[m] += go;
                              for (std::size_t f = 0; f < in_f; ++f) {
                                if (!gw.empty()) gw[m * in_f + f] += go * x.value[n * in_f + f];
                                if (!gx.empty()) gx[n * in_f + f] += go * w.value[m * in_f + f];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: non-channel dims differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  std::vector<T> out(n * (ca + cb) * plane);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * plane, ca * plane, out.data() + i * (ca + cb) * plane);
    std::copy_n(b.data().data() + i * cb * plane, cb * plane,
                out.data() + (i * (ca + cb) + ca) * plane);
  }
  return make_result<T>(Shape{n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                        [n, ca, cb, plane](Node<T>& node) {
                          Node<T>& na = *node.inputs[0];
                          Node<T>& nb = *node.inputs[1];
                          for (std::size_t i = 0; i < n; ++i) {
                            const T* src = node.grad.data() + i * (ca + cb) * plane;
                            if (na.requires_grad) {
                              T* dst = na.grad_buffer().data() + i * ca * plane;
                              for (std::size_t k = 0; k < ca * plane; ++k) dst[k] += src[k];
                            }
                            if (nb.requires_grad) {
                              T* dst = nb.grad_buffer().data() + i * cb * plane;
                              for (std::size_t k = 0; k < cb * plane; ++k) dst[k] += src[ca * plane + k];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& node) {
      Node<T>& na = *node.inputs[0];
      Node<T>& nb = *node.inputs[1];
      auto ga = grad_or_empty(na);
      auto gb = grad_or_empty(nb);
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        if (!ga.empty()) ga[i] += node.grad[i] * nb.value[i];
        if (!gb.empty()) gb[i] += node.grad[i] * na.value[i];
      }
    });
  }
  const bool broadcast_ok = a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) &&
                            a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3) &&
                            ((a.dim(1) == 3 && b.dim(1) == 1) || (a.dim(1) == 1 && b.dim(1) == 3));
  if (!broadcast_ok) {
    throw ShapeError("multiply: cannot broadcast " + shape_str(a.shape()) + " with " +
                     shape_str(b.shape()) + " (only 1->3 channel broadcast is supported)");
  }
  // Put the 3-channel operand first; the product is symmetric.
  const bool swap = a.dim(1) == 1;
  const Tensor<T>& full = swap ? b : a;
  const Tensor<T>& single = swap ? a : b;
  const std::size_t n = full.dim(0), plane = full.dim(2) * full.dim(3);
  std::vector<T> out(full.numel());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        out[(i * 3 + c) * plane + p] = full[(i * 3 + c) * plane + p] * single[i * plane + p];
      }
    }
  }
  return make_result<T>(full.shape(), std::move(out), {full, single}, [n, plane](Node<T>& node) {
    Node<T>& nf = *node.inputs[0];
    Node<T>& ns = *node.inputs[1];
    auto gf = grad_or_empty(nf);
    auto gs = grad_or_empty(ns);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t k = (i * 3 + c) * plane + p;
          if (!gf.empty()) gf[k] += node.grad[k] * ns.value[i * plane + p];
          if (!gs.empty()) gs[i * plane + p] += node.grad[k] * nf.value[k];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> clamp01(const Tensor<T>& input) {
  std::vector<T> out(input.numel());
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x[i], T(0)), T(1));
  return make_result<T>(input.shape(), std::move(out), {input}, [](Node<T>& node) {
    Node<T>& x = *node.inputs[0];
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (x.value[i] > T(0) && x.value[i] < T(1)) gx[i] += node.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target) {
  require_same_shape(prediction, target, "mse");
  const std::size_t count = prediction.numel();
  T acc = T(0);
  for (std::size_t i = 0; i < count; ++i) {
    const T d = prediction[i] - target[i];
    acc += d * d;
  }
  return make_result<T>(Shape{1}, {acc / T(count)}, {prediction, target}, [count](Node<T>& node) {
    Node<T>& p = *node.inputs[0];
    Node<T>& t = *node.inputs[1];
    const T g = node.grad[0] * T(2) / T(count);
    auto gp = grad_or_empty(p);
    auto gt = grad_or_empty(t);
    for (std::size_t i = 0; i < count; ++i) {
      const T d = p.value[i] - t.value[i];
      if (!gp.empty()) gp[i] += g * d;
      if (!gt.empty()) gt[i] -= g * d;
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  T acc = T(0);
  for (T v : input.data()) acc += v;
  return make_result<T>(Shape{1}, {acc}, {input}, [](Node<T>& node) {
    auto& gx = node.inputs[0]->grad_buffer();
    for (auto& g : gx) g += node.grad[0];
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& node) {
    for (auto& in : node.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  std::vector<T> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input[i] * factor;
  return make_result<T>(input.shape(), std::move(out), {input}, [factor](Node<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& input, T eps) {
  require_rank(input, 4, "normalize_channels");
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  std::vector<T> out(input.numel());
  std::vector<T> inv_norm(n * plane);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < plane; ++p) {
      T sq = T(0);
      for (std::size_t k = 0; k < c; ++k) {
        const T v = input[(i * c + k) * plane + p];
        sq += v * v;
      }
      const T inv = T(1) / std::sqrt(sq + eps);
      inv_norm[i * plane + p] = inv;
      for (std::size_t k = 0; k < c; ++k) {
        out[(i * c + k) * plane + p] = input[(i * c + k) * plane + p] * inv;
      }
    }
  }
  return make_result<T>(input.shape(), out, {input},
                        [n, c, plane, out, inv_norm = std::move(inv_norm)](Node<T>& node) {
                          auto& gx = node.inputs[0]->grad_buffer();
                          // d y_i / d x_j = (delta_ij - y_i y_j) / |x|
                          for (std::size_t i = 0; i < n; ++i) {
                            for (std::size_t p = 0; p < plane; ++p) {
                              T dot = T(0);
                              for (std::size_t k = 0; k < c; ++k) {
                                const std::size_t idx = (i * c + k) * plane + p;
                                dot += out[idx] * node.grad[idx];
                              }
                              const T inv = inv_norm[i * plane + p];
                              for (std::size_t k = 0; k < c; ++k) {
                                const std::size_t idx = (i * c + k) * plane + p;
                                gx[idx] += (node.grad[idx] - out[idx] * dot) * inv;
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(input.data().begin(), input.data().end());
  return make_result<T>(std::move(shape), std::move(out), {input}, [](Node<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_rank(input, 4, "global_avg_pool");
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = T(0);
    for (std::size_t p = 0; p < plane; ++p) acc += input[i * plane + p];
    out[i] = acc / T(plane);
  }
  return make_result<T>(Shape{n, c}, std::move(out), {input}, [plane](Node<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      for (std::size_t p = 0; p < plane; ++p) g[i * plane + p] += node.grad[i] / T(plane);
    }
  });
}

#define RIN_INSTANTIATE(T)                                                                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,    \
                            std::size_t);                                                         \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                               BatchNormStats<T>&, NormMode, double, double);                     \
  template Tensor<T> relu(const Tensor<T>&);                                                      \
  template Tensor<T> upsample2x(const Tensor<T>&);                                                \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> multiply(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> clamp01(const Tensor<T>&);                                                   \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> normalize_channels(const Tensor<T>&, T);                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
  template Tensor<T> global_avg_pool(const Tensor<T>&);
RIN_INSTANTIATE(float)
RIN_INSTANTIATE(double)
#undef RIN_INSTANTIATE

}  // namespace rin
