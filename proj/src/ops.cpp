#include "gaitworks/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gaitworks {

namespace {

// Collapse NHWC / HWC / any rank into (rows, channels) with channels = last axis.
std::pair<std::size_t, std::size_t> rows_and_channels(const Tensor& t) {
  if (t.rank() == 0) throw ShapeError("tensor has no axes");
  const std::size_t channels = t.shape().back();
  return {t.size() / channels, channels};
}

void require_vector(const Tensor& t, std::size_t length, const char* what) {
  if (t.size() != length)
    throw ShapeError(std::string(what) + " has " + std::to_string(t.size()) + " elements, expected " +
                     std::to_string(length));
}

}  // namespace

ConvGeometry conv_geometry(const Shape& input, const Shape& kernels, std::size_t stride, Padding padding) {
  if (input.size() != 3 && input.size() != 4)
    throw ShapeError("conv2d input must be HxWxC or NxHxWxC, got " + shape_string(input));
  if (kernels.size() != 4) throw ShapeError("conv2d kernels must be KHxKWxCxF, got " + shape_string(kernels));
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  ConvGeometry g{};
  const std::size_t off = input.size() == 4 ? 1 : 0;
  g.batch = off ? input[0] : 1;
  g.in_h = input[off];
  g.in_w = input[off + 1];
  g.in_c = input[off + 2];
  g.kernel_h = kernels[0];
  g.kernel_w = kernels[1];
  g.filters = kernels[3];
  g.stride = stride;
  if (kernels[2] != g.in_c)
    throw ShapeError("conv2d channel mismatch: input " + shape_string(input) + " has " + std::to_string(g.in_c) +
                     " channels but kernels " + shape_string(kernels) + " expect " + std::to_string(kernels[2]));
  if (padding == Padding::same) {
    g.out_h = (g.in_h + stride - 1) / stride;
    g.out_w = (g.in_w + stride - 1) / stride;
    const std::size_t need_h = (g.out_h - 1) * stride + g.kernel_h;
    const std::size_t need_w = (g.out_w - 1) * stride + g.kernel_w;
    g.pad_top = need_h > g.in_h ? (need_h - g.in_h) / 2 : 0;
    g.pad_left = need_w > g.in_w ? (need_w - g.in_w) / 2 : 0;
  } else {
    if (g.in_h < g.kernel_h || g.in_w < g.kernel_w)
      throw ShapeError("conv2d valid padding: input " + shape_string(input) + " smaller than kernel");
    g.out_h = (g.in_h - g.kernel_h) / stride + 1;
    g.out_w = (g.in_w - g.kernel_w) / stride + 1;
    g.pad_top = g.pad_left = 0;
  }
  return g;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                      Padding padding) {
  const ConvGeometry g = conv_geometry(input.shape(), kernels.shape(), stride, padding);
  require_vector(bias, g.filters, "conv2d bias");
  Shape out_shape = input.rank() == 4 ? Shape{g.batch, g.out_h, g.out_w, g.filters}
                                      : Shape{g.out_h, g.out_w, g.filters};
  Tensor out(out_shape);
  const float* in = input.raw();
  const float* k = kernels.raw();
  const float* b = bias.raw();
  float* o = out.raw();
  const std::size_t F = g.filters, C = g.in_c;
  const std::size_t in_plane = g.in_h * g.in_w * C;
  const std::size_t out_plane = g.out_h * g.out_w * F;

  for (std::size_t n = 0; n < g.batch; ++n) {
    const float* in_n = in + n * in_plane;
    float* out_n = o + n * out_plane;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        float* acc = out_n + (oy * g.out_w + ox) * F;
        std::copy(b, b + F, acc);
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            const float* px = in_n + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * C;
            const float* kt = k + (ky * g.kernel_w + kx) * C * F;
            for (std::size_t c = 0; c < C; ++c) {
              const float v = px[c];
              if (v == 0.0f) continue;
              const float* kc = kt + c * F;
              for (std::size_t f = 0; f < F; ++f) acc[f] += v * kc[f];
            }
          }
        }
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& upstream, const Tensor& cached_input, const Tensor& kernels,
                            std::size_t stride, Padding padding, bool need_input_grad) {
  if (cached_input.empty()) throw std::logic_error("conv2d_backward: no cached forward input");
  const ConvGeometry g = conv_geometry(cached_input.shape(), kernels.shape(), stride, padding);
  const std::size_t F = g.filters, C = g.in_c;
  if (upstream.size() != g.batch * g.out_h * g.out_w * F)
    throw ShapeError("conv2d_backward: upstream gradient " + shape_string(upstream.shape()) +
                     " does not match forward output");

  Conv2dGrads grads;
  grads.kernels = Tensor(kernels.shape());
  grads.bias = Tensor(Shape{F});
  if (need_input_grad) grads.input = Tensor(cached_input.shape());

  const float* in = cached_input.raw();
  const float* k = kernels.raw();
  const float* up = upstream.raw();
  float* dk = grads.kernels.raw();
  float* db = grads.bias.raw();
  float* din = need_input_grad ? grads.input.raw() : nullptr;
  const std::size_t in_plane = g.in_h * g.in_w * C;
  const std::size_t out_plane = g.out_h * g.out_w * F;

  std::vector<double> bias_acc(F, 0.0);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const float* in_n = in + n * in_plane;
    float* din_n = din ? din + n * in_plane : nullptr;
    const float* up_n = up + n * out_plane;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const float* u = up_n + (oy * g.out_w + ox) * F;
        for (std::size_t f = 0; f < F; ++f) bias_acc[f] += u[f];
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad_left);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            const std::size_t pix = (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * C;
            const float* px = in_n + pix;
            const std::size_t tap = (ky * g.kernel_w + kx) * C * F;
            for (std::size_t c = 0; c < C; ++c) {
              const float* kc = k + tap + c * F;
              float* dkc = dk + tap + c * F;
              const float v = px[c];
              if (v != 0.0f)
                for (std::size_t f = 0; f < F; ++f) dkc[f] += v * u[f];
              if (din_n) {
                float s = 0.0f;
#pragma omp simd reduction(+ : s)
                for (std::size_t f = 0; f < F; ++f) s += kc[f] * u[f];
                din_n[pix + c] += s;
              }
            }
          }
        }
      }
    }
  }
  for (std::size_t f = 0; f < F; ++f) db[f] = static_cast<float>(bias_acc[f]);
  return grads;
}

void update_running_stats(RunningStats& running, std::span<const float> batch_mean,
                          std::span<const float> batch_var, float momentum) {
  for (std::size_t c = 0; c < batch_mean.size(); ++c) {
    running.mean[c] = momentum * running.mean[c] + (1.0f - momentum) * batch_mean[c];
    running.variance[c] = momentum * running.variance[c] + (1.0f - momentum) * batch_var[c];
  }
}

namespace {

Tensor batchnorm_apply(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                       std::span<const float> mean, std::span<const float> inv_std, BatchNormCache* cache) {
  const auto [rows, C] = rows_and_channels(input);
  Tensor out(input.shape());
  Tensor normalized;
  if (cache) normalized = Tensor(input.shape());
  const float* x = input.raw();
  float* y = out.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      const float xh = (x[i] - mean[c]) * inv_std[c];
      if (cache) normalized[i] = xh;
      y[i] = gamma[c] * xh + beta[c];
    }
  }
  if (cache) cache->normalized = std::move(normalized);
  return out;
}

}  // namespace

Tensor batchnorm_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta, Mode mode,
                         RunningStats* running, const BatchNormConfig& cfg, BatchNormCache* cache) {
  if (input.empty()) throw ShapeError("batchnorm: zero-size batch");
  const auto [rows, C] = rows_and_channels(input);
  require_vector(gamma, C, "batchnorm gamma");
  require_vector(beta, C, "batchnorm beta");

  if (mode == Mode::infer) {
    if (!running) throw std::invalid_argument("batchnorm: infer mode requires running statistics");
    return batchnorm_infer(input, gamma, beta, *running, cfg, cache);
  }

  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  const float* x = input.raw();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) sum[c] += x[r * C + c];
  std::vector<float> mean(C), var(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) mean[c] = static_cast<float>(sum[c] / static_cast<double>(rows));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = static_cast<double>(x[r * C + c]) - mean[c];
      sq[c] += d * d;
    }
  for (std::size_t c = 0; c < C; ++c) {
    var[c] = static_cast<float>(sq[c] / static_cast<double>(rows));
    inv_std[c] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(var[c]) + cfg.epsilon));
  }
  Tensor out = batchnorm_apply(input, gamma, beta, mean, inv_std, cache);
  if (running) update_running_stats(*running, mean, var, cfg.momentum);
  if (cache) {
    cache->mode = Mode::train;
    cache->inv_std = std::move(inv_std);
    cache->batch_mean = std::move(mean);
    cache->batch_var = std::move(var);
  }
  return out;
}

Tensor batchnorm_infer(const Tensor& input, const Tensor& gamma, const Tensor& beta, const RunningStats& running,
                       const BatchNormConfig& cfg, BatchNormCache* cache) {
  if (input.empty()) throw ShapeError("batchnorm: zero-size batch");
  const auto [rows, C] = rows_and_channels(input);
  (void)rows;
  require_vector(gamma, C, "batchnorm gamma");
  require_vector(beta, C, "batchnorm beta");
  if (running.mean.size() != C || running.variance.size() != C)
    throw ShapeError("batchnorm: running statistics do not match channel count");
  std::vector<float> inv_std(C);
  for (std::size_t c = 0; c < C; ++c)
    inv_std[c] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(running.variance[c]) + cfg.epsilon));
  Tensor out = batchnorm_apply(input, gamma, beta, running.mean, inv_std, cache);
  if (cache) {
    cache->mode = Mode::infer;
    cache->inv_std = std::move(inv_std);
    cache->batch_mean.clear();
    cache->batch_var.clear();
  }
  return out;
}

BatchNormGrads batchnorm_backward(const Tensor& upstream, const BatchNormCache& cache, const Tensor& gamma) {
  if (cache.normalized.empty()) throw std::logic_error("batchnorm_backward: no cached forward pass");
  if (upstream.size() != cache.normalized.size())
    throw ShapeError("batchnorm_backward: upstream gradient does not match forward output");
  const auto [rows, C] = rows_and_channels(cache.normalized);
  BatchNormGrads grads{Tensor(cache.normalized.shape()), Tensor(Shape{C}), Tensor(Shape{C})};
  const float* dy = upstream.raw();
  const float* xh = cache.normalized.raw();
  std::vector<double> sum_dy(C, 0.0), sum_dy_xh(C, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      sum_dy[c] += dy[i];
      sum_dy_xh[c] += static_cast<double>(dy[i]) * xh[i];
    }
  for (std::size_t c = 0; c < C; ++c) {
    grads.beta[c] = static_cast<float>(sum_dy[c]);
    grads.gamma[c] = static_cast<float>(sum_dy_xh[c]);
  }
  float* dx = grads.input.raw();
  if (cache.mode == Mode::infer) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < C; ++c) dx[r * C + c] = dy[r * C + c] * gamma[c] * cache.inv_std[c];
    return grads;
  }
  const double m = static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t i = r * C + c;
      const double g = static_cast<double>(gamma[c]) * cache.inv_std[c];
      dx[i] = static_cast<float>(g * (dy[i] - sum_dy[c] / m - xh[i] * sum_dy_xh[c] / m));
    }
  return grads;
}

Tensor relu_forward(const Tensor& input) {
  Tensor out = input;
  out.drop_grad();
  for (auto& v : out.data()) v = v < 0.0f ? 0.0f : v;  // NaN passes through
  return out;
}

Tensor relu_backward(const Tensor& upstream, const Tensor& cached_input) {
  if (upstream.size() != cached_input.size()) throw ShapeError("relu_backward: shape mismatch");
  Tensor dx(cached_input.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = cached_input[i] > 0.0f ? upstream[i] : 0.0f;
  return dx;
}

Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (weights.rank() != 2) throw ShapeError("dense weights must be NxM, got " + shape_string(weights.shape()));
  const std::size_t N = weights.dim(0), M = weights.dim(1);
  require_vector(bias, M, "dense bias");
  std::size_t batch = 1;
  if (input.rank() == 2) {
    batch = input.dim(0);
    if (input.dim(1) != N)
      throw ShapeError("dense input " + shape_string(input.shape()) + " does not match weights " +
                       shape_string(weights.shape()));
  } else if (input.size() != N) {
    throw ShapeError("dense input " + shape_string(input.shape()) + " does not match weights " +
                     shape_string(weights.shape()));
  }
  Tensor out(input.rank() == 2 ? Shape{batch, M} : Shape{M});
  const float* w = weights.raw();
  for (std::size_t b = 0; b < batch; ++b) {
    const float* x = input.raw() + b * N;
    std::vector<double> acc(bias.data().begin(), bias.data().end());
    std::vector<float> row_acc(M, 0.0f);
    // Accumulate in float blocks, fold into double every 64 rows.
    for (std::size_t i = 0; i < N; ++i) {
      const float v = x[i];
      if (v != 0.0f) {
        const float* wr = w + i * M;
        for (std::size_t j = 0; j < M; ++j) row_acc[j] += v * wr[j];
      }
      if ((i & 63) == 63 || i + 1 == N) {
        for (std::size_t j = 0; j < M; ++j) {
          acc[j] += row_acc[j];
          row_acc[j] = 0.0f;
        }
      }
    }
    float* y = out.raw() + b * M;
    for (std::size_t j = 0; j < M; ++j) y[j] = static_cast<float>(acc[j]);
  }
  return out;
}

DenseGrads dense_backward(const Tensor& upstream, const Tensor& cached_input, const Tensor& weights) {
  if (cached_input.empty()) throw std::logic_error("dense_backward: no cached forward input");
  const std::size_t N = weights.dim(0), M = weights.dim(1);
  const std::size_t batch = cached_input.size() / N;
  if (batch * N != cached_input.size() || upstream.size() != batch * M)
    throw ShapeError("dense_backward: shape mismatch");
  DenseGrads g{Tensor(cached_input.shape()), Tensor(weights.shape()), Tensor(Shape{M})};
  const float* w = weights.raw();
  float* dw = g.weights.raw();
  for (std::size_t b = 0; b < batch; ++b) {
    const float* x = cached_input.raw() + b * N;
    const float* dy = upstream.raw() + b * M;
    float* dx = g.input.raw() + b * N;
    for (std::size_t i = 0; i < N; ++i) {
      const float* wr = w + i * M;
      float* dwr = dw + i * M;
      float s = 0.0f;
#pragma omp simd reduction(+ : s)
      for (std::size_t j = 0; j < M; ++j) s += wr[j] * dy[j];
      dx[i] = s;
      const float v = x[i];
      if (v != 0.0f)
        for (std::size_t j = 0; j < M; ++j) dwr[j] += v * dy[j];
    }
    for (std::size_t j = 0; j < M; ++j) g.bias[j] += dy[j];
  }
  return g;
}

Tensor dropout_forward(const Tensor& input, float rate, Mode mode, Rng& rng, std::vector<float>* mask) {
  if (!(rate >= 0.0f && rate < 1.0f)) throw std::invalid_argument("dropout rate must be in [0,1)");
  Tensor out = input;
  out.drop_grad();
  if (mode == Mode::infer || rate == 0.0f) {
    if (mask) mask->assign(input.size(), 1.0f);
    return out;
  }
  const float scale = 1.0f / (1.0f - rate);
  if (mask) mask->resize(input.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float keep = uniform01(rng) < rate ? 0.0f : scale;
    out[i] *= keep;
    if (mask) (*mask)[i] = keep;
  }
  return out;
}

Tensor dropout_backward(const Tensor& upstream, std::span<const float> mask) {
  if (mask.size() != upstream.size()) throw ShapeError("dropout_backward: mask size mismatch");
  Tensor dx(upstream.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = upstream[i] * mask[i];
  return dx;
}

Tensor softmax(const Tensor& logits) {
  const auto [rows, K] = rows_and_channels(logits);
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* z = logits.raw() + r * K;
    float* p = out.raw() + r * K;
    const float zmax = *std::max_element(z, z + K);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += std::exp(static_cast<double>(z[k]) - zmax);
    for (std::size_t k = 0; k < K; ++k)
      p[k] = static_cast<float>(std::exp(static_cast<double>(z[k]) - zmax) / total);
  }
  return out;
}

Tensor softmax_backward(const Tensor& upstream, const Tensor& probs) {
  if (upstream.size() != probs.size()) throw ShapeError("softmax_backward: shape mismatch");
  const auto [rows, K] = rows_and_channels(probs);
  Tensor dz(probs.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* p = probs.raw() + r * K;
    const float* u = upstream.raw() + r * K;
    double dot = 0.0;
    for (std::size_t k = 0; k < K; ++k) dot += static_cast<double>(p[k]) * u[k];
    for (std::size_t k = 0; k < K; ++k) dz[r * K + k] = static_cast<float>(p[k] * (u[k] - dot));
  }
  return dz;
}

double cross_entropy_loss(std::span<const float> probs, std::size_t target) {
  if (target >= probs.size()) throw std::out_of_range("cross_entropy_loss: target class out of range");
  return -std::log(std::max(static_cast<double>(probs[target]), kProbabilityFloor));
}

LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const auto [rows, K] = rows_and_channels(logits);
  if (targets.size() != rows) throw ShapeError("softmax_cross_entropy: one target per row required");
  LossAndGrad r;
  r.probs = softmax(logits);
  r.grad = Tensor(logits.shape());
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(rows);
  for (std::size_t b = 0; b < rows; ++b) {
    const int t = targets[b];
    if (t < 0 || static_cast<std::size_t>(t) >= K)
      throw std::out_of_range("softmax_cross_entropy: target class out of range");
    const auto row = r.probs.data().subspan(b * K, K);
    total += cross_entropy_loss(row, static_cast<std::size_t>(t));
    for (std::size_t k = 0; k < K; ++k) {
      const double onehot = static_cast<std::size_t>(t) == k ? 1.0 : 0.0;
      r.grad[b * K + k] = static_cast<float>((row[k] - onehot) * inv);
    }
  }
  r.loss = total * inv;
  return r;
}

}  // namespace gaitworks
