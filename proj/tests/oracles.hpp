#pragma once

// Independent reference computations used by the tests. Nothing here calls into the
// implementation paths it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gaitworks/tensor.hpp"

namespace oracle {

using gaitworks::Shape;
using gaitworks::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

/// Direct sliding-window convolution on a single HxWxC image, "same" padding split as
/// floor(total/2) before and the rest after.
inline std::vector<double> naive_conv_same(const Tensor& in, const Tensor& k, const Tensor& b, int stride) {
  const int H = static_cast<int>(in.dim(0)), W = static_cast<int>(in.dim(1)), C = static_cast<int>(in.dim(2));
  const int KH = static_cast<int>(k.dim(0)), KW = static_cast<int>(k.dim(1)), F = static_cast<int>(k.dim(3));
  const int OH = (H + stride - 1) / stride, OW = (W + stride - 1) / stride;
  const int pad_h = std::max((OH - 1) * stride + KH - H, 0) / 2;
  const int pad_w = std::max((OW - 1) * stride + KW - W, 0) / 2;
  std::vector<double> out(static_cast<std::size_t>(OH) * OW * F, 0.0);
  for (int oy = 0; oy < OH; ++oy)
    for (int ox = 0; ox < OW; ++ox)
      for (int f = 0; f < F; ++f) {
        double s = b[f];
        for (int ky = 0; ky < KH; ++ky)
          for (int kx = 0; kx < KW; ++kx)
            for (int c = 0; c < C; ++c) {
              const int iy = oy * stride + ky - pad_h, ix = ox * stride + kx - pad_w;
              if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
              s += static_cast<double>(in[(iy * W + ix) * C + c]) * k[((ky * KW + kx) * C + c) * F + f];
            }
        out[(oy * OW + ox) * F + f] = s;
      }
  return out;
}

/// Weighted-sum probe loss: sum_i w_i * y_i, accumulated in double.
inline double probe(const Tensor& y, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<double>(y[i]) * w[i];
  return s;
}

/// Central finite difference of `loss` with respect to every element of `x` (or a subset).
inline std::vector<double> finite_difference(Tensor& x, const std::function<double()>& loss, double h,
                                             const std::vector<std::size_t>& indices) {
  std::vector<double> g;
  g.reserve(indices.size());
  for (auto i : indices) {
    const float orig = x[i];
    x[i] = static_cast<float>(orig + h);
    const double up = loss();
    x[i] = static_cast<float>(orig - h);
    const double down = loss();
    x[i] = orig;
    const double actual_h = (static_cast<double>(static_cast<float>(orig + h)) -
                             static_cast<double>(static_cast<float>(orig - h))) / 2.0;
    g.push_back((up - down) / (2.0 * actual_h));
  }
  return g;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  if (k >= n) return all_indices(n);
  std::vector<std::size_t> v = all_indices(n);
  std::shuffle(v.begin(), v.end(), rng);
  v.resize(k);
  std::sort(v.begin(), v.end());
  return v;
}

/// Norm-wise relative error ||a - n|| / max(||a||, ||n||).
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

inline std::vector<double> gather(std::span<const float> values, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(values[i]);
  return out;
}

/// Scalar Nadam transcription: one step from given moments.
struct ScalarNadam {
  double m = 0.0, v = 0.0;
  long t = 0;
  double step(double theta, double g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-7) {
    t += 1;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double m_hat = b1 * m / (1 - std::pow(b1, t + 1)) + (1 - b1) * g / (1 - std::pow(b1, t));
    const double v_hat = v / (1 - std::pow(b2, t));
    return theta - lr * m_hat / (std::sqrt(v_hat) + eps);
  }
};

}  // namespace oracle
