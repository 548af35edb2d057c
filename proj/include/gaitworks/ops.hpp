#pragma once

// Forward and backward kernels for the layers of the gait CNN.
//
// Image tensors are NHWC (a rank-3 HxWxC tensor is treated as a batch of one).
// Convolution kernels are laid out KH x KW x C_in x C_out.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "gaitworks/tensor.hpp"

namespace gaitworks {

using Rng = std::mt19937_64;

/// Uniform double in [0,1) built from the raw 64-bit engine output (portable across std libs).
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Standard normal via Box-Muller on uniform01, so sequences match across standard libraries.
inline double normal01(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Independent stream seed for (seed, stream) via splitmix64.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

enum class Mode { train, infer };
enum class Padding { same, valid };

struct ConvGeometry {
  std::size_t batch, in_h, in_w, in_c;
  std::size_t out_h, out_w, filters;
  std::size_t kernel_h, kernel_w, stride;
  std::size_t pad_top, pad_left;
};

ConvGeometry conv_geometry(const Shape& input, const Shape& kernels, std::size_t stride, Padding padding);

Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
                      Padding padding = Padding::same);

struct Conv2dGrads {
  Tensor input;
  Tensor kernels;
  Tensor bias;
};

/// Gradients of a convolution. `cached_input` must be the tensor fed to the forward pass.
Conv2dGrads conv2d_backward(const Tensor& upstream, const Tensor& cached_input, const Tensor& kernels,
                            std::size_t stride, Padding padding = Padding::same, bool need_input_grad = true);

struct BatchNormConfig {
  float epsilon = 1e-3f;
  float momentum = 0.99f;
};

struct RunningStats {
  std::vector<float> mean;
  std::vector<float> variance;

  static RunningStats identity(std::size_t channels) {
    return {std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f)};
  }
};

/// Values a batch-norm forward pass leaves behind for its backward pass.
struct BatchNormCache {
  Mode mode = Mode::infer;
  Tensor normalized;               // x_hat, same shape as the input
  std::vector<float> inv_std;      // per channel
  std::vector<float> batch_mean;   // train mode only
  std::vector<float> batch_var;    // train mode only (biased)
};

/// Normalizes over every axis except the last (channel) axis.
/// In train mode the batch statistics are used and, when `running` is non-null, folded into it
/// by exponential moving average. In infer mode `running` is read only.
Tensor batchnorm_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta, Mode mode,
                         RunningStats* running, const BatchNormConfig& cfg = {},
                         BatchNormCache* cache = nullptr);

/// Same as above for inference when the caller only holds a const reference to the stats.
Tensor batchnorm_infer(const Tensor& input, const Tensor& gamma, const Tensor& beta, const RunningStats& running,
                       const BatchNormConfig& cfg = {}, BatchNormCache* cache = nullptr);

void update_running_stats(RunningStats& running, std::span<const float> batch_mean,
                          std::span<const float> batch_var, float momentum);

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

BatchNormGrads batchnorm_backward(const Tensor& upstream, const BatchNormCache& cache, const Tensor& gamma);

Tensor relu_forward(const Tensor& input);
Tensor relu_backward(const Tensor& upstream, const Tensor& cached_input);

/// `input` is N (single vector) or BxN; `weights` is NxM.
Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias);

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

DenseGrads dense_backward(const Tensor& upstream, const Tensor& cached_input, const Tensor& weights);

/// Inverted dropout. In train mode, `mask` (when given) receives the per-element scale (0 or 1/(1-rate)).
Tensor dropout_forward(const Tensor& input, float rate, Mode mode, Rng& rng, std::vector<float>* mask = nullptr);
Tensor dropout_backward(const Tensor& upstream, std::span<const float> mask);

/// Softmax over the last axis with max subtraction.
Tensor softmax(const Tensor& logits);
/// Vector-Jacobian product of softmax given its output.
Tensor softmax_backward(const Tensor& upstream, const Tensor& probs);

inline constexpr double kProbabilityFloor = 1e-12;

/// -log(probs[target]) with the probability floored at kProbabilityFloor.
double cross_entropy_loss(std::span<const float> probs, std::size_t target);

struct LossAndGrad {
  double loss = 0.0;   // mean over the batch
  Tensor probs;        // softmax output
  Tensor grad;         // d(mean loss)/d(logits) = (probs - one_hot) / batch
};

/// Fused softmax + categorical cross-entropy over a BxK logit tensor.
LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace gaitworks
