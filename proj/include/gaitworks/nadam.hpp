#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gaitworks/tensor.hpp"

namespace gaitworks {

/// Adam with Nesterov look-ahead on the first moment.
struct NadamState {
  std::int64_t step = 0;
  std::vector<float> first_moment;
  std::vector<float> second_moment;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
  double learning_rate = 1e-3;

  static NadamState zeros(std::size_t parameter_count, double learning_rate = 1e-3);
};

/// One update over a flat parameter buffer. `state.step` is incremented once.
void nadam_step(std::span<float> params, std::span<const float> grads, NadamState& state);

/// One update over several tensors treated as a single concatenated buffer; gradients are read
/// from each tensor's grad slot.
void nadam_step(std::span<Tensor* const> params, NadamState& state);

}  // namespace gaitworks
