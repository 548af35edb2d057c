#include "gaitworks/nadam.hpp"

#include <cmath>
#include <stdexcept>

namespace gaitworks {

NadamState NadamState::zeros(std::size_t parameter_count, double learning_rate) {
  NadamState s;
  s.first_moment.assign(parameter_count, 0.0f);
  s.second_moment.assign(parameter_count, 0.0f);
  s.learning_rate = learning_rate;
  return s;
}

namespace {

struct Corrections {
  double first_now;   // 1 / (1 - beta1^t)
  double first_next;  // 1 / (1 - beta1^(t+1))
  double second;      // 1 / (1 - beta2^t)
};

Corrections corrections_for(const NadamState& s, std::int64_t t) {
  const double td = static_cast<double>(t);
  return {1.0 / (1.0 - std::pow(s.beta1, td)), 1.0 / (1.0 - std::pow(s.beta1, td + 1.0)),
          1.0 / (1.0 - std::pow(s.beta2, td))};
}

void update_range(float* p, const float* g, float* m, float* v, std::size_t n, const NadamState& s,
                  const Corrections& c) {
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = g[i];
    const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
    const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
    const double m_hat = s.beta1 * mi * c.first_next + (1.0 - s.beta1) * gi * c.first_now;
    const double v_hat = vi * c.second;
    p[i] = static_cast<float>(static_cast<double>(p[i]) - s.learning_rate * m_hat / (std::sqrt(v_hat) + s.epsilon));
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
  }
}

}  // namespace

void nadam_step(std::span<float> params, std::span<const float> grads, NadamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size())
    throw std::invalid_argument("nadam_step: parameter, gradient and moment buffers differ in length");
  const Corrections c = corrections_for(state, state.step + 1);
  update_range(params.data(), grads.data(), state.first_moment.data(), state.second_moment.data(), params.size(),
               state, c);
  ++state.step;
}

void nadam_step(std::span<Tensor* const> params, NadamState& state) {
  std::size_t total = 0;
  for (const Tensor* p : params) total += p->size();
  if (total != state.first_moment.size() || total != state.second_moment.size())
    throw std::invalid_argument("nadam_step: moment buffers do not match the parameter store");
  const Corrections c = corrections_for(state, state.step + 1);
  std::size_t offset = 0;
  for (Tensor* p : params) {
    auto g = p->grad();
    update_range(p->raw(), g.data(), state.first_moment.data() + offset, state.second_moment.data() + offset,
                 p->size(), state, c);
    offset += p->size();
  }
  ++state.step;
}

}  // namespace gaitworks
