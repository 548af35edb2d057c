#include "gaitworks/layers.hpp"

#include <algorithm>
#include <cmath>

namespace gaitworks {

std::string layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

LayerKind parse_layer_kind(const std::string& name) {
  for (auto k : {LayerKind::conv2d, LayerKind::batchnorm, LayerKind::relu, LayerKind::flatten, LayerKind::dense,
                 LayerKind::dropout, LayerKind::softmax})
    if (layer_kind_name(k) == name) return k;
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv(std::size_t filters, std::size_t kernel, std::size_t stride, Padding padding) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.filters = filters;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}
LayerSpec LayerSpec::batchnorm() { return LayerSpec{.kind = LayerKind::batchnorm}; }
LayerSpec LayerSpec::relu() { return LayerSpec{.kind = LayerKind::relu}; }
LayerSpec LayerSpec::flatten() { return LayerSpec{.kind = LayerKind::flatten}; }
LayerSpec LayerSpec::dense(std::size_t units) { return LayerSpec{.kind = LayerKind::dense, .units = units}; }
LayerSpec LayerSpec::dropout(float rate) { return LayerSpec{.kind = LayerKind::dropout, .rate = rate}; }
LayerSpec LayerSpec::softmax() { return LayerSpec{.kind = LayerKind::softmax}; }

namespace {

void he_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<float>((2.0 * uniform01(rng) - 1.0) * limit);
}

void accumulate(std::span<float> dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const Shape& input_shape, const BatchNormConfig& bn) {
  switch (spec.kind) {
    case LayerKind::conv2d:
      if (input_shape.size() != 3) throw ShapeError("conv2d expects an HxWxC input, got " + shape_string(input_shape));
      return std::make_unique<Conv2dLayer>(input_shape[2], spec);
    case LayerKind::batchnorm:
      return std::make_unique<BatchNormLayer>(input_shape.back(), bn);
    case LayerKind::relu: return std::make_unique<ReluLayer>();
    case LayerKind::flatten: return std::make_unique<FlattenLayer>();
    case LayerKind::dense:
      if (input_shape.size() != 1) throw ShapeError("dense expects a flat input, got " + shape_string(input_shape));
      return std::make_unique<DenseLayer>(input_shape[0], spec.units);
    case LayerKind::dropout: return std::make_unique<DropoutLayer>(spec.rate);
    case LayerKind::softmax: return std::make_unique<SoftmaxLayer>();
  }
  throw std::invalid_argument("unsupported layer kind");
}

// --- conv2d

Conv2dLayer::Conv2dLayer(std::size_t in_channels, const LayerSpec& spec)
    : stride_(spec.stride),
      padding_(spec.padding),
      kernels_(Shape{spec.kernel, spec.kernel, in_channels, spec.filters}),
      bias_(Shape{spec.filters}) {
  if (spec.filters == 0 || spec.kernel == 0 || spec.stride == 0)
    throw std::invalid_argument("conv2d needs positive filters, kernel and stride");
}

Shape Conv2dLayer::output_shape(const Shape& input) const {
  const auto g = conv_geometry(input, kernels_.shape(), stride_, padding_);
  return {g.out_h, g.out_w, g.filters};
}

Tensor Conv2dLayer::forward(const Tensor& x, Mode, Rng*, LayerCache&) const {
  return conv2d_forward(x, kernels_, bias_, stride_, padding_);
}

Tensor Conv2dLayer::backward(const LayerCache& cache, const Tensor& upstream,
                             std::span<const std::span<float>> param_grads, bool need_input_grad) const {
  auto g = conv2d_backward(upstream, cache.input, kernels_, stride_, padding_, need_input_grad);
  if (!param_grads.empty()) {
    accumulate(param_grads[0], g.kernels);
    accumulate(param_grads[1], g.bias);
  }
  return std::move(g.input);
}

void Conv2dLayer::initialize(Rng& rng) {
  he_uniform(kernels_, kernels_.dim(0) * kernels_.dim(1) * kernels_.dim(2), rng);
  bias_.fill(0.0f);
}

// --- batchnorm

BatchNormLayer::BatchNormLayer(std::size_t channels, BatchNormConfig cfg)
    : cfg_(cfg),
      gamma_(Shape{channels}, 1.0f),
      beta_(Shape{channels}, 0.0f),
      running_(RunningStats::identity(channels)) {}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode, Rng*, LayerCache& cache) const {
  if (mode == Mode::infer) return batchnorm_infer(x, gamma_, beta_, running_, cfg_, &cache.batchnorm);
  return batchnorm_forward(x, gamma_, beta_, Mode::train, nullptr, cfg_, &cache.batchnorm);
}

Tensor BatchNormLayer::backward(const LayerCache& cache, const Tensor& upstream,
                                std::span<const std::span<float>> param_grads, bool) const {
  auto g = batchnorm_backward(upstream, cache.batchnorm, gamma_);
  if (!param_grads.empty()) {
    accumulate(param_grads[0], g.gamma);
    accumulate(param_grads[1], g.beta);
  }
  return std::move(g.input);
}

void BatchNormLayer::commit(const LayerCache& cache) {
  if (cache.batchnorm.mode != Mode::train) return;
  update_running_stats(running_, cache.batchnorm.batch_mean, cache.batchnorm.batch_var, cfg_.momentum);
}

// --- relu / flatten

Tensor ReluLayer::forward(const Tensor& x, Mode, Rng*, LayerCache&) const { return relu_forward(x); }

Tensor ReluLayer::backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>>,
                           bool) const {
  return relu_backward(upstream, cache.input);
}

Tensor FlattenLayer::forward(const Tensor& x, Mode, Rng*, LayerCache&) const {
  const std::size_t batch = x.dim(0);
  return x.reshaped({batch, x.size() / batch});
}

Tensor FlattenLayer::backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>>,
                              bool) const {
  return upstream.reshaped(cache.input.shape());
}

// --- dense

DenseLayer::DenseLayer(std::size_t inputs, std::size_t units)
    : weights_(Shape{inputs, units}), bias_(Shape{units}) {}

Shape DenseLayer::output_shape(const Shape& input) const {
  if (shape_size(input) != weights_.dim(0))
    throw ShapeError("dense layer expects " + std::to_string(weights_.dim(0)) + " inputs, got " +
                     shape_string(input));
  return {weights_.dim(1)};
}

Tensor DenseLayer::forward(const Tensor& x, Mode, Rng*, LayerCache&) const {
  return dense_forward(x, weights_, bias_);
}

Tensor DenseLayer::backward(const LayerCache& cache, const Tensor& upstream,
                            std::span<const std::span<float>> param_grads, bool) const {
  auto g = dense_backward(upstream, cache.input, weights_);
  if (!param_grads.empty()) {
    accumulate(param_grads[0], g.weights);
    accumulate(param_grads[1], g.bias);
  }
  return std::move(g.input);
}

void DenseLayer::initialize(Rng& rng) {
  he_uniform(weights_, weights_.dim(0), rng);
  bias_.fill(0.0f);
}

// --- dropout

DropoutLayer::DropoutLayer(float rate) : rate_(rate) {
  if (!(rate >= 0.0f && rate < 1.0f)) throw std::invalid_argument("dropout rate must be in [0,1)");
}

Tensor DropoutLayer::forward(const Tensor& x, Mode mode, Rng* rng, LayerCache& cache) const {
  if (mode == Mode::train && rate_ > 0.0f) {
    if (!rng) throw std::invalid_argument("dropout in train mode needs an rng");
    return dropout_forward(x, rate_, mode, *rng, &cache.dropout_mask);
  }
  cache.dropout_mask.assign(x.size(), 1.0f);
  Tensor out = x;
  out.drop_grad();
  return out;
}

Tensor DropoutLayer::backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>>,
                              bool) const {
  return dropout_backward(upstream, cache.dropout_mask);
}

// --- softmax

Tensor SoftmaxLayer::forward(const Tensor& x, Mode, Rng*, LayerCache& cache) const {
  Tensor p = softmax(x);
  cache.output = p;
  return p;
}

Tensor SoftmaxLayer::backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>>,
                              bool) const {
  return softmax_backward(upstream, cache.output);
}

}  // namespace gaitworks
