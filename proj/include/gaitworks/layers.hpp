#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gaitworks/ops.hpp"
#include "gaitworks/tensor.hpp"

namespace gaitworks {

enum class LayerKind { conv2d, batchnorm, relu, flatten, dense, dropout, softmax };

std::string layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t filters = 0;  // conv2d
  std::size_t kernel = 3;   // conv2d
  std::size_t stride = 2;   // conv2d
  Padding padding = Padding::same;
  std::size_t units = 0;    // dense
  float rate = 0.0f;        // dropout

  static LayerSpec conv(std::size_t filters, std::size_t kernel = 3, std::size_t stride = 2,
                        Padding padding = Padding::same);
  static LayerSpec batchnorm();
  static LayerSpec relu();
  static LayerSpec flatten();
  static LayerSpec dense(std::size_t units);
  static LayerSpec dropout(float rate);
  static LayerSpec softmax();

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Per-layer scratch from a forward pass, consumed by the matching backward pass.
struct LayerCache {
  Tensor input;
  BatchNormCache batchnorm;
  std::vector<float> dropout_mask;
  Tensor output;  // kept for softmax backward
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  /// Per-sample output shape for a per-sample input shape.
  virtual Shape output_shape(const Shape& input) const = 0;

  /// `x` always carries a leading batch axis.
  virtual Tensor forward(const Tensor& x, Mode mode, Rng* rng, LayerCache& cache) const = 0;
  /// Returns the input gradient (empty when `need_input_grad` is false). When `param_grads` is
  /// non-empty it holds one buffer per parameter tensor and receives accumulated gradients.
  virtual Tensor backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>> param_grads,
                          bool need_input_grad) const = 0;

  virtual std::vector<Tensor*> parameters() { return {}; }
  virtual std::vector<const Tensor*> parameters() const { return {}; }
  /// Non-trainable state serialized with the model (batch-norm running statistics).
  virtual std::vector<std::vector<float>*> state() { return {}; }
  virtual std::vector<const std::vector<float>*> state() const { return {}; }

  virtual void initialize(Rng&) {}
  /// Folds statistics gathered in a train-mode forward pass into persistent state.
  virtual void commit(const LayerCache&) {}
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const Shape& input_shape, const BatchNormConfig& bn);

class Conv2dLayer final : public Layer {
 public:
  Conv2dLayer(std::size_t in_channels, const LayerSpec& spec);
  LayerKind kind() const override { return LayerKind::conv2d; }
  Shape output_shape(const Shape& input) const override;
  Tensor forward(const Tensor& x, Mode mode, Rng* rng, LayerCache& cache) const override;
  Tensor backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>> param_grads,
                  bool need_input_grad) const override;
  std::vector<Tensor*> parameters() override { return {&kernels_, &bias_}; }
  std::vector<const Tensor*> parameters() const override { return {&kernels_, &bias_}; }
  void initialize(Rng& rng) override;

  const Tensor& kernels() const { return kernels_; }
  std::size_t filters() const { return kernels_.dim(3); }

 private:
  std::size_t stride_;
  Padding padding_;
  Tensor kernels_;
  Tensor bias_;
};

class BatchNormLayer final : public Layer {
 public:
  BatchNormLayer(std::size_t channels, BatchNormConfig cfg);
  LayerKind kind() const override { return LayerKind::batchnorm; }
  Shape output_shape(const Shape& input) const override { return input; }
  Tensor forward(const Tensor& x, Mode mode, Rng* rng, LayerCache& cache) const override;
  Tensor backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>> param_grads,
                  bool need_input_grad) const override;
  std::vector<Tensor*> parameters() override { return {&gamma_, &beta_}; }
  std::vector<const Tensor*> parameters() const override { return {&gamma_, &beta_}; }
  std::vector<std::vector<float>*> state() override { return {&running_.mean, &running_.variance}; }
  std::vector<const std::vector<float>*> state() const override { return {&running_.mean, &running_.variance}; }
  void commit(const LayerCache& cache) override;

  const RunningStats& running() const { return running_; }

 private:
  BatchNormConfig cfg_;
  Tensor gamma_;
  Tensor beta_;
  RunningStats running_;
};

class ReluLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::relu; }
  Shape output_shape(const Shape& input) const override { return input; }
  Tensor forward(const Tensor& x, Mode mode, Rng* rng, LayerCache& cache) const override;
  Tensor backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>> param_grads,
                  bool need_input_grad) const override;
};

class FlattenLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::flatten; }
  Shape output_shape(const Shape& input) const override { return {shape_size(input)}; }
  Tensor forward(const Tensor& x, Mode mode, Rng* rng, LayerCache& cache) const override;
  Tensor backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>> param_grads,
                  bool need_input_grad) const override;
};

class DenseLayer final : public Layer {
 public:
  DenseLayer(std::size_t inputs, std::size_t units);
  LayerKind kind() const override { return LayerKind::dense; }
  Shape output_shape(const Shape& input) const override;
  Tensor forward(const Tensor& x, Mode mode, Rng* rng, LayerCache& cache) const override;
  Tensor backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>> param_grads,
                  bool need_input_grad) const override;
  std::vector<Tensor*> parameters() override { return {&weights_, &bias_}; }
  std::vector<const Tensor*> parameters() const override { return {&weights_, &bias_}; }
  void initialize(Rng& rng) override;

 private:
  Tensor weights_;
  Tensor bias_;
};

class DropoutLayer final : public Layer {
 public:
  explicit DropoutLayer(float rate);
  LayerKind kind() const override { return LayerKind::dropout; }
  Shape output_shape(const Shape& input) const override { return input; }
  Tensor forward(const Tensor& x, Mode mode, Rng* rng, LayerCache& cache) const override;
  Tensor backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>> param_grads,
                  bool need_input_grad) const override;

 private:
  float rate_;
};

class SoftmaxLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::softmax; }
  Shape output_shape(const Shape& input) const override { return input; }
  Tensor forward(const Tensor& x, Mode mode, Rng* rng, LayerCache& cache) const override;
  Tensor backward(const LayerCache& cache, const Tensor& upstream, std::span<const std::span<float>> param_grads,
                  bool need_input_grad) const override;
};

}  // namespace gaitworks
