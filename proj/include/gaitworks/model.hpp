#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaitworks/gait_types.hpp"
#include "gaitworks/layers.hpp"

namespace gaitworks {

/// Layer plan of the gait CNN. The default plan is five stride-2 3x3 convolutions with
/// filters [32, 32, 32, 64, 64], each followed by batch norm then ReLU, then
/// flatten -> dense 512 -> ReLU -> dropout 0.5 -> dense 5 -> softmax.
struct ModelConfig {
  std::vector<LayerSpec> layers;
  std::size_t input_height = kEnergySize;
  std::size_t input_width = kEnergySize;
  std::size_t input_channels = 1;
  std::size_t classes = kNumClasses;
  BatchNormConfig batchnorm;

  static ModelConfig gait_cnn(std::size_t input_size = kEnergySize);

  /// Throws std::invalid_argument describing the first violation.
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.layers == b.layers && a.input_height == b.input_height && a.input_width == b.input_width &&
           a.input_channels == b.input_channels && a.classes == b.classes &&
           a.batchnorm.epsilon == b.batchnorm.epsilon && a.batchnorm.momentum == b.batchnorm.momentum;
  }
};

/// Closed-form count derived from the layer plan alone (no layer objects involved).
struct ParameterBudget {
  std::size_t trainable = 0;
  std::size_t running_stats = 0;
  std::size_t total() const { return trainable + running_stats; }
};
ParameterBudget count_parameters(const ModelConfig& config);

struct ForwardTrace {
  std::vector<LayerCache> caches;
  std::size_t end = 0;
};

class Model {
 public:
  explicit Model(ModelConfig config, EnergyKind kind = EnergyKind::gei);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  EnergyKind kind() const { return kind_; }
  void set_kind(EnergyKind kind) { kind_ = kind; }

  std::size_t layer_count() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  /// Per-sample shape produced by layer i.
  const Shape& output_shape(std::size_t i) const { return shapes_.at(i + 1); }
  Shape input_shape() const { return shapes_.front(); }

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::vector<float>*> running_state();
  std::vector<const std::vector<float>*> running_state() const;

  std::size_t trainable_count() const;
  std::size_t running_stat_count() const;
  std::size_t total_parameter_count() const { return trainable_count() + running_stat_count(); }

  /// Index of the final softmax; forwarding up to it yields the logits.
  std::size_t logits_end() const { return layers_.size() - 1; }
  /// Layer indices of the convolutions, in order.
  std::vector<std::size_t> conv_layers() const;
  /// Index of the layer whose output is the post-activation feature map of conv number `conv_index`.
  std::size_t activation_layer(std::size_t conv_index) const;

  void initialize(Rng& rng);

  /// Runs layers [0, end) on a batched input (leading batch axis). When `trace` is given, every
  /// layer input is retained for a later backward pass.
  Tensor forward(const Tensor& batch, Mode mode, Rng* rng, ForwardTrace* trace = nullptr,
                 std::optional<std::size_t> end = std::nullopt) const;

  /// Propagates `upstream` (gradient w.r.t. the output of layer end-1) down to the input of layer
  /// `begin`. `param_grads`, when non-empty, has one buffer per tensor of parameters().
  Tensor backward(const ForwardTrace& trace, Tensor upstream, std::size_t end, std::size_t begin,
                  std::span<const std::span<float>> param_grads, bool need_input_grad = true) const;

  /// Folds batch statistics from a train-mode trace into the running statistics.
  void commit(const ForwardTrace& trace);

 private:
  void build_layers();

  ModelConfig config_;
  EnergyKind kind_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<Shape> shapes_;
  std::vector<std::size_t> param_offsets_;  // first parameter-tensor index per layer
};

/// build_model: allocates and initializes a model for `config`.
Model build_model(const ModelConfig& config, Rng& rng, EnergyKind kind = EnergyKind::gei);

/// Stacks 2-D images into an N x H x W x 1 tensor.
Tensor make_batch(std::span<const GrayImage* const> images);
Tensor make_batch(const GrayImage& image);

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Model file: "GMD1", u16 version, u8 representation kind, u32 JSON length + JSON config,
/// little-endian f32 parameter blobs then running statistics in layer order, trailing CRC32 over
/// every preceding byte.
std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

inline constexpr std::uint16_t kModelFormatVersion = 1;
/// Bytes before the float blobs, for a given JSON header length.
std::size_t model_header_bytes(std::size_t json_length);
inline constexpr std::size_t kModelTrailerBytes = 4;

}  // namespace gaitworks
