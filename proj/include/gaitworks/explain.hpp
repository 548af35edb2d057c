#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gaitworks/model.hpp"
#include "gaitworks/png_io.hpp"

namespace gaitworks {

enum class HeatMethod { saliency, gradcam };

std::string method_name(HeatMethod m);
std::optional<HeatMethod> parse_method(const std::string& name);

/// Input-sized map in [0,1]; the maximum is 1 unless every value is 0.
struct HeatMap {
  GrayImage values;
  int target_class = 0;
  HeatMethod method = HeatMethod::saliency;
  std::optional<std::size_t> source_layer;  // conv ordinal, grad-CAM only
};

/// Class score = pre-softmax logit. Unset targets fall back to the predicted class.
float class_score(const Model& model, const GrayImage& image, int target_class);

/// |d score / d pixel|, max-normalized. Inference mode throughout.
HeatMap saliency(const Model& model, const EnergyImage& image, std::optional<int> target_class = std::nullopt);

/// ReLU(sum_k alpha_k A_k) at the post-activation output of conv `conv_index` (0-based), alpha_k
/// the spatial mean of d score / d A_k, bilinearly upsampled to the input size, max-normalized.
HeatMap grad_cam(const Model& model, const EnergyImage& image, std::size_t conv_index,
                 std::optional<int> target_class = std::nullopt);

/// Post-activation maps of conv `conv_index`, one per channel, each min-max normalized on its own
/// (a constant channel maps to 0).
std::vector<GrayImage> feature_maps(const Model& model, const EnergyImage& image, std::size_t conv_index);
GrayImage feature_map(const Model& model, const EnergyImage& image, std::size_t conv_index, std::size_t channel);

/// Per conv layer: ordinal, model layer index, channels, spatial size.
struct ConvLayerInfo {
  std::size_t index = 0;
  std::size_t layer = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};
std::vector<ConvLayerInfo> conv_layer_table(const Model& model);

/// Fraction of the map's total mass in rows [height/2, height).
double lower_half_mass(const GrayImage& map);

/// Dark-to-warm colour ramp (inferno-like) for t in [0,1].
std::array<std::uint8_t, 3> heat_color(double t);
/// Alpha blend of the ramp-coloured map over the grayscale base image.
RawImage render_overlay(const GrayImage& base, const GrayImage& heat, double alpha = 0.6);

}  // namespace gaitworks
