#include "gaitworks/explain.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gaitworks/classifier.hpp"

namespace gaitworks {
namespace {

void check_input(const Model& model, const EnergyImage& image) {
  const auto& cfg = model.config();
  if (static_cast<std::size_t>(image.pixels.width) != cfg.input_width ||
      static_cast<std::size_t>(image.pixels.height) != cfg.input_height)
    throw std::invalid_argument("image is " + std::to_string(image.pixels.width) + "x" +
                                std::to_string(image.pixels.height) + ", model expects " +
                                std::to_string(cfg.input_width) + "x" + std::to_string(cfg.input_height));
  if (image.kind != model.kind())
    throw std::invalid_argument("image representation " + std::string(kind_name(image.kind)) +
                                " does not match the model's " + std::string(kind_name(model.kind())));
}

int resolve_target(const Tensor& logits, std::optional<int> target) {
  const int k = static_cast<int>(logits.dim(1));
  if (!target) return argmax(std::span<const float>(logits.raw(), static_cast<std::size_t>(k)));
  if (*target < 0 || *target >= k)
    throw std::invalid_argument("target class " + std::to_string(*target) + " out of range [0, " +
                                std::to_string(k) + ")");
  return *target;
}

void normalize_max(GrayImage& map) {
  const float peak = *std::max_element(map.pixels.begin(), map.pixels.end());
  if (!(peak > 0.0f)) {
    std::fill(map.pixels.begin(), map.pixels.end(), 0.0f);
    return;
  }
  for (float& v : map.pixels) v = std::min(1.0f, v / peak);
}

std::size_t checked_conv(const Model& model, std::size_t conv_index) {
  const auto convs = model.conv_layers();
  if (conv_index >= convs.size())
    throw std::out_of_range("conv layer " + std::to_string(conv_index) + " does not exist; valid layers are 0.." +
                            std::to_string(convs.size() - 1));
  return model.activation_layer(conv_index);
}

}  // namespace

std::string method_name(HeatMethod m) { return m == HeatMethod::saliency ? "saliency" : "gradcam"; }

std::optional<HeatMethod> parse_method(const std::string& name) {
  if (name == "saliency") return HeatMethod::saliency;
  if (name == "gradcam" || name == "grad-cam" || name == "grad_cam") return HeatMethod::gradcam;
  return std::nullopt;
}

float class_score(const Model& model, const GrayImage& image, int target_class) {
  const Tensor logits = model.forward(make_batch(image), Mode::infer, nullptr, nullptr, model.logits_end());
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= logits.dim(1))
    throw std::invalid_argument("target class out of range");
  return logits.raw()[target_class];
}

HeatMap saliency(const Model& model, const EnergyImage& image, std::optional<int> target_class) {
  check_input(model, image);
  ForwardTrace trace;
  const std::size_t end = model.logits_end();
  const Tensor logits = model.forward(make_batch(image.pixels), Mode::infer, nullptr, &trace, end);
  const int target = resolve_target(logits, target_class);
  Tensor upstream(logits.shape());
  upstream.raw()[target] = 1.0f;
  const Tensor grad = model.backward(trace, std::move(upstream), end, 0, {}, true);

  HeatMap out;
  out.method = HeatMethod::saliency;
  out.target_class = target;
  out.values = GrayImage(image.pixels.width, image.pixels.height);
  for (std::size_t i = 0; i < out.values.area(); ++i) out.values.pixels[i] = std::abs(grad.raw()[i]);
  normalize_max(out.values);
  return out;
}

HeatMap grad_cam(const Model& model, const EnergyImage& image, std::size_t conv_index, std::optional<int> target_class) {
  check_input(model, image);
  const std::size_t act = checked_conv(model, conv_index);
  ForwardTrace trace;
  const std::size_t end = model.logits_end();
  const Tensor logits = model.forward(make_batch(image.pixels), Mode::infer, nullptr, &trace, end);
  const int target = resolve_target(logits, target_class);
  Tensor upstream(logits.shape());
  upstream.raw()[target] = 1.0f;
  // Gradient at the input of layer act+1 is the gradient w.r.t. the activation A.
  const Tensor dA = model.backward(trace, std::move(upstream), end, act + 1, {}, true);
  const Tensor& A = trace.caches[act + 1].input;
  const std::size_t H = A.dim(1), W = A.dim(2), C = A.dim(3);

  std::vector<double> alpha(C, 0.0);
  for (std::size_t p = 0; p < H * W; ++p)
    for (std::size_t c = 0; c < C; ++c) alpha[c] += dA.raw()[p * C + c];
  for (double& a : alpha) a /= static_cast<double>(H * W);

  GrayImage cam(static_cast<int>(W), static_cast<int>(H));
  for (std::size_t p = 0; p < H * W; ++p) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += alpha[c] * A.raw()[p * C + c];
    cam.pixels[p] = static_cast<float>(std::max(0.0, s));
  }
  HeatMap out;
  out.method = HeatMethod::gradcam;
  out.target_class = target;
  out.source_layer = conv_index;
  out.values = resize_bilinear(cam, image.pixels.width, image.pixels.height);
  normalize_max(out.values);
  return out;
}

std::vector<GrayImage> feature_maps(const Model& model, const EnergyImage& image, std::size_t conv_index) {
  check_input(model, image);
  const std::size_t act = checked_conv(model, conv_index);
  const Tensor A = model.forward(make_batch(image.pixels), Mode::infer, nullptr, nullptr, act + 1);
  const std::size_t H = A.dim(1), W = A.dim(2), C = A.dim(3);
  std::vector<GrayImage> maps;
  maps.reserve(C);
  for (std::size_t c = 0; c < C; ++c) {
    GrayImage m(static_cast<int>(W), static_cast<int>(H));
    float lo = A.raw()[c], hi = lo;
    for (std::size_t p = 0; p < H * W; ++p) {
      const float v = A.raw()[p * C + c];
      m.pixels[p] = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const float range = hi - lo;
    for (float& v : m.pixels) v = range > 0.0f ? (v - lo) / range : 0.0f;
    maps.push_back(std::move(m));
  }
  return maps;
}

GrayImage feature_map(const Model& model, const EnergyImage& image, std::size_t conv_index, std::size_t channel) {
  auto maps = feature_maps(model, image, conv_index);
  if (channel >= maps.size())
    throw std::out_of_range("channel " + std::to_string(channel) + " out of range [0, " + std::to_string(maps.size()) +
                            ")");
  return std::move(maps[channel]);
}

std::vector<ConvLayerInfo> conv_layer_table(const Model& model) {
  std::vector<ConvLayerInfo> out;
  const auto convs = model.conv_layers();
  for (std::size_t k = 0; k < convs.size(); ++k) {
    const Shape& s = model.output_shape(convs[k]);
    out.push_back({k, convs[k], s[2], s[0], s[1]});
  }
  return out;
}

double lower_half_mass(const GrayImage& map) {
  double total = 0.0, lower = 0.0;
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      total += map.at(x, y);
      if (y >= map.height / 2) lower += map.at(x, y);
    }
  return total > 0.0 ? lower / total : 0.0;
}

std::array<std::uint8_t, 3> heat_color(double t) {
  static constexpr std::array<std::array<double, 3>, 9> stops = {{{0, 0, 4},
                                                                   {31, 12, 72},
                                                                   {85, 15, 109},
                                                                   {136, 34, 106},
                                                                   {186, 54, 85},
                                                                   {227, 89, 51},
                                                                   {249, 140, 10},
                                                                   {249, 201, 50},
                                                                   {252, 255, 164}}};
  const double x = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * (stops.size() - 1);
  const std::size_t i = std::min(static_cast<std::size_t>(x), stops.size() - 2);
  const double f = x - static_cast<double>(i);
  std::array<std::uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c)
    out[c] = static_cast<std::uint8_t>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c])));
  return out;
}

RawImage render_overlay(const GrayImage& base, const GrayImage& heat, double alpha) {
  if (base.width != heat.width || base.height != heat.height)
    throw std::invalid_argument("render_overlay: base and heat map differ in size");
  RawImage out{base.width, base.height, 3, std::vector<std::uint8_t>(base.area() * 3)};
  for (std::size_t i = 0; i < base.area(); ++i) {
    const double g = 255.0 * std::clamp(static_cast<double>(base.pixels[i]), 0.0, 1.0);
    const auto c = heat_color(heat.pixels[i]);
    for (int k = 0; k < 3; ++k)
      out.pixels[i * 3 + k] = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * g + alpha * c[k]));
  }
  return out;
}

}  // namespace gaitworks
