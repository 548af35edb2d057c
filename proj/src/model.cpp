#include "gaitworks/model.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace gaitworks {

using nlohmann::json;

namespace {

json spec_to_json(const LayerSpec& s) {
  json j{{"kind", layer_kind_name(s.kind)}};
  switch (s.kind) {
    case LayerKind::conv2d:
      j["filters"] = s.filters;
      j["kernel"] = s.kernel;
      j["stride"] = s.stride;
      j["padding"] = s.padding == Padding::same ? "same" : "valid";
      break;
    case LayerKind::dense: j["units"] = s.units; break;
    case LayerKind::dropout: j["rate"] = s.rate; break;
    default: break;
  }
  return j;
}

LayerSpec spec_from_json(const json& j) {
  LayerSpec s;
  s.kind = parse_layer_kind(j.at("kind").get<std::string>());
  switch (s.kind) {
    case LayerKind::conv2d:
      s.filters = j.at("filters").get<std::size_t>();
      s.kernel = j.value("kernel", std::size_t{3});
      s.stride = j.value("stride", std::size_t{2});
      s.padding = j.value("padding", std::string("same")) == "valid" ? Padding::valid : Padding::same;
      break;
    case LayerKind::dense: s.units = j.at("units").get<std::size_t>(); break;
    case LayerKind::dropout: s.rate = j.at("rate").get<float>(); break;
    default: break;
  }
  return s;
}

}  // namespace

ModelConfig ModelConfig::gait_cnn(std::size_t input_size) {
  ModelConfig c;
  c.input_height = c.input_width = input_size;
  for (std::size_t filters : {32, 32, 32, 64, 64}) {
    c.layers.push_back(LayerSpec::conv(filters));
    c.layers.push_back(LayerSpec::batchnorm());
    c.layers.push_back(LayerSpec::relu());
  }
  c.layers.push_back(LayerSpec::flatten());
  c.layers.push_back(LayerSpec::dense(512));
  c.layers.push_back(LayerSpec::relu());
  c.layers.push_back(LayerSpec::dropout(0.5f));
  c.layers.push_back(LayerSpec::dense(c.classes));
  c.layers.push_back(LayerSpec::softmax());
  return c;
}

void ModelConfig::validate() const {
  if (input_height == 0 || input_width == 0 || input_channels == 0)
    throw std::invalid_argument("model input shape must be positive");
  if (classes < 1) throw std::invalid_argument("model needs at least one class");
  if (layers.empty() || layers.back().kind != LayerKind::softmax)
    throw std::invalid_argument("model plan must end with softmax");
  const auto convs = std::count_if(layers.begin(), layers.end(), [](const LayerSpec& s) { return s.kind == LayerKind::conv2d; });
  if (convs != 5) throw std::invalid_argument("model plan must contain exactly 5 conv2d layers, found " + std::to_string(convs));
  const LayerSpec* last_dense = nullptr;
  bool flat = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    switch (s.kind) {
      case LayerKind::conv2d:
        if (flat) throw std::invalid_argument("conv2d at layer " + std::to_string(i) + " follows flatten");
        if (s.filters == 0 || s.kernel == 0 || s.stride == 0)
          throw std::invalid_argument("conv2d at layer " + std::to_string(i) + " has a zero parameter");
        break;
      case LayerKind::flatten: flat = true; break;
      case LayerKind::dense:
        if (!flat) throw std::invalid_argument("dense at layer " + std::to_string(i) + " precedes flatten");
        if (s.units == 0) throw std::invalid_argument("dense at layer " + std::to_string(i) + " has zero units");
        last_dense = &s;
        break;
      case LayerKind::dropout:
        if (!(s.rate >= 0.0f && s.rate < 1.0f))
          throw std::invalid_argument("dropout rate at layer " + std::to_string(i) + " outside [0,1)");
        break;
      case LayerKind::softmax:
        if (i + 1 != layers.size()) throw std::invalid_argument("softmax must be the final layer");
        break;
      default: break;
    }
  }
  if (!last_dense || last_dense->units != classes)
    throw std::invalid_argument("final dense layer must have one unit per class (" + std::to_string(classes) + ")");
}

std::string ModelConfig::to_json() const {
  json j;
  j["input"] = {input_height, input_width, input_channels};
  j["classes"] = classes;
  j["class_names"] = json::array();
  for (auto n : kClassNames) j["class_names"].push_back(std::string(n));
  j["batchnorm"] = {{"epsilon", batchnorm.epsilon}, {"momentum", batchnorm.momentum}};
  j["conv_block"] = "conv2d-batchnorm-relu";
  j["layers"] = json::array();
  for (const auto& s : layers) j["layers"].push_back(spec_to_json(s));
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  const auto& in = j.at("input");
  c.input_height = in.at(0).get<std::size_t>();
  c.input_width = in.at(1).get<std::size_t>();
  c.input_channels = in.at(2).get<std::size_t>();
  c.classes = j.at("classes").get<std::size_t>();
  if (j.contains("batchnorm")) {
    c.batchnorm.epsilon = j["batchnorm"].value("epsilon", 1e-3f);
    c.batchnorm.momentum = j["batchnorm"].value("momentum", 0.99f);
  }
  for (const auto& l : j.at("layers")) c.layers.push_back(spec_from_json(l));
  return c;
}

ParameterBudget count_parameters(const ModelConfig& config) {
  ParameterBudget b;
  std::size_t h = config.input_height, w = config.input_width, c = config.input_channels;
  std::size_t flat = 0;
  for (const auto& s : config.layers) {
    switch (s.kind) {
      case LayerKind::conv2d:
        b.trainable += s.kernel * s.kernel * c * s.filters + s.filters;
        if (s.padding == Padding::same) {
          h = (h + s.stride - 1) / s.stride;
          w = (w + s.stride - 1) / s.stride;
        } else {
          h = (h - s.kernel) / s.stride + 1;
          w = (w - s.kernel) / s.stride + 1;
        }
        c = s.filters;
        break;
      case LayerKind::batchnorm:
        b.trainable += 2 * (flat ? flat : c);
        b.running_stats += 2 * (flat ? flat : c);
        break;
      case LayerKind::flatten: flat = h * w * c; break;
      case LayerKind::dense:
        b.trainable += flat * s.units + s.units;
        flat = s.units;
        break;
      default: break;
    }
  }
  return b;
}

// --- Model

Model::Model(ModelConfig config, EnergyKind kind) : config_(std::move(config)), kind_(kind) {
  config_.validate();
  build_layers();
}

Model::Model(const Model& other) : config_(other.config_), kind_(other.kind_) {
  build_layers();
  auto dst = parameters();
  auto src = other.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->values() = src[i]->values();
  auto dst_state = running_state();
  auto src_state = other.running_state();
  for (std::size_t i = 0; i < dst_state.size(); ++i) *dst_state[i] = *src_state[i];
}

Model& Model::operator=(const Model& other) {
  if (this != &other) *this = Model(other);
  return *this;
}

void Model::build_layers() {
  layers_.clear();
  shapes_.clear();
  param_offsets_.clear();
  Shape shape{config_.input_height, config_.input_width, config_.input_channels};
  shapes_.push_back(shape);
  std::size_t params = 0;
  for (const auto& spec : config_.layers) {
    auto layer = make_layer(spec, shape, config_.batchnorm);
    shape = layer->output_shape(shape);
    param_offsets_.push_back(params);
    params += layer->parameters().size();
    shapes_.push_back(shape);
    layers_.push_back(std::move(layer));
  }
  param_offsets_.push_back(params);
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  for (auto& l : layers_)
    for (Tensor* p : l->parameters()) out.push_back(p);
  return out;
}

std::vector<const Tensor*> Model::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers_)
    for (const Tensor* p : std::as_const(*l).parameters()) out.push_back(p);
  return out;
}

std::vector<std::vector<float>*> Model::running_state() {
  std::vector<std::vector<float>*> out;
  for (auto& l : layers_)
    for (auto* s : l->state()) out.push_back(s);
  return out;
}

std::vector<const std::vector<float>*> Model::running_state() const {
  std::vector<const std::vector<float>*> out;
  for (const auto& l : layers_)
    for (auto* s : std::as_const(*l).state()) out.push_back(s);
  return out;
}

std::size_t Model::trainable_count() const {
  std::size_t n = 0;
  for (const Tensor* p : parameters()) n += p->size();
  return n;
}

std::size_t Model::running_stat_count() const {
  std::size_t n = 0;
  for (const auto* s : running_state()) n += s->size();
  return n;
}

std::vector<std::size_t> Model::conv_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i]->kind() == LayerKind::conv2d) out.push_back(i);
  return out;
}

std::size_t Model::activation_layer(std::size_t conv_index) const {
  const auto convs = conv_layers();
  if (conv_index >= convs.size())
    throw std::out_of_range("conv layer index " + std::to_string(conv_index) + " out of range [0, " +
                            std::to_string(convs.size()) + ")");
  std::size_t i = convs[conv_index];
  // Walk forward through the shape-preserving layers of the block up to its activation.
  std::size_t last = i;
  for (std::size_t j = i + 1; j < layers_.size(); ++j) {
    const auto k = layers_[j]->kind();
    if (k == LayerKind::batchnorm || k == LayerKind::relu) {
      last = j;
      if (k == LayerKind::relu) break;
    } else {
      break;
    }
  }
  return last;
}

void Model::initialize(Rng& rng) {
  for (auto& l : layers_) l->initialize(rng);
}

Tensor Model::forward(const Tensor& batch, Mode mode, Rng* rng, ForwardTrace* trace,
                      std::optional<std::size_t> end) const {
  const std::size_t stop = end.value_or(layers_.size());
  if (stop > layers_.size()) throw std::out_of_range("forward: end beyond last layer");
  if (batch.rank() != 4 || batch.dim(1) != config_.input_height || batch.dim(2) != config_.input_width ||
      batch.dim(3) != config_.input_channels)
    throw ShapeError("model expects input N x " + std::to_string(config_.input_height) + " x " +
                     std::to_string(config_.input_width) + " x " + std::to_string(config_.input_channels) +
                     ", got " + shape_string(batch.shape()));
  if (trace) {
    trace->caches.clear();
    trace->caches.resize(stop);
    trace->end = stop;
  }
  Tensor x = batch;
  x.drop_grad();
  LayerCache scratch;
  for (std::size_t i = 0; i < stop; ++i) {
    LayerCache& cache = trace ? trace->caches[i] : scratch;
    Tensor y = layers_[i]->forward(x, mode, rng, cache);
    if (trace)
      cache.input = std::move(x);
    x = std::move(y);
  }
  return x;
}

Tensor Model::backward(const ForwardTrace& trace, Tensor upstream, std::size_t end, std::size_t begin,
                       std::span<const std::span<float>> param_grads, bool need_input_grad) const {
  if (end > trace.end || begin > end) throw std::out_of_range("backward: invalid layer range");
  const bool with_params = !param_grads.empty();
  if (with_params && param_grads.size() != param_offsets_.back())
    throw std::invalid_argument("backward: one gradient buffer per parameter tensor required");
  for (std::size_t i = end; i-- > begin;) {
    const auto lo = param_offsets_[i], hi = param_offsets_[i + 1];
    const auto grads = with_params ? param_grads.subspan(lo, hi - lo) : std::span<const std::span<float>>{};
    const bool want_input = i > begin || need_input_grad;
    upstream = layers_[i]->backward(trace.caches[i], upstream, grads, want_input);
    if (!want_input) return Tensor{};
  }
  return upstream;
}

void Model::commit(const ForwardTrace& trace) {
  for (std::size_t i = 0; i < trace.end; ++i) layers_[i]->commit(trace.caches[i]);
}

Model build_model(const ModelConfig& config, Rng& rng, EnergyKind kind) {
  Model m(config, kind);
  m.initialize(rng);
  return m;
}

Tensor make_batch(std::span<const GrayImage* const> images) {
  if (images.empty()) throw ShapeError("make_batch: no images");
  const int w = images[0]->width, h = images[0]->height;
  Tensor t(Shape{images.size(), static_cast<std::size_t>(h), static_cast<std::size_t>(w), 1});
  std::size_t off = 0;
  for (const GrayImage* img : images) {
    if (img->width != w || img->height != h) throw ShapeError("make_batch: images differ in size");
    std::copy(img->pixels.begin(), img->pixels.end(), t.raw() + off);
    off += img->pixels.size();
  }
  return t;
}

Tensor make_batch(const GrayImage& image) {
  const GrayImage* p = &image;
  return make_batch(std::span<const GrayImage* const>(&p, 1));
}

// --- serialization

namespace {

constexpr char kMagic[4] = {'G', 'M', 'D', '1'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((value >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ModelFormatError("model file truncated");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[pos + i]) << (8 * i);
  pos += sizeof(T);
  return v;
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> values) {
  for (float f : values) put_le(out, std::bit_cast<std::uint32_t>(f));
}

void get_floats(std::span<const std::uint8_t> in, std::size_t& pos, std::span<float> values) {
  if (pos + 4 * values.size() > in.size()) throw ModelFormatError("model file truncated inside parameter data");
  for (auto& f : values) f = std::bit_cast<float>(get_le<std::uint32_t>(in, pos));
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; the model is far below 4 GiB.
  return static_cast<std::uint32_t>(crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

std::size_t model_header_bytes(std::size_t json_length) { return 4 + 2 + 1 + 4 + json_length; }

std::vector<std::uint8_t> serialize_model(const Model& model) {
  std::vector<std::uint8_t> out;
  const std::string header = model.config().to_json();
  out.reserve(model_header_bytes(header.size()) + 4 * model.total_parameter_count() + kModelTrailerBytes);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_le<std::uint16_t>(out, kModelFormatVersion);
  out.push_back(static_cast<std::uint8_t>(model.kind()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (const Tensor* p : model.parameters()) put_floats(out, p->data());
  for (const auto* s : model.running_state()) put_floats(out, *s);
  put_le<std::uint32_t>(out, crc_of(out));
  return out;
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw ModelFormatError("not a model file: bad magic bytes (expected GMD1)");
  std::size_t pos = 4;
  const auto version = get_le<std::uint16_t>(bytes, pos);
  if (version != kModelFormatVersion)
    throw ModelFormatError("unsupported model format version " + std::to_string(version) + " (expected " +
                           std::to_string(kModelFormatVersion) + ")");
  if (pos >= bytes.size()) throw ModelFormatError("model file truncated");
  const std::uint8_t kind_byte = bytes[pos++];
  if (kind_byte > 1) throw ModelFormatError("unknown representation kind " + std::to_string(kind_byte));
  const auto json_len = get_le<std::uint32_t>(bytes, pos);
  if (pos + json_len > bytes.size()) throw ModelFormatError("model file truncated inside header");
  const std::string header(reinterpret_cast<const char*>(bytes.data() + pos), json_len);
  pos += json_len;
  ModelConfig config;
  try {
    config = ModelConfig::from_json(header);
  } catch (const std::exception& e) {
    throw ModelFormatError(std::string("invalid model header: ") + e.what());
  }
  Model model(config, static_cast<EnergyKind>(kind_byte));
  const std::size_t expected = pos + 4 * model.total_parameter_count() + kModelTrailerBytes;
  if (bytes.size() != expected)
    throw ModelFormatError("model file has " + std::to_string(bytes.size()) + " bytes, expected " +
                           std::to_string(expected));
  for (Tensor* p : model.parameters()) get_floats(bytes, pos, p->data());
  for (auto* s : model.running_state()) get_floats(bytes, pos, *s);
  const std::size_t payload_end = pos;
  const auto stored = get_le<std::uint32_t>(bytes, pos);
  if (stored != crc_of(bytes.subspan(0, payload_end))) throw ModelFormatError("model file CRC mismatch");
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open model file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace gaitworks
