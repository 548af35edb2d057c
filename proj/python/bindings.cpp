#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "gaitworks/classifier.hpp"
#include "gaitworks/explain.hpp"
#include "gaitworks/ops.hpp"
#include "gaitworks/pipeline.hpp"
#include "gaitworks/png_io.hpp"
#include "gaitworks/synthkit.hpp"

namespace py = pybind11;
using namespace gaitworks;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

void require_ndim(const py::array& a, py::ssize_t ndim, const char* what) {
  if (a.ndim() != ndim)
    throw py::value_error(std::string(what) + " must have " + std::to_string(ndim) + " dimensions, got " +
                          std::to_string(a.ndim()));
}

GrayImage array_gray(const F32& a) {
  require_ndim(a, 2, "image");
  GrayImage g(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::memcpy(g.pixels.data(), a.data(), g.pixels.size() * sizeof(float));
  return g;
}

EnergyImage to_energy(const F32& a, EnergyKind kind = EnergyKind::gei) {
  EnergyImage e;
  e.pixels = array_gray(a);
  e.kind = kind;
  return e;
}

py::array_t<float> from_gray(const GrayImage& g) {
  py::array_t<float> out({g.height, g.width});
  std::memcpy(out.mutable_data(), g.pixels.data(), g.pixels.size() * sizeof(float));
  return out;
}

py::array_t<float> stack_gray(const std::vector<GrayImage>& images, int height, int width) {
  py::array_t<float> out({static_cast<py::ssize_t>(images.size()), static_cast<py::ssize_t>(height),
                          static_cast<py::ssize_t>(width)});
  float* dst = out.mutable_data();
  for (const auto& g : images) {
    std::memcpy(dst, g.pixels.data(), g.pixels.size() * sizeof(float));
    dst += g.pixels.size();
  }
  return out;
}

py::array_t<float> stack_energy(const std::vector<EnergyImage>& images) {
  std::vector<GrayImage> g;
  for (const auto& e : images) g.push_back(e.pixels);
  return stack_gray(g, kEnergySize, kEnergySize);
}

BinaryMask to_mask(const std::uint8_t* src, int height, int width) {
  BinaryMask m(width, height);
  for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = src[i] != 0;
  return m;
}

SilhouetteSequence to_sequence(const U8& masks, double fps) {
  require_ndim(masks, 3, "masks");
  SilhouetteSequence seq;
  seq.source_fps = fps;
  const int h = static_cast<int>(masks.shape(1)), w = static_cast<int>(masks.shape(2));
  for (py::ssize_t i = 0; i < masks.shape(0); ++i)
    seq.frames.push_back(to_mask(masks.data() + i * h * w, h, w));
  return seq;
}

py::array_t<std::uint8_t> from_masks(const std::vector<BinaryMask>& masks) {
  const int h = masks.empty() ? 0 : masks[0].height, w = masks.empty() ? 0 : masks[0].width;
  py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(masks.size()), static_cast<py::ssize_t>(h),
                                 static_cast<py::ssize_t>(w)});
  std::uint8_t* dst = out.mutable_data();
  for (const auto& m : masks) {
    std::memcpy(dst, m.pixels.data(), m.pixels.size());
    dst += m.pixels.size();
  }
  return out;
}

ColorFrame to_frame(const std::uint8_t* src, int height, int width) {
  ColorFrame f(width, height);
  std::memcpy(f.rgb.data(), src, f.rgb.size());
  return f;
}

py::list cycles_list(const std::vector<GaitCycle>& cycles) {
  py::list out;
  for (const auto& c : cycles) out.append(py::make_tuple(c.start_frame, c.end_frame));
  return out;
}

py::dict prediction_dict(const Prediction& p) {
  py::dict d;
  d["label"] = std::string(class_name(p.gait_class()));
  d["label_index"] = p.label;
  d["probabilities"] = std::vector<float>(p.probabilities.begin(), p.probabilities.end());
  return d;
}

std::vector<EnergyImage> unpack_images(const F32& images, EnergyKind kind) {
  require_ndim(images, 3, "images");
  std::vector<EnergyImage> out;
  const int h = static_cast<int>(images.shape(1)), w = static_cast<int>(images.shape(2));
  for (py::ssize_t i = 0; i < images.shape(0); ++i) {
    EnergyImage e;
    e.pixels = GrayImage(w, h);
    std::memcpy(e.pixels.pixels.data(), images.data() + i * h * w, e.pixels.pixels.size() * sizeof(float));
    e.kind = kind;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<EnergyImage> labelled_samples(const F32& images, const py::array_t<int>& labels, EnergyKind kind) {
  auto out = unpack_images(images, kind);
  if (labels.ndim() != 1 || labels.shape(0) != static_cast<py::ssize_t>(out.size()))
    throw py::value_error("labels must be a 1-D array with one entry per image");
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int label = labels.at(static_cast<py::ssize_t>(i));
    if (label < 0 || label >= kNumClasses) throw py::value_error("label out of range: " + std::to_string(label));
    out[i].meta.gait_class = static_cast<GaitClass>(label);
  }
  return out;
}

py::object parse_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

std::size_t conv_index(const Model& m, std::optional<std::size_t> layer) {
  const std::size_t n = m.conv_layers().size();
  const std::size_t k = layer.value_or(n - 1);
  if (k >= n) throw py::index_error("conv layer must lie in [0, " + std::to_string(n) + ")");
  return k;
}

}  // namespace

PYBIND11_MODULE(_gaitworks, m) {
  m.doc() = "Gait energy images, the gait CNN, explanations and synthetic walkers";

  auto data_error = py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NoGaitCycleError>(m, "NoGaitCycleError", data_error.ptr());
  py::register_exception<ModelFormatError>(m, "ModelFormatError", PyExc_ValueError);
  py::register_exception<ImageIoError>(m, "ImageIoError", PyExc_ValueError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  m.attr("energy_size") = kEnergySize;
  m.attr("class_names") = std::vector<std::string>(kClassNames.begin(), kClassNames.end());

  m.def(
      "crop_normalize", [](const U8& mask) {
        require_ndim(mask, 2, "mask");
        return from_gray(crop_normalize_gray(
            to_mask(mask.data(), static_cast<int>(mask.shape(0)), static_cast<int>(mask.shape(1)))));
      },
      py::arg("mask"), "Crop a binary silhouette to its bounding box and fit it into a 224x224 frame.");

  m.def(
      "compute_gei", [](const F32& frames) {
        require_ndim(frames, 3, "frames");
        const int h = static_cast<int>(frames.shape(1)), w = static_cast<int>(frames.shape(2));
        std::vector<GrayImage> list;
        for (py::ssize_t i = 0; i < frames.shape(0); ++i) {
          GrayImage g(w, h);
          std::memcpy(g.pixels.data(), frames.data() + i * h * w, g.pixels.size() * sizeof(float));
          list.push_back(std::move(g));
        }
        return from_gray(compute_gei(list).pixels);
      },
      py::arg("frames"), "Per-pixel mean of an N x H x W stack of normalized silhouettes.");

  m.def(
      "segment_video",
      [](const U8& frames, double fps, std::optional<U8> background) {
        require_ndim(frames, 4, "frames");
        if (frames.shape(3) != 3) throw py::value_error("frames must be N x H x W x 3 RGB");
        const int h = static_cast<int>(frames.shape(1)), w = static_cast<int>(frames.shape(2));
        std::vector<ColorFrame> list;
        for (py::ssize_t i = 0; i < frames.shape(0); ++i) list.push_back(to_frame(frames.data() + i * h * w * 3, h, w));
        std::optional<ColorFrame> plate;
        if (background) {
          require_ndim(*background, 3, "background");
          if (background->shape(0) != h || background->shape(1) != w || background->shape(2) != 3)
            throw py::value_error("background must match the frame size");
          plate = to_frame(background->data(), h, w);
        }
        SilhouetteSequence seq;
        {
          py::gil_scoped_release release;
          seq = segment_video(list, fps, plate ? &*plate : nullptr);
        }
        return from_masks(seq.frames);
      },
      py::arg("frames"), py::arg("fps") = kTargetFps, py::arg("background") = py::none(),
      "Silhouette masks of RGB frames against a background plate (temporal median when omitted).");

  m.def(
      "prepare_silhouettes",
      [](const U8& masks, double fps) {
        const auto prepared = prepare_silhouettes(to_sequence(masks, fps));
        py::dict d;
        d["masks"] = from_masks(prepared.sequence.frames);
        d["cycles"] = cycles_list(prepared.cycles);
        return d;
      },
      py::arg("masks"), py::arg("fps") = kTargetFps,
      "Trim partial frames, resample to 10 fps and detect gait cycles.");

  m.def(
      "cycle_geis", [](const U8& masks, double fps) { return stack_energy(cycle_geis(prepare_silhouettes(to_sequence(masks, fps)))); },
      py::arg("masks"), py::arg("fps") = kTargetFps, "One gait energy image per detected cycle (K x 224 x 224).");

  m.def("lower_half_mass", [](const F32& map) { return lower_half_mass(array_gray(map)); }, py::arg("map"));

  m.def("make_folds", [] {
    py::list out;
    for (const auto& f : make_folds().folds) out.append(py::make_tuple(f[0], f[1], f[2]));
    return out;
  });

  m.def(
      "synth_geis",
      [](int n_subjects, int seqs_per_class, std::uint64_t seed, int n_frames) {
        synth::DatasetOptions opt;
        opt.keep_frames = false;
        opt.n_frames = n_frames;
        synth::SyntheticDataset data;
        {
          py::gil_scoped_release release;
          data = synth::generate_dataset(n_subjects, seqs_per_class, seed, opt);
        }
        std::vector<EnergyImage> images;
        std::vector<int> labels, subjects;
        for (const auto& s : data.sequences)
          for (const auto& g : s.geis) {
            images.push_back(g);
            labels.push_back(static_cast<int>(s.meta.gait_class));
            subjects.push_back(s.meta.subject);
          }
        py::dict d;
        d["images"] = stack_energy(images);
        d["labels"] = py::array_t<int>(static_cast<py::ssize_t>(labels.size()), labels.data());
        d["subjects"] = py::array_t<int>(static_cast<py::ssize_t>(subjects.size()), subjects.data());
        return d;
      },
      py::arg("n_subjects"), py::arg("seqs_per_class") = 1, py::arg("seed") = 1, py::arg("n_frames") = 40,
      "GEIs of a seeded synthetic walker dataset with their labels and subject ids.");

  py::class_<Model>(m, "Model")
      .def(py::init([](std::uint64_t seed, std::size_t input_size) {
             Rng rng(derive_seed(seed, 0));
             return build_model(ModelConfig::gait_cnn(input_size), rng);
           }),
           py::arg("seed") = 1, py::arg("input_size") = kEnergySize, "Freshly initialized default gait CNN.")
      .def_static("load", [](const std::filesystem::path& p) { return load_model(p); }, py::arg("path"))
      .def("save", [](const Model& self, const std::filesystem::path& p) { save_model(self, p); }, py::arg("path"))
      .def_property_readonly("total_parameters", &Model::total_parameter_count)
      .def_property_readonly("trainable_parameters", &Model::trainable_count)
      .def_property_readonly("running_statistics", &Model::running_stat_count)
      .def_property_readonly("representation", [](const Model& self) { return std::string(kind_name(self.kind())); })
      .def("serialized_size", [](const Model& self) { return serialize_model(self).size(); })
      .def("layers",
           [](const Model& self) {
             py::list out;
             for (std::size_t i = 0; i < self.layer_count(); ++i) {
               std::size_t params = 0;
               for (const Tensor* t : self.layer(i).parameters()) params += t->size();
               for (const auto* s : self.layer(i).state()) params += s->size();
               py::dict d;
               d["index"] = i;
               d["kind"] = layer_kind_name(self.layer(i).kind());
               d["output_shape"] = self.output_shape(i);
               d["parameters"] = params;
               out.append(d);
             }
             return out;
           })
      .def("conv_layers",
           [](const Model& self) {
             py::list out;
             for (const auto& l : conv_layer_table(self)) {
               py::dict d;
               d["index"] = l.index;
               d["channels"] = l.channels;
               d["height"] = l.height;
               d["width"] = l.width;
               out.append(d);
             }
             return out;
           })
      .def(
          "predict", [](const Model& self, const F32& image) { return prediction_dict(predict(self, array_gray(image))); },
          py::arg("image"))
      .def(
          "predict_proba",
          [](const Model& self, const F32& images) {
            const auto samples = unpack_images(images, self.kind());
            std::vector<Prediction> preds;
            {
              py::gil_scoped_release release;
              preds = predict_batch(self, refs(samples));
            }
            py::array_t<float> out({static_cast<py::ssize_t>(preds.size()), static_cast<py::ssize_t>(kNumClasses)});
            for (std::size_t i = 0; i < preds.size(); ++i)
              std::memcpy(out.mutable_data() + i * kNumClasses, preds[i].probabilities.data(), kNumClasses * sizeof(float));
            return out;
          },
          py::arg("images"), "Class probabilities for an N x H x W batch.")
      .def(
          "train",
          [](Model& self, const F32& images, const py::array_t<int>& labels, int epochs, std::size_t batch_size,
             double learning_rate, std::uint64_t seed, int patience) {
            const auto samples = labelled_samples(images, labels, self.kind());
            TrainConfig cfg;
            cfg.max_epochs = epochs;
            cfg.batch_size = batch_size;
            cfg.learning_rate = learning_rate;
            cfg.seed = seed;
            cfg.patience = patience;
            cfg.validate();
            TrainHistory h;
            {
              py::gil_scoped_release release;
              h = train(self, samples, cfg);
            }
            py::dict d;
            d["loss"] = h.loss;
            d["accuracy"] = h.accuracy;
            d["early_stopped"] = h.early_stopped;
            return d;
          },
          py::arg("images"), py::arg("labels"), py::arg("epochs") = 30, py::arg("batch_size") = 32,
          py::arg("learning_rate") = 1e-3, py::arg("seed") = 1, py::arg("patience") = 10)
      .def(
          "evaluate",
          [](const Model& self, const F32& images, const py::array_t<int>& labels) {
            const auto samples = labelled_samples(images, labels, self.kind());
            std::string text;
            {
              py::gil_scoped_release release;
              text = evaluate(self, refs(samples)).to_json();
            }
            return parse_json(text);
          },
          py::arg("images"), py::arg("labels"))
      .def(
          "saliency",
          [](const Model& self, const F32& image, std::optional<int> target) {
            return from_gray(saliency(self, to_energy(image, self.kind()), target).values);
          },
          py::arg("image"), py::arg("target") = py::none())
      .def(
          "grad_cam",
          [](const Model& self, const F32& image, std::optional<std::size_t> layer, std::optional<int> target) {
            return from_gray(grad_cam(self, to_energy(image, self.kind()), conv_index(self, layer), target).values);
          },
          py::arg("image"), py::arg("layer") = py::none(), py::arg("target") = py::none())
      .def(
          "feature_maps",
          [](const Model& self, const F32& image, std::size_t layer) {
            const auto maps = feature_maps(self, to_energy(image, self.kind()), conv_index(self, layer));
            return stack_gray(maps, maps.at(0).height, maps.at(0).width);
          },
          py::arg("image"), py::arg("layer"));
}
