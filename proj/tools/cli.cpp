#include "cli.hpp"

#include <pthread.h>

#include <algorithm>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gaitworks/classifier.hpp"
#include "gaitworks/explain.hpp"
#include "gaitworks/ops.hpp"
#include "gaitworks/pipeline.hpp"
#include "gaitworks/png_io.hpp"
#include "gaitworks/service.hpp"
#include "gaitworks/synthkit.hpp"
#include "gaitworks/zip.hpp"

namespace gaitworks::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  bool json = false;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
};

struct Output {
  json doc;
  std::string text;
};

// Frame directories written by `segment` carry their frame rate here.
constexpr const char* kSequenceMeta = "sequence.json";

// ---------------------------------------------------------------- shared helpers

json cycles_json(const std::vector<GaitCycle>& cycles) {
  json out = json::array();
  for (const auto& c : cycles) out.push_back({{"start_frame", c.start_frame}, {"end_frame", c.end_frame}, {"length", c.length()}});
  return out;
}

json prediction_json(const Prediction& p) {
  return {{"label", std::string(class_name(p.gait_class()))},
          {"label_index", p.label},
          {"probabilities", std::vector<float>(p.probabilities.begin(), p.probabilities.end())}};
}

double resolve_fps(const fs::path& dir, const std::optional<double>& flag) {
  if (flag) return *flag;
  const fs::path meta = dir / kSequenceMeta;
  if (!fs::exists(meta)) return kTargetFps;
  std::ifstream in(meta);
  try {
    const double fps = json::parse(in).at("fps").get<double>();
    if (!(fps > 0.0)) throw DataError("non-positive fps");
    return fps;
  } catch (const json::exception& e) {
    throw DataError(meta.string() + ": " + e.what());
  }
}

void require_dir(const fs::path& dir, const std::string& what) {
  if (!fs::is_directory(dir)) throw DataError(what + " '" + dir.string() + "' is not a directory");
}

SilhouetteSequence load_mask_dir(const fs::path& dir, const std::optional<double>& fps) {
  require_dir(dir, "mask directory");
  auto seq = load_masks(dir, resolve_fps(dir, fps));
  if (seq.frames.empty()) throw DataError("no mask PNGs in " + dir.string());
  return seq;
}

struct FrameSet {
  std::vector<ColorFrame> frames;
  std::optional<ColorFrame> plate;
  std::string plate_source = "median";
};

// Frames of a directory minus any background.png; the plate comes from --background, then
// dir/background.png, then the parent's background.png (the dataset layout).
FrameSet load_frame_dir(const fs::path& dir, const std::optional<fs::path>& background) {
  require_dir(dir, "frame directory");
  FrameSet set;
  for (const auto& p : list_pngs(dir))
    if (p.filename() != "background.png") set.frames.push_back(frame_from_raw(read_png(p)));
  if (set.frames.empty()) throw DataError("no frame PNGs in " + dir.string());
  for (const auto& f : set.frames)
    if (f.width != set.frames[0].width || f.height != set.frames[0].height)
      throw DataError("frames in " + dir.string() + " differ in size");
  std::optional<fs::path> plate_path = background;
  if (!plate_path) {
    for (const auto& candidate : {dir / "background.png", dir.parent_path() / "background.png"})
      if (fs::is_regular_file(candidate)) {
        plate_path = candidate;
        break;
      }
  }
  if (plate_path) {
    set.plate = frame_from_raw(read_png(*plate_path));
    if (set.plate->width != set.frames[0].width || set.plate->height != set.frames[0].height)
      throw DataError("background " + plate_path->string() + " differs in size from the frames");
    set.plate_source = plate_path->string();
  }
  return set;
}

std::vector<PoseFrame> load_pose_dir(const fs::path& dir) {
  require_dir(dir, "pose directory");
  auto poses = load_poses(dir);
  if (poses.empty()) throw DataError("no pose JSON files in " + dir.string());
  return poses;
}

EnergyImage read_energy_png(const fs::path& path, EnergyKind kind) {
  const RawImage raw = read_png(path);
  if (raw.width != kEnergySize || raw.height != kEnergySize)
    throw DataError(path.string() + ": energy images must be " + std::to_string(kEnergySize) + "x" +
                    std::to_string(kEnergySize));
  if (raw.channels == 3)
    for (std::size_t i = 0; i < raw.pixels.size(); i += 3)
      if (raw.pixels[i] != raw.pixels[i + 1] || raw.pixels[i] != raw.pixels[i + 2])
        throw DataError(path.string() + ": energy images must be grayscale");
  EnergyImage e;
  e.pixels = gray_from_raw(raw);
  e.kind = kind;
  e.provenance = path.filename().string();
  return e;
}

// Accepts the document printed by `cycles` or a bare array of {start,end} objects / pairs.
std::vector<GaitCycle> read_cycles_file(const fs::path& path, std::size_t frame_count) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<GaitCycle> cycles;
  try {
    const json doc = json::parse(in);
    if (doc.is_object() && doc.contains("frames") && doc["frames"].get<std::size_t>() != frame_count)
      throw DataError(path.string() + " describes " + std::to_string(doc["frames"].get<std::size_t>()) +
                      " prepared frames but the input has " + std::to_string(frame_count));
    const json& list = doc.is_object() ? doc.at("cycles") : doc;
    for (const auto& c : list) {
      GaitCycle g;
      if (c.is_array()) {
        g.start_frame = c.at(0).get<int>();
        g.end_frame = c.at(1).get<int>();
      } else {
        g.start_frame = c.at("start_frame").get<int>();
        g.end_frame = c.at("end_frame").get<int>();
      }
      if (g.start_frame < 0 || g.end_frame < g.start_frame || g.end_frame >= static_cast<int>(frame_count))
        throw DataError(path.string() + ": cycle [" + std::to_string(g.start_frame) + ", " +
                        std::to_string(g.end_frame) + "] lies outside the " + std::to_string(frame_count) + " frames");
      cycles.push_back(g);
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (cycles.empty()) throw NoGaitCycleError(path.string() + " lists no cycles");
  return cycles;
}

std::string two_digits(std::size_t k) {
  std::ostringstream s;
  s << std::setw(2) << std::setfill('0') << k;
  return s.str();
}

json write_energy_images(const std::vector<EnergyImage>& images, const fs::path& dir) {
  fs::create_directories(dir);
  json paths = json::array();
  for (std::size_t k = 0; k < images.size(); ++k) {
    const fs::path p = dir / ("cycle_" + two_digits(k) + ".png");
    write_file(p, encode_gray_png(images[k].pixels));
    paths.push_back(p.string());
  }
  return paths;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

Model open_model(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw DataError("model file '" + path.string() + "' does not exist");
  return load_model(path);
}

Model load_model_for(const fs::path& path, std::optional<EnergyKind> expected) {
  Model m = open_model(path);
  if (expected && m.kind() != *expected)
    throw UsageError(path.string() + " is a " + std::string(kind_name(m.kind())) + " model but the input is " +
                     std::string(kind_name(*expected)));
  return m;
}

EnergyKind kind_option(const std::string& text) {
  const auto k = parse_kind(text);
  if (!k) throw UsageError("representation must be gei or sei");
  return *k;
}

// ---------------------------------------------------------------- training flags

struct TrainFlags {
  std::string representation = "gei";
  std::optional<fs::path> config;
  int epochs = 100;
  std::size_t batch = 32;
  double lr = 1e-3;
  int patience = 10;
  double min_delta = 1e-4;
  double stop_loss = 0.0;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* patience_opt = nullptr;
  CLI::Option* min_delta_opt = nullptr;
  CLI::Option* stop_loss_opt = nullptr;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
  app->add_option("--representation", f.representation, "gei or sei")->capture_default_str();
  app->add_option("--config", f.config, "JSON with learning_rate, batch_size, max_epochs, patience, min_delta, stop_loss");
  f.epochs_opt = app->add_option("--epochs", f.epochs, "maximum epochs")->check(CLI::PositiveNumber)->capture_default_str();
  f.batch_opt = app->add_option("--batch", f.batch, "mini-batch size")->check(CLI::PositiveNumber)->capture_default_str();
  f.lr_opt = app->add_option("--lr", f.lr, "Nadam learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  f.patience_opt = app->add_option("--patience", f.patience, "epochs without improvement before stopping")
                       ->check(CLI::NonNegativeNumber)
                       ->capture_default_str();
  f.min_delta_opt = app->add_option("--min-delta", f.min_delta)->check(CLI::NonNegativeNumber)->capture_default_str();
  f.stop_loss_opt = app->add_option("--stop-loss", f.stop_loss, "stop once the epoch loss falls below this")
                        ->check(CLI::NonNegativeNumber)
                        ->capture_default_str();
}

// Defaults, then the --config file, then explicit flags.
TrainConfig train_config(const TrainFlags& f, const Globals& g, std::ostream& err) {
  TrainConfig cfg;
  if (f.config) {
    std::ifstream in(*f.config);
    if (!in) throw DataError("cannot open " + f.config->string());
    try {
      const json c = json::parse(in);
      cfg.learning_rate = c.value("learning_rate", cfg.learning_rate);
      cfg.batch_size = c.value("batch_size", cfg.batch_size);
      cfg.max_epochs = c.value("max_epochs", cfg.max_epochs);
      cfg.patience = c.value("patience", cfg.patience);
      cfg.min_delta = c.value("min_delta", cfg.min_delta);
      cfg.stop_loss = c.value("stop_loss", cfg.stop_loss);
    } catch (const json::exception& e) {
      throw DataError(f.config->string() + ": " + e.what());
    }
  }
  if (f.epochs_opt->count()) cfg.max_epochs = f.epochs;
  if (f.batch_opt->count()) cfg.batch_size = f.batch;
  if (f.lr_opt->count()) cfg.learning_rate = f.lr;
  if (f.patience_opt->count()) cfg.patience = f.patience;
  if (f.min_delta_opt->count()) cfg.min_delta = f.min_delta;
  if (f.stop_loss_opt->count()) cfg.stop_loss = f.stop_loss;
  cfg.seed = g.seed;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (!g.json)
    cfg.on_epoch = [&err](const EpochStats& s) {
      err << "epoch " << s.epoch << "  loss " << s.loss << "  accuracy " << s.accuracy << "\n" << std::flush;
    };
  return cfg;
}

json train_config_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
          {"patience", c.patience},           {"min_delta", c.min_delta},   {"stop_loss", c.stop_loss},
          {"seed", c.seed}};
}

json history_json(const TrainHistory& h) {
  return {{"loss", h.loss}, {"accuracy", h.accuracy}, {"epochs", h.epochs_run()}, {"early_stopped", h.early_stopped}};
}

std::string history_csv(const TrainHistory& h) {
  std::ostringstream s;
  s << std::setprecision(9) << "epoch,loss,accuracy\n";
  for (int e = 0; e < h.epochs_run(); ++e) s << e + 1 << ',' << h.loss[e] << ',' << h.accuracy[e] << '\n';
  return s.str();
}

Dataset load_dataset(const fs::path& root, EnergyKind kind, const Globals& g) {
  require_dir(root, "dataset root");
  Dataset d = load_energy_dataset(root, kind, g.jobs);
  if (d.samples.empty()) throw DataError("dataset " + root.string() + " holds no samples");
  d.name = root.filename().string();
  return d;
}

std::string metrics_text(const Metrics& m) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << "accuracy " << m.accuracy << " over " << m.total << " samples\n";
  for (int c = 0; c < kNumClasses; ++c)
    s << "  " << std::left << std::setw(13) << class_name(static_cast<GaitClass>(c)) << m.per_class_accuracy[c] << "\n";
  return s.str();
}

// ---------------------------------------------------------------- subcommands

struct SegmentArgs {
  fs::path frames, out;
  std::optional<fs::path> background;
  std::optional<double> fps;
};

Output cmd_segment(const SegmentArgs& a) {
  const FrameSet set = load_frame_dir(a.frames, a.background);
  const double fps = a.fps.value_or(kTargetFps);
  const auto seq = segment_video(set.frames, fps, set.plate ? &*set.plate : nullptr);
  write_masks(seq, a.out);
  write_text(a.out / kSequenceMeta, json{{"fps", fps}}.dump() + "\n");
  std::size_t empty = 0;
  for (const auto& m : seq.frames) empty += count_foreground(m) == 0;
  Output o;
  o.doc = {{"frames", seq.frames.size()}, {"empty_frames", empty}, {"fps", fps},
           {"background", set.plate_source}, {"masks", a.out.string()}};
  o.text = "wrote " + std::to_string(seq.frames.size()) + " masks to " + a.out.string() + " (background: " +
           set.plate_source + ")\n";
  return o;
}

struct CyclesArgs {
  fs::path masks;
  std::optional<fs::path> out;
  std::optional<double> fps;
};

Output cmd_cycles(const CyclesArgs& a) {
  const auto raw = load_mask_dir(a.masks, a.fps);
  const auto prepared = prepare_silhouettes(raw);
  Output o;
  o.doc = {{"source_frames", raw.frames.size()},
           {"source_fps", raw.source_fps},
           {"frames", prepared.sequence.frames.size()},
           {"fps", kTargetFps},
           {"cycles", cycles_json(prepared.cycles)}};
  if (a.out) write_text(*a.out, o.doc.dump(2) + "\n");
  std::ostringstream t;
  t << prepared.cycles.size() << " cycle(s) in " << prepared.sequence.frames.size() << " frames at " << kTargetFps
    << " fps\n";
  for (const auto& c : prepared.cycles) t << "  [" << c.start_frame << ", " << c.end_frame << "]\n";
  o.text = t.str();
  return o;
}

struct EnergyArgs {
  fs::path input, out;
  std::optional<fs::path> cycles;
  std::optional<double> fps;
  bool whole = false;
  int width = 0, height = 0;
};

Output energy_output(const std::vector<EnergyImage>& images, const std::vector<GaitCycle>& cycles,
                     const fs::path& out, const std::string& kind) {
  Output o;
  o.doc = {{"representation", kind}, {"images", write_energy_images(images, out)}, {"cycles", cycles_json(cycles)}};
  o.text = "wrote " + std::to_string(images.size()) + " " + kind + " image(s) to " + out.string() + "\n";
  return o;
}

Output cmd_gei(const EnergyArgs& a) {
  const auto raw = load_mask_dir(a.input, a.fps);
  if (a.whole) {
    const GaitCycle all{0, static_cast<int>(raw.frames.size()) - 1};
    return energy_output({gei_for_cycle(raw, all)}, {all}, a.out, "gei");
  }
  PreparedSequence prepared = prepare_silhouettes(raw);
  if (a.cycles) prepared.cycles = read_cycles_file(*a.cycles, prepared.sequence.frames.size());
  return energy_output(cycle_geis(prepared), prepared.cycles, a.out, "gei");
}

Output cmd_sei(const EnergyArgs& a) {
  const auto poses = load_pose_dir(a.input);
  const double fps = resolve_fps(a.input, a.fps);
  if (a.whole) {
    auto [w, h] = pose_canvas(poses);
    if (a.width > 0) w = a.width;
    if (a.height > 0) h = a.height;
    const GaitCycle all{0, static_cast<int>(poses.size()) - 1};
    return energy_output({compute_sei(poses, w, h)}, {all}, a.out, "sei");
  }
  PreparedPoses prepared = prepare_poses(poses, fps, a.width, a.height);
  if (a.cycles) prepared.cycles = read_cycles_file(*a.cycles, prepared.poses.size());
  return energy_output(cycle_seis(prepared), prepared.cycles, a.out, "sei");
}

struct SynthArgs {
  fs::path out;
  int subjects = 10;
  int seqs = 2;
  int frames = 40;
  double jitter = 0.02;
  bool color = false;
};

Output cmd_synth(const SynthArgs& a, const Globals& g) {
  if (a.subjects < 2) throw UsageError("--subjects must be at least 2");
  synth::DatasetOptions opt;
  opt.n_frames = a.frames;
  opt.jitter = a.jitter;
  opt.write_color_frames = a.color;
  synth::generate_dataset_to(a.out, a.subjects, a.seqs, g.seed, opt);
  const std::size_t sequences = static_cast<std::size_t>(a.subjects) * kNumClasses * a.seqs;
  Output o;
  o.doc = {{"root", a.out.string()}, {"subjects", a.subjects}, {"sequences", sequences},
           {"frames_per_sequence", a.frames}, {"seed", g.seed}};
  o.text = "wrote " + std::to_string(sequences) + " sequences of " + std::to_string(a.subjects) + " subjects to " +
           a.out.string() + "\n";
  return o;
}

struct TrainArgs {
  fs::path dataset, model;
  std::optional<fs::path> history;
  TrainFlags flags;
};

Output cmd_train(const TrainArgs& a, const Globals& g, std::ostream& err) {
  const EnergyKind kind = kind_option(a.flags.representation);
  const TrainConfig cfg = train_config(a.flags, g, err);
  const Dataset data = load_dataset(a.dataset, kind, g);
  Rng init_rng(derive_seed(g.seed, 0));
  Model model = build_model(ModelConfig::gait_cnn(), init_rng, kind);
  const TrainHistory h = train(model, data.samples, cfg);
  save_model(model, a.model);
  const fs::path history = a.history.value_or(fs::path(a.model).replace_extension(".history.csv"));
  write_text(history, history_csv(h));
  Output o;
  o.doc = {{"model", a.model.string()},         {"history", history.string()},
           {"samples", data.samples.size()},    {"subjects", data.subjects().size()},
           {"representation", kind_name(kind)}, {"config", train_config_json(cfg)},
           {"training", history_json(h)}};
  std::ostringstream t;
  t << "trained on " << data.samples.size() << " samples for " << h.epochs_run() << " epochs";
  if (h.epochs_run() > 0) t << ", final loss " << h.loss.back() << ", accuracy " << h.accuracy.back();
  t << "\nmodel: " << a.model.string() << "\nhistory: " << history.string() << "\n";
  o.text = t.str();
  return o;
}

struct CrossvalArgs {
  std::optional<fs::path> dataset, out;
  std::vector<int> folds;
  bool folds_only = false;
  TrainFlags flags;
};

Output cmd_crossval(const CrossvalArgs& a, const Globals& g, std::ostream& err) {
  const FoldPlan plan = make_folds();
  if (a.folds_only) {
    Output o;
    o.doc = {{"folds", json::array()}};
    std::ostringstream t;
    for (std::size_t k = 0; k < plan.folds.size(); ++k) {
      const auto& f = plan.folds[k];
      o.doc["folds"].push_back({{"fold", k + 1}, {"test_subjects", {f[0], f[1], f[2]}}});
      t << "fold " << k + 1 << ": S" << f[0] << " S" << f[1] << " S" << f[2] << "\n";
    }
    o.text = t.str();
    return o;
  }
  if (!a.dataset) throw UsageError("crossval needs a dataset root (or --folds-only)");
  for (int k : a.folds)
    if (k < 1 || k > static_cast<int>(plan.folds.size()))
      throw UsageError("--fold must lie in [1, " + std::to_string(plan.folds.size()) + "]");
  const EnergyKind kind = kind_option(a.flags.representation);
  const TrainConfig cfg = train_config(a.flags, g, err);
  const Dataset data = load_dataset(*a.dataset, kind, g);
  const auto present = data.subjects();
  for (int s = 1; s <= kProtocolSubjects; ++s)
    if (!std::binary_search(present.begin(), present.end(), s))
      throw DataError("crossval needs subjects 1.." + std::to_string(kProtocolSubjects) + "; subject " +
                      std::to_string(s) + " has no samples");
  CrossValidationOptions opt;
  opt.only_folds = a.folds;
  if (!g.json)
    opt.on_fold = [&err](const FoldResult& f) {
      err << "fold " << f.fold << " accuracy " << f.metrics.accuracy << " (" << f.test_samples << " test samples)\n"
          << std::flush;
    };
  const auto result = cross_validate(data, cfg, opt);
  Output o;
  o.doc = json::parse(result.to_json());
  o.doc["config"] = train_config_json(cfg);
  o.doc["representation"] = std::string(kind_name(kind));
  if (a.out) write_text(*a.out, o.doc.dump(2) + "\n");
  std::ostringstream t;
  for (const auto& f : result.folds)
    t << "fold " << f.fold << " (S" << f.test_subjects[0] << " S" << f.test_subjects[1] << " S" << f.test_subjects[2]
      << "): accuracy " << f.metrics.accuracy << "\n";
  t << "mean accuracy " << result.mean_accuracy << "\npooled " << metrics_text(result.pooled);
  o.text = t.str();
  return o;
}

struct CrossDatasetArgs {
  fs::path train_root, test_root;
  std::optional<fs::path> model_out, out;
  bool no_repeats = false;
  TrainFlags flags;
};

Output cmd_crossdataset(const CrossDatasetArgs& a, const Globals& g, std::ostream& err) {
  const EnergyKind kind = kind_option(a.flags.representation);
  const TrainConfig cfg = train_config(a.flags, g, err);
  const Dataset train_set = load_dataset(a.train_root, kind, g);
  const Dataset test_set = load_dataset(a.test_root, kind, g);
  const auto r = cross_dataset_eval(train_set, test_set, cfg, ModelConfig::gait_cnn(), !a.no_repeats);
  if (a.model_out) save_model(r.model, *a.model_out);
  Output o;
  o.doc = {{"train", a.train_root.string()},      {"test", a.test_root.string()},
           {"train_samples", r.train_samples},    {"test_samples", r.test_samples},
           {"include_repeats", !a.no_repeats},    {"representation", kind_name(kind)},
           {"config", train_config_json(cfg)},    {"training", history_json(r.history)},
           {"metrics", json::parse(r.metrics.to_json())}};
  if (a.out) write_text(*a.out, o.doc.dump(2) + "\n");
  o.text = "trained on " + std::to_string(r.train_samples) + ", tested on " + std::to_string(r.test_samples) +
           " samples\n" + metrics_text(r.metrics);
  return o;
}

struct PredictArgs {
  fs::path model;
  std::optional<fs::path> image, frames, masks, poses, background;
  std::optional<double> fps;
};

Output cmd_predict(const PredictArgs& a) {
  const int sources = a.image.has_value() + a.frames.has_value() + a.masks.has_value() + a.poses.has_value();
  if (sources != 1) throw UsageError("predict takes exactly one of IMAGE, --frames, --masks or --poses");
  const EnergyKind kind = a.poses ? EnergyKind::sei : EnergyKind::gei;
  Model model = a.image ? open_model(a.model) : load_model_for(a.model, kind);
  std::vector<EnergyImage> images;
  std::vector<GaitCycle> cycles;
  std::string source;
  if (a.image) {
    source = "image";
    images.push_back(read_energy_png(*a.image, model.kind()));
  } else if (a.poses) {
    source = "poses";
    const auto prepared = prepare_poses(load_pose_dir(*a.poses), resolve_fps(*a.poses, a.fps));
    images = cycle_seis(prepared);
    cycles = prepared.cycles;
  } else {
    SilhouetteSequence raw;
    if (a.frames) {
      source = "frames";
      const FrameSet set = load_frame_dir(*a.frames, a.background);
      raw = segment_video(set.frames, a.fps.value_or(kTargetFps), set.plate ? &*set.plate : nullptr);
    } else {
      source = "masks";
      raw = load_mask_dir(*a.masks, a.fps);
    }
    const auto prepared = prepare_silhouettes(raw);
    images = cycle_geis(prepared);
    cycles = prepared.cycles;
  }
  json per_cycle = json::array();
  std::vector<Prediction> predictions;
  for (std::size_t i = 0; i < images.size(); ++i) {
    predictions.push_back(predict(model, images[i]));
    json c = prediction_json(predictions.back());
    c["index"] = i;
    if (i < cycles.size()) {
      c["start_frame"] = cycles[i].start_frame;
      c["end_frame"] = cycles[i].end_frame;
    }
    per_cycle.push_back(std::move(c));
  }
  Output o;
  o.doc = prediction_json(predictions.front());
  o.doc["class_names"] = std::vector<std::string>(kClassNames.begin(), kClassNames.end());
  o.doc["representation"] = std::string(kind_name(model.kind()));
  o.doc["source"] = source;
  o.doc["cycles"] = per_cycle;
  std::ostringstream t;
  t << std::fixed << std::setprecision(4) << class_name(predictions.front().gait_class()) << "\n";
  for (int c = 0; c < kNumClasses; ++c)
    t << "  " << std::left << std::setw(13) << class_name(static_cast<GaitClass>(c))
      << predictions.front().probabilities[c] << "\n";
  o.text = t.str();
  return o;
}

struct ExplainArgs {
  fs::path model, image, out;
  std::string method = "gradcam";
  std::optional<std::size_t> layer;
  std::optional<int> target;
  double alpha = 0.6;
};

Output cmd_explain(const ExplainArgs& a) {
  const Model model = open_model(a.model);
  const EnergyImage image = read_energy_png(a.image, model.kind());
  std::vector<HeatMethod> methods;
  if (a.method == "both") {
    methods = {HeatMethod::saliency, HeatMethod::gradcam};
  } else if (const auto m = parse_method(a.method)) {
    methods = {*m};
  } else {
    throw UsageError("--method must be saliency, gradcam or both");
  }
  const std::size_t n_conv = model.conv_layers().size();
  const std::size_t layer = a.layer.value_or(n_conv - 1);
  if (layer >= n_conv) throw UsageError("--layer must lie in [0, " + std::to_string(n_conv) + ")");
  if (a.target && (*a.target < 0 || *a.target >= kNumClasses))
    throw UsageError("--target must lie in [0, " + std::to_string(kNumClasses) + ")");
  fs::create_directories(a.out);
  const Prediction p = predict(model, image);
  Output o;
  o.doc = {{"prediction", prediction_json(p)}, {"maps", json::array()}};
  std::ostringstream t;
  t << "predicted " << class_name(p.gait_class()) << "\n";
  for (const HeatMethod m : methods) {
    const HeatMap map = m == HeatMethod::saliency ? saliency(model, image, a.target) : grad_cam(model, image, layer, a.target);
    const std::string name = method_name(m);
    const fs::path heat = a.out / (name + "_heatmap.png");
    const fs::path overlay = a.out / (name + "_overlay.png");
    write_file(heat, encode_gray_png(map.values));
    write_png(overlay, render_overlay(image.pixels, map.values, a.alpha));
    const double lower = lower_half_mass(map.values);
    o.doc["maps"].push_back({{"method", name},
                             {"layer", map.source_layer ? json(*map.source_layer) : json(nullptr)},
                             {"target_class", map.target_class},
                             {"target_label", std::string(class_name(static_cast<GaitClass>(map.target_class)))},
                             {"lower_half_mass", lower},
                             {"heatmap", heat.string()},
                             {"overlay", overlay.string()}});
    t << name << ": " << heat.string() << ", " << overlay.string() << " (lower-half mass " << lower << ")\n";
  }
  o.text = t.str();
  return o;
}

struct ModelInfoArgs {
  std::optional<fs::path> model;
};

Output cmd_model_info(const ModelInfoArgs& a, const Globals& g) {
  std::optional<Model> loaded;
  std::uintmax_t file_bytes = 0;
  if (a.model) {
    loaded = open_model(*a.model);
    file_bytes = fs::file_size(*a.model);
  } else {
    Rng rng(derive_seed(g.seed, 0));
    loaded = build_model(ModelConfig::gait_cnn(), rng);
    file_bytes = serialize_model(*loaded).size();
  }
  const Model& m = *loaded;
  Output o;
  json layers = json::array();
  std::ostringstream t;
  t << std::left << std::setw(4) << "#" << std::setw(11) << "layer" << std::setw(18) << "output" << "parameters\n";
  for (std::size_t i = 0; i < m.layer_count(); ++i) {
    std::size_t params = 0;
    for (const Tensor* p : m.layer(i).parameters()) params += p->size();
    for (const auto* s : m.layer(i).state()) params += s->size();
    const std::string kind = layer_kind_name(m.layer(i).kind());
    const Shape& shape = m.output_shape(i);
    layers.push_back({{"index", i}, {"kind", kind}, {"output_shape", shape}, {"parameters", params}});
    t << std::setw(4) << i << std::setw(11) << kind << std::setw(18) << shape_string(shape) << params << "\n";
  }
  const double mb = static_cast<double>(file_bytes) / 1e6;
  o.doc = {{"model", a.model ? json(a.model->string()) : json(nullptr)},
           {"representation", kind_name(m.kind())},
           {"input_shape", m.input_shape()},
           {"trainable_parameters", m.trainable_count()},
           {"running_statistics", m.running_stat_count()},
           {"total_parameters", m.total_parameter_count()},
           {"file_bytes", file_bytes},
           {"file_mb", mb},
           {"layers", layers}};
  t << "trainable " << m.trainable_count() << ", running statistics " << m.running_stat_count() << ", total "
    << m.total_parameter_count() << "\nfile size " << file_bytes << " bytes (" << std::fixed << std::setprecision(2)
    << mb << " MB)\n";
  o.text = t.str();
  return o;
}

struct ServeArgs {
  std::optional<std::string> host, smtp_url, decoder;
  std::optional<int> port;
  std::optional<fs::path> model_gei, model_sei, session_dir;
  std::optional<long long> ttl;
  std::optional<std::size_t> threads;
};

// Serves until SIGINT or SIGTERM. The signals are taken synchronously by a waiter thread; the
// service threads inherit the blocked mask.
int cmd_serve(const ServeArgs& a, const Globals& g, std::ostream& out, std::ostream& err) {
  ServiceConfig cfg = ServiceConfig::from_env();
  if (a.host) cfg.host = *a.host;
  if (a.port) cfg.port = *a.port;
  if (a.model_gei) cfg.model_gei = *a.model_gei;
  if (a.model_sei) cfg.model_sei = *a.model_sei;
  if (a.session_dir) cfg.session_dir = *a.session_dir;
  if (a.ttl) cfg.session_ttl = std::chrono::seconds(*a.ttl);
  if (a.threads) cfg.threads = *a.threads;
  if (a.smtp_url) cfg.smtp_url = *a.smtp_url;
  if (a.decoder) cfg.decoder_cmd = *a.decoder;

  sigset_t set, old;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGUSR1);
  pthread_sigmask(SIG_BLOCK, &set, &old);
  struct RestoreMask {
    sigset_t mask;
    ~RestoreMask() { pthread_sigmask(SIG_SETMASK, &mask, nullptr); }
  } restore{old};

  Service service(cfg);
  const int port = service.bind();
  if (g.json) {
    out << json{{"status", "listening"}, {"host", cfg.host}, {"port", port}}.dump() << std::endl;
  } else {
    out << "listening on " << cfg.host << ":" << port << std::endl;
  }
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    service.stop();
  });
  service.run();
  pthread_kill(waiter.native_handle(), SIGUSR1);
  waiter.join();
  // Drain signals that arrived while shutting down so the restored mask does not deliver them.
  const timespec zero{0, 0};
  while (sigtimedwait(&set, nullptr, &zero) > 0) {
  }
  if (!g.json) err << "stopped\n";
  return kExitOk;
}

// ---------------------------------------------------------------- error reporting

int fail(std::ostream& err, bool as_json, int code, const std::string& message) {
  static const char* names[] = {"ok", "usage_error", "data_error", "internal_error"};
  if (as_json) {
    err << json{{"error", {{"code", names[code]}, {"exit_code", code}, {"message", message}}}}.dump() << std::endl;
  } else {
    err << "gaitworks: " << message << std::endl;
  }
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Globals g;
  // Known before parsing so parse errors can be reported as JSON too.
  const bool json_requested = std::find(args.begin(), args.end(), "--json") != args.end();

  CLI::App app{"Gait pathology toolkit: silhouettes, energy images, CNN training, explanations, HTTP service",
               "gaitworks"};
  app.fallthrough();
  app.require_subcommand(1);
  app.add_flag("--json", g.json, "emit one JSON document on stdout; errors as JSON on stderr");
  app.add_option("--seed", g.seed, "seed for every random choice")->capture_default_str();
  app.add_option("--jobs", g.jobs, "worker threads for per-sequence stages")->check(CLI::PositiveNumber)->capture_default_str();

  SegmentArgs seg;
  auto* c_seg = app.add_subcommand("segment", "frames directory -> silhouette masks");
  c_seg->add_option("frames", seg.frames, "directory of PNG frames")->required();
  c_seg->add_option("-o,--out", seg.out, "mask directory to write")->required();
  c_seg->add_option("--background", seg.background, "background plate (default: background.png or temporal median)");
  c_seg->add_option("--fps", seg.fps, "frame rate of the input")->check(CLI::PositiveNumber);

  CyclesArgs cyc;
  auto* c_cyc = app.add_subcommand("cycles", "masks -> gait cycles (JSON)");
  c_cyc->add_option("masks", cyc.masks, "directory of mask PNGs")->required();
  c_cyc->add_option("-o,--out", cyc.out, "also write the JSON here");
  c_cyc->add_option("--fps", cyc.fps, "frame rate of the masks")->check(CLI::PositiveNumber);

  EnergyArgs gei, sei;
  auto* c_gei = app.add_subcommand("gei", "masks -> one gait energy image per cycle");
  auto* c_sei = app.add_subcommand("sei", "poses -> one skeleton energy image per cycle");
  for (auto [cmd, a, what] : {std::tuple{c_gei, &gei, "directory of mask PNGs"},
                              std::tuple{c_sei, &sei, "directory of pose JSON files"}}) {
    cmd->add_option("input", a->input, what)->required();
    cmd->add_option("-o,--out", a->out, "directory for cycle_NN.png")->required();
    cmd->add_option("--cycles", a->cycles, "cycle JSON (as printed by `cycles`) instead of detection");
    cmd->add_option("--fps", a->fps, "frame rate of the input")->check(CLI::PositiveNumber);
    cmd->add_flag("--whole", a->whole, "treat every input frame as one cycle, without trimming or resampling");
  }
  c_sei->add_option("--width", sei.width, "canvas width (default: fitted to the poses)")->check(CLI::NonNegativeNumber);
  c_sei->add_option("--height", sei.height, "canvas height")->check(CLI::NonNegativeNumber);
  c_gei->get_option("--whole")->excludes(c_gei->get_option("--cycles"));
  c_sei->get_option("--whole")->excludes(c_sei->get_option("--cycles"));

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth", "write a synthetic walker dataset");
  c_syn->add_option("-o,--out", syn.out, "dataset root")->required();
  c_syn->add_option("--subjects", syn.subjects, "number of subjects")->capture_default_str();
  c_syn->add_option("--seqs", syn.seqs, "sequences per class and subject")->check(CLI::PositiveNumber)->capture_default_str();
  c_syn->add_option("--frames", syn.frames, "frames per sequence")->check(CLI::Range(8, 2000))->capture_default_str();
  c_syn->add_option("--jitter", syn.jitter, "per-frame keypoint jitter")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  c_syn->add_flag("--color", syn.color, "also write colour frames and background plates");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "dataset -> model file and history CSV");
  c_tr->add_option("dataset", tr.dataset, "dataset root")->required();
  c_tr->add_option("-o,--out", tr.model, "model file to write")->required();
  c_tr->add_option("--history", tr.history, "history CSV (default: <model>.history.csv)");
  add_train_flags(c_tr, tr.flags);

  CrossvalArgs cv;
  auto* c_cv = app.add_subcommand("crossval", "subject-wise 10-fold evaluation");
  c_cv->add_option("dataset", cv.dataset, "dataset root");
  c_cv->add_option("-o,--out", cv.out, "also write the metrics JSON here");
  c_cv->add_option("--fold", cv.folds, "run only these folds (1-based, repeatable)");
  c_cv->add_flag("--folds-only", cv.folds_only, "print the fold plan and exit");
  add_train_flags(c_cv, cv.flags);

  CrossDatasetArgs cd;
  auto* c_cd = app.add_subcommand("crossdataset", "train on one dataset, evaluate on another");
  c_cd->add_option("--train", cd.train_root, "training dataset root")->required();
  c_cd->add_option("--test", cd.test_root, "test dataset root")->required();
  c_cd->add_option("--model-out", cd.model_out, "save the trained model");
  c_cd->add_option("-o,--out", cd.out, "also write the metrics JSON here");
  c_cd->add_flag("--no-repeats", cd.no_repeats, "skip training samples of repeated subjects");
  add_train_flags(c_cd, cd.flags);

  PredictArgs pr;
  auto* c_pr = app.add_subcommand("predict", "classify an energy image or a sequence");
  c_pr->add_option("-m,--model", pr.model, "model file")->required();
  c_pr->add_option("image", pr.image, "224x224 grayscale energy image PNG");
  c_pr->add_option("--frames", pr.frames, "directory of colour frames");
  c_pr->add_option("--masks", pr.masks, "directory of silhouette masks");
  c_pr->add_option("--poses", pr.poses, "directory of pose JSON files (SEI model)");
  c_pr->add_option("--background", pr.background, "background plate for --frames");
  c_pr->add_option("--fps", pr.fps, "frame rate of the sequence")->check(CLI::PositiveNumber);

  ExplainArgs ex;
  auto* c_ex = app.add_subcommand("explain", "saliency / grad-CAM heatmaps for an energy image");
  c_ex->add_option("-m,--model", ex.model, "model file")->required();
  c_ex->add_option("image", ex.image, "224x224 grayscale energy image PNG")->required();
  c_ex->add_option("-o,--out", ex.out, "directory for <method>_heatmap.png and <method>_overlay.png")->required();
  c_ex->add_option("--method", ex.method, "saliency, gradcam or both")->capture_default_str();
  c_ex->add_option("--layer", ex.layer, "conv layer for grad-CAM (0-based, default: last)");
  c_ex->add_option("--target", ex.target, "class index to explain (default: predicted)");
  c_ex->add_option("--alpha", ex.alpha, "overlay opacity")->check(CLI::Range(0.0, 1.0))->capture_default_str();

  ModelInfoArgs mi;
  auto* c_mi = app.add_subcommand("model-info", "parameter count, file size and layer table");
  c_mi->add_option("model", mi.model, "model file (default: a freshly initialized default model)");

  ServeArgs sv;
  auto* c_sv = app.add_subcommand("serve", "run the HTTP service (GAITWORKS_* environment, overridden by flags)");
  c_sv->add_option("--host", sv.host);
  c_sv->add_option("--port", sv.port, "0 picks a free port")->check(CLI::Range(0, 65535));
  c_sv->add_option("--model-gei", sv.model_gei);
  c_sv->add_option("--model-sei", sv.model_sei);
  c_sv->add_option("--session-dir", sv.session_dir);
  c_sv->add_option("--session-ttl", sv.ttl, "seconds")->check(CLI::PositiveNumber);
  c_sv->add_option("--threads", sv.threads)->check(CLI::PositiveNumber);
  c_sv->add_option("--smtp-url", sv.smtp_url, "smtp:// or smtps:// gateway enabling e-mailed reports");
  c_sv->add_option("--decoder", sv.decoder, "external video decoder command with {input} and {output}");

  std::vector<const char*> argv{"gaitworks"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help("", CLI::AppFormatMode::Normal);
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return fail(err, json_requested, kExitUsage, e.what());
  }

  try {
    Output result;
    if (c_seg->parsed()) result = cmd_segment(seg);
    else if (c_cyc->parsed()) result = cmd_cycles(cyc);
    else if (c_gei->parsed()) result = cmd_gei(gei);
    else if (c_sei->parsed()) result = cmd_sei(sei);
    else if (c_syn->parsed()) result = cmd_synth(syn, g);
    else if (c_tr->parsed()) result = cmd_train(tr, g, err);
    else if (c_cv->parsed()) result = cmd_crossval(cv, g, err);
    else if (c_cd->parsed()) result = cmd_crossdataset(cd, g, err);
    else if (c_pr->parsed()) result = cmd_predict(pr);
    else if (c_ex->parsed()) result = cmd_explain(ex);
    else if (c_mi->parsed()) result = cmd_model_info(mi, g);
    else if (c_sv->parsed()) return cmd_serve(sv, g, out, err);
    if (g.json) out << result.doc.dump(2) << "\n";
    else out << result.text;
    out.flush();
    return kExitOk;
  } catch (const UsageError& e) {
    return fail(err, g.json, kExitUsage, e.what());
  } catch (const ServiceError& e) {
    return fail(err, g.json, kExitUsage, e.what());
  } catch (const DataError& e) {
    return fail(err, g.json, kExitData, e.what());
  } catch (const ImageIoError& e) {
    return fail(err, g.json, kExitData, e.what());
  } catch (const ModelFormatError& e) {
    return fail(err, g.json, kExitData, e.what());
  } catch (const ZipError& e) {
    return fail(err, g.json, kExitData, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(err, g.json, kExitData, e.what());
  } catch (const ShapeError& e) {
    return fail(err, g.json, kExitInternal, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(err, g.json, kExitUsage, e.what());
  } catch (const std::exception& e) {
    return fail(err, g.json, kExitInternal, e.what());
  }
}

}  // namespace gaitworks::cli
