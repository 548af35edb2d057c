#include "gaitworks/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "gaitworks/png_io.hpp"

namespace gaitworks {

namespace fs = std::filesystem;

std::vector<fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<ColorFrame> load_color_frames(const fs::path& dir) {
  std::vector<ColorFrame> frames;
  for (const auto& p : list_pngs(dir)) {
    frames.push_back(frame_from_raw(read_png(p)));
    frames.back().timestamp_index = static_cast<int>(frames.size()) - 1;
  }
  if (frames.empty()) throw DataError("no PNG frames in " + dir.string());
  for (const auto& f : frames)
    if (f.width != frames[0].width || f.height != frames[0].height)
      throw DataError("frames in " + dir.string() + " differ in size");
  return frames;
}

SilhouetteSequence load_masks(const fs::path& dir, double fps) {
  SilhouetteSequence seq;
  seq.source_fps = fps;
  for (const auto& p : list_pngs(dir)) seq.frames.push_back(mask_from_raw(read_png(p)));
  if (seq.frames.empty()) throw DataError("no PNG masks in " + dir.string());
  return seq;
}

void write_masks(const SilhouetteSequence& seq, const fs::path& dir) {
  fs::create_directories(dir);
  char name[32];
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    std::snprintf(name, sizeof name, "frame_%04zu.png", i);
    write_png(dir / name, raw_from_mask(seq.frames[i]));
  }
}

PoseFrame parse_pose(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("pose JSON: ") + e.what());
  }
  // Also accept the {"people":[{"pose_keypoints_2d":[x,y,c,...]}]} form of common pose estimators.
  if (j.is_object() && j.contains("people")) {
    if (j["people"].empty()) throw DataError("pose JSON: no people");
    const auto& flat = j["people"][0].at("pose_keypoints_2d");
    if (!flat.is_array() || flat.size() != 3 * kNumKeypoints) throw DataError("pose JSON: expected 75 values");
    nlohmann::json triplets = nlohmann::json::array();
    for (int k = 0; k < kNumKeypoints; ++k) triplets.push_back({flat[3 * k], flat[3 * k + 1], flat[3 * k + 2]});
    j = triplets;
  }
  if (!j.is_array() || j.size() != kNumKeypoints)
    throw DataError("pose JSON: expected an array of " + std::to_string(kNumKeypoints) + " [x, y, confidence] triplets");
  PoseFrame pose;
  for (int k = 0; k < kNumKeypoints; ++k) {
    const auto& t = j[k];
    if (!t.is_array() || t.size() != 3 || !t[0].is_number() || !t[1].is_number() || !t[2].is_number())
      throw DataError("pose JSON: keypoint " + std::to_string(k) + " is not a numeric triplet");
    pose.keypoints[k] = {t[0].get<double>(), t[1].get<double>(), t[2].get<double>()};
  }
  return pose;
}

std::string pose_to_json(const PoseFrame& pose) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& k : pose.keypoints) j.push_back({k.x, k.y, k.confidence});
  return j.dump();
}

std::vector<PoseFrame> load_poses(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<PoseFrame> poses;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      poses.push_back(parse_pose(ss.str()));
    } catch (const DataError& e) {
      throw DataError(f.string() + ": " + e.what());
    }
  }
  if (poses.empty()) throw DataError("no pose JSON files in " + dir.string());
  return poses;
}

ColorFrame median_background(const std::vector<ColorFrame>& frames) {
  if (frames.empty()) throw DataError("median_background: no frames");
  ColorFrame out(frames[0].width, frames[0].height);
  std::vector<std::uint8_t> column(frames.size());
  const std::size_t mid = frames.size() / 2;
  for (std::size_t i = 0; i < out.rgb.size(); ++i) {
    for (std::size_t f = 0; f < frames.size(); ++f) column[f] = frames[f].rgb[i];
    std::nth_element(column.begin(), column.begin() + static_cast<std::ptrdiff_t>(mid), column.end());
    out.rgb[i] = column[mid];
  }
  return out;
}

SilhouetteSequence segment_frames(const std::vector<ColorFrame>& frames, const HsvBackgroundModel& model, double fps) {
  SilhouetteSequence seq;
  seq.source_fps = fps;
  for (const auto& f : frames) {
    BinaryMask m = denoise(segment(f, model));
    if (count_foreground(m) > 0) m = largest_component(m);
    seq.frames.push_back(std::move(m));
  }
  return seq;
}

SilhouetteSequence segment_video(const std::vector<ColorFrame>& frames, double fps, const ColorFrame* background) {
  if (frames.empty()) throw DataError("no frames to segment");
  const ColorFrame plate = background ? *background : median_background(frames);
  if (plate.width != frames[0].width || plate.height != frames[0].height)
    throw DataError("background frame size differs from the video frames");
  return segment_frames(frames, learn_background(plate), fps);
}

PreparedSequence prepare_silhouettes(const SilhouetteSequence& raw, const CycleDetector& detector) {
  if (raw.frames.empty()) throw NoGaitCycleError("no frames");
  if (!(raw.source_fps > 0.0)) throw DataError("frame rate must be positive");
  if (raw.source_fps + 1e-9 < kTargetFps)
    throw DataError("frame rate " + std::to_string(raw.source_fps) + " fps is below the " +
                    std::to_string(kTargetFps) + " fps processing rate");
  PreparedSequence out;
  SilhouetteSequence trimmed;
  try {
    trimmed = trim_partial(raw);
  } catch (const std::invalid_argument&) {
    throw NoGaitCycleError("no frame shows the whole walker");
  }
  out.sequence = resample_fps(trimmed, kTargetFps);
  out.cycles = detector(out.sequence);
  return out;
}

std::vector<EnergyImage> cycle_geis(const PreparedSequence& prepared) {
  if (prepared.cycles.empty()) throw NoGaitCycleError("no complete gait cycle found");
  std::vector<EnergyImage> out;
  for (const auto& c : prepared.cycles) {
    EnergyImage e = gei_for_cycle(prepared.sequence, c);
    e.meta = prepared.sequence.meta;
    out.push_back(std::move(e));
  }
  return out;
}

std::pair<int, int> pose_canvas(const std::vector<PoseFrame>& poses) {
  double mx = 0.0, my = 0.0;
  for (const auto& p : poses)
    for (const auto& k : p.keypoints)
      if (k.confidence >= kKeypointConfidence) {
        if (k.x < 0.0 || k.y < 0.0) throw DataError("pose keypoints must have non-negative coordinates");
        mx = std::max(mx, k.x);
        my = std::max(my, k.y);
      }
  constexpr int kMargin = 16;
  return {static_cast<int>(std::ceil(mx)) + kMargin, static_cast<int>(std::ceil(my)) + kMargin};
}

PreparedPoses prepare_poses(const std::vector<PoseFrame>& poses, double fps, int width, int height,
                            const CycleDetector& detector) {
  if (poses.empty()) throw NoGaitCycleError("no poses");
  if (!(fps >= kTargetFps - 1e-9)) throw DataError("pose frame rate must be at least 10 fps");
  PreparedPoses out;
  if (width <= 0 || height <= 0) std::tie(width, height) = pose_canvas(poses);
  out.width = width;
  out.height = height;
  SilhouetteSequence skel;
  try {
    skel = skeleton_sequence(poses, width, height, fps);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("pose sequence: ") + e.what());
  }
  TrimSpan span;
  try {
    span = trim_span(skel);
  } catch (const std::invalid_argument&) {
    throw NoGaitCycleError("no pose frame shows the whole walker");
  }
  std::vector<PoseFrame> trimmed(poses.begin() + span.first, poses.begin() + span.last + 1);
  SilhouetteSequence trimmed_skel;
  trimmed_skel.source_fps = fps;
  trimmed_skel.frames.assign(skel.frames.begin() + span.first, skel.frames.begin() + span.last + 1);
  SilhouetteSequence resampled;
  resampled.source_fps = kTargetFps;
  for (int i : resample_indices(trimmed.size(), fps, kTargetFps)) {
    out.poses.push_back(trimmed[i]);
    resampled.frames.push_back(trimmed_skel.frames[i]);
  }
  out.cycles = detector(resampled);
  return out;
}

std::vector<EnergyImage> cycle_seis(const PreparedPoses& prepared) {
  if (prepared.cycles.empty()) throw NoGaitCycleError("no complete gait cycle found");
  std::vector<EnergyImage> out;
  for (const auto& c : prepared.cycles) {
    std::vector<PoseFrame> cycle(prepared.poses.begin() + c.start_frame, prepared.poses.begin() + c.end_frame + 1);
    out.push_back(compute_sei(cycle, prepared.width, prepared.height));
  }
  return out;
}

Manifest read_manifest(const fs::path& root) {
  const fs::path file = root / "manifest.json";
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    const double default_fps = j.value("fps", kTargetFps);
    for (const auto& s : j.at("sequences")) {
      ManifestEntry e;
      e.meta.subject = s.at("subject").get<int>();
      const auto cls = parse_class(s.at("class").get<std::string>());
      if (!cls) throw DataError("unknown class '" + s.at("class").get<std::string>() + "'");
      e.meta.gait_class = *cls;
      e.meta.severity = s.value("severity", 0);
      e.meta.direction = s.value("direction", std::string("ltr"));
      e.meta.sequence = s.value("sequence", 0);
      e.meta.repeat_of = s.value("repeat_of", 0);
      e.path = s.at("path").get<std::string>();
      e.fps = s.value("fps", default_fps);
      if (e.meta.subject < 1) throw DataError("subject ids start at 1");
      m.sequences.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(file.string() + ": " + e.what());
  }
  return m;
}

namespace {

std::vector<EnergyImage> load_entry(const fs::path& root, const ManifestEntry& entry, EnergyKind kind) {
  const fs::path dir = root / entry.path;
  const std::string sub = std::string(kind_name(kind));
  std::vector<EnergyImage> images;
  if (fs::is_directory(dir / sub) && !list_pngs(dir / sub).empty()) {
    for (const auto& p : list_pngs(dir / sub)) {
      EnergyImage e;
      e.pixels = gray_from_raw(read_png(p));
      e.provenance = "file";
      images.push_back(std::move(e));
    }
  } else if (kind == EnergyKind::gei) {
    images = cycle_geis(prepare_silhouettes(load_masks(dir / "masks", entry.fps)));
  } else {
    images = cycle_seis(prepare_poses(load_poses(dir / "poses"), entry.fps));
  }
  for (auto& e : images) {
    if (e.pixels.width != kEnergySize || e.pixels.height != kEnergySize)
      throw DataError(dir.string() + ": energy images must be " + std::to_string(kEnergySize) + "x" +
                      std::to_string(kEnergySize));
    e.kind = kind;
    e.meta = entry.meta;
  }
  return images;
}

}  // namespace

Dataset load_energy_dataset(const fs::path& root, EnergyKind kind, std::size_t jobs) {
  const Manifest manifest = read_manifest(root);
  const std::size_t n = manifest.sequences.size();
  std::vector<std::vector<EnergyImage>> per_entry(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        per_entry[i] = load_entry(root, manifest.sequences[i], kind);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(std::max<std::size_t>(jobs, 1), n); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  Dataset data;
  data.name = root.filename().empty() ? root.parent_path().filename().string() : root.filename().string();
  for (auto& images : per_entry)
    for (auto& e : images) data.samples.push_back(std::move(e));
  if (data.samples.empty()) throw DataError("dataset " + root.string() + " has no energy images");
  return data;
}

}  // namespace gaitworks
