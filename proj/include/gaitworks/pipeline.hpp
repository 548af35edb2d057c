#pragma once

// End-to-end sequence processing shared by the CLI and the service, plus the on-disk dataset
// layout: root/subject_NN/<class>_<sev1|sev2|na>/seq_MM/{frames,masks,poses,gei,sei} and
// root/manifest.json.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaitworks/classifier.hpp"
#include "gaitworks/gait_repr.hpp"
#include "gaitworks/silhouette.hpp"

namespace gaitworks {

/// Problem with input data (missing files, malformed content, nothing to process).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NoGaitCycleError : public DataError {
 public:
  using DataError::DataError;
};

// --- frame files

/// PNG files of a directory sorted by name (frame_0000.png, frame_0001.png, ...).
std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir);
std::vector<ColorFrame> load_color_frames(const std::filesystem::path& dir);
SilhouetteSequence load_masks(const std::filesystem::path& dir, double fps = kTargetFps);
void write_masks(const SilhouetteSequence& seq, const std::filesystem::path& dir);

/// Pose file: JSON array of 25 [x, y, confidence] triplets.
PoseFrame parse_pose(const std::string& json_text);
std::string pose_to_json(const PoseFrame& pose);
std::vector<PoseFrame> load_poses(const std::filesystem::path& dir);

// --- silhouettes

/// Per-pixel temporal median of the frames; a moving walker leaves a clean background plate.
ColorFrame median_background(const std::vector<ColorFrame>& frames);

/// segment -> denoise -> largest component, per frame. Frames without foreground stay empty.
SilhouetteSequence segment_frames(const std::vector<ColorFrame>& frames, const HsvBackgroundModel& model,
                                  double fps = kTargetFps);

/// Background from `background` when given, otherwise the temporal median of the frames.
SilhouetteSequence segment_video(const std::vector<ColorFrame>& frames, double fps,
                                 const ColorFrame* background = nullptr);

// --- cycles and energy images

struct PreparedSequence {
  SilhouetteSequence sequence;  // trimmed, then resampled to 10 fps
  std::vector<GaitCycle> cycles;
};

PreparedSequence prepare_silhouettes(const SilhouetteSequence& raw, const CycleDetector& detector = detect_cycles);
/// One GEI per detected cycle; NoGaitCycleError when there is none.
std::vector<EnergyImage> cycle_geis(const PreparedSequence& prepared);

struct PreparedPoses {
  std::vector<PoseFrame> poses;  // resampled to 10 fps, trimmed
  int width = 0;
  int height = 0;
  std::vector<GaitCycle> cycles;
};

/// Canvas enclosing every confident keypoint, with a margin.
std::pair<int, int> pose_canvas(const std::vector<PoseFrame>& poses);
PreparedPoses prepare_poses(const std::vector<PoseFrame>& poses, double fps, int width = 0, int height = 0,
                            const CycleDetector& detector = detect_cycles);
std::vector<EnergyImage> cycle_seis(const PreparedPoses& prepared);

// --- dataset layout

struct ManifestEntry {
  SequenceMeta meta;
  std::string path;  // relative to the dataset root
  double fps = kTargetFps;
};

struct Manifest {
  std::vector<ManifestEntry> sequences;
};

Manifest read_manifest(const std::filesystem::path& root);

/// Energy images of every sequence in the manifest: stored gei/ or sei/ PNGs when present,
/// otherwise computed from masks (GEI) or poses (SEI). Sequences are processed by `jobs` worker
/// threads; the result is independent of `jobs`.
Dataset load_energy_dataset(const std::filesystem::path& root, EnergyKind kind, std::size_t jobs = 1);

}  // namespace gaitworks
