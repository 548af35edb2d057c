#pragma once

#include <array>
#include <functional>
#include <vector>

#include "gaitworks/gait_types.hpp"
#include "gaitworks/image.hpp"

namespace gaitworks {

struct SilhouetteSequence {
  std::vector<BinaryMask> frames;
  double source_fps = 10.0;
  SequenceMeta meta;
};

inline constexpr int kNumKeypoints = 25;

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;  // 0 = missing
};

/// 25-keypoint body layout (nose, neck, shoulders, elbows, wrists, mid-hip, hips, knees, ankles,
/// eyes, ears, toes, heels).
struct PoseFrame {
  std::array<Keypoint, kNumKeypoints> keypoints{};
};

/// Limb pairs of the 25-keypoint body topology.
const std::vector<std::pair<int, int>>& body25_limbs();

struct GaitCycle {
  int start_frame = 0;
  int end_frame = 0;  // inclusive
  int length() const { return end_frame - start_frame + 1; }
  friend bool operator==(const GaitCycle&, const GaitCycle&) = default;
};

inline constexpr double kTargetFps = 10.0;
inline constexpr int kMinCycleFrames = 8;
inline constexpr int kMaxCycleFrames = 40;

/// Nearest-time frame indices for resampling `frame_count` frames from `source_fps` to `target_fps`.
std::vector<int> resample_indices(std::size_t frame_count, double source_fps, double target_fps = kTargetFps);
SilhouetteSequence resample_fps(const SilhouetteSequence& seq, double target_fps = kTargetFps);

/// Tight crop, centroid-aligned padding to a square, resize to 224x224 (bilinear, grayscale kept).
GrayImage crop_normalize_gray(const BinaryMask& mask, int size = kEnergySize);
/// Same, re-binarized at 0.5.
BinaryMask crop_normalize(const BinaryMask& mask, int size = kEnergySize);

/// Silhouette bounding-box width per frame (0 for empty frames).
std::vector<double> width_signal(const SilhouetteSequence& seq);

/// Strategy interface: sequence -> cycles.
using CycleDetector = std::function<std::vector<GaitCycle>(const SilhouetteSequence&)>;

/// Width-periodicity detector: 3-tap smoothing, local maxima (double support), one cycle per
/// three consecutive maxima; cycles outside [8, 40] frames are dropped.
std::vector<GaitCycle> detect_cycles(const SilhouetteSequence& seq);
std::vector<GaitCycle> detect_cycles_from_signal(const std::vector<double>& signal);

struct TrimSpan {
  int first = 0;
  int last = -1;  // inclusive
};

/// Leading/trailing frames that are empty or touch the left/right border are dropped.
TrimSpan trim_span(const SilhouetteSequence& seq);
SilhouetteSequence trim_partial(const SilhouetteSequence& seq);

/// Per-pixel mean: GEI(x,y) = 1/N sum B_i(x,y).
EnergyImage compute_gei(const std::vector<GrayImage>& frames);

inline constexpr double kStrokeThickness = 4.0;
inline constexpr double kKeypointConfidence = 0.1;

BinaryMask rasterize_skeleton(const PoseFrame& pose, int width, int height, double thickness = kStrokeThickness,
                              double min_confidence = kKeypointConfidence);

EnergyImage compute_sei(const std::vector<PoseFrame>& poses, int width, int height);

/// Energy image over frames [cycle.start, cycle.end] of a silhouette sequence.
EnergyImage gei_for_cycle(const SilhouetteSequence& seq, const GaitCycle& cycle);

/// Silhouette sequence of rasterized skeletons (used to find cycles in pose-only input).
SilhouetteSequence skeleton_sequence(const std::vector<PoseFrame>& poses, int width, int height, double fps);

}  // namespace gaitworks
