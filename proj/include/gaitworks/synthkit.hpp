#pragma once

// Procedural walking-figure generator used for desk-scale training and tests.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gaitworks/gait_repr.hpp"

namespace gaitworks::synth {

struct GaitStyleParams {
  double torso_lean_deg = 0.0;
  double step_length = 0.6;     // fraction of leg length between feet at double support
  double knee_lift = 0.35;      // swing-phase knee/hip flexion
  double arm_swing_left = 0.5;
  double arm_swing_right = 0.5;
  double circumduction = 0.0;   // stiff-kneed swing with hip hike; applied to the legs below
  bool circumduction_left = false;
  bool circumduction_right = false;
  double elbow_flexion_left = 0.15;
  double elbow_flexion_right = 0.15;
  double knee_bend = 0.05;      // constant crouch
  double shake_amplitude = 0.0; // pixels
  int cadence_frames = 12;      // frames per cycle at 10 fps
  double severity_scale = 1.0;

  /// Throws std::invalid_argument when a field is outside its documented range.
  void validate() const;
};

GaitStyleParams preset(GaitClass gait_class, int severity);

/// The normal walk with a stiff swing knee. Relative to the pelvis, torso, head and arms move
/// exactly as in the normal walk; only leg kinematics (and the pelvis height they set) differ.
GaitStyleParams legs_only_variant();

/// Per-subject body dimensions in pixels.
struct Anthropometrics {
  double thigh = 84.0;
  double shank = 80.0;
  double foot = 28.0;
  double torso = 112.0;
  double neck = 16.0;
  double head_radius = 20.0;
  double upper_arm = 60.0;
  double forearm = 56.0;
  double limb_width = 22.0;
  double torso_width = 44.0;

  double leg() const { return thigh + shank; }
  double height() const { return leg() + torso + neck + 2 * head_radius; }
  static Anthropometrics vary(std::uint64_t seed, double spread = 0.10);
  friend bool operator==(const Anthropometrics&, const Anthropometrics&) = default;
};

struct FrameSize {
  int width = 0;  // 0 = wide enough for the whole walk
  int height = 480;
};

struct SequenceOptions {
  FrameSize frame;
  double jitter = 0.0;
  Anthropometrics body;
  bool render_color = false;  // also composite over a noisy green screen
  double color_noise_sigma = 2.0;
  double start_x = -1.0;      // hip x at frame 0; negative = auto
};

struct GeneratedSequence {
  SilhouetteSequence silhouettes;
  std::vector<PoseFrame> poses;
  std::vector<GaitCycle> truth_cycles;
  std::vector<ColorFrame> color_frames;  // when render_color
  ColorFrame background;                  // background-only frame, when render_color
  GaitStyleParams params;
};

GeneratedSequence generate_sequence(const GaitStyleParams& params, int n_frames, std::uint64_t seed,
                                    const SequenceOptions& options = {});

/// Composites a binary figure over a noisy green screen; returns the frame.
ColorFrame composite_green_screen(const BinaryMask& figure, std::uint64_t seed, double noise_sigma);
ColorFrame green_background(int width, int height, std::uint64_t seed, double noise_sigma);

struct DatasetOptions {
  int n_frames = 40;
  bool write_color_frames = false;
  bool write_poses = true;
  bool write_energy_images = true;
  double jitter = 0.02;
  double style_spread = 0.06;  // per-subject style variation
  bool keep_frames = true;     // false: drop silhouettes, poses and colour frames once energy images exist
};

struct SyntheticSample {
  SequenceMeta meta;
  GeneratedSequence sequence;
  std::vector<EnergyImage> geis;
  std::vector<EnergyImage> seis;
  Anthropometrics body;
};

struct SyntheticDataset {
  std::vector<SyntheticSample> sequences;
  std::vector<Anthropometrics> subjects;
};

/// Subjects are numbered from 1. Every subject walks every class `seqs_per_class` times;
/// pathological sequences alternate severity 1 and 2.
SyntheticDataset generate_dataset(int n_subjects, int seqs_per_class, std::uint64_t seed,
                                  const DatasetOptions& options = {});

/// Relative directory of a sequence: subject_NN/<class>_<sev1|sev2|na>/seq_MM.
std::string sequence_dir(const SequenceMeta& meta);

/// Writes the dataset directory layout (manifest, masks, poses, energy images, ground truth).
void write_dataset(const SyntheticDataset& data, const std::filesystem::path& root, const DatasetOptions& options = {});

/// Same output as generate_dataset followed by write_dataset, but each sequence is written and
/// released before the next is generated, so memory stays bounded at one sequence.
void generate_dataset_to(const std::filesystem::path& root, int n_subjects, int seqs_per_class, std::uint64_t seed,
                         DatasetOptions options = {});

}  // namespace gaitworks::synth
