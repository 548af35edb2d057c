#include "gaitworks/synthkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gaitworks/ops.hpp"
#include "gaitworks/png_io.hpp"
#include "gaitworks/silhouette.hpp"

namespace gaitworks::synth {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kMargin = 8.0;  // pixels kept clear around the figure and below the ground line

void check_fraction(const char* name, double v) {
  if (!(v >= 0.0 && v <= 1.5)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1.5]");
}

struct Vec {
  double x = 0.0, y = 0.0;  // y up
};
Vec operator+(Vec a, Vec b) { return {a.x + b.x, a.y + b.y}; }
Vec operator-(Vec a, Vec b) { return {a.x - b.x, a.y - b.y}; }
Vec operator*(double s, Vec a) { return {s * a.x, s * a.y}; }
// Unit vector at `angle` from straight down, positive angles pointing forward (+x).
Vec down(double angle) { return {std::sin(angle), -std::cos(angle)}; }
Vec up(double angle) { return {std::sin(angle), std::cos(angle)}; }

struct Capsule {
  Vec a, b;
  double r = 0.0;
};

struct Leg {
  Vec hip, knee, ankle, heel, toe;
};

// Figure in hip-relative coordinates (hip at x = 0, ground at y = 0).
struct Figure {
  Vec midhip, neck, head, nose, shoulder;
  Vec elbow[2], wrist[2];  // 0 = right, 1 = left
  Leg leg[2];
  std::vector<Capsule> capsules;
};

struct FrameNoise {
  double d[8] = {};
};

Leg pose_leg(const GaitStyleParams& p, const Anthropometrics& body, double thigh_swing, double swing, bool circ,
             const double* noise) {
  const double amplitude = std::asin(std::min(0.95, p.step_length / 2.0));
  const double hip_lift = std::max(0.0, p.knee_lift - 0.35) * 1.6 * swing;
  const double stiffness = circ ? std::min(1.0, p.circumduction) : 0.0;
  const double flex = std::min(2.0, 2.6 * p.knee_lift) * std::pow(swing, 1.5) * (1.0 - stiffness);
  const double theta = amplitude * thigh_swing + hip_lift + p.knee_bend * 0.5 + noise[0];
  const double knee_angle = p.knee_bend + flex + std::abs(noise[1]);
  Leg leg;
  // A circumducting leg swings outward; its sagittal projection appears shorter (hip hike).
  const double hike = circ ? p.circumduction * 0.12 * body.leg() * swing : 0.0;
  leg.hip = {0.0, hike};
  leg.knee = leg.hip + body.thigh * down(theta);
  const double psi = theta - knee_angle;
  leg.ankle = leg.knee + body.shank * down(psi);
  const Vec forward{std::cos(psi), std::sin(psi)};
  leg.toe = leg.ankle + 0.75 * body.foot * forward;
  leg.heel = leg.ankle - 0.25 * body.foot * forward;
  return leg;
}

Figure pose_figure(const GaitStyleParams& p, const Anthropometrics& body, double t, double tremor_phase,
                   const FrameNoise& nz) {
  const double phi = 2.0 * kPi * t / p.cadence_frames;
  Figure f;
  // Frame 0 is double support with the right foot leading.
  const double swing_r = std::max(0.0, -std::sin(phi));
  const double swing_l = std::max(0.0, std::sin(phi));
  f.leg[0] = pose_leg(p, body, std::cos(phi), swing_r, p.circumduction_right, nz.d + 0);
  f.leg[1] = pose_leg(p, body, -std::cos(phi), swing_l, p.circumduction_left, nz.d + 2);

  // Lowest foot point rests on the ground line.
  double lowest = 0.0;
  for (const auto& leg : f.leg) lowest = std::min({lowest, leg.heel.y, leg.toe.y, leg.ankle.y});
  const double foot_radius = 0.35 * body.limb_width;
  const Vec lift{0.0, -lowest + foot_radius};
  for (auto& leg : f.leg)
    for (Vec* v : {&leg.hip, &leg.knee, &leg.ankle, &leg.heel, &leg.toe}) *v = *v + lift;

  const double shake = p.shake_amplitude * std::sin(2.0 * kPi * 0.3 * t + tremor_phase);
  const double lean = p.torso_lean_deg * kPi / 180.0 + nz.d[4];
  f.midhip = Vec{0.0, lift.y} + Vec{0.3 * shake, 0.0};
  f.neck = f.midhip + body.torso * up(lean);
  f.head = f.neck + (body.neck + body.head_radius) * up(lean);
  f.nose = f.head + Vec{0.8 * body.head_radius * std::cos(lean), -0.8 * body.head_radius * std::sin(lean)};
  f.shoulder = f.neck - 0.12 * body.torso * up(lean);

  const double swing_amp[2] = {p.arm_swing_right * 0.7, p.arm_swing_left * 0.7};
  const double elbow_flex[2] = {p.elbow_flexion_right, p.elbow_flexion_left};
  for (int s = 0; s < 2; ++s) {
    const double sign = s == 0 ? -1.0 : 1.0;  // arms swing against the same-side leg
    const double a = sign * swing_amp[s] * std::cos(phi) + 0.5 * lean + nz.d[5 + s];
    f.elbow[s] = f.shoulder + body.upper_arm * down(a);
    f.wrist[s] = f.elbow[s] + body.forearm * down(a + 1.2 * elbow_flex[s]) + Vec{shake, 0.5 * shake};
  }

  const double limb_r = body.limb_width / 2.0;
  const double arm_r = 0.4 * body.limb_width;
  f.capsules.push_back({f.midhip, f.neck, body.torso_width / 2.0});
  f.capsules.push_back({f.neck, f.head, 0.3 * body.torso_width});
  f.capsules.push_back({f.head, f.head, body.head_radius});
  for (const auto& leg : f.leg) {
    f.capsules.push_back({f.midhip + Vec{0.0, leg.hip.y - lift.y}, leg.knee, limb_r});
    f.capsules.push_back({leg.knee, leg.ankle, 0.85 * limb_r});
    f.capsules.push_back({leg.heel, leg.toe, foot_radius});
  }
  for (int s = 0; s < 2; ++s) {
    f.capsules.push_back({f.shoulder, f.elbow[s], arm_r});
    f.capsules.push_back({f.elbow[s], f.wrist[s], 0.85 * arm_r});
  }
  return f;
}

struct Extent {
  double x0 = 0.0, x1 = 0.0, top = 0.0;
};

Extent extent(const Figure& f) {
  Extent e{1e9, -1e9, -1e9};
  for (const auto& c : f.capsules) {
    e.x0 = std::min({e.x0, c.a.x - c.r, c.b.x - c.r});
    e.x1 = std::max({e.x1, c.a.x + c.r, c.b.x + c.r});
    e.top = std::max({e.top, c.a.y + c.r, c.b.y + c.r});
  }
  return e;
}

// Pixel centre (x+0.5, y+0.5) inside any capsule; `ox` is the hip column, `ground` the ground row.
void rasterize(const Figure& f, double ox, double ground, BinaryMask& mask) {
  for (const auto& c : f.capsules) {
    const Vec a{ox + c.a.x, ground - c.a.y}, b{ox + c.b.x, ground - c.b.y};
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - c.r)));
    const int x1 = std::min(mask.width - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + c.r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - c.r)));
    const int y1 = std::min(mask.height - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + c.r)));
    const Vec d = b - a;
    const double len2 = d.x * d.x + d.y * d.y;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const Vec q{x + 0.5 - a.x, y + 0.5 - a.y};
        const double t = len2 > 0 ? std::clamp((q.x * d.x + q.y * d.y) / len2, 0.0, 1.0) : 0.0;
        const double ex = q.x - t * d.x, ey = q.y - t * d.y;
        if (ex * ex + ey * ey <= c.r * c.r) mask.at(x, y) = 1;
      }
  }
}

PoseFrame keypoints(const Figure& f, double ox, double ground) {
  PoseFrame pose;
  auto set = [&](int k, Vec v) { pose.keypoints[k] = {ox + v.x, ground - v.y, 1.0}; };
  set(0, f.nose);
  set(1, f.neck);
  set(2, f.shoulder);
  set(3, f.elbow[0]);
  set(4, f.wrist[0]);
  set(5, f.shoulder);
  set(6, f.elbow[1]);
  set(7, f.wrist[1]);
  set(8, f.midhip);
  set(9, f.midhip);
  set(10, f.leg[0].knee);
  set(11, f.leg[0].ankle);
  set(12, f.midhip);
  set(13, f.leg[1].knee);
  set(14, f.leg[1].ankle);
  set(19, f.leg[1].toe);
  set(21, f.leg[1].heel);
  set(22, f.leg[0].toe);
  set(24, f.leg[0].heel);
  // Eyes, ears and small toes are not modelled: left at confidence 0.
  return pose;
}

std::array<std::uint8_t, 3> noisy(std::array<double, 3> rgb, Rng& rng, double sigma) {
  std::array<std::uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c) out[c] = static_cast<std::uint8_t>(std::clamp(std::lround(rgb[c] + sigma * normal01(rng)), 0L, 255L));
  return out;
}

nlohmann::json params_json(const GaitStyleParams& p) {
  return {{"torso_lean_deg", p.torso_lean_deg},
          {"step_length", p.step_length},
          {"knee_lift", p.knee_lift},
          {"arm_swing_left", p.arm_swing_left},
          {"arm_swing_right", p.arm_swing_right},
          {"circumduction", p.circumduction},
          {"circumduction_left", p.circumduction_left},
          {"circumduction_right", p.circumduction_right},
          {"elbow_flexion_left", p.elbow_flexion_left},
          {"elbow_flexion_right", p.elbow_flexion_right},
          {"knee_bend", p.knee_bend},
          {"shake_amplitude", p.shake_amplitude},
          {"cadence_frames", p.cadence_frames},
          {"severity_scale", p.severity_scale}};
}

nlohmann::json body_json(const Anthropometrics& b) {
  return {{"thigh", b.thigh},         {"shank", b.shank},         {"foot", b.foot},
          {"torso", b.torso},         {"neck", b.neck},           {"head_radius", b.head_radius},
          {"upper_arm", b.upper_arm}, {"forearm", b.forearm},     {"limb_width", b.limb_width},
          {"torso_width", b.torso_width}};
}

std::string two_digits(int v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", v);
  return buf;
}

std::string frame_name(int i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d.%s", i, ext);
  return buf;
}

}  // namespace

void GaitStyleParams::validate() const {
  check_fraction("step_length", step_length);
  check_fraction("knee_lift", knee_lift);
  check_fraction("arm_swing_left", arm_swing_left);
  check_fraction("arm_swing_right", arm_swing_right);
  check_fraction("circumduction", circumduction);
  check_fraction("elbow_flexion_left", elbow_flexion_left);
  check_fraction("elbow_flexion_right", elbow_flexion_right);
  check_fraction("knee_bend", knee_bend);
  if (!(torso_lean_deg >= -30.0 && torso_lean_deg <= 45.0))
    throw std::invalid_argument("torso_lean_deg must lie in [-30, 45]");
  if (!(shake_amplitude >= 0.0 && shake_amplitude <= 10.0))
    throw std::invalid_argument("shake_amplitude must lie in [0, 10] pixels");
  if (cadence_frames < 10 || cadence_frames > 40) throw std::invalid_argument("cadence_frames must lie in [10, 40]");
  if (!(severity_scale > 0.0 && severity_scale <= 3.0)) throw std::invalid_argument("severity_scale must lie in (0, 3]");
}

GaitStyleParams legs_only_variant() {
  GaitStyleParams p;
  p.knee_lift = 0.0;  // below the hip-flexion threshold, so only the knee changes
  return p;
}

GaitStyleParams preset(GaitClass gait_class, int severity) {
  if (gait_class != GaitClass::normal && severity != 1 && severity != 2)
    throw std::invalid_argument("severity must be 1 or 2");
  const double k = severity == 2 ? 1.5 : 1.0;
  GaitStyleParams p;
  switch (gait_class) {
    case GaitClass::normal:
      return p;
    case GaitClass::parkinsonian:
      p.torso_lean_deg = 15.0 * k;
      p.step_length = 0.3 / k;
      p.knee_lift = 0.2;
      p.arm_swing_left = p.arm_swing_right = 0.15 / k;
      p.elbow_flexion_left = p.elbow_flexion_right = 0.6 * k;
      p.knee_bend = 0.25 * k;
      p.shake_amplitude = 2.0 * k;
      p.cadence_frames = severity == 2 ? 10 : 11;
      break;
    case GaitClass::diplegic:
      p.torso_lean_deg = 12.0 * k;
      p.step_length = 0.4 / k;
      p.knee_lift = 0.2;
      p.circumduction = 0.6 * k;
      p.circumduction_left = p.circumduction_right = true;
      p.knee_bend = 0.35 * k;
      p.arm_swing_left = p.arm_swing_right = 0.3;
      p.cadence_frames = severity == 2 ? 18 : 16;
      break;
    case GaitClass::hemiplegic:
      p.arm_swing_right = 0.0;
      p.elbow_flexion_right = 0.6 * k;
      p.circumduction = 0.6 * k;
      p.circumduction_right = true;
      p.step_length = 0.45;
      p.cadence_frames = severity == 2 ? 17 : 15;
      break;
    case GaitClass::neuropathic:
      p.knee_lift = 0.75 * k;
      p.step_length = 0.55;
      p.torso_lean_deg = 4.0;
      p.cadence_frames = severity == 2 ? 15 : 14;
      break;
    default:
      throw std::invalid_argument("unknown gait class");
  }
  p.severity_scale = k;
  return p;
}

Anthropometrics Anthropometrics::vary(std::uint64_t seed, double spread) {
  Rng rng(seed);
  Anthropometrics b;
  for (double* v : {&b.thigh, &b.shank, &b.foot, &b.torso, &b.neck, &b.head_radius, &b.upper_arm, &b.forearm,
                    &b.limb_width, &b.torso_width})
    *v *= 1.0 + spread * (2.0 * uniform01(rng) - 1.0);
  return b;
}

ColorFrame green_background(int width, int height, std::uint64_t seed, double noise_sigma) {
  ColorFrame frame(width, height);
  Rng rng(seed);
  const std::size_t n = static_cast<std::size_t>(width) * height;
  for (std::size_t i = 0; i < n; i += 2) {
    // Box-Muller pair: one hue offset per pixel.
    const double r = std::sqrt(-2.0 * std::log(1.0 - uniform01(rng))), a = 6.283185307179586 * uniform01(rng);
    const double offsets[2] = {r * std::cos(a), r * std::sin(a)};
    for (std::size_t j = 0; j < 2 && i + j < n; ++j) {
      const auto rgb = hsv_to_rgb(std::fmod(480.0 + noise_sigma * offsets[j], 360.0), 0.75, 0.70);
      std::copy(rgb.begin(), rgb.end(), frame.rgb.data() + 3 * (i + j));
    }
  }
  return frame;
}

ColorFrame composite_green_screen(const BinaryMask& figure, std::uint64_t seed, double noise_sigma) {
  ColorFrame frame = green_background(figure.width, figure.height, seed, noise_sigma);
  const BoundingBox box = bounding_box(figure);
  if (box.empty()) return frame;
  Rng rng(derive_seed(seed, 1));
  for (int y = box.y0; y <= box.y1; ++y) {
    const double rel = static_cast<double>(y - box.y0) / box.height();
    const std::array<double, 3> base = rel < 0.15   ? std::array<double, 3>{205, 160, 130}   // skin
                                       : rel < 0.5 ? std::array<double, 3>{170, 45, 45}     // shirt
                                                   : std::array<double, 3>{45, 45, 95};     // trousers
    for (int x = box.x0; x <= box.x1; ++x)
      if (figure.at(x, y)) {
        const auto rgb = noisy(base, rng, noise_sigma);
        std::copy(rgb.begin(), rgb.end(), frame.pixel(x, y));
      }
  }
  return frame;
}

GeneratedSequence generate_sequence(const GaitStyleParams& params, int n_frames, std::uint64_t seed,
                                    const SequenceOptions& options) {
  params.validate();
  if (n_frames < 1) throw std::invalid_argument("n_frames must be >= 1");
  if (!(options.jitter >= 0.0)) throw std::invalid_argument("jitter must be non-negative");
  const Anthropometrics& body = options.body;
  Rng rng(seed);
  const double tremor_phase = 2.0 * kPi * uniform01(rng);

  std::vector<Figure> figures;
  figures.reserve(n_frames);
  Extent ext{1e9, -1e9, -1e9};
  for (int t = 0; t < n_frames; ++t) {
    FrameNoise nz;
    if (options.jitter > 0.0)
      for (double& d : nz.d) d = options.jitter * normal01(rng);
    figures.push_back(pose_figure(params, body, t, tremor_phase, nz));
    const Extent e = extent(figures.back());
    ext = {std::min(ext.x0, e.x0), std::max(ext.x1, e.x1), std::max(ext.top, e.top)};
  }

  const double step = 2.0 * body.leg() * std::min(0.95, params.step_length / 2.0);
  const double speed = 2.0 * step / params.cadence_frames;
  const double travel = speed * (n_frames - 1);
  const double start_x = options.start_x >= 0.0 ? options.start_x : kMargin - ext.x0;
  const int needed_width = static_cast<int>(std::ceil(ext.x1 - ext.x0 + 2.0 * kMargin));
  const int needed_height = static_cast<int>(std::ceil(ext.top + 2.0 * kMargin));
  const int width = options.frame.width > 0 ? options.frame.width
                                            : static_cast<int>(std::ceil(start_x + travel + ext.x1 + kMargin));
  const int height = options.frame.height;
  if (width < needed_width || height < needed_height)
    throw std::invalid_argument("frame " + std::to_string(width) + "x" + std::to_string(height) +
                                " is too small for the figure (needs at least " + std::to_string(needed_width) + "x" +
                                std::to_string(needed_height) + ")");
  const double ground = height - kMargin;

  GeneratedSequence out;
  out.params = params;
  out.silhouettes.source_fps = kTargetFps;
  for (int t = 0; t < n_frames; ++t) {
    const double ox = start_x + speed * t;
    BinaryMask mask(width, height);
    rasterize(figures[t], ox, ground, mask);
    out.silhouettes.frames.push_back(std::move(mask));
    out.poses.push_back(keypoints(figures[t], ox, ground));
  }
  for (int k = 0; (k + 1) * params.cadence_frames <= n_frames; ++k)
    out.truth_cycles.push_back({k * params.cadence_frames, (k + 1) * params.cadence_frames - 1});
  if (options.render_color) {
    out.background = green_background(width, height, derive_seed(seed, 999), options.color_noise_sigma);
    for (int t = 0; t < n_frames; ++t) {
      out.color_frames.push_back(
          composite_green_screen(out.silhouettes.frames[t], derive_seed(seed, 1000 + t), options.color_noise_sigma));
      out.color_frames.back().timestamp_index = t;
    }
  }
  return out;
}

namespace {

void visit_dataset(int n_subjects, int seqs_per_class, std::uint64_t seed, const DatasetOptions& options,
                   const std::function<void(const Anthropometrics&)>& on_subject,
                   const std::function<void(SyntheticSample&)>& on_sample) {
  if (n_subjects < 2) throw std::invalid_argument("generate_dataset needs at least 2 subjects");
  if (seqs_per_class < 1) throw std::invalid_argument("seqs_per_class must be >= 1");
  for (int s = 1; s <= n_subjects; ++s) {
    const Anthropometrics body = Anthropometrics::vary(derive_seed(seed, static_cast<std::uint64_t>(s)));
    on_subject(body);
    Rng style_rng(derive_seed(seed, 10000 + static_cast<std::uint64_t>(s)));
    // Per-subject style factors shared by all of the subject's walks.
    double factor[4];
    for (double& f : factor) f = 1.0 + options.style_spread * normal01(style_rng);
    for (int c = 0; c < kNumClasses; ++c) {
      const auto gait_class = static_cast<GaitClass>(c);
      for (int m = 0; m < seqs_per_class; ++m) {
        const int severity = gait_class == GaitClass::normal ? 0 : m % 2 + 1;
        GaitStyleParams p = preset(gait_class, severity == 0 ? 1 : severity);
        p.step_length = std::clamp(p.step_length * factor[0], 0.05, 1.5);
        p.knee_lift = std::clamp(p.knee_lift * factor[1], 0.0, 1.5);
        p.arm_swing_left = std::clamp(p.arm_swing_left * factor[2], 0.0, 1.5);
        p.arm_swing_right = std::clamp(p.arm_swing_right * factor[2], 0.0, 1.5);
        p.torso_lean_deg = std::clamp(p.torso_lean_deg * factor[3], -30.0, 45.0);

        SyntheticSample sample;
        sample.meta.subject = s;
        sample.meta.gait_class = gait_class;
        sample.meta.severity = severity;
        sample.meta.sequence = m + 1;
        sample.body = body;
        SequenceOptions so;
        so.body = body;
        so.jitter = options.jitter;
        so.render_color = options.write_color_frames;
        const std::uint64_t seq_seed =
            derive_seed(seed, 100000 + static_cast<std::uint64_t>(s) * 1000 + static_cast<std::uint64_t>(c) * 100 +
                                  static_cast<std::uint64_t>(m));
        sample.sequence = generate_sequence(p, options.n_frames, seq_seed, so);
        sample.sequence.silhouettes.meta = sample.meta;
        const auto& seq = sample.sequence;
        for (const auto& cycle : seq.truth_cycles) {
          EnergyImage gei = gei_for_cycle(seq.silhouettes, cycle);
          gei.meta = sample.meta;
          sample.geis.push_back(std::move(gei));
          std::vector<PoseFrame> poses(seq.poses.begin() + cycle.start_frame, seq.poses.begin() + cycle.end_frame + 1);
          EnergyImage sei = compute_sei(poses, seq.silhouettes.frames[0].width, seq.silhouettes.frames[0].height);
          sei.meta = sample.meta;
          sample.seis.push_back(std::move(sei));
        }
        if (!options.keep_frames) {
          sample.sequence.silhouettes.frames.clear();
          sample.sequence.poses.clear();
          sample.sequence.color_frames.clear();
          sample.sequence.background = {};
        }
        on_sample(sample);
      }
    }
  }
}


}  // namespace

SyntheticDataset generate_dataset(int n_subjects, int seqs_per_class, std::uint64_t seed, const DatasetOptions& options) {
  SyntheticDataset data;
  visit_dataset(
      n_subjects, seqs_per_class, seed, options, [&](const Anthropometrics& b) { data.subjects.push_back(b); },
      [&](SyntheticSample& sample) { data.sequences.push_back(std::move(sample)); });
  return data;
}

std::string sequence_dir(const SequenceMeta& meta) {
  const std::string sev = meta.severity == 0 ? "na" : "sev" + std::to_string(meta.severity);
  return "subject_" + two_digits(meta.subject) + "/" + std::string(class_name(meta.gait_class)) + "_" + sev + "/seq_" +
         two_digits(meta.sequence);
}

namespace {

nlohmann::json manifest_head() {
  nlohmann::json manifest;
  manifest["generator"] = "synthkit";
  manifest["fps"] = kTargetFps;
  manifest["classes"] = nlohmann::json::array();
  for (auto n : kClassNames) manifest["classes"].push_back(std::string(n));
  manifest["subjects"] = nlohmann::json::array();
  manifest["sequences"] = nlohmann::json::array();
  return manifest;
}

// Writes one sequence below root and returns its manifest entry.
nlohmann::json write_sample(const SyntheticSample& sample, const std::filesystem::path& root,
                            const DatasetOptions& options) {
  namespace fs = std::filesystem;
  const std::string rel = sequence_dir(sample.meta);
  const fs::path dir = root / rel;
  const auto& seq = sample.sequence;
  fs::create_directories(dir / "masks");
  for (std::size_t i = 0; i < seq.silhouettes.frames.size(); ++i)
    write_png(dir / "masks" / frame_name(static_cast<int>(i), "png"), raw_from_mask(seq.silhouettes.frames[i]));
  if (options.write_color_frames && !seq.color_frames.empty()) {
    fs::create_directories(dir / "frames");
    for (std::size_t i = 0; i < seq.color_frames.size(); ++i)
      write_png(dir / "frames" / frame_name(static_cast<int>(i), "png"), raw_from_frame(seq.color_frames[i]));
    write_png(dir / "background.png", raw_from_frame(seq.background));
  }
  if (options.write_poses) {
    fs::create_directories(dir / "poses");
    for (std::size_t i = 0; i < seq.poses.size(); ++i) {
      nlohmann::json kp = nlohmann::json::array();
      for (const auto& k : seq.poses[i].keypoints) kp.push_back({k.x, k.y, k.confidence});
      std::ofstream(dir / "poses" / frame_name(static_cast<int>(i), "json")) << kp.dump();
    }
  }
  if (options.write_energy_images) {
    fs::create_directories(dir / "gei");
    fs::create_directories(dir / "sei");
    for (std::size_t k = 0; k < sample.geis.size(); ++k) {
      const auto bytes = encode_gray_png(sample.geis[k].pixels);
      write_file(dir / "gei" / ("cycle_" + two_digits(static_cast<int>(k)) + ".png"), bytes);
      const auto sbytes = encode_gray_png(sample.seis[k].pixels);
      write_file(dir / "sei" / ("cycle_" + two_digits(static_cast<int>(k)) + ".png"), sbytes);
    }
  }
  nlohmann::json truth;
  truth["cycles"] = nlohmann::json::array();
  for (const auto& c : seq.truth_cycles) truth["cycles"].push_back({c.start_frame, c.end_frame});
  truth["params"] = params_json(seq.params);
  truth["body"] = body_json(sample.body);
  std::ofstream(dir / "truth.json") << truth.dump(2);

  return {{"subject", sample.meta.subject},
          {"class", std::string(class_name(sample.meta.gait_class))},
          {"severity", sample.meta.severity},
          {"direction", sample.meta.direction},
          {"sequence", sample.meta.sequence},
          {"repeat_of", sample.meta.repeat_of},
          {"path", rel},
          {"frames", seq.silhouettes.frames.size()},
          {"fps", seq.silhouettes.source_fps}};
}

void write_manifest(const nlohmann::json& manifest, const std::filesystem::path& root) {
  std::ofstream out(root / "manifest.json");
  out << manifest.dump(2);
  if (!out) throw std::runtime_error("cannot write " + (root / "manifest.json").string());
}

}  // namespace

void write_dataset(const SyntheticDataset& data, const std::filesystem::path& root, const DatasetOptions& options) {
  for (const auto& sample : data.sequences)
    if (sample.sequence.silhouettes.frames.empty())
      throw std::invalid_argument("write_dataset: sequence frames were not kept (DatasetOptions::keep_frames)");
  std::filesystem::create_directories(root);
  nlohmann::json manifest = manifest_head();
  for (std::size_t i = 0; i < data.subjects.size(); ++i)
    manifest["subjects"].push_back({{"id", static_cast<int>(i) + 1}, {"body", body_json(data.subjects[i])}});
  for (const auto& sample : data.sequences) manifest["sequences"].push_back(write_sample(sample, root, options));
  write_manifest(manifest, root);
}

void generate_dataset_to(const std::filesystem::path& root, int n_subjects, int seqs_per_class, std::uint64_t seed,
                         DatasetOptions options) {
  options.keep_frames = true;
  std::filesystem::create_directories(root);
  nlohmann::json manifest = manifest_head();
  int subject = 0;
  visit_dataset(
      n_subjects, seqs_per_class, seed, options,
      [&](const Anthropometrics& b) { manifest["subjects"].push_back({{"id", ++subject}, {"body", body_json(b)}}); },
      [&](SyntheticSample& sample) { manifest["sequences"].push_back(write_sample(sample, root, options)); });
  write_manifest(manifest, root);
}

}  // namespace gaitworks::synth
