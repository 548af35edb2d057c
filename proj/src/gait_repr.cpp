#include "gaitworks/gait_repr.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gaitworks {

const std::vector<std::pair<int, int>>& body25_limbs() {
  static const std::vector<std::pair<int, int>> limbs = {
      {1, 8},   {1, 2},   {1, 5},   {2, 3},   {3, 4},   {5, 6},   {6, 7},   {8, 9},
      {9, 10},  {10, 11}, {8, 12},  {12, 13}, {13, 14}, {1, 0},   {0, 15},  {15, 17},
      {0, 16},  {16, 18}, {14, 19}, {19, 20}, {14, 21}, {11, 22}, {22, 23}, {11, 24}};
  return limbs;
}

std::vector<int> resample_indices(std::size_t frame_count, double source_fps, double target_fps) {
  if (!(source_fps > 0.0) || !(target_fps > 0.0)) throw std::invalid_argument("frame rates must be positive");
  if (source_fps + 1e-9 < target_fps)
    throw std::invalid_argument("cannot resample " + std::to_string(source_fps) + " fps up to " +
                                std::to_string(target_fps) + " fps");
  std::vector<int> idx;
  if (frame_count == 0) return idx;
  const double duration = static_cast<double>(frame_count - 1) / source_fps;
  const double ratio = source_fps / target_fps;
  for (std::size_t j = 0;; ++j) {
    const double t = static_cast<double>(j) / target_fps;
    if (t > duration + 1e-9) break;
    const auto i = static_cast<int>(std::floor(static_cast<double>(j) * ratio + 0.5));
    idx.push_back(std::min(i, static_cast<int>(frame_count) - 1));
  }
  return idx;
}

SilhouetteSequence resample_fps(const SilhouetteSequence& seq, double target_fps) {
  SilhouetteSequence out;
  out.meta = seq.meta;
  out.source_fps = target_fps;
  for (int i : resample_indices(seq.frames.size(), seq.source_fps, target_fps)) out.frames.push_back(seq.frames[i]);
  return out;
}

GrayImage crop_normalize_gray(const BinaryMask& mask, int size) {
  const BoundingBox box = bounding_box(mask);
  if (box.empty()) throw std::invalid_argument("crop_normalize: mask has no foreground");
  const int w = box.width(), h = box.height();
  double sum_x = 0.0;
  std::size_t count = 0;
  for (int y = box.y0; y <= box.y1; ++y)
    for (int x = box.x0; x <= box.x1; ++x)
      if (mask.at(x, y)) {
        sum_x += x - box.x0 + 0.5;
        ++count;
      }
  const double cx = sum_x / static_cast<double>(count);

  int side, left, top;
  if (w >= h) {
    side = w;
    left = 0;
    top = (w - h) / 2;
  } else {
    const double half = std::max(cx, w - cx);
    side = std::max(h, static_cast<int>(std::ceil(2.0 * half - 1e-9)));
    left = std::clamp(static_cast<int>(std::lround(side / 2.0 - cx)), 0, side - w);
    top = (side - h) / 2;
  }
  GrayImage square(side, side, 0.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(box.x0 + x, box.y0 + y)) square.at(left + x, top + y) = 1.0f;
  if (side == size) return square;
  GrayImage out = resize_bilinear(square, size, size);
  if (std::all_of(out.pixels.begin(), out.pixels.end(), [](float v) { return v == 0.0f; })) {
    // Strokes thinner than the sampling step can fall between bilinear taps; map them forward instead.
    const double scale = static_cast<double>(size) / side;
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        if (square.at(x, y) > 0.0f)
          out.at(std::min(size - 1, static_cast<int>((x + 0.5) * scale)),
                 std::min(size - 1, static_cast<int>((y + 0.5) * scale))) = 1.0f;
  }
  return out;
}

BinaryMask crop_normalize(const BinaryMask& mask, int size) {
  const GrayImage gray = crop_normalize_gray(mask, size);
  BinaryMask out = binarize(gray, 0.5f);
  if (count_foreground(out) == 0) {
    const float peak = *std::max_element(gray.pixels.begin(), gray.pixels.end());
    for (std::size_t i = 0; i < gray.area(); ++i) out.pixels[i] = gray.pixels[i] == peak ? 1 : 0;
  }
  return out;
}

std::vector<double> width_signal(const SilhouetteSequence& seq) {
  std::vector<double> w;
  w.reserve(seq.frames.size());
  for (const auto& f : seq.frames) {
    const auto box = bounding_box(f);
    w.push_back(box.empty() ? 0.0 : static_cast<double>(box.width()));
  }
  return w;
}

std::vector<GaitCycle> detect_cycles_from_signal(const std::vector<double>& raw) {
  const std::size_t n = raw.size();
  std::vector<GaitCycle> cycles;
  if (n < 3) return cycles;
  std::vector<double> s(n);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t lo = t == 0 ? 0 : t - 1, hi = std::min(n - 1, t + 1);
    double acc = 0.0;
    for (std::size_t k = lo; k <= hi; ++k) acc += raw[k];
    s[t] = acc / static_cast<double>(hi - lo + 1);
  }
  const auto [mn, mx] = std::minmax_element(s.begin(), s.end());
  const double range = *mx - *mn;
  if (range <= 1e-9) return cycles;

  // Local maxima; a plateau counts once, at its centre.
  std::vector<int> peaks;
  for (std::size_t t = 1; t + 1 < n; ++t) {
    if (!(s[t] > s[t - 1])) continue;
    std::size_t e = t;
    while (e + 1 < n && s[e + 1] == s[t]) ++e;
    if (e + 1 < n && s[e + 1] < s[t]) peaks.push_back(static_cast<int>((t + e) / 2));
    t = e;
  }
  // Drop peaks that barely rise above the surrounding troughs.
  const double min_prominence = 0.05 * range;
  std::vector<int> kept;
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    const int p = peaks[i];
    const int left_bound = i == 0 ? 0 : peaks[i - 1];
    const int right_bound = i + 1 == peaks.size() ? static_cast<int>(n) - 1 : peaks[i + 1];
    const double left_min = *std::min_element(s.begin() + left_bound, s.begin() + p + 1);
    const double right_min = *std::min_element(s.begin() + p, s.begin() + right_bound + 1);
    if (s[p] - std::max(left_min, right_min) >= min_prominence) kept.push_back(p);
  }
  for (std::size_t i = 0; i + 2 < kept.size(); i += 2) {
    GaitCycle c{kept[i], kept[i + 2] - 1};
    if (c.length() >= kMinCycleFrames && c.length() <= kMaxCycleFrames) cycles.push_back(c);
  }
  return cycles;
}

std::vector<GaitCycle> detect_cycles(const SilhouetteSequence& seq) { return detect_cycles_from_signal(width_signal(seq)); }

TrimSpan trim_span(const SilhouetteSequence& seq) {
  auto usable = [&](const BinaryMask& m) {
    const auto box = bounding_box(m);
    return !box.empty() && box.x0 > 0 && box.x1 < m.width - 1;
  };
  const int n = static_cast<int>(seq.frames.size());
  int first = 0;
  while (first < n && !usable(seq.frames[first])) ++first;
  int last = n - 1;
  while (last >= first && !usable(seq.frames[last])) --last;
  if (first > last) throw std::invalid_argument("trim_partial: every frame touches a lateral border; no usable span");
  return {first, last};
}

SilhouetteSequence trim_partial(const SilhouetteSequence& seq) {
  const TrimSpan span = trim_span(seq);
  SilhouetteSequence out;
  out.meta = seq.meta;
  out.source_fps = seq.source_fps;
  out.frames.assign(seq.frames.begin() + span.first, seq.frames.begin() + span.last + 1);
  return out;
}

EnergyImage compute_gei(const std::vector<GrayImage>& frames) {
  if (frames.empty()) throw std::invalid_argument("compute_gei: empty frame list");
  const int w = frames[0].width, h = frames[0].height;
  std::vector<double> acc(static_cast<std::size_t>(w) * h, 0.0);
  for (const auto& f : frames) {
    if (f.width != w || f.height != h) throw std::invalid_argument("compute_gei: frames differ in size");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f.pixels[i];
  }
  EnergyImage e;
  e.kind = EnergyKind::gei;
  e.pixels = GrayImage(w, h);
  const double n = static_cast<double>(frames.size());
  for (std::size_t i = 0; i < acc.size(); ++i) e.pixels.pixels[i] = static_cast<float>(acc[i] / n);
  return e;
}

BinaryMask rasterize_skeleton(const PoseFrame& pose, int width, int height, double thickness, double min_confidence) {
  const auto confident = [&](int k) { return pose.keypoints[k].confidence >= min_confidence; };
  int n_confident = 0;
  for (int k = 0; k < kNumKeypoints; ++k) n_confident += confident(k);
  if (n_confident < 2)
    throw std::invalid_argument("rasterize_skeleton: need at least 2 keypoints with confidence >= " +
                                std::to_string(min_confidence));
  BinaryMask mask(width, height);
  const double r = thickness / 2.0;
  for (auto [a, b] : body25_limbs()) {
    if (!confident(a) || !confident(b)) continue;
    const auto& p = pose.keypoints[a];
    const auto& q = pose.keypoints[b];
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(p.x, q.x) - r)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(p.x, q.x) + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(p.y, q.y) - r)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(p.y, q.y) + r)));
    const double dx = q.x - p.x, dy = q.y - p.y;
    const double len2 = dx * dx + dy * dy;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5 - p.x, py = y + 0.5 - p.y;
        const double t = len2 > 0 ? std::clamp((px * dx + py * dy) / len2, 0.0, 1.0) : 0.0;
        const double ex = px - t * dx, ey = py - t * dy;
        if (ex * ex + ey * ey <= r * r) mask.at(x, y) = 1;
      }
  }
  return mask;
}

EnergyImage compute_sei(const std::vector<PoseFrame>& poses, int width, int height) {
  if (poses.empty()) throw std::invalid_argument("compute_sei: empty pose list");
  std::vector<GrayImage> frames;
  frames.reserve(poses.size());
  for (const auto& p : poses) frames.push_back(crop_normalize_gray(rasterize_skeleton(p, width, height)));
  EnergyImage e = compute_gei(frames);
  e.kind = EnergyKind::sei;
  return e;
}

EnergyImage gei_for_cycle(const SilhouetteSequence& seq, const GaitCycle& cycle) {
  if (cycle.start_frame < 0 || cycle.end_frame >= static_cast<int>(seq.frames.size()) || cycle.start_frame > cycle.end_frame)
    throw std::out_of_range("gei_for_cycle: cycle outside the sequence");
  std::vector<GrayImage> frames;
  for (int i = cycle.start_frame; i <= cycle.end_frame; ++i) frames.push_back(crop_normalize_gray(seq.frames[i]));
  EnergyImage e = compute_gei(frames);
  e.meta = seq.meta;
  e.provenance = "cycle";
  return e;
}

SilhouetteSequence skeleton_sequence(const std::vector<PoseFrame>& poses, int width, int height, double fps) {
  SilhouetteSequence seq;
  seq.source_fps = fps;
  for (const auto& p : poses) seq.frames.push_back(rasterize_skeleton(p, width, height));
  return seq;
}

}  // namespace gaitworks
