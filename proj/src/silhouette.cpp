#include "gaitworks/silhouette.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace gaitworks {

Hsv rgb_to_hsv(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  const int r = r8, g = g8, b = b8;
  const int mx = std::max({r, g, b});
  const int mn = std::min({r, g, b});
  const int delta = mx - mn;
  Hsv out;
  out.v = mx;
  out.s = mx == 0 ? 0 : static_cast<int>(std::lround(255.0 * delta / mx));
  if (delta == 0) {
    out.h = 0;
    return out;
  }
  double h;
  if (mx == r)
    h = 60.0 * (g - b) / delta;
  else if (mx == g)
    h = 120.0 + 60.0 * (b - r) / delta;
  else
    h = 240.0 + 60.0 * (r - g) / delta;
  if (h < 0) h += 360.0;
  out.h = static_cast<int>(std::lround(h / 2.0)) % 180;
  return out;
}

std::array<std::uint8_t, 3> hsv_to_rgb(double h, double s, double v) {
  // h in degrees [0,360), s and v in [0,1]
  h = std::fmod(h, 360.0);
  if (h < 0) h += 360.0;
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  auto to8 = [](double u) { return static_cast<std::uint8_t>(std::clamp(std::lround(u * 255.0), 0L, 255L)); };
  return {to8(r + m), to8(g + m), to8(b + m)};
}

bool HsvBackgroundModel::contains(const Hsv& p) const {
  const bool h_in = hue.low <= hue.high ? (p.h >= hue.low && p.h <= hue.high) : (p.h >= hue.low || p.h <= hue.high);
  return h_in && p.s >= saturation.low && p.s <= saturation.high && p.v >= value.low && p.v <= value.high;
}

int HsvBackgroundModel::hue_width() const {
  return hue.low <= hue.high ? hue.high - hue.low + 1 : 180 - hue.low + hue.high + 1;
}

namespace {

// Smallest bin index whose cumulative count reaches `fraction` of the total.
int percentile_bin(const std::vector<std::size_t>& hist, std::size_t total, double fraction) {
  const double target = fraction * static_cast<double>(total);
  std::size_t cum = 0;
  for (std::size_t i = 0; i < hist.size(); ++i) {
    cum += hist[i];
    if (static_cast<double>(cum) >= target && cum > 0) return static_cast<int>(i);
  }
  return static_cast<int>(hist.size()) - 1;
}

ChannelRange linear_range(const std::vector<std::size_t>& hist, std::size_t total, const BackgroundOptions& o,
                          int max_value) {
  int lo = percentile_bin(hist, total, o.low_percentile / 100.0);
  int hi = percentile_bin(hist, total, o.high_percentile / 100.0);
  return {std::max(0, lo - o.margin), std::min(max_value, hi + o.margin)};
}

ChannelRange hue_range(const std::vector<std::size_t>& hist, std::size_t total, const BackgroundOptions& o) {
  constexpr int kBins = 180;
  // Rotate the circular histogram so that it starts in the middle of its widest empty run.
  int best_start = 0, best_len = -1;
  for (int start = 0; start < kBins; ++start) {
    if (hist[start] != 0 || hist[(start + kBins - 1) % kBins] == 0) continue;
    int len = 0;
    while (len < kBins && hist[(start + len) % kBins] == 0) ++len;
    if (len > best_len) {
      best_len = len;
      best_start = start;
    }
  }
  const int offset = best_len > 0 ? (best_start + best_len / 2) % kBins : 0;
  std::vector<std::size_t> rotated(kBins);
  for (int i = 0; i < kBins; ++i) rotated[i] = hist[(i + offset) % kBins];
  const int lo = percentile_bin(rotated, total, o.low_percentile / 100.0) - o.margin;
  const int hi = percentile_bin(rotated, total, o.high_percentile / 100.0) + o.margin;
  if (hi - lo + 1 >= kBins) return {0, kBins - 1};
  return {((lo + offset) % kBins + kBins) % kBins, ((hi + offset) % kBins + kBins) % kBins};
}

}  // namespace

HsvBackgroundModel learn_background(const ColorFrame& frame, const BackgroundOptions& options) {
  if (frame.empty() || frame.width <= 0 || frame.height <= 0) throw std::invalid_argument("learn_background: empty frame");
  std::vector<std::size_t> h(180, 0), s(256, 0), v(256, 0);
  const std::size_t n = static_cast<std::size_t>(frame.width) * frame.height;
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = frame.rgb.data() + 3 * i;
    const Hsv c = rgb_to_hsv(p[0], p[1], p[2]);
    ++h[c.h];
    ++s[c.s];
    ++v[c.v];
  }
  HsvBackgroundModel m;
  m.hue = hue_range(h, n, options);
  m.saturation = linear_range(s, n, options, 255);
  m.value = linear_range(v, n, options, 255);
  return m;
}

BinaryMask segment(const ColorFrame& frame, const HsvBackgroundModel& model) {
  BinaryMask mask(frame.width, frame.height);
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    const auto* p = frame.rgb.data() + 3 * i;
    mask.pixels[i] = model.contains(rgb_to_hsv(p[0], p[1], p[2])) ? 0 : 1;
  }
  return mask;
}

namespace {

// Out-of-image neighbours are ignored, so the image border neither erodes nor dilates.
BinaryMask morph3x3(const BinaryMask& m, bool erode) {
  BinaryMask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      bool result = erode;
      for (int dy = -1; dy <= 1 && result == erode; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = x + dx, ny = y + dy;
          if (!m.contains(nx, ny)) continue;
          const bool fg = m.at(nx, ny) != 0;
          if (erode && !fg) {
            result = false;
            break;
          }
          if (!erode && fg) {
            result = true;
            break;
          }
        }
      out.at(x, y) = result ? 1 : 0;
    }
  return out;
}

}  // namespace

BinaryMask erode3x3(const BinaryMask& mask) { return morph3x3(mask, true); }
BinaryMask dilate3x3(const BinaryMask& mask) { return morph3x3(mask, false); }
BinaryMask open3x3(const BinaryMask& mask) { return dilate3x3(erode3x3(mask)); }
BinaryMask close3x3(const BinaryMask& mask) { return erode3x3(dilate3x3(mask)); }

std::vector<Component> connected_components(const BinaryMask& mask, std::vector<int>* labels_out) {
  std::vector<int> labels(mask.pixels.size(), 0);
  std::vector<Component> comps;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y) || labels[static_cast<std::size_t>(y) * mask.width + x]) continue;
      Component c;
      c.label = static_cast<int>(comps.size()) + 1;
      c.box = {x, y, x, y};
      stack.push_back({x, y});
      labels[static_cast<std::size_t>(y) * mask.width + x] = c.label;
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        ++c.area;
        c.box.x0 = std::min(c.box.x0, cx);
        c.box.y0 = std::min(c.box.y0, cy);
        c.box.x1 = std::max(c.box.x1, cx);
        c.box.y1 = std::max(c.box.y1, cy);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy;
            if (!mask.contains(nx, ny) || !mask.at(nx, ny)) continue;
            int& l = labels[static_cast<std::size_t>(ny) * mask.width + nx];
            if (l) continue;
            l = c.label;
            stack.push_back({nx, ny});
          }
      }
      comps.push_back(c);
    }
  if (labels_out) *labels_out = std::move(labels);
  return comps;
}

namespace {

BinaryMask remove_small(const BinaryMask& mask, std::size_t min_area) {
  std::vector<int> labels;
  const auto comps = connected_components(mask, &labels);
  BinaryMask out(mask.width, mask.height);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] && comps[labels[i] - 1].area >= min_area) out.pixels[i] = 1;
  return out;
}

}  // namespace

BinaryMask denoise(const BinaryMask& mask, double min_blob_area_fraction) {
  const auto min_area = static_cast<std::size_t>(std::ceil(min_blob_area_fraction * static_cast<double>(mask.area())));
  BinaryMask current = mask;
  for (int iter = 0; iter < 8; ++iter) {
    BinaryMask next = remove_small(close3x3(open3x3(current)), min_area);
    if (next == current) break;
    current = std::move(next);
  }
  return current;
}

BinaryMask largest_component(const BinaryMask& mask) {
  std::vector<int> labels;
  const auto comps = connected_components(mask, &labels);
  if (comps.empty()) throw std::invalid_argument("largest_component: mask has no foreground");
  const Component* best = &comps[0];
  for (const auto& c : comps) {
    if (c.area > best->area ||
        (c.area == best->area && std::pair(c.box.y0, c.box.x0) < std::pair(best->box.y0, best->box.x0)))
      best = &c;
  }
  BinaryMask out(mask.width, mask.height);
  for (std::size_t i = 0; i < labels.size(); ++i) out.pixels[i] = labels[i] == best->label ? 1 : 0;
  return out;
}

}  // namespace gaitworks
