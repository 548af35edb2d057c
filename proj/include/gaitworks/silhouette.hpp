#pragma once

#include <array>
#include <cstdint>

#include "gaitworks/image.hpp"

namespace gaitworks {

/// HSV on the 8-bit friendly scale: hue in [0,180), saturation and value in [0,255].
struct Hsv {
  int h = 0;
  int s = 0;
  int v = 0;
};

Hsv rgb_to_hsv(std::uint8_t r, std::uint8_t g, std::uint8_t b);
std::array<std::uint8_t, 3> hsv_to_rgb(double h, double s, double v);

/// Closed interval; for hue, low > high denotes a range that wraps through 0.
struct ChannelRange {
  int low = 0;
  int high = 0;
};

struct HsvBackgroundModel {
  ChannelRange hue;
  ChannelRange saturation;
  ChannelRange value;

  bool contains(const Hsv& p) const;
  /// Number of hue bins covered, accounting for wrap-around.
  int hue_width() const;
};

struct BackgroundOptions {
  double low_percentile = 1.0;
  double high_percentile = 99.0;
  int margin = 4;
};

/// Learns per-component bounds from a frame that shows only the background.
HsvBackgroundModel learn_background(const ColorFrame& frame, const BackgroundOptions& options = {});

/// Foreground where any of H, S, V falls outside the model's ranges.
BinaryMask segment(const ColorFrame& frame, const HsvBackgroundModel& model);

BinaryMask erode3x3(const BinaryMask& mask);
BinaryMask dilate3x3(const BinaryMask& mask);
BinaryMask open3x3(const BinaryMask& mask);
BinaryMask close3x3(const BinaryMask& mask);

inline constexpr double kDefaultMinBlobFraction = 0.0005;

/// Opening then closing with a 3x3 square, then removal of 8-connected blobs smaller than
/// `min_blob_area_fraction` of the mask area. Repeated until stable.
BinaryMask denoise(const BinaryMask& mask, double min_blob_area_fraction = kDefaultMinBlobFraction);

struct Component {
  std::size_t area = 0;
  BoundingBox box;
  int label = 0;
};

/// 8-connected labelling. `labels` receives 0 for background, 1..n for components.
std::vector<Component> connected_components(const BinaryMask& mask, std::vector<int>* labels = nullptr);

/// Keeps the largest 8-connected component; ties go to the component whose bounding-box top-left
/// (row, then column) comes first. Throws on an empty mask.
BinaryMask largest_component(const BinaryMask& mask);

}  // namespace gaitworks
