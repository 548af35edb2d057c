#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "gaitworks/image.hpp"

namespace gaitworks {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoded 8-bit image with 1 (gray) or 3 (RGB) channels.
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

RawImage decode_png(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const RawImage& image);

RawImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RawImage& image);

/// Gray float image in [0,1] stored as round(255 * v).
std::vector<std::uint8_t> encode_gray_png(const GrayImage& image);
GrayImage gray_from_raw(const RawImage& raw);
/// Foreground where the luminance is >= 128.
BinaryMask mask_from_raw(const RawImage& raw);
RawImage raw_from_mask(const BinaryMask& mask);  // 0 / 255
RawImage raw_from_gray(const GrayImage& image);
ColorFrame frame_from_raw(const RawImage& raw);
RawImage raw_from_frame(const ColorFrame& frame);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace gaitworks
