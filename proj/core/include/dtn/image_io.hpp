#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "dtn/geometry.hpp"

namespace dtn {

/// 8-bit interleaved image, rows top to bottom, H x W x C.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c = 3) : width(w), height(h), channels(c), pixels(w * h * c, 0) {}

  std::uint8_t* at(std::size_t x, std::size_t y) { return pixels.data() + (y * width + x) * channels; }
  const std::uint8_t* at(std::size_t x, std::size_t y) const {
    return pixels.data() + (y * width + x) * channels;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

using Rgb = std::array<std::uint8_t, 3>;

/// Reads PNG (any bit depth, converted to 8-bit RGB) or binary PPM (P6).
Image read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
void write_ppm(const std::filesystem::path& path, const Image& image);

/// One-pixel box outline, clipped to the image.
void draw_box(Image& image, const BBox& box, Rgb color);

}  // namespace dtn
