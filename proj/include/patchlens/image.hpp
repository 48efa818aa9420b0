#pragma once

#include <cstddef>
#include <vector>

namespace patchlens {

/// Single-channel square image, row-major. Black (object) pixels are 1.0,
/// white background pixels 0.0.
struct Image {
  std::size_t size = 0;  // pixels per side
  std::vector<float> pixels;

  float at(std::size_t row, std::size_t col) const { return pixels[row * size + col]; }
  float& at(std::size_t row, std::size_t col) { return pixels[row * size + col]; }

  static Image blank(std::size_t size) { return Image{size, std::vector<float>(size * size, 0.0f)}; }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace patchlens
