#pragma once

#include <cstddef>
#include <vector>

namespace moa {

/// Height x width x channels pixels, row-major with channels innermost.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c) : height(h), width(w), channels(c), pixels(h * w * c) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

}  // namespace moa
