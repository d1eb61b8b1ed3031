#pragma once

#include <cstddef>
#include <vector>

namespace reidmamba {

/// RGB image stored height-major, channel-last (HWC).
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) { return pixels[index(y, x, c)]; }
  double at(int y, int x, int c) const { return pixels[index(y, x, c)]; }

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * 3 + c;
  }

  bool operator==(const Image&) const = default;
};

/// Left-right mirror.
Image mirror(const Image& img);

}  // namespace reidmamba
