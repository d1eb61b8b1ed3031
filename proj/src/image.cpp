#include "reidmamba/image.hpp"

namespace reidmamba {

Image mirror(const Image& img) {
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    }
  }
  return out;
}

}  // namespace reidmamba
