#include "fens/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fens {

namespace {

void check_image_shape(const ImageShape& s) {
  if (s.channels != 1 && s.channels != 3) {
    throw std::invalid_argument("image must have 1 or 3 channels, got " + std::to_string(s.channels));
  }
  if (s.height == 0 || s.width == 0) throw std::invalid_argument("image dimensions must be positive");
}

}  // namespace

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

Image::Image(ImageShape shape) : shape_(shape) {
  check_image_shape(shape_);
  pixels_.assign(shape_.size(), 0.0);
}

Image::Image(ImageShape shape, std::vector<double> pixels) : shape_(shape), pixels_(std::move(pixels)) {
  check_image_shape(shape_);
  if (pixels_.size() != shape_.size()) {
    throw std::invalid_argument("image pixel count " + std::to_string(pixels_.size()) + " does not match " +
                                std::to_string(shape_.size()));
  }
  for (double v : pixels_) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("image pixels must lie in [0, 1]");
  }
}

Image Image::clamped(ImageShape shape, std::vector<double> values) {
  for (auto& v : values) {
    if (std::isnan(v)) throw std::invalid_argument("image pixel is NaN");
    v = clamp01(v);
  }
  return Image(shape, std::move(values));
}

ImageShape image_shape_of(const Shape& shape) {
  if (shape.size() != 3) throw std::invalid_argument("expected (C,H,W) shape, got " + shape_to_string(shape));
  return {shape[0], shape[1], shape[2]};
}

}  // namespace fens
