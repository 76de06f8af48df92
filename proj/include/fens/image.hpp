#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fens/tensor.hpp"

namespace fens {

struct ImageShape {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;

  std::size_t size() const { return channels * height * width; }
  std::size_t plane() const { return height * width; }
  Shape as_shape() const { return {channels, height, width}; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Channel-planar (C, H, W) raster with pixels in [0, 1]; channels is 1 or 3.
class Image {
 public:
  Image() = default;
  explicit Image(ImageShape shape);  // black
  Image(ImageShape shape, std::vector<double> pixels);

  /// Clamps every value into [0, 1] before constructing.
  static Image clamped(ImageShape shape, std::vector<double> values);

  const ImageShape& shape() const { return shape_; }
  std::size_t channels() const { return shape_.channels; }
  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  std::size_t size() const { return pixels_.size(); }

  std::span<const double> pixels() const { return pixels_; }
  const std::vector<double>& storage() const { return pixels_; }

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels_[(c * shape_.height + y) * shape_.width + x];
  }

  Tensor to_tensor() const { return Tensor(shape_.as_shape(), pixels_); }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  ImageShape shape_{};
  std::vector<double> pixels_;
};

ImageShape image_shape_of(const Shape& shape);

double clamp01(double v);

}  // namespace fens
