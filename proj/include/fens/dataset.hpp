#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fens/image.hpp"
#include "fens/tensor.hpp"

namespace fens {

/// Images of one uniform shape with labels in [0, num_classes).
struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::size_t num_classes = 0;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
  ImageShape shape() const;

  /// Throws std::invalid_argument when lengths differ, shapes are mixed or a
  /// label is out of range.
  void validate() const;
};

inline constexpr ImageShape kCifarShape{3, 32, 32};
inline constexpr std::size_t kCifarBatchRecords = 10000;

std::vector<std::string> cifar10_class_names();

/// One binary batch: records of 1 label byte followed by the channel-planar
/// pixel bytes. Pixels are divided by 255.
Dataset read_cifar_batch(const std::filesystem::path& path, ImageShape shape = kCifarShape,
                         std::size_t num_classes = 10);

/// Inverse of read_cifar_batch; pixels are written as round-half-up bytes.
void write_cifar_batch(const std::filesystem::path& path, const Dataset& ds);

struct CifarSplits {
  Dataset train;
  Dataset test;
};

/// data_batch_1..5.bin and test_batch.bin, 10,000 records each.
CifarSplits load_cifar10(const std::filesystem::path& dir);
Dataset load_cifar10_test(const std::filesystem::path& dir);

/// Four-class RGB set of noisy patterns: horizontal bar, vertical bar, disk,
/// checkerboard. Labels cycle 0,1,2,3 so classes are exactly balanced.
Dataset synth_shapes(std::size_t num_per_class, std::size_t size, std::uint64_t seed);

/// Seeded sample without replacement, stratified by label so each class keeps
/// its share (largest-remainder rounding).
Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed);

std::vector<Tensor> to_tensors(const std::vector<Image>& images);

}  // namespace fens
