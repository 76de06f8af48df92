#include "fens/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>

#include "fens/filters.hpp"
#include "fens/rng.hpp"

namespace fens {

ImageShape Dataset::shape() const {
  if (images.empty()) throw std::invalid_argument("dataset is empty");
  return images.front().shape();
}

void Dataset::validate() const {
  if (images.size() != labels.size()) throw std::invalid_argument("dataset: images and labels differ in length");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != images.front().shape()) throw std::invalid_argument("dataset: mixed image shapes");
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw std::invalid_argument("dataset: label " + std::to_string(labels[i]) + " out of range at index " +
                                  std::to_string(i));
    }
  }
}

std::vector<std::string> cifar10_class_names() {
  return {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
}

Dataset read_cifar_batch(const std::filesystem::path& path, ImageShape shape, std::size_t num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open CIFAR batch " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t record = 1 + shape.size();
  if (bytes.empty() || bytes.size() % record != 0) {
    const std::size_t full = bytes.size() / record;
    throw std::runtime_error(path.string() + ": truncated record at byte offset " + std::to_string(full * record) +
                             " (file size " + std::to_string(bytes.size()) + ", record size " +
                             std::to_string(record) + ")");
  }
  Dataset ds;
  ds.num_classes = num_classes;
  if (num_classes == 10) ds.class_names = cifar10_class_names();
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    if (bytes[off] >= num_classes) {
      throw std::runtime_error(path.string() + ": label byte " + std::to_string(bytes[off]) + " out of range at offset " +
                               std::to_string(off));
    }
    ds.labels.push_back(bytes[off]);
    std::vector<double> px(shape.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(bytes[off + 1 + i]) / 255.0;
    ds.images.emplace_back(shape, std::move(px));
  }
  return ds;
}

void write_cifar_batch(const std::filesystem::path& path, const Dataset& ds) {
  ds.validate();
  if (ds.num_classes > 256) throw std::invalid_argument("write_cifar_batch: labels must fit in one byte");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  std::vector<char> record;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    record.clear();
    record.push_back(static_cast<char>(ds.labels[i]));
    for (double v : ds.images[i].pixels()) record.push_back(static_cast<char>(to_byte(v)));
    out.write(record.data(), static_cast<std::streamsize>(record.size()));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

namespace {

Dataset load_batch_checked(const std::filesystem::path& path) {
  auto ds = read_cifar_batch(path);
  if (ds.size() != kCifarBatchRecords) {
    throw std::runtime_error(path.string() + ": expected " + std::to_string(kCifarBatchRecords) + " records, found " +
                             std::to_string(ds.size()));
  }
  return ds;
}

void append(Dataset& dst, Dataset&& src) {
  dst.num_classes = src.num_classes;
  dst.class_names = src.class_names;
  std::move(src.images.begin(), src.images.end(), std::back_inserter(dst.images));
  dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

}  // namespace

Dataset load_cifar10_test(const std::filesystem::path& dir) { return load_batch_checked(dir / "test_batch.bin"); }

CifarSplits load_cifar10(const std::filesystem::path& dir) {
  CifarSplits splits;
  for (int i = 1; i <= 5; ++i) append(splits.train, load_batch_checked(dir / ("data_batch_" + std::to_string(i) + ".bin")));
  splits.test = load_cifar10_test(dir);
  return splits;
}

Dataset synth_shapes(std::size_t num_per_class, std::size_t size, std::uint64_t seed) {
  if (size < 8) throw std::invalid_argument("synth_shapes: size must be >= 8");
  Dataset ds;
  ds.num_classes = 4;
  ds.class_names = {"hbar", "vbar", "disk", "checker"};
  const ImageShape shape{3, size, size};
  const double s = static_cast<double>(size);
  Rng rng(seed);
  for (std::size_t n = 0; n < num_per_class * 4; ++n) {
    const int label = static_cast<int>(n % 4);
    std::array<double, 3> bg{}, fg{};
    for (auto& c : bg) c = rng.uniform(0.05, 0.35);
    for (auto& c : fg) c = rng.uniform(0.65, 0.95);
    // per-image geometry jitter
    const double thick = rng.uniform(s / 8.0, s / 4.0);
    const double pos = rng.uniform(0.3 * s, 0.7 * s);
    const double cy = rng.uniform(0.35 * s, 0.65 * s);
    const double cx = rng.uniform(0.35 * s, 0.65 * s);
    const double radius = rng.uniform(s / 6.0, s / 3.0);
    const double cell = rng.uniform(s / 8.0, s / 5.0);
    const double phase_y = rng.uniform(0.0, cell);
    const double phase_x = rng.uniform(0.0, cell);
    std::vector<double> px(shape.size());
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double fy = static_cast<double>(y) + 0.5;
        const double fx = static_cast<double>(x) + 0.5;
        bool on = false;
        switch (label) {
          case 0: on = std::abs(fy - pos) < thick / 2.0; break;
          case 1: on = std::abs(fx - pos) < thick / 2.0; break;
          case 2: on = (fy - cy) * (fy - cy) + (fx - cx) * (fx - cx) < radius * radius; break;
          default: {
            const auto iy = static_cast<long>(std::floor((fy + phase_y) / cell));
            const auto ix = static_cast<long>(std::floor((fx + phase_x) / cell));
            on = ((iy + ix) & 1) == 0;
          }
        }
        for (std::size_t c = 0; c < 3; ++c) {
          const double base = on ? fg[c] : bg[c];
          px[(c * size + y) * size + x] = base + 0.04 * rng.normal();
        }
      }
    }
    ds.images.push_back(Image::clamped(shape, std::move(px)));
    ds.labels.push_back(label);
  }
  return ds;
}

Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size()) {
    throw std::invalid_argument("subset: requested " + std::to_string(n) + " of " + std::to_string(ds.size()) +
                                " images");
  }
  Dataset out;
  out.num_classes = ds.num_classes;
  out.class_names = ds.class_names;
  if (n == 0) return out;

  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  // Largest-remainder allocation of n across classes.
  std::vector<std::size_t> quota(ds.num_classes);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    const double exact = static_cast<double>(n) * static_cast<double>(by_class[c].size()) / static_cast<double>(ds.size());
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[c];
    remainders.emplace_back(exact - static_cast<double>(quota[c]), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++quota[remainders[i].second];

  Rng rng(seed);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    auto& pool = by_class[c];
    for (std::size_t i = 0; i < quota[c]; ++i) {
      std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
      chosen.push_back(pool[i]);
    }
  }
  for (std::size_t i = chosen.size(); i > 1; --i) std::swap(chosen[i - 1], chosen[rng.index(i)]);
  for (auto i : chosen) {
    out.images.push_back(ds.images[i]);
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

std::vector<Tensor> to_tensors(const std::vector<Image>& images) {
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(img.to_tensor());
  return out;
}

}  // namespace fens
