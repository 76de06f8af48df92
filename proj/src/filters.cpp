#include "fens/filters.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>

#include "fens/dft.hpp"

namespace fens {

std::string_view filter_kind_name(FilterKind kind) {
  switch (kind) {
    case FilterKind::Identity: return "identity";
    case FilterKind::Discretize: return "discretize";
    case FilterKind::Downsize: return "downsize";
    case FilterKind::Grayscale: return "grayscale";
    case FilterKind::Octree: return "octree";
    case FilterKind::LowPass: return "lowpass";
    case FilterKind::HighPass: return "highpass";
  }
  return "?";
}

FilterKind parse_filter_kind(std::string_view name) {
  for (auto k : {FilterKind::Identity, FilterKind::Discretize, FilterKind::Downsize, FilterKind::Grayscale,
                 FilterKind::Octree, FilterKind::LowPass, FilterKind::HighPass}) {
    if (filter_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown filter kind '" + std::string(name) + "'");
}

std::string_view bpda_mode_name(BpdaMode mode) {
  switch (mode) {
    case BpdaMode::Off: return "off";
    case BpdaMode::Identity: return "identity";
    case BpdaMode::Adjoint: return "adjoint";
  }
  return "?";
}

BpdaMode parse_bpda_mode(std::string_view name) {
  if (name == "off") return BpdaMode::Off;
  if (name == "identity") return BpdaMode::Identity;
  if (name == "adjoint") return BpdaMode::Adjoint;
  throw std::invalid_argument("unknown bpda mode '" + std::string(name) + "' (off|identity|adjoint)");
}

void FilterSpec::validate() const {
  switch (kind) {
    case FilterKind::Downsize:
      if (target_height < 1 || target_width < 1) throw std::invalid_argument("downsize: target dims must be >= 1");
      break;
    case FilterKind::Octree:
      if (max_colors < 2) throw std::invalid_argument("octree: max_colors must be >= 2");
      if (depth < 1 || depth > 8) throw std::invalid_argument("octree: depth must be in [1, 8]");
      break;
    case FilterKind::LowPass:
    case FilterKind::HighPass:
      if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("frequency filter: sigma must be > 0");
      break;
    default: break;
  }
}

std::string FilterSpec::describe() const {
  std::ostringstream os;
  os << filter_kind_name(kind);
  switch (kind) {
    case FilterKind::Downsize: os << "(" << target_height << "x" << target_width << ")"; break;
    case FilterKind::Octree: os << "(k=" << max_colors << ",depth=" << depth << ")"; break;
    case FilterKind::LowPass:
    case FilterKind::HighPass: os << "(sigma=" << sigma << ")"; break;
    default: break;
  }
  return os.str();
}

ImageShape filter_output_shape(const FilterSpec& spec, const ImageShape& input) {
  spec.validate();
  switch (spec.kind) {
    case FilterKind::Downsize:
      if (spec.target_height > input.height || spec.target_width > input.width) {
        throw std::invalid_argument("downsize: target larger than source");
      }
      return {input.channels, spec.target_height, spec.target_width};
    case FilterKind::Grayscale:
      if (input.channels != 3) throw std::invalid_argument("grayscale: input must have 3 channels");
      return {1, input.height, input.width};
    case FilterKind::Octree:
      if (input.channels != 3) throw std::invalid_argument("octree: quantizer requires an RGB image");
      return input;
    default: return input;
  }
}

Image apply_filter(const FilterSpec& spec, const Image& img) {
  spec.validate();
  switch (spec.kind) {
    case FilterKind::Identity: return img;
    case FilterKind::Discretize: return discretize(img);
    case FilterKind::Downsize: return downsize(img, spec.target_height, spec.target_width);
    case FilterKind::Grayscale: return grayscale(img);
    case FilterKind::Octree: return octree_quantize(img, spec.max_colors, spec.depth);
    case FilterKind::LowPass: return frequency_filter(img, spec.sigma, FrequencyMode::Low);
    case FilterKind::HighPass: return frequency_filter(img, spec.sigma, FrequencyMode::High);
  }
  throw std::logic_error("unreachable filter kind");
}

std::vector<double> bpda_backward(const FilterSpec& spec, const ImageShape& input, std::span<const double> upstream,
                                  BpdaMode mode) {
  if (mode == BpdaMode::Off) throw std::invalid_argument("bpda_backward: BPDA is off");
  const auto out = filter_output_shape(spec, input);
  if (upstream.size() != out.size()) {
    throw std::invalid_argument("bpda_backward: gradient has " + std::to_string(upstream.size()) +
                                " entries, filter output has " + std::to_string(out.size()));
  }
  switch (spec.kind) {
    case FilterKind::Downsize:
      return downsize_adjoint(input, spec.target_height, spec.target_width, upstream);
    case FilterKind::Grayscale: {
      std::vector<double> g(input.size());
      const std::size_t plane = input.plane();
      for (std::size_t i = 0; i < plane; ++i) {
        g[i] = kLumaR * upstream[i];
        g[plane + i] = kLumaG * upstream[i];
        g[2 * plane + i] = kLumaB * upstream[i];
      }
      return g;
    }
    case FilterKind::LowPass:
    case FilterKind::HighPass:
      if (mode == BpdaMode::Adjoint) {
        const auto fmode = spec.kind == FilterKind::LowPass ? FrequencyMode::Low : FrequencyMode::High;
        std::vector<double> g;
        g.reserve(upstream.size());
        for (std::size_t c = 0; c < input.channels; ++c) {
          const auto ch = frequency_filter_channel(input.height, input.width,
                                                   upstream.subspan(c * input.plane(), input.plane()), spec.sigma,
                                                   fmode);
          g.insert(g.end(), ch.begin(), ch.end());
        }
        return g;
      }
      [[fallthrough]];
    default: return {upstream.begin(), upstream.end()};
  }
}

// --- Discretization ---------------------------------------------------------

int to_byte(double v) {
  // The 1e-9 slack keeps exact halves (k + 0.5) / 255 rounding up despite
  // the representation error of the division.
  return std::clamp(static_cast<int>(std::floor(v * 255.0 + 0.5 + 1e-9)), 0, 255);
}

Image discretize(const Image& img) {
  std::vector<double> out(img.pixels().begin(), img.pixels().end());
  for (auto& v : out) v = static_cast<double>(to_byte(v)) / 255.0;
  return Image(img.shape(), std::move(out));
}

// --- Downsize ---------------------------------------------------------------

namespace {

struct Tap {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    const double t = src - static_cast<double>(lo);
    taps[o] = {lo, hi, 1.0 - t, t};
  }
  return taps;
}

void check_downsize(const ImageShape& in, std::size_t th, std::size_t tw) {
  if (th < 1 || tw < 1) throw std::invalid_argument("downsize: target dims must be >= 1");
  if (th > in.height || tw > in.width) throw std::invalid_argument("downsize: target larger than source");
}

}  // namespace

Image downsize(const Image& img, std::size_t target_height, std::size_t target_width) {
  check_downsize(img.shape(), target_height, target_width);
  const auto ty = bilinear_taps(img.height(), target_height);
  const auto tx = bilinear_taps(img.width(), target_width);
  const ImageShape out_shape{img.channels(), target_height, target_width};
  std::vector<double> out(out_shape.size());
  for (std::size_t c = 0; c < img.channels(); ++c) {
    for (std::size_t y = 0; y < target_height; ++y) {
      for (std::size_t x = 0; x < target_width; ++x) {
        const auto& a = ty[y];
        const auto& b = tx[x];
        out[(c * target_height + y) * target_width + x] =
            a.w_lo * (b.w_lo * img.at(c, a.lo, b.lo) + b.w_hi * img.at(c, a.lo, b.hi)) +
            a.w_hi * (b.w_lo * img.at(c, a.hi, b.lo) + b.w_hi * img.at(c, a.hi, b.hi));
      }
    }
  }
  return Image::clamped(out_shape, std::move(out));
}

std::vector<double> downsize_adjoint(const ImageShape& input, std::size_t target_height, std::size_t target_width,
                                     std::span<const double> upstream) {
  check_downsize(input, target_height, target_width);
  if (upstream.size() != input.channels * target_height * target_width) {
    throw std::invalid_argument("downsize_adjoint: gradient size does not match target");
  }
  const auto ty = bilinear_taps(input.height, target_height);
  const auto tx = bilinear_taps(input.width, target_width);
  std::vector<double> g(input.size(), 0.0);
  auto at = [&](std::size_t c, std::size_t y, std::size_t x) -> double& {
    return g[(c * input.height + y) * input.width + x];
  };
  for (std::size_t c = 0; c < input.channels; ++c) {
    for (std::size_t y = 0; y < target_height; ++y) {
      for (std::size_t x = 0; x < target_width; ++x) {
        const double u = upstream[(c * target_height + y) * target_width + x];
        const auto& a = ty[y];
        const auto& b = tx[x];
        at(c, a.lo, b.lo) += a.w_lo * b.w_lo * u;
        at(c, a.lo, b.hi) += a.w_lo * b.w_hi * u;
        at(c, a.hi, b.lo) += a.w_hi * b.w_lo * u;
        at(c, a.hi, b.hi) += a.w_hi * b.w_hi * u;
      }
    }
  }
  return g;
}

// --- Grayscale --------------------------------------------------------------

Image grayscale(const Image& img) {
  if (img.channels() != 3) throw std::invalid_argument("grayscale: input must have 3 channels");
  const std::size_t plane = img.shape().plane();
  const auto px = img.pixels();
  std::vector<double> out(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    out[i] = kLumaR * px[i] + kLumaG * px[plane + i] + kLumaB * px[2 * plane + i];
  }
  return Image::clamped({1, img.height(), img.width()}, std::move(out));
}

// --- Octree quantization ----------------------------------------------------

namespace {

class Octree {
 public:
  Octree(std::size_t max_colors, std::size_t depth) : max_colors_(max_colors), depth_(depth) {
    nodes_.push_back(Node{});
  }

  void insert(const std::array<int, 3>& rgb) {
    int id = 0;
    while (!nodes_[static_cast<std::size_t>(id)].leaf) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      const int slot = child_slot(rgb, node.level);
      if (node.children[static_cast<std::size_t>(slot)] < 0) {
        Node child;
        child.level = node.level + 1;
        child.parent = id;
        child.leaf = child.level == depth_;
        const int cid = static_cast<int>(nodes_.size());
        nodes_[static_cast<std::size_t>(id)].children[static_cast<std::size_t>(slot)] = cid;
        nodes_.push_back(child);
        if (child.leaf) leaves_.push_back(cid);
      }
      id = nodes_[static_cast<std::size_t>(id)].children[static_cast<std::size_t>(slot)];
    }
    auto& leaf = nodes_[static_cast<std::size_t>(id)];
    for (int c = 0; c < 3; ++c) leaf.sum[static_cast<std::size_t>(c)] += static_cast<std::uint64_t>(rgb[static_cast<std::size_t>(c)]);
    ++leaf.count;
    while (leaves_.size() > max_colors_) reduce();
  }

  std::array<int, 3> palette_color(const std::array<int, 3>& rgb) const {
    int id = 0;
    while (!nodes_[static_cast<std::size_t>(id)].leaf) {
      const auto& node = nodes_[static_cast<std::size_t>(id)];
      id = node.children[static_cast<std::size_t>(child_slot(rgb, node.level))];
    }
    const auto& leaf = nodes_[static_cast<std::size_t>(id)];
    std::array<int, 3> out{};
    for (std::size_t c = 0; c < 3; ++c) {
      // mean rounded half up
      out[c] = static_cast<int>((2 * leaf.sum[c] + leaf.count) / (2 * leaf.count));
    }
    return out;
  }

 private:
  struct Node {
    std::array<int, 8> children{-1, -1, -1, -1, -1, -1, -1, -1};
    std::array<std::uint64_t, 3> sum{};
    std::uint64_t count = 0;
    std::size_t level = 0;
    int parent = -1;
    bool leaf = false;
  };

  static int child_slot(const std::array<int, 3>& rgb, std::size_t level) {
    const int bit = 7 - static_cast<int>(level);
    return (((rgb[0] >> bit) & 1) << 2) | (((rgb[1] >> bit) & 1) << 1) | ((rgb[2] >> bit) & 1);
  }

  // Folds the children of one parent into it: the parent of the least-populated
  // leaf on the deepest occupied level (ties: earliest created).
  void reduce() {
    std::size_t deepest = 0;
    for (int id : leaves_) deepest = std::max(deepest, nodes_[static_cast<std::size_t>(id)].level);
    int victim = -1;
    for (int id : leaves_) {
      const auto& n = nodes_[static_cast<std::size_t>(id)];
      if (n.level != deepest) continue;
      if (victim < 0 || n.count < nodes_[static_cast<std::size_t>(victim)].count ||
          (n.count == nodes_[static_cast<std::size_t>(victim)].count && id < victim)) {
        victim = id;
      }
    }
    const int pid = nodes_[static_cast<std::size_t>(victim)].parent;
    auto& parent = nodes_[static_cast<std::size_t>(pid)];
    for (auto& cid : parent.children) {
      if (cid < 0) continue;
      const auto& child = nodes_[static_cast<std::size_t>(cid)];
      for (std::size_t c = 0; c < 3; ++c) parent.sum[c] += child.sum[c];
      parent.count += child.count;
      std::erase(leaves_, cid);
      cid = -1;
    }
    parent.leaf = true;
    leaves_.push_back(pid);
  }

  std::size_t max_colors_;
  std::size_t depth_;
  std::vector<Node> nodes_;
  std::vector<int> leaves_;
};

}  // namespace

Image octree_quantize(const Image& img, std::size_t max_colors, std::size_t depth) {
  FilterSpec::octree(max_colors, depth).validate();
  if (img.channels() != 3) throw std::invalid_argument("octree: quantizer requires an RGB image");
  const std::size_t plane = img.shape().plane();
  const auto px = img.pixels();
  std::vector<std::array<int, 3>> colors(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    colors[i] = {to_byte(px[i]), to_byte(px[plane + i]), to_byte(px[2 * plane + i])};
  }
  Octree tree(max_colors, depth);
  for (const auto& c : colors) tree.insert(c);
  std::vector<double> out(img.size());
  for (std::size_t i = 0; i < plane; ++i) {
    const auto p = tree.palette_color(colors[i]);
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = static_cast<double>(p[c]) / 255.0;
  }
  return Image(img.shape(), std::move(out));
}

// --- Frequency filters ------------------------------------------------------

std::vector<double> frequency_mask(std::size_t height, std::size_t width, double sigma, FrequencyMode mode) {
  if (!(sigma > 0.0)) throw std::invalid_argument("frequency filter: sigma must be > 0");
  std::vector<double> mask(height * width);
  const double cu = static_cast<double>(height / 2);
  const double cv = static_cast<double>(width / 2);
  for (std::size_t u = 0; u < height; ++u) {
    for (std::size_t v = 0; v < width; ++v) {
      const double du = static_cast<double>(u) - cu;
      const double dv = static_cast<double>(v) - cv;
      const double g = std::exp(-(du * du + dv * dv) / (2.0 * sigma * sigma));
      mask[u * width + v] = mode == FrequencyMode::Low ? g : 1.0 - g;
    }
  }
  return mask;
}

std::vector<double> frequency_filter_channel(std::size_t height, std::size_t width, std::span<const double> channel,
                                             double sigma, FrequencyMode mode) {
  auto spectrum = dft2(height, width, channel);
  const auto mask = frequency_mask(height, width, sigma, mode);
  for (std::size_t i = 0; i < mask.size(); ++i) spectrum.coeffs[i] *= mask[i];
  return idft2(spectrum);
}

Image frequency_filter(const Image& img, double sigma, FrequencyMode mode) {
  const std::size_t plane = img.shape().plane();
  std::vector<double> out;
  out.reserve(img.size());
  for (std::size_t c = 0; c < img.channels(); ++c) {
    const auto ch = frequency_filter_channel(img.height(), img.width(), img.pixels().subspan(c * plane, plane), sigma,
                                             mode);
    out.insert(out.end(), ch.begin(), ch.end());
  }
  return Image::clamped(img.shape(), std::move(out));
}

}  // namespace fens
