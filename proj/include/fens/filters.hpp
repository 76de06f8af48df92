#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fens/image.hpp"

namespace fens {

enum class FilterKind { Identity, Discretize, Downsize, Grayscale, Octree, LowPass, HighPass };

/// Canonical lowercase names: identity, discretize, downsize, grayscale, octree, lowpass, highpass.
std::string_view filter_kind_name(FilterKind kind);
FilterKind parse_filter_kind(std::string_view name);

/// How a filter is replaced on the backward pass of a BPDA attack.
///  - Identity: shape-preserving filters pass the gradient through unchanged.
///  - Adjoint: the frequency filters use their (self-adjoint) linear mask;
///    the piecewise-constant filters still pass through.
/// Downsize and grayscale always use the adjoint of their linear map.
enum class BpdaMode { Off, Identity, Adjoint };

std::string_view bpda_mode_name(BpdaMode mode);
BpdaMode parse_bpda_mode(std::string_view name);

struct FilterSpec {
  FilterKind kind = FilterKind::Identity;
  std::size_t target_height = 16;  // downsize
  std::size_t target_width = 16;
  std::size_t max_colors = 16;  // octree
  std::size_t depth = 7;
  double sigma = 8.0;  // lowpass / highpass, in frequency pixels

  static FilterSpec identity() { return {}; }
  static FilterSpec discretize() { return {.kind = FilterKind::Discretize}; }
  static FilterSpec downsize(std::size_t h, std::size_t w) {
    return {.kind = FilterKind::Downsize, .target_height = h, .target_width = w};
  }
  static FilterSpec grayscale() { return {.kind = FilterKind::Grayscale}; }
  static FilterSpec octree(std::size_t colors, std::size_t depth = 7) {
    return {.kind = FilterKind::Octree, .max_colors = colors, .depth = depth};
  }
  static FilterSpec lowpass(double sigma) { return {.kind = FilterKind::LowPass, .sigma = sigma}; }
  static FilterSpec highpass(double sigma) { return {.kind = FilterKind::HighPass, .sigma = sigma}; }

  /// Throws std::invalid_argument on K < 2, depth outside [1, 8], sigma <= 0 or a zero target.
  void validate() const;

  /// Short description, e.g. "octree(k=16,depth=7)".
  std::string describe() const;

  friend bool operator==(const FilterSpec&, const FilterSpec&) = default;
};

ImageShape filter_output_shape(const FilterSpec& spec, const ImageShape& input);

/// Applies the filter; output pixels are always in [0, 1].
Image apply_filter(const FilterSpec& spec, const Image& img);

/// Backward substitution for BPDA: maps a gradient in the filter's output
/// space to the input space.
std::vector<double> bpda_backward(const FilterSpec& spec, const ImageShape& input,
                                  std::span<const double> upstream, BpdaMode mode);

// --- Individual filters -----------------------------------------------------

/// Rounds every pixel to the nearest multiple of 1/255, halves rounding up.
Image discretize(const Image& img);

/// 8-bit code of a pixel value (round half up of 255 v).
int to_byte(double v);

/// Bilinear resampling with a half-pixel sample grid (corners not aligned).
Image downsize(const Image& img, std::size_t target_height, std::size_t target_width);

/// Adjoint of the bilinear resampling map, from target space back to `input`.
std::vector<double> downsize_adjoint(const ImageShape& input, std::size_t target_height, std::size_t target_width,
                                     std::span<const double> upstream);

/// BT.601 luma weights.
inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

Image grayscale(const Image& img);

/// Octree color quantization to at most `max_colors` colors over the 8-bit
/// discretized image, using `depth` levels (most significant bit first).
Image octree_quantize(const Image& img, std::size_t max_colors, std::size_t depth = 7);

enum class FrequencyMode { Low, High };

/// Centered Gaussian mask G = exp(-D^2 / (2 sigma^2)) (low) or 1 - G (high).
std::vector<double> frequency_mask(std::size_t height, std::size_t width, double sigma, FrequencyMode mode);

/// Masked-spectrum reconstruction of one channel, real part, not clamped.
std::vector<double> frequency_filter_channel(std::size_t height, std::size_t width, std::span<const double> channel,
                                             double sigma, FrequencyMode mode);

/// Per-channel frequency filtering, clamped to [0, 1].
Image frequency_filter(const Image& img, double sigma, FrequencyMode mode);

}  // namespace fens
