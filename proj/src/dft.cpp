#include "fens/dft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fens {

namespace {

// In-place 1-D DFT over `n` strided elements using a direct twiddle table.
void dft1(std::vector<Complex>& data, std::size_t offset, std::size_t stride, std::size_t n, bool inverse,
          const std::vector<Complex>& twiddle, std::vector<Complex>& scratch) {
  scratch.assign(n, Complex{});
  for (std::size_t k = 0; k < n; ++k) {
    Complex acc{};
    for (std::size_t j = 0; j < n; ++j) {
      const Complex w = twiddle[(k * j) % n];
      acc += data[offset + j * stride] * (inverse ? std::conj(w) : w);
    }
    scratch[k] = acc;
  }
  for (std::size_t k = 0; k < n; ++k) data[offset + k * stride] = scratch[k];
}

std::vector<Complex> twiddles(std::size_t n) {
  std::vector<Complex> w(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    w[k] = Complex(std::cos(angle), std::sin(angle));
  }
  return w;
}

void transform2(std::vector<Complex>& data, std::size_t h, std::size_t w, bool inverse) {
  std::vector<Complex> scratch;
  const auto tw_row = twiddles(w);
  for (std::size_t r = 0; r < h; ++r) dft1(data, r * w, 1, w, inverse, tw_row, scratch);
  const auto tw_col = twiddles(h);
  for (std::size_t c = 0; c < w; ++c) dft1(data, c, w, h, inverse, tw_col, scratch);
}

}  // namespace

Spectrum dft2(std::size_t height, std::size_t width, std::span<const double> channel) {
  if (height == 0 || width == 0 || channel.size() != height * width) {
    throw std::invalid_argument("dft2: channel size does not match dimensions");
  }
  std::vector<Complex> field(channel.begin(), channel.end());
  transform2(field, height, width, false);
  Spectrum s{height, width, std::vector<Complex>(field.size())};
  for (std::size_t u = 0; u < height; ++u) {
    for (std::size_t v = 0; v < width; ++v) {
      s.coeffs[((u + height / 2) % height) * width + (v + width / 2) % width] = field[u * width + v];
    }
  }
  return s;
}

std::vector<Complex> idft2_complex(const Spectrum& spectrum) {
  const std::size_t h = spectrum.height;
  const std::size_t w = spectrum.width;
  if (spectrum.coeffs.size() != h * w) throw std::invalid_argument("idft2: malformed spectrum");
  std::vector<Complex> field(h * w);
  for (std::size_t u = 0; u < h; ++u) {
    for (std::size_t v = 0; v < w; ++v) field[u * w + v] = spectrum.coeffs[((u + h / 2) % h) * w + (v + w / 2) % w];
  }
  transform2(field, h, w, true);
  const double scale = 1.0 / static_cast<double>(h * w);
  for (auto& z : field) z *= scale;
  return field;
}

std::vector<double> idft2(const Spectrum& spectrum) {
  const auto field = idft2_complex(spectrum);
  std::vector<double> out(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) out[i] = field[i].real();
  return out;
}

}  // namespace fens
