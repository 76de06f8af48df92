#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace fens {

using Complex = std::complex<double>;

/// Centered 2-D spectrum: the DC coefficient sits at (H/2, W/2) (integer division).
struct Spectrum {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Complex> coeffs;  // row-major, already shifted

  Complex at(std::size_t u, std::size_t v) const { return coeffs[u * width + v]; }
};

/// Unnormalized forward DFT X(u,v) = sum x(m,n) exp(-2 pi i (um/H + vn/W)),
/// computed as row then column 1-D transforms, then shifted.
Spectrum dft2(std::size_t height, std::size_t width, std::span<const double> channel);

/// Inverse of dft2 (undoes the shift, divides by H*W); returns the full complex field.
std::vector<Complex> idft2_complex(const Spectrum& spectrum);

/// Real part of idft2_complex.
std::vector<double> idft2(const Spectrum& spectrum);

}  // namespace fens
