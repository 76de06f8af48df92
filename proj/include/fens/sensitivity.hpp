#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fens/filters.hpp"
#include "fens/image.hpp"
#include "fens/rng.hpp"

namespace fens {

struct NamedFilter {
  std::string name;
  FilterSpec spec;
};

struct SensitivitySample {
  std::size_t image_id = 0;
  std::size_t noise_id = 0;
  std::vector<double> values;  // one r per filter, in filter-list order
};

struct NoiseConfig {
  double epsilon_max = 20.0 / 255.0;
  std::size_t samples_per_image = 10;
  std::size_t num_images = 100;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// r(x, delta) = || filter(clamp(x + delta)) - filter(x) ||_2
double sensitivity(const FilterSpec& spec, const Image& x, std::span<const double> delta);

/// Uniform L-inf noise: radius eps ~ U(0, epsilon_max], entries ~ U[-eps, eps].
std::vector<double> draw_noise(Rng& rng, std::size_t size, double epsilon_max);

/// Seeded choice of `cfg.num_images` distinct dataset indices.
std::vector<std::size_t> choose_images(std::size_t dataset_size, const NoiseConfig& cfg);

/// Image `i` of the dataset draws its noise from the stream keyed by (seed, i),
/// so every row depends only on the seed and the image index.
std::vector<SensitivitySample> sample_sensitivities(std::span<const NamedFilter> filters,
                                                    std::span<const Image> images, const NoiseConfig& cfg);

class CorrelationMatrix {
 public:
  CorrelationMatrix(std::vector<std::string> names, std::vector<double> rho);

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  double at(std::size_t i, std::size_t j) const { return rho_[i * names_.size() + j]; }
  double at(const std::string& a, const std::string& b) const;
  std::size_t index_of(const std::string& name) const;

  /// Header row of names, then one row per filter (row name first), 6 decimals.
  std::string to_csv() const;

 private:
  std::vector<std::string> names_;
  std::vector<double> rho_;
};

/// Sample Pearson coefficient (n - 1 normalization). Throws std::domain_error
/// when either column is constant.
double pearson(std::span<const double> a, std::span<const double> b);

CorrelationMatrix pearson_matrix(std::span<const SensitivitySample> samples, std::vector<std::string> names);

/// The k-subset containing `must_include` that minimizes the largest pairwise
/// |rho|; exhaustive, ties go to the lexicographically smallest sorted name list.
/// Returned in matrix order.
std::vector<std::string> select_min_correlated(const CorrelationMatrix& matrix, std::size_t k,
                                               std::span<const std::string> must_include = {});

/// Largest pairwise |rho| within `subset`.
double max_abs_correlation(const CorrelationMatrix& matrix, std::span<const std::string> subset);

}  // namespace fens
