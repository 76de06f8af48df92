#include "fens/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <stdexcept>

#include "fens/rng.hpp"

namespace fens {

void NoiseConfig::validate() const {
  if (!(epsilon_max > 0.0)) throw std::invalid_argument("noise: epsilon_max must be > 0");
  if (samples_per_image == 0 || num_images == 0) {
    throw std::invalid_argument("noise: samples_per_image and num_images must be positive");
  }
}

double sensitivity(const FilterSpec& spec, const Image& x, std::span<const double> delta) {
  if (delta.size() != x.size()) {
    throw std::invalid_argument("sensitivity: perturbation has " + std::to_string(delta.size()) +
                                " entries, image has " + std::to_string(x.size()));
  }
  std::vector<double> moved(x.size());
  for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = x.pixels()[i] + delta[i];
  const Image perturbed = Image::clamped(x.shape(), std::move(moved));
  const Image a = apply_filter(spec, perturbed);
  const Image b = apply_filter(spec, x);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.pixels()[i] - b.pixels()[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

std::vector<double> draw_noise(Rng& rng, std::size_t size, double epsilon_max) {
  const double eps = epsilon_max * rng.uniform_open_closed();
  std::vector<double> delta(size);
  for (auto& d : delta) d = rng.uniform(-eps, eps);
  return delta;
}

std::vector<std::size_t> choose_images(std::size_t dataset_size, const NoiseConfig& cfg) {
  if (dataset_size < cfg.num_images) {
    throw std::invalid_argument("sensitivity: dataset has " + std::to_string(dataset_size) + " images, need " +
                                std::to_string(cfg.num_images));
  }
  std::vector<std::size_t> idx(dataset_size);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(cfg.rng_seed);
  for (std::size_t i = 0; i < cfg.num_images; ++i) std::swap(idx[i], idx[i + rng.index(dataset_size - i)]);
  idx.resize(cfg.num_images);
  return idx;
}

std::vector<SensitivitySample> sample_sensitivities(std::span<const NamedFilter> filters,
                                                    std::span<const Image> images, const NoiseConfig& cfg) {
  cfg.validate();
  if (images.empty()) throw std::invalid_argument("sensitivity: empty dataset");
  if (filters.empty()) throw std::invalid_argument("sensitivity: no filters");
  std::vector<SensitivitySample> rows;
  for (std::size_t image_id : choose_images(images.size(), cfg)) {
    const Image& x = images[image_id];
    std::vector<Image> clean;
    for (const auto& f : filters) clean.push_back(apply_filter(f.spec, x));
    Rng rng({cfg.rng_seed, static_cast<std::uint64_t>(image_id)});
    for (std::size_t n = 0; n < cfg.samples_per_image; ++n) {
      auto delta = draw_noise(rng, x.size(), cfg.epsilon_max);
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += x.pixels()[i];
      const Image perturbed = Image::clamped(x.shape(), std::move(delta));
      SensitivitySample row{image_id, n, {}};
      for (std::size_t f = 0; f < filters.size(); ++f) {
        const Image moved = apply_filter(filters[f].spec, perturbed);
        double sum = 0.0;
        for (std::size_t i = 0; i < moved.size(); ++i) {
          const double d = moved.pixels()[i] - clean[f].pixels()[i];
          sum += d * d;
        }
        row.values.push_back(std::sqrt(sum));
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// --- Correlation ------------------------------------------------------------

CorrelationMatrix::CorrelationMatrix(std::vector<std::string> names, std::vector<double> rho)
    : names_(std::move(names)), rho_(std::move(rho)) {
  const std::size_t n = names_.size();
  if (rho_.size() != n * n) throw std::invalid_argument("correlation matrix size mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double v = rho_[i * n + j];
      if (!(std::abs(v) <= 1.0 + 1e-12)) throw std::invalid_argument("correlation entries must lie in [-1, 1]");
      if (std::abs(v - rho_[j * n + i]) > 1e-12) throw std::invalid_argument("correlation matrix must be symmetric");
    }
  }
}

std::size_t CorrelationMatrix::index_of(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw std::invalid_argument("unknown filter '" + name + "' in correlation matrix");
  return static_cast<std::size_t>(it - names_.begin());
}

double CorrelationMatrix::at(const std::string& a, const std::string& b) const {
  return at(index_of(a), index_of(b));
}

std::string CorrelationMatrix::to_csv() const {
  std::string out = "filter";
  for (const auto& n : names_) out += "," + n;
  out += "\n";
  char buf[32];
  for (std::size_t i = 0; i < names_.size(); ++i) {
    out += names_[i];
    for (std::size_t j = 0; j < names_.size(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.6f", at(i, j) == 0.0 ? 0.0 : at(i, j));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson: need two equal columns of length >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw std::domain_error("pearson: constant column");
  const double cov = sab / (n - 1.0);
  const double r = cov / (std::sqrt(saa / (n - 1.0)) * std::sqrt(sbb / (n - 1.0)));
  return std::clamp(r, -1.0, 1.0);
}

CorrelationMatrix pearson_matrix(std::span<const SensitivitySample> samples, std::vector<std::string> names) {
  if (samples.size() < 2) throw std::invalid_argument("pearson_matrix: need at least 2 samples");
  const std::size_t k = names.size();
  std::vector<std::vector<double>> cols(k);
  for (const auto& s : samples) {
    if (s.values.size() != k) throw std::invalid_argument("pearson_matrix: sample width does not match names");
    for (std::size_t f = 0; f < k; ++f) cols[f].push_back(s.values[f]);
  }
  for (std::size_t f = 0; f < k; ++f) {
    if (std::all_of(cols[f].begin(), cols[f].end(), [&](double v) { return v == cols[f].front(); })) {
      throw std::domain_error("correlation undefined: sensitivity of filter '" + names[f] + "' is constant");
    }
  }
  std::vector<double> rho(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    rho[i * k + i] = 1.0;
    for (std::size_t j = i + 1; j < k; ++j) rho[i * k + j] = rho[j * k + i] = pearson(cols[i], cols[j]);
  }
  return CorrelationMatrix(std::move(names), std::move(rho));
}

double max_abs_correlation(const CorrelationMatrix& matrix, std::span<const std::string> subset) {
  double worst = 0.0;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    for (std::size_t j = i + 1; j < subset.size(); ++j) {
      worst = std::max(worst, std::abs(matrix.at(subset[i], subset[j])));
    }
  }
  return worst;
}

std::vector<std::string> select_min_correlated(const CorrelationMatrix& matrix, std::size_t k,
                                               std::span<const std::string> must_include) {
  const std::size_t n = matrix.size();
  std::set<std::size_t> required;
  for (const auto& name : must_include) required.insert(matrix.index_of(name));
  if (k > n) throw std::invalid_argument("select: k exceeds the number of filters");
  if (k < required.size()) throw std::invalid_argument("select: k is smaller than the must-include list");
  if (k == 0) return {};

  std::vector<std::size_t> best;
  double best_score = 0.0;
  std::vector<std::string> best_key;
  // Enumerate k-subsets of {0..n-1} in lexicographic index order.
  auto visit = [&](const std::vector<std::size_t>& subset) {
    for (auto r : required) {
      if (!std::binary_search(subset.begin(), subset.end(), r)) return;
    }
    double score = 0.0;
    for (std::size_t a = 0; a < subset.size(); ++a) {
      for (std::size_t b = a + 1; b < subset.size(); ++b) score = std::max(score, std::abs(matrix.at(subset[a], subset[b])));
    }
    std::vector<std::string> key;
    for (auto i : subset) key.push_back(matrix.names()[i]);
    std::sort(key.begin(), key.end());
    if (best.empty() || score < best_score || (score == best_score && key < best_key)) {
      best = subset;
      best_score = score;
      best_key = std::move(key);
    }
  };
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    visit(idx);
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == n - k + (i - 1)) --i;
    if (i == 0) break;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
  std::vector<std::string> out;
  for (auto i : best) out.push_back(matrix.names()[i]);
  return out;
}

}  // namespace fens
