#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fens/sensitivity.hpp"
#include "oracles.hpp"

using namespace fens;

namespace {

std::vector<Image> random_images(Rng& rng, std::size_t n, ImageShape shape = {3, 8, 8}) {
  std::vector<Image> out;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> px(shape.size());
    for (auto& v : px) v = rng.uniform(0.1, 0.9);
    out.emplace_back(shape, std::move(px));
  }
  return out;
}

std::vector<NamedFilter> all_filters() {
  return {{"identity", FilterSpec::identity()},   {"discretize", FilterSpec::discretize()},
          {"downsize", FilterSpec::downsize(4, 4)}, {"grayscale", FilterSpec::grayscale()},
          {"octree16", FilterSpec::octree(16)},    {"lowpass", FilterSpec::lowpass(2)},
          {"highpass", FilterSpec::highpass(2)}};
}

std::vector<double> column(std::span<const SensitivitySample> rows, std::size_t f) {
  std::vector<double> c;
  for (const auto& r : rows) c.push_back(r.values[f]);
  return c;
}

CorrelationMatrix matrix_from(const std::vector<std::string>& names,
                              const std::vector<std::pair<std::pair<std::string, std::string>, double>>& entries,
                              double fill) {
  const std::size_t n = names.size();
  std::vector<double> rho(n * n, fill);
  for (std::size_t i = 0; i < n; ++i) rho[i * n + i] = 1.0;
  auto idx = [&](const std::string& s) { return std::find(names.begin(), names.end(), s) - names.begin(); };
  for (const auto& [pair, v] : entries) {
    const auto a = idx(pair.first), b = idx(pair.second);
    rho[a * n + b] = rho[b * n + a] = v;
  }
  return CorrelationMatrix(names, rho);
}

}  // namespace

TEST_CASE("sensitivity examples") {
  Rng rng(1);
  const Image x = random_images(rng, 1).front();
  const std::vector<double> zero(x.size(), 0.0);
  for (const auto& f : all_filters()) CHECK(sensitivity(f.spec, x, zero) == 0.0);

  const auto delta = draw_noise(rng, x.size(), 0.2);
  double expect = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::clamp(x.pixels()[i] + delta[i], 0.0, 1.0) - x.pixels()[i];
    expect += d * d;
  }
  CHECK(sensitivity(FilterSpec::identity(), x, delta) == std::sqrt(expect));

  std::vector<double> one(x.size(), 0.0);
  const std::size_t p = 2 * 8 + 5;
  for (std::size_t c = 0; c < 3; ++c) one[c * 64 + p] = 0.05;
  CHECK(sensitivity(FilterSpec::grayscale(), x, one) == doctest::Approx(0.05).epsilon(1e-12));

  for (const auto& f : all_filters()) CHECK(sensitivity(f.spec, x, delta) >= 0.0);
  CHECK_THROWS(sensitivity(FilterSpec::identity(), x, std::vector<double>(3)));
}

TEST_CASE("noise draws stay within the configured radius") {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const auto d = draw_noise(rng, 100, 20.0 / 255.0);
    for (double v : d) CHECK(std::abs(v) <= 20.0 / 255.0);
  }
}

TEST_CASE("sample_sensitivities shape, duplicates and recomputation") {
  Rng rng(3);
  const auto images = random_images(rng, 12);
  auto filters = all_filters();
  filters.push_back({"identity_again", FilterSpec::identity()});
  NoiseConfig cfg;
  cfg.num_images = 5;
  cfg.samples_per_image = 4;
  cfg.rng_seed = 99;
  const auto rows = sample_sensitivities(filters, images, cfg);
  REQUIRE(rows.size() == 20);
  for (const auto& r : rows) {
    REQUIRE(r.values.size() == filters.size());
    CHECK(r.values.front() == r.values.back());
    for (double v : r.values) CHECK((std::isfinite(v) && v >= 0.0));
  }

  // identity column recomputed from the per-image stream
  const auto ids = choose_images(images.size(), cfg);
  std::size_t row = 0;
  for (std::size_t id : ids) {
    Rng stream({cfg.rng_seed, static_cast<std::uint64_t>(id)});
    for (std::size_t n = 0; n < cfg.samples_per_image; ++n, ++row) {
      const auto delta = draw_noise(stream, images[id].size(), cfg.epsilon_max);
      CHECK(rows[row].image_id == id);
      CHECK(rows[row].values[0] == sensitivity(FilterSpec::identity(), images[id], delta));
    }
  }

  CHECK(sample_sensitivities(filters, images, cfg)[7].values == rows[7].values);

  NoiseConfig single = cfg;
  single.num_images = 1;
  single.samples_per_image = 1;
  CHECK(sample_sensitivities(filters, images, single).size() == 1);

  NoiseConfig too_many = cfg;
  too_many.num_images = 13;
  CHECK_THROWS(sample_sensitivities(filters, images, too_many));
  CHECK_THROWS(sample_sensitivities(filters, std::vector<Image>{}, cfg));
}

TEST_CASE("choose_images picks distinct indices deterministically") {
  NoiseConfig cfg;
  cfg.num_images = 30;
  cfg.rng_seed = 4;
  const auto a = choose_images(40, cfg);
  CHECK(a == choose_images(40, cfg));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  CHECK(sorted.back() < 40);
}

TEST_CASE("pearson coefficient") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> neg{-1, -2, -3, -4, -5};
  CHECK(pearson(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(a, neg) == doctest::Approx(-1.0).epsilon(1e-15));

  const std::vector<double> x{0.3, 1.7, 2.2, 0.9, 4.1};
  const std::vector<double> y{1.0, 0.5, 2.5, 1.5, 3.0};
  CHECK(pearson(x, y) == doctest::Approx(oracle::pearson(x, y)).epsilon(1e-12));

  const std::vector<double> u{1, 2, 3, 4, 5};
  const std::vector<double> v{2, 1, 4, 3, 5};
  // deviations u: -2 -1 0 1 2, v: -1 -2 1 0 2; sum products = 2+2+0+0+4 = 8; sums of squares 10 and 10
  CHECK(pearson(u, v) == doctest::Approx(0.8).epsilon(1e-15));

  CHECK_THROWS_AS(pearson(a, std::vector<double>(5, 2.0)), std::domain_error);
  CHECK_THROWS(pearson(std::vector<double>{1.0}, std::vector<double>{2.0}));
}

TEST_CASE("pearson_matrix invariants") {
  Rng rng(5);
  const auto images = random_images(rng, 10);
  const auto filters = all_filters();
  NoiseConfig cfg;
  cfg.num_images = 10;
  cfg.samples_per_image = 5;
  cfg.rng_seed = 7;
  auto rows = sample_sensitivities(filters, images, cfg);
  std::vector<std::string> names;
  for (const auto& f : filters) names.push_back(f.name);
  const auto m = pearson_matrix(rows, names);
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(m.at(i, i) == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t j = 0; j < m.size(); ++j) {
      CHECK(m.at(i, j) == m.at(j, i));
      CHECK(std::abs(m.at(i, j)) <= 1.0 + 1e-12);
      CHECK(m.at(i, j) == doctest::Approx(oracle::pearson(column(rows, i), column(rows, j))).epsilon(1e-10));
    }
  }

  // positive affine map of one column changes nothing
  for (auto& r : rows) r.values[4] = 3.5 * r.values[4] + 0.25;
  const auto m2 = pearson_matrix(rows, names);
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j) CHECK(std::abs(m.at(i, j) - m2.at(i, j)) < 1e-9);

  // constant column names the filter
  for (auto& r : rows) r.values[2] = 1.0;
  try {
    pearson_matrix(rows, names);
    FAIL("expected an error");
  } catch (const std::domain_error& e) {
    CHECK(std::string(e.what()).find("downsize") != std::string::npos);
  }
}

TEST_CASE("correlation CSV layout") {
  const CorrelationMatrix m({"a", "b"}, {1.0, 0.25, 0.25, 1.0});
  CHECK(m.to_csv() == "filter,a,b\na,1.000000,0.250000\nb,0.250000,1.000000\n");
  CHECK(m.at("a", "b") == 0.25);
  CHECK_THROWS(m.index_of("c"));
}

TEST_CASE("select_min_correlated on a fixed six-filter matrix") {
  // Unlisted pairs are 0.5.
  const std::vector<std::string> names{"identity",  "discretize", "downsize", "grayscale",
                                       "octree16", "lowpass",    "highpass"};
  const auto m = matrix_from(names,
                             {{{"identity", "highpass"}, 0.90},
                              {{"identity", "grayscale"}, 0.47},
                              {{"identity", "lowpass"}, 0.30},
                              {{"identity", "octree16"}, 0.13},
                              {{"lowpass", "octree16"}, 0.02},
                              {{"downsize", "lowpass"}, 0.85}},
                             0.5);
  const auto pair = select_min_correlated(m, 2);
  CHECK(pair == std::vector<std::string>{"octree16", "lowpass"});
  const std::vector<std::string> must{"identity"};
  const auto triple = select_min_correlated(m, 3, must);
  CHECK(triple == std::vector<std::string>{"identity", "octree16", "lowpass"});
  CHECK(max_abs_correlation(m, triple) == 0.30);

  CHECK(select_min_correlated(m, 1, must) == must);
  CHECK(select_min_correlated(m, 1) == std::vector<std::string>{"discretize"});
  CHECK_THROWS(select_min_correlated(m, 0, must));
  CHECK_THROWS(select_min_correlated(m, 8));
}

TEST_CASE("select_min_correlated equals brute force") {
  Rng rng(6);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 4 + t % 4;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back(std::string(1, static_cast<char>('a' + i)));
    std::vector<double> rho(n * n, 1.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) rho[i * n + j] = rho[j * n + i] = rng.uniform(-1, 1);
    const CorrelationMatrix m(names, rho);

    double best = 2;
    std::pair<std::size_t, std::size_t> arg;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (std::abs(m.at(i, j)) < best) {
          best = std::abs(m.at(i, j));
          arg = {i, j};
        }
    CHECK(select_min_correlated(m, 2) == std::vector<std::string>{names[arg.first], names[arg.second]});

    // k = 3: objective equals the enumerated optimum
    double best3 = 2;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        for (std::size_t k = j + 1; k < n; ++k)
          best3 = std::min(best3, std::max({std::abs(m.at(i, j)), std::abs(m.at(i, k)), std::abs(m.at(j, k))}));
    const auto pick = select_min_correlated(m, 3);
    CHECK(max_abs_correlation(m, pick) == best3);
    CHECK(select_min_correlated(m, 3) == pick);
  }
}
