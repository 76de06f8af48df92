#include "fens/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "fens/model_io.hpp"
#include "fens/rng.hpp"
#include "fens/training.hpp"

namespace fens {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

[[noreturn]] void fail(const std::string& path, const std::string& what) { throw ConfigError(path + ": " + what); }

void check_object(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) fail(path.empty() ? "config" : path, "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      fail(join_path(path, key), "unknown field");
    }
  }
}

std::size_t get_count(const json& j, const std::string& path, const char* key, std::size_t def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) fail(join_path(path, key), "expected a non-negative integer");
  return v.get<std::size_t>();
}

std::uint64_t get_u64(const json& j, const std::string& path, const char* key, std::uint64_t def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
    fail(join_path(path, key), "expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

int get_int(const json& j, const std::string& path, const char* key, int def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number_integer()) fail(join_path(path, key), "expected an integer");
  return v.get<int>();
}

double get_double(const json& j, const std::string& path, const char* key, double def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_number()) fail(join_path(path, key), "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) fail(join_path(path, key), "expected a finite number");
  return d;
}

bool get_bool(const json& j, const std::string& path, const char* key, bool def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_boolean()) fail(join_path(path, key), "expected true or false");
  return v.get<bool>();
}

std::string get_string(const json& j, const std::string& path, const char* key, const std::string& def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_string()) fail(join_path(path, key), "expected a string");
  return v.get<std::string>();
}

std::vector<std::string> get_strings(const json& j, const std::string& path, const char* key,
                                     const std::vector<std::string>& def) {
  if (!j.contains(key)) return def;
  const json& v = j.at(key);
  if (!v.is_array()) fail(join_path(path, key), "expected a list of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_string()) fail(join_path(path, key) + "[" + std::to_string(i) + "]", "expected a string");
    out.push_back(v[i].get<std::string>());
  }
  return out;
}

template <class Parse>
auto parse_enum(const json& j, const std::string& path, const char* key, Parse parse,
                decltype(parse(std::string_view{})) def) {
  if (!j.contains(key)) return def;
  const std::string text = get_string(j, path, key, "");
  try {
    return parse(text);
  } catch (const std::exception& e) {
    fail(join_path(path, key), e.what());
  }
}

// Wraps library validation so the message carries the field path.
template <class F>
void validated(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    fail(path, e.what());
  }
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string shortg(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

int eps_units(double eps) { return static_cast<int>(std::lround(eps * 255.0)); }

fs::path output_file(const ExperimentConfig& cfg, const std::string& stem, const char* ext) {
  return fs::path(cfg.output_dir) / (stem + "_" + cfg.tag + ext);
}

// Header comment, verbatim config, then the body. The config copy goes next to it.
fs::path write_csv(const ExperimentConfig& cfg, const std::string& command, const std::string& stem,
                   const std::string& body) {
  fs::create_directories(cfg.output_dir);
  const fs::path path = output_file(cfg, stem, ".csv");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# fens " << command << " tag=" << cfg.tag << " config_hash=" << hex64(config_hash(cfg))
      << " seed=" << cfg.seed << "\n";
  out << "# config " << config_to_json(cfg).dump() << "\n";
  out << body;
  if (!out) throw std::runtime_error("write failed: " + path.string());
  return path;
}

fs::path write_config_copy(const ExperimentConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.output_dir);
  const fs::path path = output_file(cfg, command, ".config.json");
  std::ofstream out(path, std::ios::binary);
  out << config_to_json(cfg).dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path.string());
  return path;
}

fs::path model_path(const ExperimentConfig& cfg, const std::string& name) {
  return cfg.resolved_model_dir() / (name + ".fenet");
}

std::vector<std::string> gaussian_names(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  if (cfg.gaussian_enabled) {
    for (std::size_t i = 0; i < cfg.gaussian_count; ++i) out.push_back("gauss" + std::to_string(i));
  }
  return out;
}

std::vector<std::string> adversarial_names(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  if (cfg.adversarial_enabled) out.push_back("adv");
  return out;
}

// Filter name of every trainable model, in training order.
std::vector<std::pair<std::string, std::string>> all_models(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& m : cfg.models) out.emplace_back(m.name, m.filter);
  for (const auto& n : gaussian_names(cfg)) out.emplace_back(n, "");
  for (const auto& n : adversarial_names(cfg)) out.emplace_back(n, "");
  return out;
}

FilterSpec model_filter(const ExperimentConfig& cfg, const std::string& model) {
  for (const auto& m : cfg.models) {
    if (m.name == model) return cfg.filter(m.filter).spec;
  }
  return FilterSpec::identity();  // Gaussian-noise and adversarially trained models
}

std::vector<double> epsilons(const ExperimentConfig& cfg) {
  std::vector<double> out;
  for (int k : cfg.eps_255) out.push_back(k / 255.0);
  return out;
}

AttackConfig base_attack(const ExperimentConfig& cfg, const std::string& purpose) {
  AttackConfig a = cfg.attack;
  a.rng_seed = derive_seed(cfg.seed, "attack:" + purpose);
  return a;
}

ModelMetadata metadata_for(const ExperimentConfig& cfg, const std::string& name, const FilterSpec& filter,
                           std::uint64_t seed) {
  return {{"name", name},
          {"filter", filter.describe()},
          {"architecture", cfg.architecture},
          {"seed", std::to_string(seed)},
          {"tag", cfg.tag}};
}

std::string accuracy_line(double eps, const std::string& name, double acc) {
  return std::to_string(eps_units(eps)) + "," + name + "," + fixed6(acc) + "\n";
}

}  // namespace

// --- Config -------------------------------------------------------------------

fs::path ExperimentConfig::resolved_model_dir() const {
  return model_dir.empty() ? fs::path(output_dir) / "models" : fs::path(model_dir);
}

const NamedFilter& ExperimentConfig::filter(const std::string& name) const {
  for (const auto& f : filters) {
    if (f.name == name) return f;
  }
  throw ConfigError("filters: no filter named '" + name + "'");
}

void ExperimentConfig::validate() const {
  if (tag.empty() || tag.find_first_of("/\\ \n") != std::string::npos) {
    fail("tag", "must be a nonempty name without slashes or spaces");
  }
  if (output_dir.empty()) fail("output_dir", "must not be empty");
  if (dataset.kind != "synth" && dataset.kind != "cifar10") fail("dataset.kind", "expected synth or cifar10");
  if (dataset.kind == "synth") {
    if (dataset.size < 8) fail("dataset.size", "must be at least 8");
    if (dataset.num_per_class == 0) fail("dataset.num_per_class", "must be positive");
    if (dataset.test_per_class == 0) fail("dataset.test_per_class", "must be positive");
    if (dataset.train_subset > 4 * dataset.num_per_class) fail("dataset.train_subset", "larger than the training set");
    if (dataset.test_subset > 4 * dataset.test_per_class) fail("dataset.test_subset", "larger than the test set");
  }

  std::set<std::string> filter_names;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    const std::string path = "filters[" + std::to_string(i) + "]";
    if (filters[i].name.empty()) fail(path + ".name", "must not be empty");
    if (!filter_names.insert(filters[i].name).second) fail(path + ".name", "duplicate filter '" + filters[i].name + "'");
    validated(path, [&] { filters[i].spec.validate(); });
  }

  std::set<std::string> model_names;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const std::string path = "models[" + std::to_string(i) + "]";
    if (models[i].name.empty() || models[i].name.find_first_of("/\\ ") != std::string::npos) {
      fail(path + ".name", "must be a nonempty name without slashes or spaces");
    }
    if (!model_names.insert(models[i].name).second) fail(path + ".name", "duplicate model '" + models[i].name + "'");
    if (!filter_names.count(models[i].filter)) fail(path + ".filter", "unknown filter '" + models[i].filter + "'");
  }
  for (const auto& n : gaussian_names(*this)) {
    if (!model_names.insert(n).second) fail("models", "name '" + n + "' is reserved for Gaussian-noise models");
  }
  for (const auto& n : adversarial_names(*this)) {
    if (!model_names.insert(n).second) fail("models", "name '" + n + "' is reserved for adversarial training");
  }

  validated("architecture", [&] { parse_architecture(architecture); });
  validated("train", [&] { train.validate(); });
  validated("noise", [&] { noise.validate(); });

  for (std::size_t i = 0; i < eps_255.size(); ++i) {
    if (eps_255[i] < 0 || eps_255[i] > 255) fail("attack.eps[" + std::to_string(i) + "]", "must be in [0, 255]");
  }
  if (!(step_fraction > 0.0 && step_fraction <= 1.0)) fail("attack.step_fraction", "must be in (0, 1]");
  validated("attack", [&] { attack.at_radius(8.0 / 255.0, step_fraction).validate(); });
  if (attack.bpda == BpdaMode::Off) fail("attack.bpda", "attacks through filters need identity or adjoint");

  if (select_k == 0 || select_k > filters.size()) fail("selection.k", "must be in [1, number of filters]");
  for (std::size_t i = 0; i < must_include.size(); ++i) {
    if (!filter_names.count(must_include[i])) {
      fail("selection.must_include[" + std::to_string(i) + "]", "unknown filter '" + must_include[i] + "'");
    }
  }

  if (!transfer_source.empty() && !model_names.count(transfer_source)) {
    fail("transfer.source", "unknown model '" + transfer_source + "'");
  }
  std::set<std::string> ensemble_names;
  for (std::size_t i = 0; i < ensembles.size(); ++i) {
    const std::string path = "ensembles[" + std::to_string(i) + "]";
    if (!ensemble_names.insert(ensembles[i].name).second) fail(path + ".name", "duplicate ensemble");
    if (ensembles[i].members.empty()) fail(path + ".members", "must not be empty");
    for (std::size_t m = 0; m < ensembles[i].members.size(); ++m) {
      if (!model_names.count(ensembles[i].members[m])) {
        fail(path + ".members[" + std::to_string(m) + "]", "unknown model '" + ensembles[i].members[m] + "'");
      }
    }
  }

  if (gaussian_enabled) {
    if (!(gaussian_sigma >= 0.0)) fail("gaussian.sigma", "must be >= 0");
    if (gaussian_count == 0) fail("gaussian.count", "must be positive");
  }
  if (adversarial_enabled) {
    if (adversarial_eps_255 <= 0 || adversarial_eps_255 > 255) fail("adversarial.eps", "must be in [1, 255]");
    if (adversarial_steps == 0) fail("adversarial.steps", "must be positive");
    if (!(adversarial_step_fraction > 0.0 && adversarial_step_fraction <= 1.0)) {
      fail("adversarial.step_fraction", "must be in (0, 1]");
    }
  }
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.filters = {
      {"identity", FilterSpec::identity()},
      {"discretize", FilterSpec::discretize()},
      {"downsize", FilterSpec::downsize(16, 16)},
      {"grayscale", FilterSpec::grayscale()},
      {"octree16", FilterSpec::octree(16)},
      {"lowpass", FilterSpec::lowpass(8.0)},
      {"highpass", FilterSpec::highpass(8.0)},
  };
  cfg.models = {{"original", "discretize"}, {"downsize", "downsize"}, {"grayscale", "grayscale"},
                {"octree16", "octree16"},   {"lowpass", "lowpass"},   {"highpass", "highpass"}};
  cfg.architecture = format_architecture(default_architecture());
  // Plain SGD at 0.1 stalls on the small-signal highpass inputs; momentum 0.9
  // at a tenth of the rates keeps the same effective step schedule.
  cfg.train.learning_rates = {0.01, 0.001, 0.0001};
  cfg.train.epochs_per_rate = 3;
  cfg.train.batch_size = 8;
  cfg.train.momentum = 0.9;
  cfg.gaussian_enabled = true;
  cfg.ensembles = {{"min_corr", {"original", "lowpass", "octree16"}},
                   {"max_corr", {"original", "highpass", "grayscale"}},
                   {"gaussian", {"gauss0", "gauss1", "gauss2"}}};
  return cfg;
}

NamedFilter filter_from_json(const json& j, const std::string& path) {
  check_object(j, path, {"name", "kind", "height", "width", "colors", "depth", "sigma"});
  NamedFilter f;
  f.name = get_string(j, path, "name", "");
  if (!j.contains("kind")) fail(path + ".kind", "missing");
  f.spec.kind = parse_enum(j, path, "kind", parse_filter_kind, FilterKind::Identity);
  const FilterSpec d;
  f.spec.target_height = get_count(j, path, "height", d.target_height);
  f.spec.target_width = get_count(j, path, "width", d.target_width);
  f.spec.max_colors = get_count(j, path, "colors", d.max_colors);
  f.spec.depth = get_count(j, path, "depth", d.depth);
  f.spec.sigma = get_double(j, path, "sigma", d.sigma);
  if (f.name.empty()) f.name = std::string(filter_kind_name(f.spec.kind));
  validated(path, [&] { f.spec.validate(); });
  return f;
}

json filter_to_json(const NamedFilter& f) {
  json j{{"name", f.name}, {"kind", std::string(filter_kind_name(f.spec.kind))}};
  switch (f.spec.kind) {
    case FilterKind::Downsize:
      j["height"] = f.spec.target_height;
      j["width"] = f.spec.target_width;
      break;
    case FilterKind::Octree:
      j["colors"] = f.spec.max_colors;
      j["depth"] = f.spec.depth;
      break;
    case FilterKind::LowPass:
    case FilterKind::HighPass: j["sigma"] = f.spec.sigma; break;
    default: break;
  }
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  check_object(j, "", {"seed", "tag", "output_dir", "model_dir", "dataset", "filters", "models", "architecture",
                       "train", "attack", "noise", "selection", "transfer", "ensembles", "gaussian", "adversarial",
                       "certify"});
  const ExperimentConfig d = default_config();
  ExperimentConfig cfg = d;
  cfg.seed = get_u64(j, "", "seed", d.seed);
  cfg.tag = get_string(j, "", "tag", d.tag);
  cfg.output_dir = get_string(j, "", "output_dir", d.output_dir);
  cfg.model_dir = get_string(j, "", "model_dir", d.model_dir);
  cfg.architecture = get_string(j, "", "architecture", d.architecture);

  if (j.contains("dataset")) {
    const json& ds = j.at("dataset");
    check_object(ds, "dataset",
                 {"kind", "path", "num_per_class", "test_per_class", "size", "train_subset", "test_subset"});
    cfg.dataset.kind = get_string(ds, "dataset", "kind", d.dataset.kind);
    cfg.dataset.path = get_string(ds, "dataset", "path", d.dataset.path);
    cfg.dataset.num_per_class = get_count(ds, "dataset", "num_per_class", d.dataset.num_per_class);
    cfg.dataset.test_per_class = get_count(ds, "dataset", "test_per_class", d.dataset.test_per_class);
    cfg.dataset.size = get_count(ds, "dataset", "size", d.dataset.size);
    cfg.dataset.train_subset = get_count(ds, "dataset", "train_subset", d.dataset.train_subset);
    cfg.dataset.test_subset = get_count(ds, "dataset", "test_subset", d.dataset.test_subset);
  }

  if (j.contains("filters")) {
    const json& fl = j.at("filters");
    if (!fl.is_array()) fail("filters", "expected a list");
    cfg.filters.clear();
    for (std::size_t i = 0; i < fl.size(); ++i) cfg.filters.push_back(filter_from_json(fl[i], "filters[" + std::to_string(i) + "]"));
  }

  if (j.contains("models")) {
    const json& ml = j.at("models");
    if (!ml.is_array()) fail("models", "expected a list");
    cfg.models.clear();
    for (std::size_t i = 0; i < ml.size(); ++i) {
      const std::string path = "models[" + std::to_string(i) + "]";
      check_object(ml[i], path, {"name", "filter"});
      ModelEntry m;
      m.filter = get_string(ml[i], path, "filter", "");
      m.name = get_string(ml[i], path, "name", m.filter);
      cfg.models.push_back(m);
    }
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_object(t, "train", {"learning_rates", "epochs_per_rate", "batch_size", "momentum"});
    if (t.contains("learning_rates")) {
      const json& lr = t.at("learning_rates");
      if (!lr.is_array()) fail("train.learning_rates", "expected a list of numbers");
      cfg.train.learning_rates.clear();
      for (std::size_t i = 0; i < lr.size(); ++i) {
        if (!lr[i].is_number()) fail("train.learning_rates[" + std::to_string(i) + "]", "expected a number");
        cfg.train.learning_rates.push_back(lr[i].get<double>());
      }
    }
    cfg.train.epochs_per_rate = get_count(t, "train", "epochs_per_rate", d.train.epochs_per_rate);
    cfg.train.batch_size = get_count(t, "train", "batch_size", d.train.batch_size);
    cfg.train.momentum = get_double(t, "train", "momentum", d.train.momentum);
  }

  if (j.contains("attack")) {
    const json& a = j.at("attack");
    check_object(a, "attack", {"method", "norm", "steps", "step_fraction", "random_init", "bpda", "loss_sign", "eps"});
    cfg.attack.method = parse_enum(a, "attack", "method", parse_attack_method, d.attack.method);
    cfg.attack.norm = parse_enum(a, "attack", "norm", parse_norm, d.attack.norm);
    cfg.attack.steps = get_count(a, "attack", "steps", d.attack.steps);
    cfg.step_fraction = get_double(a, "attack", "step_fraction", d.step_fraction);
    cfg.attack.random_init = get_bool(a, "attack", "random_init", d.attack.random_init);
    cfg.attack.bpda = parse_enum(a, "attack", "bpda", parse_bpda_mode, d.attack.bpda);
    cfg.attack.loss_sign = parse_enum(a, "attack", "loss_sign", parse_loss_sign, d.attack.loss_sign);
    if (a.contains("eps")) {
      const json& e = a.at("eps");
      if (!e.is_array()) fail("attack.eps", "expected a list of integers (units of 1/255)");
      cfg.eps_255.clear();
      for (std::size_t i = 0; i < e.size(); ++i) {
        if (!e[i].is_number_integer()) fail("attack.eps[" + std::to_string(i) + "]", "expected an integer");
        cfg.eps_255.push_back(e[i].get<int>());
      }
    }
  }

  if (j.contains("noise")) {
    const json& n = j.at("noise");
    check_object(n, "noise", {"epsilon_max", "samples_per_image", "num_images"});
    cfg.noise.epsilon_max = get_double(n, "noise", "epsilon_max", d.noise.epsilon_max * 255.0) / 255.0;
    cfg.noise.samples_per_image = get_count(n, "noise", "samples_per_image", d.noise.samples_per_image);
    cfg.noise.num_images = get_count(n, "noise", "num_images", d.noise.num_images);
  }

  if (j.contains("selection")) {
    const json& s = j.at("selection");
    check_object(s, "selection", {"k", "must_include"});
    cfg.select_k = get_count(s, "selection", "k", d.select_k);
    cfg.must_include = get_strings(s, "selection", "must_include", d.must_include);
  }

  if (j.contains("transfer")) {
    const json& t = j.at("transfer");
    check_object(t, "transfer", {"source"});
    cfg.transfer_source = get_string(t, "transfer", "source", d.transfer_source);
  }

  if (j.contains("ensembles")) {
    const json& el = j.at("ensembles");
    if (!el.is_array()) fail("ensembles", "expected a list");
    cfg.ensembles.clear();
    for (std::size_t i = 0; i < el.size(); ++i) {
      const std::string path = "ensembles[" + std::to_string(i) + "]";
      check_object(el[i], path, {"name", "members"});
      cfg.ensembles.push_back({get_string(el[i], path, "name", "ensemble" + std::to_string(i)),
                               get_strings(el[i], path, "members", {})});
    }
  }

  if (j.contains("gaussian")) {
    const json& g = j.at("gaussian");
    check_object(g, "gaussian", {"enabled", "sigma", "count"});
    cfg.gaussian_enabled = get_bool(g, "gaussian", "enabled", d.gaussian_enabled);
    cfg.gaussian_sigma = get_double(g, "gaussian", "sigma", d.gaussian_sigma);
    cfg.gaussian_count = get_count(g, "gaussian", "count", d.gaussian_count);
  }

  if (j.contains("adversarial")) {
    const json& a = j.at("adversarial");
    check_object(a, "adversarial", {"enabled", "eps", "steps", "step_fraction"});
    cfg.adversarial_enabled = get_bool(a, "adversarial", "enabled", d.adversarial_enabled);
    cfg.adversarial_eps_255 = get_int(a, "adversarial", "eps", d.adversarial_eps_255);
    cfg.adversarial_steps = get_count(a, "adversarial", "steps", d.adversarial_steps);
    cfg.adversarial_step_fraction = get_double(a, "adversarial", "step_fraction", d.adversarial_step_fraction);
  }

  if (j.contains("certify")) {
    const json& c = j.at("certify");
    check_object(c, "certify", {"num_images"});
    cfg.certify_images = get_count(c, "certify", "num_images", d.certify_images);
  }

  cfg.validate();
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  json filters = json::array();
  for (const auto& f : cfg.filters) filters.push_back(filter_to_json(f));
  json models = json::array();
  for (const auto& m : cfg.models) models.push_back({{"name", m.name}, {"filter", m.filter}});
  json ensembles = json::array();
  for (const auto& e : cfg.ensembles) ensembles.push_back({{"name", e.name}, {"members", e.members}});
  return {
      {"seed", cfg.seed},
      {"tag", cfg.tag},
      {"output_dir", cfg.output_dir},
      {"model_dir", cfg.model_dir},
      {"dataset",
       {{"kind", cfg.dataset.kind},
        {"path", cfg.dataset.path},
        {"num_per_class", cfg.dataset.num_per_class},
        {"test_per_class", cfg.dataset.test_per_class},
        {"size", cfg.dataset.size},
        {"train_subset", cfg.dataset.train_subset},
        {"test_subset", cfg.dataset.test_subset}}},
      {"filters", filters},
      {"models", models},
      {"architecture", cfg.architecture},
      {"train",
       {{"learning_rates", cfg.train.learning_rates},
        {"epochs_per_rate", cfg.train.epochs_per_rate},
        {"batch_size", cfg.train.batch_size},
        {"momentum", cfg.train.momentum}}},
      {"attack",
       {{"method", std::string(attack_method_name(cfg.attack.method))},
        {"norm", std::string(norm_name(cfg.attack.norm))},
        {"steps", cfg.attack.steps},
        {"step_fraction", cfg.step_fraction},
        {"random_init", cfg.attack.random_init},
        {"bpda", std::string(bpda_mode_name(cfg.attack.bpda))},
        {"loss_sign", std::string(loss_sign_name(cfg.attack.loss_sign))},
        {"eps", cfg.eps_255}}},
      {"noise",
       {{"epsilon_max", cfg.noise.epsilon_max * 255.0},
        {"samples_per_image", cfg.noise.samples_per_image},
        {"num_images", cfg.noise.num_images}}},
      {"selection", {{"k", cfg.select_k}, {"must_include", cfg.must_include}}},
      {"transfer", {{"source", cfg.transfer_source}}},
      {"ensembles", ensembles},
      {"gaussian", {{"enabled", cfg.gaussian_enabled}, {"sigma", cfg.gaussian_sigma}, {"count", cfg.gaussian_count}}},
      {"adversarial",
       {{"enabled", cfg.adversarial_enabled},
        {"eps", cfg.adversarial_eps_255},
        {"steps", cfg.adversarial_steps},
        {"step_fraction", cfg.adversarial_step_fraction}}},
      {"certify", {{"num_images", cfg.certify_images}}},
  };
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set: expected key.path=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::string path;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set: empty segment in '" + key + "'");
    path = join_path(path, part);
    const bool last = dot == std::string::npos;
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(part);
      } catch (const std::exception&) {
        throw ConfigError(path + ": expected a list index");
      }
      if (idx >= node->size()) throw ConfigError(path + ": index out of range");
      node = &(*node)[idx];
    } else {
      if (!node->is_object()) *node = json::object();
      node = &(*node)[part];
    }
    if (last) break;
    start = dot + 1;
  }
  *node = value;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(config_to_json(cfg).dump()); }

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) {
  return Rng({seed, fnv1a(purpose)}).next();
}

// --- Data -----------------------------------------------------------------------

LoadedData load_data(const ExperimentConfig& cfg, bool need_train) {
  LoadedData out;
  const auto& spec = cfg.dataset;
  if (spec.kind == "synth") {
    if (need_train) out.train = synth_shapes(spec.num_per_class, spec.size, derive_seed(cfg.seed, "synth:train"));
    out.test = synth_shapes(spec.test_per_class, spec.size, derive_seed(cfg.seed, "synth:test"));
  } else {
    std::string dir = spec.path;
    if (dir.empty()) {
      const char* env = std::getenv("FENS_DATA_DIR");
      if (!env || !*env) throw ConfigError("dataset.path: not set and FENS_DATA_DIR is empty");
      dir = env;
    }
    if (need_train) {
      auto splits = load_cifar10(dir);
      out.train = std::move(splits.train);
      out.test = std::move(splits.test);
    } else {
      out.test = load_cifar10_test(dir);
    }
  }
  if (need_train && spec.train_subset > 0) {
    if (spec.train_subset > out.train.size()) fail("dataset.train_subset", "larger than the training set");
    out.train = subset(out.train, spec.train_subset, derive_seed(cfg.seed, "subset:train"));
  }
  if (spec.test_subset > 0) {
    if (spec.test_subset > out.test.size()) fail("dataset.test_subset", "larger than the test set");
    out.test = subset(out.test, spec.test_subset, derive_seed(cfg.seed, "subset:test"));
  }
  return out;
}

// --- Manifests --------------------------------------------------------------------

void write_ensemble_manifest(const fs::path& path, const std::string& name, EnsembleMode mode,
                             const std::vector<std::pair<NamedFilter, fs::path>>& members) {
  json m = json::array();
  for (const auto& [filter, model] : members) {
    m.push_back({{"name", filter.name}, {"filter", filter_to_json(filter)}, {"model", model.string()}});
  }
  const json j{{"name", name}, {"mode", std::string(ensemble_mode_name(mode))}, {"members", m}};
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Ensemble load_ensemble_manifest(const fs::path& path, std::string* name) {
  std::ifstream in(path);
  if (!in) throw ConfigError("manifest: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("manifest: " + std::string(e.what()));
  }
  check_object(j, "manifest", {"name", "mode", "members"});
  const EnsembleMode mode = parse_enum(j, "manifest", "mode", parse_ensemble_mode, EnsembleMode::Vote);
  if (!j.contains("members") || !j.at("members").is_array() || j.at("members").empty()) {
    fail("manifest.members", "expected a nonempty list");
  }
  std::vector<SubModel> subs;
  const json& members = j.at("members");
  for (std::size_t i = 0; i < members.size(); ++i) {
    const std::string p = "manifest.members[" + std::to_string(i) + "]";
    check_object(members[i], p, {"name", "filter", "model"});
    if (!members[i].contains("filter")) fail(p + ".filter", "missing");
    NamedFilter f = filter_from_json(members[i].at("filter"), p + ".filter");
    fs::path model = get_string(members[i], p, "model", "");
    if (model.is_relative()) model = path.parent_path() / model;
    if (!fs::exists(model)) fail(p + ".model", "missing model file " + model.string());
    SubModel sm{get_string(members[i], p, "name", f.name), f.spec, load_network(model).net};
    subs.push_back(std::move(sm));
  }
  if (name) *name = get_string(j, "manifest", "name", path.stem().string());
  return Ensemble(std::move(subs), mode);
}

SubModel load_submodel(const ExperimentConfig& cfg, const std::string& name) {
  const fs::path path = model_path(cfg, name);
  if (!fs::exists(path)) {
    throw ConfigError("models: missing model file " + path.string() + " (run `fens train` first)");
  }
  LoadedModel lm = load_network(path);
  const FilterSpec filter = model_filter(cfg, name);
  const auto it = lm.metadata.find("filter");
  if (it != lm.metadata.end() && it->second != filter.describe()) {
    throw ConfigError("models: " + path.string() + " was trained with filter " + it->second + ", config says " +
                      filter.describe());
  }
  return SubModel{name, filter, std::move(lm.net)};
}

std::string format_accuracy_csv(const std::vector<AccuracyRow>& rows) {
  std::string out = "epsilon,model_name,accuracy\n";
  for (const auto& r : rows) out += accuracy_line(r.epsilon, r.model_name, r.accuracy);
  return out;
}

// --- Commands ---------------------------------------------------------------------

CommandOutput cmd_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const LoadedData data = load_data(cfg, true);
  const Architecture arch = parse_architecture(cfg.architecture);
  const fs::path dir = cfg.resolved_model_dir();
  fs::create_directories(dir);

  CommandOutput out;
  std::string log_csv = "model,rate_index,learning_rate,epoch,mean_loss,train_accuracy\n";
  std::ostringstream summary;
  auto record = [&](const SubModel& sm, std::uint64_t seed, const std::vector<EpochRecord>& log) {
    const fs::path path = model_path(cfg, sm.name);
    save_network(path, sm.net, metadata_for(cfg, sm.name, sm.filter, seed));
    out.files.push_back(path);
    for (const auto& r : log) {
      log_csv += sm.name + "," + std::to_string(r.rate_index) + "," + shortg(r.learning_rate) + "," +
                 std::to_string(r.epoch) + "," + fixed6(r.mean_loss) + "," + fixed6(r.accuracy) + "\n";
    }
    summary << sm.name << " [" << sm.filter.describe() << "] test accuracy " << fixed6(accuracy(sm, data.test))
            << "\n";
  };

  for (const auto& m : cfg.models) {
    TrainConfig tc = cfg.train;
    tc.rng_seed = derive_seed(cfg.seed, "train:" + m.name);
    std::vector<EpochRecord> log;
    const SubModel sm = train_submodel(m.name, cfg.filter(m.filter).spec, arch, data.train, tc, &log);
    record(sm, tc.rng_seed, log);
  }

  if (cfg.gaussian_enabled) {
    const std::uint64_t seed = derive_seed(cfg.seed, "train:gauss");
    const auto subs = gaussian_noise_submodels(arch, data.train, cfg.gaussian_sigma, cfg.gaussian_count, seed,
                                               cfg.train, "gauss");
    for (std::size_t i = 0; i < subs.size(); ++i) record(subs[i], seed + i, {});
  }

  if (cfg.adversarial_enabled) {
    TrainConfig tc = cfg.train;
    tc.rng_seed = derive_seed(cfg.seed, "train:adv");
    AttackConfig ac = cfg.attack;
    ac.steps = cfg.adversarial_steps;
    ac = ac.at_radius(cfg.adversarial_eps_255 / 255.0, cfg.adversarial_step_fraction);
    std::vector<EpochRecord> log;
    SubModel sm{"adv", FilterSpec::identity(), adversarial_train(arch, data.train, ac, tc, &log)};
    record(sm, tc.rng_seed, log);
  }

  for (const auto& e : cfg.ensembles) {
    std::vector<std::pair<NamedFilter, fs::path>> members;
    for (const auto& m : e.members) members.emplace_back(NamedFilter{m, model_filter(cfg, m)}, m + ".fenet");
    const fs::path path = dir / (e.name + ".ensemble.json");
    write_ensemble_manifest(path, e.name, EnsembleMode::Score, members);
    out.files.push_back(path);
  }

  out.files.push_back(write_csv(cfg, "train", "train", log_csv));
  out.files.push_back(write_config_copy(cfg, "train"));
  out.summary = summary.str();
  return out;
}

CommandOutput cmd_correlate(const ExperimentConfig& cfg) {
  cfg.validate();
  const LoadedData data = load_data(cfg, false);
  if (data.test.size() < cfg.noise.num_images) {
    fail("noise.num_images", "dataset too small: " + std::to_string(data.test.size()) + " test images available, " +
                                 std::to_string(cfg.noise.num_images) + " requested");
  }
  NoiseConfig noise = cfg.noise;
  noise.rng_seed = derive_seed(cfg.seed, "noise");
  const auto samples = sample_sensitivities(cfg.filters, data.test.images, noise);
  std::vector<std::string> names;
  for (const auto& f : cfg.filters) names.push_back(f.name);
  const CorrelationMatrix rho = pearson_matrix(samples, names);

  std::vector<std::string> must;
  for (const auto& m : cfg.must_include) must.push_back(m);
  const auto selected = select_min_correlated(rho, cfg.select_k, must);

  CommandOutput out;
  out.files.push_back(write_csv(cfg, "correlate", "correlate", rho.to_csv()));
  out.files.push_back(write_config_copy(cfg, "correlate"));
  std::ostringstream s;
  s << "selected:";
  for (const auto& n : selected) s << " " << n;
  s << " (max |rho| " << fixed6(max_abs_correlation(rho, selected)) << ")\n";
  out.summary = s.str();
  return out;
}

CommandOutput cmd_attack(const ExperimentConfig& cfg) {
  cfg.validate();
  const LoadedData data = load_data(cfg, false);
  std::vector<AccuracyRow> rows;
  for (const auto& [name, _] : all_models(cfg)) {
    const SubModel sm = load_submodel(cfg, name);
    const AttackConfig base = base_attack(cfg, "whitebox:" + name);
    for (double eps : epsilons(cfg)) {
      rows.push_back({eps, name, robust_accuracy(sm, data.test, base.at_radius(eps, cfg.step_fraction))});
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AccuracyRow& a, const AccuracyRow& b) { return a.epsilon < b.epsilon; });
  CommandOutput out;
  out.files.push_back(write_csv(cfg, "attack", "attack", format_accuracy_csv(rows)));
  out.files.push_back(write_config_copy(cfg, "attack"));
  out.summary = format_accuracy_csv(rows);
  return out;
}

CommandOutput cmd_transfer(const ExperimentConfig& cfg) {
  cfg.validate();
  const LoadedData data = load_data(cfg, false);
  const SubModel source = load_submodel(cfg, cfg.transfer_source);
  std::vector<SubModel> targets;
  for (const auto& m : cfg.models) targets.push_back(load_submodel(cfg, m.name));
  const auto eps = epsilons(cfg);
  const auto rows = transfer_eval(source, targets, data.test, eps, base_attack(cfg, "transfer"), cfg.step_fraction);
  CommandOutput out;
  out.files.push_back(write_csv(cfg, "transfer", "transfer", format_accuracy_csv(rows)));
  out.files.push_back(write_config_copy(cfg, "transfer"));
  out.summary = format_accuracy_csv(rows);
  return out;
}

CommandOutput cmd_ensemble_eval(const ExperimentConfig& cfg, const fs::path& manifest) {
  cfg.validate();
  const LoadedData data = load_data(cfg, false);
  std::vector<std::pair<std::string, Ensemble>> ensembles;
  if (!manifest.empty()) {
    std::string name;
    Ensemble e = load_ensemble_manifest(manifest, &name);
    ensembles.emplace_back(name, std::move(e));
  } else {
    for (const auto& entry : cfg.ensembles) {
      std::vector<SubModel> subs;
      for (const auto& m : entry.members) subs.push_back(load_submodel(cfg, m));
      ensembles.emplace_back(entry.name, Ensemble(std::move(subs), EnsembleMode::Score));
    }
  }

  // One adversarial per image and radius; the vote, score and per-member
  // columns are all read off the same example.
  std::vector<AccuracyRow> rows;
  for (const auto& [name, e] : ensembles) {
    for (const auto& sm : e.submodels()) sm.check_compatible(data.test.shape());
    const EnsembleTarget target(e, cfg.attack.bpda, EnsembleMode::Score);
    const AttackConfig base = base_attack(cfg, "ensemble:" + name);
    for (double eps : epsilons(cfg)) {
      const std::size_t m = e.submodels().size();
      std::size_t vote = 0, score = 0;
      std::vector<std::size_t> member(m, 0);
      for (std::size_t i = 0; i < data.test.size(); ++i) {
        const Image& x = data.test.images[i];
        const int label = data.test.labels[i];
        AttackConfig ac = base.at_radius(eps, cfg.step_fraction);
        ac.rng_seed = per_image_seed(base.rng_seed, i);
        const Image adv = eps > 0.0 ? run_attack(target, x, label, ac).adversarial : x;
        const EnsembleOutputs outs = evaluate_submodels(e, adv);
        if (aggregate(outs, EnsembleMode::Vote) == label) ++vote;
        if (aggregate(outs, EnsembleMode::Score) == label) ++score;
        for (std::size_t s = 0; s < m; ++s) {
          if (outs.labels[s] == label) ++member[s];
        }
      }
      const double n = static_cast<double>(data.test.size());
      rows.push_back({eps, name + ":vote", vote / n});
      rows.push_back({eps, name + ":score", score / n});
      for (std::size_t s = 0; s < m; ++s) rows.push_back({eps, name + "/" + e.submodels()[s].name, member[s] / n});
    }
  }
  CommandOutput out;
  out.files.push_back(write_csv(cfg, "ensemble-eval", "ensemble_eval", format_accuracy_csv(rows)));
  out.files.push_back(write_config_copy(cfg, "ensemble_eval"));
  out.summary = format_accuracy_csv(rows);
  return out;
}

CommandOutput cmd_certify(const ExperimentConfig& cfg) {
  cfg.validate();
  const LoadedData data = load_data(cfg, false);
  const std::size_t n = std::min(cfg.certify_images, data.test.size());
  std::vector<SubModel> subs;
  std::vector<double> lips;
  for (const auto& m : cfg.models) {
    subs.push_back(load_submodel(cfg, m.name));
    lips.push_back(lipschitz_upper_bound(subs.back().net));
  }

  std::string certs = "image_id,true_label,submodel,label,margin,lipschitz,radius\n";
  std::string pairs = "image_id,submodel_a,submodel_b,bound\n";
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<RobustnessCertificate> rc;
    for (std::size_t s = 0; s < subs.size(); ++s) {
      rc.push_back(certify_submodel(subs[s], data.test.images[i], lips[s]));
      const auto& c = rc.back();
      certs += std::to_string(i) + "," + std::to_string(data.test.labels[i]) + "," + c.submodel_name + "," +
               std::to_string(c.label) + "," + exact(c.margin) + "," + exact(c.lipschitz) + "," + exact(c.radius) +
               "\n";
    }
    for (std::size_t a = 0; a < rc.size(); ++a) {
      for (std::size_t b = a + 1; b < rc.size(); ++b) {
        pairs += std::to_string(i) + "," + rc[a].submodel_name + "," + rc[b].submodel_name + "," +
                 exact(pairwise_bound(rc[a], rc[b])) + "\n";
      }
    }
  }
  CommandOutput out;
  out.files.push_back(write_csv(cfg, "certify", "certify", certs));
  out.files.push_back(write_csv(cfg, "certify", "certify_pairs", pairs));
  out.files.push_back(write_config_copy(cfg, "certify"));
  std::ostringstream s;
  s << "certified " << n << " images x " << subs.size() << " sub-models\n";
  out.summary = s.str();
  return out;
}

}  // namespace fens
