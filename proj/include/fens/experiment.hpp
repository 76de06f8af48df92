#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fens/attacks.hpp"
#include "fens/dataset.hpp"
#include "fens/ensemble.hpp"
#include "fens/network.hpp"
#include "fens/sensitivity.hpp"

namespace fens {

/// Validation failure; the message starts with the offending field path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  std::string kind = "synth";  // synth | cifar10
  std::string path;            // cifar10 directory; falls back to $FENS_DATA_DIR
  std::size_t num_per_class = 200;
  std::size_t test_per_class = 60;
  std::size_t size = 32;
  std::size_t train_subset = 0;  // 0 = all
  std::size_t test_subset = 200;  // 0 = all
};

struct ModelEntry {
  std::string name;
  std::string filter;  // name in the filter catalog
};

struct EnsembleEntry {
  std::string name;
  std::vector<std::string> members;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string tag = "run";
  std::string output_dir = "fens_out";
  std::string model_dir;  // empty = <output_dir>/models

  DatasetSpec dataset;
  std::vector<NamedFilter> filters;
  std::vector<ModelEntry> models;
  std::string architecture;
  TrainConfig train;

  AttackConfig attack;
  std::vector<int> eps_255{2, 5, 8, 10, 15, 20};
  double step_fraction = 0.1;

  NoiseConfig noise;
  std::size_t select_k = 3;
  std::vector<std::string> must_include{"identity"};

  std::string transfer_source = "original";
  std::vector<EnsembleEntry> ensembles;

  bool gaussian_enabled = false;
  double gaussian_sigma = 0.02;
  std::size_t gaussian_count = 3;

  bool adversarial_enabled = false;
  int adversarial_eps_255 = 8;
  std::size_t adversarial_steps = 4;
  double adversarial_step_fraction = 0.25;

  std::size_t certify_images = 10;

  std::filesystem::path resolved_model_dir() const;
  const NamedFilter& filter(const std::string& name) const;
  void validate() const;
};

/// Defaults: the seven filter candidates, the six filtered models (the
/// original network is discretize-filtered), and the minimum-correlated,
/// maximum-correlated and Gaussian-noise ensembles.
ExperimentConfig default_config();

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Applies "a.b.c=value" overrides; the value is parsed as JSON when possible,
/// otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

NamedFilter filter_from_json(const nlohmann::json& j, const std::string& path);
nlohmann::json filter_to_json(const NamedFilter& f);

/// FNV-1a 64 of the canonical JSON dump.
std::uint64_t config_hash(const ExperimentConfig& cfg);

/// Deterministic per-purpose seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose);

struct LoadedData {
  Dataset train;
  Dataset test;
};

LoadedData load_data(const ExperimentConfig& cfg, bool need_train);

/// Ensemble manifest: {"name", "mode", "members": [{"name", "filter": {...}, "model": path}]}.
void write_ensemble_manifest(const std::filesystem::path& path, const std::string& name, EnsembleMode mode,
                             const std::vector<std::pair<NamedFilter, std::filesystem::path>>& members);
Ensemble load_ensemble_manifest(const std::filesystem::path& path, std::string* name = nullptr);

/// Files written by one command.
struct CommandOutput {
  std::vector<std::filesystem::path> files;
  std::string summary;  // human-readable lines for stdout
};

CommandOutput cmd_train(const ExperimentConfig& cfg);
CommandOutput cmd_correlate(const ExperimentConfig& cfg);
CommandOutput cmd_attack(const ExperimentConfig& cfg);
CommandOutput cmd_transfer(const ExperimentConfig& cfg);
CommandOutput cmd_ensemble_eval(const ExperimentConfig& cfg, const std::filesystem::path& manifest = {});
CommandOutput cmd_certify(const ExperimentConfig& cfg);

/// Loads <model_dir>/<name>.fenet and pairs it with its configured filter.
SubModel load_submodel(const ExperimentConfig& cfg, const std::string& name);

std::string format_accuracy_csv(const std::vector<AccuracyRow>& rows);

}  // namespace fens
