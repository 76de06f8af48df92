// fens: train filtered sub-models, analyse filter correlation, attack models
// and ensembles, and certify robustness. Every command writes
// <output_dir>/<command>_<tag>.csv plus a copy of the resolved config.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fens/experiment.hpp"

namespace {

struct Overrides {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out, tag, model_dir, data_dir, dataset, method, norm, bpda, loss_sign, manifest;
  std::vector<int> eps;
  long long seed = -1;
  long long steps = -1;
  long long epochs = -1;
  long long num_images = -1;
  long long test_subset = -1;
  bool print_config = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON config file (fields default when absent)");
  cmd->add_option("--set", o.sets, "Override any field: dotted.path=value (repeatable)");
  cmd->add_option("-o,--out", o.out, "Output directory");
  cmd->add_option("--tag", o.tag, "Output file tag");
  cmd->add_option("--seed", o.seed, "Global seed");
  cmd->add_option("--model-dir", o.model_dir, "Model directory");
  cmd->add_option("--dataset", o.dataset, "synth or cifar10");
  cmd->add_option("--data-dir", o.data_dir, "CIFAR-10 binary directory (default $FENS_DATA_DIR)");
  cmd->add_option("--eps", o.eps, "Radii in 1/255 units, e.g. 2,5,8")->delimiter(',');
  cmd->add_option("--method", o.method, "fgsm, bim or pgd");
  cmd->add_option("--norm", o.norm, "inf or 2");
  cmd->add_option("--bpda", o.bpda, "identity or adjoint");
  cmd->add_option("--loss-sign", o.loss_sign, "ascend or paper_literal");
  cmd->add_option("--steps", o.steps, "Attack iterations");
  cmd->add_option("--epochs", o.epochs, "Epochs per learning rate");
  cmd->add_option("--num-images", o.num_images, "Images for the correlation analysis");
  cmd->add_option("--test-subset", o.test_subset, "Test images used for evaluation (0 = all)");
  cmd->add_flag("--print-config", o.print_config, "Print the resolved config and exit");
}

nlohmann::json resolve(const Overrides& o) {
  nlohmann::json j = fens::config_to_json(fens::default_config());
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw fens::ConfigError("config: cannot open " + o.config_path);
    try {
      j.merge_patch(nlohmann::json::parse(in, nullptr, true, true));
    } catch (const nlohmann::json::parse_error& e) {
      throw fens::ConfigError("config: " + o.config_path + ": " + e.what());
    }
  }
  if (!o.out.empty()) j["output_dir"] = o.out;
  if (!o.tag.empty()) j["tag"] = o.tag;
  if (o.seed >= 0) j["seed"] = o.seed;
  if (!o.model_dir.empty()) j["model_dir"] = o.model_dir;
  if (!o.dataset.empty()) j["dataset"]["kind"] = o.dataset;
  if (!o.data_dir.empty()) j["dataset"]["path"] = o.data_dir;
  if (!o.eps.empty()) j["attack"]["eps"] = o.eps;
  if (!o.method.empty()) j["attack"]["method"] = o.method;
  if (!o.norm.empty()) j["attack"]["norm"] = o.norm;
  if (!o.bpda.empty()) j["attack"]["bpda"] = o.bpda;
  if (!o.loss_sign.empty()) j["attack"]["loss_sign"] = o.loss_sign;
  if (o.steps >= 0) j["attack"]["steps"] = o.steps;
  if (o.epochs >= 0) j["train"]["epochs_per_rate"] = o.epochs;
  if (o.num_images >= 0) j["noise"]["num_images"] = o.num_images;
  if (o.test_subset >= 0) j["dataset"]["test_subset"] = o.test_subset;
  for (const auto& s : o.sets) fens::apply_override(j, s);
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Filter-based ensembles for adversarial robustness"};
  app.require_subcommand(1);
  Overrides o;

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"train", "Train one network per configured filter (plus optional noise/adversarial models)"},
      {"correlate", "Filter sensitivity correlation matrix and minimum-correlated selection"},
      {"attack", "White-box BPDA attack accuracy of every trained model"},
      {"transfer", "Accuracy of every model on adversarials crafted against the source model"},
      {"ensemble-eval", "Sum-gradient BPDA attack on each ensemble; vote, score and member accuracy"},
      {"certify", "Per-input margins, Lipschitz bounds, certified radii and pairwise bounds"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, o);
    if (std::string(c.name) == "ensemble-eval") {
      sub->add_option("--manifest", o.manifest, "Evaluate the ensemble described by this manifest instead");
    }
    subs.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const nlohmann::json j = resolve(o);
    const fens::ExperimentConfig cfg = fens::config_from_json(j);
    if (o.print_config) {
      std::cout << fens::config_to_json(cfg).dump(2) << "\n";
      return 0;
    }
    const std::string name = app.get_subcommands().front()->get_name();
    fens::CommandOutput out;
    if (name == "train") out = fens::cmd_train(cfg);
    else if (name == "correlate") out = fens::cmd_correlate(cfg);
    else if (name == "attack") out = fens::cmd_attack(cfg);
    else if (name == "transfer") out = fens::cmd_transfer(cfg);
    else if (name == "ensemble-eval") out = fens::cmd_ensemble_eval(cfg, o.manifest);
    else out = fens::cmd_certify(cfg);
    std::cout << out.summary;
    for (const auto& f : out.files) std::cout << "wrote " << f.string() << "\n";
    return 0;
  } catch (const fens::ConfigError& e) {
    std::cerr << "fens: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fens: " << e.what() << "\n";
    return 1;
  }
}
