#include "fens/training.hpp"

#include <stdexcept>

namespace fens {

SubModel train_submodel(const std::string& name, const FilterSpec& filter, const Architecture& arch,
                        const Dataset& data, const TrainConfig& cfg, std::vector<EpochRecord>* log) {
  data.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  std::vector<Tensor> inputs;
  inputs.reserve(data.size());
  for (const auto& img : data.images) inputs.push_back(apply_filter(filter, img).to_tensor());
  Network net = build_network(arch, inputs.front().shape(), data.num_classes, cfg.rng_seed);
  net = train(std::move(net), inputs, data.labels, cfg, {}, log);
  return {name, filter, std::move(net)};
}

std::vector<SubModel> gaussian_noise_submodels(const Architecture& arch, const Dataset& data, double sigma,
                                               std::size_t count, std::uint64_t seed, TrainConfig cfg,
                                               const std::string& name_prefix) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_noise_submodels: sigma must be >= 0");
  data.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const auto inputs = to_tensors(data.images);
  const BatchTransform add_noise = [sigma](const Network&, std::vector<Tensor>& batch, std::span<const int>,
                                           Rng& rng) {
    if (sigma == 0.0) return;
    for (auto& x : batch) {
      for (auto& v : x.values()) v = clamp01(v + sigma * rng.normal());
    }
  };
  std::vector<SubModel> out;
  for (std::size_t i = 0; i < count; ++i) {
    cfg.rng_seed = seed + i;
    Network net = build_network(arch, inputs.front().shape(), data.num_classes, cfg.rng_seed);
    net = train(std::move(net), inputs, data.labels, cfg, add_noise);
    out.push_back({name_prefix + std::to_string(i), FilterSpec::identity(), std::move(net)});
  }
  return out;
}

Network adversarial_train(const Architecture& arch, const Dataset& data, const AttackConfig& attack,
                          const TrainConfig& cfg, std::vector<EpochRecord>* log) {
  if (!(attack.radius > 0.0)) throw std::invalid_argument("adversarial_train: attack radius must be > 0");
  attack.validate();
  data.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const auto inputs = to_tensors(data.images);
  const ImageShape shape = data.shape();
  const BatchTransform perturb = [&attack, shape](const Network& net, std::vector<Tensor>& batch,
                                                  std::span<const int> labels, Rng& rng) {
    const NetworkTarget target(net);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      AttackConfig c = attack;
      c.rng_seed = rng.next();
      const Image x(shape, batch[i].storage());
      const auto adv = run_attack(target, x, labels[i], c);
      batch[i] = adv.adversarial.to_tensor();
    }
  };
  Network net = build_network(arch, shape.as_shape(), data.num_classes, cfg.rng_seed);
  return train(std::move(net), inputs, data.labels, cfg, perturb, log);
}

double accuracy(const SubModel& sm, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (sm.classify(data.images[i]) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double accuracy(const Ensemble& e, const Dataset& data, EnsembleMode mode) {
  if (data.empty()) throw std::invalid_argument("accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (predict(e, data.images[i], mode) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace fens
