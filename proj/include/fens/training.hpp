#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fens/attacks.hpp"
#include "fens/dataset.hpp"
#include "fens/ensemble.hpp"
#include "fens/network.hpp"

namespace fens {

// Every helper here initializes the network with seed cfg.rng_seed, so a
// (architecture, data, cfg) triple determines the result.

/// Trains a network on filter(image) for every training image.
SubModel train_submodel(const std::string& name, const FilterSpec& filter, const Architecture& arch,
                        const Dataset& data, const TrainConfig& cfg, std::vector<EpochRecord>* log = nullptr);

/// `count` identity-filter sub-models, each trained on inputs with fresh
/// i.i.d. Gaussian pixel noise (std sigma, clamped to [0, 1]) per minibatch.
/// Sub-model i uses seed + i for initialization and shuffling.
std::vector<SubModel> gaussian_noise_submodels(const Architecture& arch, const Dataset& data, double sigma,
                                               std::size_t count, std::uint64_t seed, TrainConfig cfg,
                                               const std::string& name_prefix = "gauss");

/// PGD adversarial training: every minibatch is replaced by adversarial
/// examples against the current network before the SGD step. The attack seed
/// of each example is drawn from the training stream.
Network adversarial_train(const Architecture& arch, const Dataset& data, const AttackConfig& attack,
                          const TrainConfig& cfg, std::vector<EpochRecord>* log = nullptr);

/// Clean accuracy of a sub-model.
double accuracy(const SubModel& sm, const Dataset& data);

/// Clean accuracy of an ensemble under the given aggregation mode.
double accuracy(const Ensemble& e, const Dataset& data, EnsembleMode mode);

}  // namespace fens
