#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fens/dataset.hpp"
#include "fens/ensemble.hpp"
#include "fens/filters.hpp"
#include "fens/image.hpp"
#include "fens/network.hpp"

namespace fens {

enum class AttackMethod { Fgsm, Bim, Pgd };
enum class Norm { L2, Linf };

/// Ascend: x + r sign(grad), the usual untargeted convention.
/// PaperLiteral: x - r sign(grad), which descends the loss.
enum class LossSign { Ascend, PaperLiteral };

std::string_view attack_method_name(AttackMethod m);
AttackMethod parse_attack_method(std::string_view name);
std::string_view norm_name(Norm n);
Norm parse_norm(std::string_view name);
std::string_view loss_sign_name(LossSign s);
LossSign parse_loss_sign(std::string_view name);

struct AttackConfig {
  AttackMethod method = AttackMethod::Pgd;
  double radius = 8.0 / 255.0;
  Norm norm = Norm::Linf;
  std::size_t steps = 20;
  double step_size = 0.8 / 255.0;
  bool random_init = true;
  BpdaMode bpda = BpdaMode::Identity;
  LossSign loss_sign = LossSign::Ascend;
  std::uint64_t rng_seed = 0;

  /// Copy with radius `eps` and step size `step_fraction * eps`.
  AttackConfig at_radius(double eps, double step_fraction) const;

  void validate() const;
};

struct AttackResult {
  Image adversarial;
  bool success = false;  // final_label != true label
  std::size_t queries = 0;  // gradient and label evaluations
  int final_label = 0;
};

/// Anything an attack can be run against: a label function and an input-space
/// loss gradient (possibly a BPDA surrogate).
class AttackTarget {
 public:
  virtual ~AttackTarget() = default;
  virtual int classify(const Image& x) const = 0;
  virtual std::vector<double> loss_gradient(const Image& x, int label) const = 0;
};

/// Bare network applied to the raw image.
class NetworkTarget final : public AttackTarget {
 public:
  explicit NetworkTarget(const Network& net) : net_(net) {}
  int classify(const Image& x) const override;
  std::vector<double> loss_gradient(const Image& x, int label) const override;

 private:
  const Network& net_;
};

/// Filter then network; the backward pass substitutes the filter per `mode`.
class SubModelTarget final : public AttackTarget {
 public:
  SubModelTarget(const SubModel& sm, BpdaMode mode);
  int classify(const Image& x) const override;
  std::vector<double> loss_gradient(const Image& x, int label) const override;

 private:
  const SubModel& sm_;
  BpdaMode mode_;
};

/// Whole ensemble: labels from its aggregation rule, gradient = sum of the
/// sub-models' BPDA gradients of their own losses.
class EnsembleTarget final : public AttackTarget {
 public:
  EnsembleTarget(const Ensemble& e, BpdaMode mode, EnsembleMode label_mode);
  EnsembleTarget(const Ensemble& e, BpdaMode mode) : EnsembleTarget(e, mode, e.mode()) {}
  int classify(const Image& x) const override;
  std::vector<double> loss_gradient(const Image& x, int label) const override;

 private:
  const Ensemble& e_;
  BpdaMode mode_;
  EnsembleMode label_mode_;
};

/// Direction n(v): sign(v) for L-inf, v / ||v||_2 for L2. Returns false for a zero vector.
bool normalized_direction(std::span<const double> v, Norm norm, std::vector<double>& out);

/// Projection onto the ball of radius r around `center`: coordinate clipping
/// for L-inf; for L2, unchanged inside the open ball, else center + r n(p - center).
void project_to_ball(std::span<const double> center, std::span<double> point, double radius, Norm norm);

double distance(std::span<const double> a, std::span<const double> b, Norm norm);

AttackResult fgsm(const AttackTarget& target, const Image& x, int label, const AttackConfig& cfg);
AttackResult bim(const AttackTarget& target, const Image& x, int label, const AttackConfig& cfg);
AttackResult pgd(const AttackTarget& target, const Image& x, int label, const AttackConfig& cfg);

/// Dispatches on cfg.method.
AttackResult run_attack(const AttackTarget& target, const Image& x, int label, const AttackConfig& cfg);

/// Attack through the filter with a BPDA backward pass; the perturbation lives
/// in the original image space. Requires cfg.bpda != Off.
AttackResult attack_submodel_bpda(const SubModel& sm, const Image& x, int label, const AttackConfig& cfg);

/// Sum-of-gradients attack on the ensemble as a whole; success is judged by
/// the ensemble's own aggregation mode.
AttackResult attack_ensemble(const Ensemble& e, const Image& x, int label, const AttackConfig& cfg);

/// Seed used for the i-th image of a dataset-level evaluation.
std::uint64_t per_image_seed(std::uint64_t seed, std::size_t index);

struct AccuracyRow {
  double epsilon = 0.0;
  std::string model_name;
  double accuracy = 0.0;
};

/// Crafts adversarial examples on `source` at every radius (step = step_fraction
/// * eps) and reports the accuracy of each target on them. Radius 0 yields the
/// clean accuracy.
std::vector<AccuracyRow> transfer_eval(const SubModel& source, std::span<const SubModel> targets, const Dataset& data,
                                       std::span<const double> epsilons, const AttackConfig& base,
                                       double step_fraction = 0.1);

/// White-box accuracy of one sub-model under its own BPDA attack.
double robust_accuracy(const SubModel& sm, const Dataset& data, const AttackConfig& cfg);

}  // namespace fens
