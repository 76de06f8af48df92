#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "fens/filters.hpp"
#include "fens/image.hpp"
#include "fens/network.hpp"

namespace fens {

/// A front filter followed by the network trained on its output.
struct SubModel {
  std::string name;
  FilterSpec filter;
  Network net;

  Tensor network_input(const Image& x) const { return apply_filter(filter, x).to_tensor(); }
  Tensor logits(const Image& x) const { return forward(net, network_input(x)); }
  int classify(const Image& x) const { return fens::classify(net, network_input(x)); }
  std::vector<double> probabilities(const Image& x) const { return softmax(logits(x).values()); }

  /// Throws when the network input does not match the filter output for `image`.
  void check_compatible(const ImageShape& image) const;
};

enum class EnsembleMode { Vote, Score };

std::string_view ensemble_mode_name(EnsembleMode mode);
EnsembleMode parse_ensemble_mode(std::string_view name);

class Ensemble {
 public:
  Ensemble(std::vector<SubModel> submodels, EnsembleMode mode = EnsembleMode::Vote);

  const std::vector<SubModel>& submodels() const { return submodels_; }
  EnsembleMode mode() const { return mode_; }
  std::size_t num_classes() const { return submodels_.front().net.num_classes(); }

 private:
  std::vector<SubModel> submodels_;
  EnsembleMode mode_;
};

/// Per-sub-model labels and softmax outputs for one input.
struct EnsembleOutputs {
  std::vector<int> labels;
  std::vector<std::vector<double>> probabilities;
};

EnsembleOutputs evaluate_submodels(const Ensemble& e, const Image& x);

/// Aggregates precomputed sub-model outputs.
///  - Vote: most frequent label; ties go to the highest mean softmax among the
///    tied labels, then the smallest index.
///  - Score: argmax of the mean softmax probabilities.
int aggregate(const EnsembleOutputs& outputs, EnsembleMode mode);

int predict(const Ensemble& e, const Image& x);
int predict(const Ensemble& e, const Image& x, EnsembleMode mode);

/// True iff every sub-model emits the same label.
bool is_stable(const Ensemble& e, const Image& x);

/// f_top(z) - max_{i != top} f_i(z) with top = classify(net, z); 0 for a tie.
double margin(std::span<const double> logits);
double margin(const Network& net, const Tensor& z);

/// L2 robustness certificate of the network behind one sub-model, expressed in
/// the network's input space (after the filter).
struct RobustnessCertificate {
  std::string submodel_name;
  int label = 0;
  double margin = 0.0;
  double lipschitz = 1.0;
  double radius = 0.0;  // margin / (sqrt(2) * lipschitz), 0 when margin is 0
};

double certified_radius(double margin, double lipschitz);

RobustnessCertificate certify_submodel(const SubModel& sm, const Image& x);

/// Same, reusing a Lipschitz bound computed once for the network.
RobustnessCertificate certify_submodel(const SubModel& sm, const Image& x, double lipschitz);

/// margin1 * margin2 / (2 L1 L2): two sub-models whose filter sensitivities
/// multiply to less than this cannot both be flipped.
double pairwise_bound(const RobustnessCertificate& a, const RobustnessCertificate& b);

}  // namespace fens
