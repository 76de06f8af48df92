#include "fens/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fens {

void SubModel::check_compatible(const ImageShape& image) const {
  const auto out = filter_output_shape(filter, image);
  if (out.as_shape() != net.input_shape()) {
    throw std::invalid_argument("sub-model '" + name + "': filter output " + shape_to_string(out.as_shape()) +
                                " does not match network input " + shape_to_string(net.input_shape()));
  }
}

std::string_view ensemble_mode_name(EnsembleMode mode) { return mode == EnsembleMode::Vote ? "vote" : "score"; }

EnsembleMode parse_ensemble_mode(std::string_view name) {
  if (name == "vote") return EnsembleMode::Vote;
  if (name == "score") return EnsembleMode::Score;
  throw std::invalid_argument("unknown ensemble mode '" + std::string(name) + "' (vote|score)");
}

Ensemble::Ensemble(std::vector<SubModel> submodels, EnsembleMode mode)
    : submodels_(std::move(submodels)), mode_(mode) {
  if (submodels_.empty()) throw std::invalid_argument("ensemble needs at least one sub-model");
  for (const auto& sm : submodels_) {
    if (sm.net.num_classes() != submodels_.front().net.num_classes()) {
      throw std::invalid_argument("ensemble sub-models disagree on the class count");
    }
  }
}

EnsembleOutputs evaluate_submodels(const Ensemble& e, const Image& x) {
  EnsembleOutputs out;
  for (const auto& sm : e.submodels()) {
    const auto logits = sm.logits(x);
    out.labels.push_back(argmax(logits.values()));
    out.probabilities.push_back(softmax(logits.values()));
  }
  return out;
}

int aggregate(const EnsembleOutputs& outputs, EnsembleMode mode) {
  const std::size_t n = outputs.probabilities.front().size();
  std::vector<double> mean(n, 0.0);
  for (const auto& p : outputs.probabilities) {
    for (std::size_t i = 0; i < n; ++i) mean[i] += p[i];
  }
  for (auto& v : mean) v /= static_cast<double>(outputs.probabilities.size());
  if (mode == EnsembleMode::Score) return argmax(mean);

  std::vector<std::size_t> votes(n, 0);
  for (int l : outputs.labels) ++votes[static_cast<std::size_t>(l)];
  const std::size_t top = *std::max_element(votes.begin(), votes.end());
  int best = -1;
  for (std::size_t i = 0; i < n; ++i) {
    if (votes[i] != top) continue;
    if (best < 0 || mean[i] > mean[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

int predict(const Ensemble& e, const Image& x, EnsembleMode mode) { return aggregate(evaluate_submodels(e, x), mode); }

int predict(const Ensemble& e, const Image& x) { return predict(e, x, e.mode()); }

bool is_stable(const Ensemble& e, const Image& x) {
  const int first = e.submodels().front().classify(x);
  return std::all_of(e.submodels().begin() + 1, e.submodels().end(),
                     [&](const SubModel& sm) { return sm.classify(x) == first; });
}

double margin(std::span<const double> logits) {
  const auto top = static_cast<std::size_t>(argmax(logits));
  double runner_up = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (i != top) runner_up = std::max(runner_up, logits[i]);
  }
  if (logits.size() < 2) return 0.0;
  return logits[top] - runner_up;
}

double margin(const Network& net, const Tensor& z) { return margin(forward(net, z).values()); }

double certified_radius(double margin_value, double lipschitz) {
  if (!(margin_value > 0.0)) return 0.0;
  if (!(lipschitz > 0.0)) return std::numeric_limits<double>::infinity();
  return margin_value / (std::numbers::sqrt2 * lipschitz);
}

RobustnessCertificate certify_submodel(const SubModel& sm, const Image& x, double lipschitz) {
  const auto logits = sm.logits(x);
  RobustnessCertificate cert;
  cert.submodel_name = sm.name;
  cert.label = argmax(logits.values());
  cert.margin = margin(logits.values());
  cert.lipschitz = lipschitz;
  cert.radius = certified_radius(cert.margin, lipschitz);
  return cert;
}

RobustnessCertificate certify_submodel(const SubModel& sm, const Image& x) {
  return certify_submodel(sm, x, lipschitz_upper_bound(sm.net));
}

double pairwise_bound(const RobustnessCertificate& a, const RobustnessCertificate& b) {
  if (!(a.margin > 0.0) || !(b.margin > 0.0)) return 0.0;
  return a.margin * b.margin / (2.0 * a.lipschitz * b.lipschitz);
}

}  // namespace fens
