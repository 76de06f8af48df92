#include "fens/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fens/rng.hpp"

namespace fens {

std::string_view attack_method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::Fgsm: return "fgsm";
    case AttackMethod::Bim: return "bim";
    case AttackMethod::Pgd: return "pgd";
  }
  return "?";
}

AttackMethod parse_attack_method(std::string_view name) {
  if (name == "fgsm") return AttackMethod::Fgsm;
  if (name == "bim") return AttackMethod::Bim;
  if (name == "pgd") return AttackMethod::Pgd;
  throw std::invalid_argument("unknown attack method '" + std::string(name) + "' (fgsm|bim|pgd)");
}

std::string_view norm_name(Norm n) { return n == Norm::L2 ? "2" : "inf"; }

Norm parse_norm(std::string_view name) {
  if (name == "2" || name == "l2") return Norm::L2;
  if (name == "inf" || name == "linf") return Norm::Linf;
  throw std::invalid_argument("unknown norm '" + std::string(name) + "' (2|inf)");
}

std::string_view loss_sign_name(LossSign s) { return s == LossSign::Ascend ? "ascend" : "paper_literal"; }

LossSign parse_loss_sign(std::string_view name) {
  if (name == "ascend") return LossSign::Ascend;
  if (name == "paper_literal") return LossSign::PaperLiteral;
  throw std::invalid_argument("unknown loss sign '" + std::string(name) + "' (ascend|paper_literal)");
}

AttackConfig AttackConfig::at_radius(double eps, double step_fraction) const {
  AttackConfig c = *this;
  c.radius = eps;
  c.step_size = step_fraction * eps;
  return c;
}

void AttackConfig::validate() const {
  if (!(radius >= 0.0) || !std::isfinite(radius)) throw std::invalid_argument("attack: radius must be >= 0");
  if (method != AttackMethod::Fgsm) {
    if (steps < 1) throw std::invalid_argument("attack: steps must be >= 1");
    if (!(step_size >= 0.0)) throw std::invalid_argument("attack: step size must be >= 0");
    if (step_size > radius * (1.0 + 1e-12)) throw std::invalid_argument("attack: step size must not exceed the radius");
  }
  if ((method == AttackMethod::Fgsm || method == AttackMethod::Bim) && norm != Norm::Linf) {
    throw std::invalid_argument("attack: fgsm and bim are L-inf attacks");
  }
}

// --- Targets ----------------------------------------------------------------

int NetworkTarget::classify(const Image& x) const { return fens::classify(net_, x.to_tensor()); }

std::vector<double> NetworkTarget::loss_gradient(const Image& x, int label) const {
  return grad_input(net_, x.to_tensor(), label).storage();
}

SubModelTarget::SubModelTarget(const SubModel& sm, BpdaMode mode) : sm_(sm), mode_(mode) {
  if (mode == BpdaMode::Off) {
    throw std::invalid_argument("sub-model '" + sm.name +
                                "': gradients through a filter need BPDA (use bpda=identity or bpda=adjoint)");
  }
}

int SubModelTarget::classify(const Image& x) const { return sm_.classify(x); }

std::vector<double> SubModelTarget::loss_gradient(const Image& x, int label) const {
  const auto g = grad_input(sm_.net, sm_.network_input(x), label);
  return bpda_backward(sm_.filter, x.shape(), g.values(), mode_);
}

EnsembleTarget::EnsembleTarget(const Ensemble& e, BpdaMode mode, EnsembleMode label_mode)
    : e_(e), mode_(mode), label_mode_(label_mode) {
  if (mode == BpdaMode::Off) throw std::invalid_argument("ensemble attack needs BPDA (identity or adjoint)");
}

int EnsembleTarget::classify(const Image& x) const { return predict(e_, x, label_mode_); }

std::vector<double> EnsembleTarget::loss_gradient(const Image& x, int label) const {
  std::vector<double> total(x.size(), 0.0);
  for (const auto& sm : e_.submodels()) {
    const auto g = SubModelTarget(sm, mode_).loss_gradient(x, label);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += g[i];
  }
  return total;
}

// --- Geometry ---------------------------------------------------------------

bool normalized_direction(std::span<const double> v, Norm norm, std::vector<double>& out) {
  out.assign(v.size(), 0.0);
  if (norm == Norm::Linf) {
    bool any = false;
    for (std::size_t i = 0; i < v.size(); ++i) {
      out[i] = v[i] > 0.0 ? 1.0 : (v[i] < 0.0 ? -1.0 : 0.0);
      any = any || v[i] != 0.0;
    }
    return any;
  }
  double sq = 0.0;
  for (double x : v) sq += x * x;
  if (sq == 0.0) return false;
  const double inv = 1.0 / std::sqrt(sq);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
  return true;
}

double distance(std::span<const double> a, std::span<const double> b, Norm norm) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    acc = norm == Norm::Linf ? std::max(acc, d) : acc + d * d;
  }
  return norm == Norm::Linf ? acc : std::sqrt(acc);
}

void project_to_ball(std::span<const double> center, std::span<double> point, double radius, Norm norm) {
  if (norm == Norm::Linf) {
    for (std::size_t i = 0; i < point.size(); ++i) {
      point[i] = std::clamp(point[i], center[i] - radius, center[i] + radius);
    }
    return;
  }
  const double d = distance(center, point, Norm::L2);
  if (d < radius) return;
  const double scale = radius / d;
  for (std::size_t i = 0; i < point.size(); ++i) point[i] = center[i] + (point[i] - center[i]) * scale;
}

namespace {

double direction_sign(const AttackConfig& cfg) { return cfg.loss_sign == LossSign::Ascend ? 1.0 : -1.0; }

AttackResult finish(const AttackTarget& target, const Image& x, std::vector<double> values, int label,
                    std::size_t queries) {
  AttackResult r;
  r.adversarial = Image::clamped(x.shape(), std::move(values));
  r.final_label = target.classify(r.adversarial);
  r.success = r.final_label != label;
  r.queries = queries + 1;
  return r;
}

// Shared loop of BIM and PGD.
AttackResult iterate(const AttackTarget& target, const Image& x, int label, const AttackConfig& cfg,
                     std::vector<double> start) {
  const auto center = x.pixels();
  std::vector<double> cur = std::move(start);
  std::vector<double> dir;
  std::size_t queries = 0;
  const double s = direction_sign(cfg);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto g = target.loss_gradient(Image(x.shape(), cur), label);
    ++queries;
    if (!normalized_direction(g, cfg.norm, dir)) continue;
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += s * cfg.step_size * dir[i];
    project_to_ball(center, cur, cfg.radius, cfg.norm);
    for (auto& v : cur) v = clamp01(v);
  }
  return finish(target, x, std::move(cur), label, queries);
}

}  // namespace

// --- Attacks ----------------------------------------------------------------

AttackResult fgsm(const AttackTarget& target, const Image& x, int label, const AttackConfig& cfg) {
  AttackConfig c = cfg;
  c.method = AttackMethod::Fgsm;
  c.validate();
  const auto g = target.loss_gradient(x, label);
  std::vector<double> dir;
  std::vector<double> out(x.pixels().begin(), x.pixels().end());
  if (normalized_direction(g, Norm::Linf, dir)) {
    const double s = direction_sign(cfg);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = clamp01(out[i] + s * cfg.radius * dir[i]);
  }
  return finish(target, x, std::move(out), label, 1);
}

AttackResult bim(const AttackTarget& target, const Image& x, int label, const AttackConfig& cfg) {
  AttackConfig c = cfg;
  c.method = AttackMethod::Bim;
  c.validate();
  return iterate(target, x, label, c, {x.pixels().begin(), x.pixels().end()});
}

AttackResult pgd(const AttackTarget& target, const Image& x, int label, const AttackConfig& cfg) {
  AttackConfig c = cfg;
  c.method = AttackMethod::Pgd;
  c.validate();
  std::vector<double> start(x.pixels().begin(), x.pixels().end());
  if (c.random_init && c.radius > 0.0) {
    Rng rng(c.rng_seed);
    std::vector<double> delta(start.size());
    if (c.norm == Norm::Linf) {
      for (auto& d : delta) d = rng.uniform(-c.radius, c.radius);
    } else {
      // uniform in the L2 ball: gaussian direction, radius r u^(1/m)
      double sq = 0.0;
      for (auto& d : delta) {
        d = rng.normal();
        sq += d * d;
      }
      const double r = c.radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(delta.size()));
      for (auto& d : delta) d *= r / std::sqrt(sq);
    }
    for (std::size_t i = 0; i < start.size(); ++i) start[i] = clamp01(start[i] + delta[i]);
    project_to_ball(x.pixels(), start, c.radius, c.norm);
  }
  return iterate(target, x, label, c, std::move(start));
}

AttackResult run_attack(const AttackTarget& target, const Image& x, int label, const AttackConfig& cfg) {
  switch (cfg.method) {
    case AttackMethod::Fgsm: return fgsm(target, x, label, cfg);
    case AttackMethod::Bim: return bim(target, x, label, cfg);
    case AttackMethod::Pgd: return pgd(target, x, label, cfg);
  }
  throw std::logic_error("unreachable attack method");
}

AttackResult attack_submodel_bpda(const SubModel& sm, const Image& x, int label, const AttackConfig& cfg) {
  return run_attack(SubModelTarget(sm, cfg.bpda), x, label, cfg);
}

AttackResult attack_ensemble(const Ensemble& e, const Image& x, int label, const AttackConfig& cfg) {
  return run_attack(EnsembleTarget(e, cfg.bpda), x, label, cfg);
}

std::uint64_t per_image_seed(std::uint64_t seed, std::size_t index) {
  return Rng({seed, static_cast<std::uint64_t>(index), 0xa77acULL}).next();
}

std::vector<AccuracyRow> transfer_eval(const SubModel& source, std::span<const SubModel> targets, const Dataset& data,
                                       std::span<const double> epsilons, const AttackConfig& base,
                                       double step_fraction) {
  if (data.empty()) throw std::invalid_argument("transfer_eval: empty dataset");
  const SubModelTarget src(source, base.bpda);
  std::vector<AccuracyRow> rows;
  for (double eps : epsilons) {
    std::vector<std::size_t> correct(targets.size(), 0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      AttackConfig cfg = base.at_radius(eps, step_fraction);
      cfg.rng_seed = per_image_seed(base.rng_seed, i);
      const Image adv = eps > 0.0 ? run_attack(src, data.images[i], data.labels[i], cfg).adversarial : data.images[i];
      for (std::size_t t = 0; t < targets.size(); ++t) {
        if (targets[t].classify(adv) == data.labels[i]) ++correct[t];
      }
    }
    for (std::size_t t = 0; t < targets.size(); ++t) {
      rows.push_back({eps, targets[t].name, static_cast<double>(correct[t]) / static_cast<double>(data.size())});
    }
  }
  return rows;
}

double robust_accuracy(const SubModel& sm, const Dataset& data, const AttackConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("robust_accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    AttackConfig c = cfg;
    c.rng_seed = per_image_seed(cfg.rng_seed, i);
    const Image adv = cfg.radius > 0.0 ? attack_submodel_bpda(sm, data.images[i], data.labels[i], c).adversarial
                                       : data.images[i];
    if (sm.classify(adv) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace fens
