// SPDX-License-Identifier: Apache-2.0
#include "fslr/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fslr {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kSignSgd: return "signsgd";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kAdamW: return "adamw";
    case OptimizerKind::kAdamax: return "adamax";
    case OptimizerKind::kAdagrad: return "adagrad";
  }
  return "?";
}

OptimizerKind parse_optimizer(const std::string& s) {
  for (auto k : {OptimizerKind::kSgd, OptimizerKind::kSignSgd, OptimizerKind::kAdam,
                 OptimizerKind::kAdamW, OptimizerKind::kAdamax, OptimizerKind::kAdagrad}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown optimizer '" + s + "'");
}

LrPlan LrPlan::uniform(const std::vector<std::string>& names, double eta0) {
  LrPlan plan;
  plan.base_lr = eta0;
  for (const auto& n : names) plan.rates[n] = eta0;
  return plan;
}

double LrPlan::at(const std::string& name) const {
  auto it = rates.find(name);
  if (it == rates.end()) throw std::out_of_range("learning-rate plan has no entry for '" + name + "'");
  return it->second;
}

void LrPlan::validate(const std::vector<std::string>& names) const {
  for (const auto& n : names) {
    const double r = at(n);
    if (!(r > 0.0) || !std::isfinite(r)) {
      throw std::domain_error("learning rate for '" + n + "' must be positive and finite");
    }
  }
}

OptimState::OptimState(OptimizerKind kind, OptimizerHyper hyper) : kind_(kind), hyper_(hyper) {}

void OptimState::step(Model& model, const GradMap& grads, const LrPlan& plan,
                      double lr_multiplier) {
  // Validate everything before touching any weights.
  plan.validate(model.names());
  if (!(lr_multiplier >= 0.0) || !std::isfinite(lr_multiplier)) {
    throw std::domain_error("learning-rate multiplier must be finite and non-negative");
  }
  for (const auto& p : model.parameters()) {
    auto it = grads.find(p.name);
    if (it == grads.end()) throw std::out_of_range("missing gradient for '" + p.name + "'");
    if (!it->second.same_shape(p.value)) throw ShapeError("gradient shape mismatch for " + p.name);
  }
  ++steps_;
  for (auto& p : model.parameters()) {
    auto [it, fresh] = moments_.try_emplace(p.name);
    if (fresh) {
      it->second.first = Tensor::zeros(p.value.shape());
      it->second.second = Tensor::zeros(p.value.shape());
    }
    update_one(p.value, grads.at(p.name), it->second, plan.at(p.name) * lr_multiplier);
  }
}

void OptimState::update_one(Tensor& w, const Tensor& g, Moments& m, double lr) const {
  const std::size_t n = w.numel();
  const double t = static_cast<double>(steps_);
  const auto& h = hyper_;
  switch (kind_) {
    case OptimizerKind::kSgd:
      for (std::size_t i = 0; i < n; ++i) {
        m.first[i] = h.momentum * m.first[i] + g[i];
        w[i] -= lr * m.first[i];
      }
      break;
    case OptimizerKind::kSignSgd:
      for (std::size_t i = 0; i < n; ++i) {
        m.first[i] = h.momentum * m.first[i] + (1.0 - h.momentum) * g[i];
        const double s = m.first[i] > 0.0 ? 1.0 : (m.first[i] < 0.0 ? -1.0 : 0.0);
        w[i] -= lr * s;
      }
      break;
    case OptimizerKind::kAdamW:
      for (std::size_t i = 0; i < n; ++i) w[i] -= lr * h.weight_decay * w[i];
      [[fallthrough]];
    case OptimizerKind::kAdam: {
      const double c1 = 1.0 - std::pow(h.beta1, t);
      const double c2 = 1.0 - std::pow(h.beta2, t);
      for (std::size_t i = 0; i < n; ++i) {
        m.first[i] = h.beta1 * m.first[i] + (1.0 - h.beta1) * g[i];
        m.second[i] = h.beta2 * m.second[i] + (1.0 - h.beta2) * g[i] * g[i];
        const double mhat = m.first[i] / c1;
        const double vhat = m.second[i] / c2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + h.eps);
      }
      break;
    }
    case OptimizerKind::kAdamax: {
      const double c1 = 1.0 - std::pow(h.beta1, t);
      for (std::size_t i = 0; i < n; ++i) {
        m.first[i] = h.beta1 * m.first[i] + (1.0 - h.beta1) * g[i];
        m.second[i] = std::max(h.beta2 * m.second[i], std::abs(g[i]) + h.eps);
        w[i] -= lr * m.first[i] / (c1 * m.second[i]);
      }
      break;
    }
    case OptimizerKind::kAdagrad:
      for (std::size_t i = 0; i < n; ++i) {
        m.second[i] += g[i] * g[i];
        w[i] -= lr * g[i] / (std::sqrt(m.second[i]) + h.adagrad_eps);
      }
      break;
  }
}

ParamValues unit_deltas(const ParamValues& before, const ParamValues& after, const LrPlan& plan,
                        double lr_multiplier) {
  ParamValues out;
  for (const auto& [name, b] : before) {
    auto it = after.find(name);
    if (it == after.end()) throw std::out_of_range("no updated value for '" + name + "'");
    if (!it->second.same_shape(b)) throw ShapeError("snapshot shape mismatch for " + name);
    const double lr = plan.at(name) * lr_multiplier;
    if (lr == 0.0) throw std::domain_error("zero learning rate for '" + name + "'");
    Tensor d = tensor_math::sub(it->second, b);
    for (auto& v : d.values()) v /= lr;
    out.emplace(name, std::move(d));
  }
  return out;
}

}  // namespace fslr
