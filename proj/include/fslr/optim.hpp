// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "fslr/autodiff.hpp"
#include "fslr/models.hpp"

namespace fslr {

enum class OptimizerKind { kSgd, kSignSgd, kAdam, kAdamW, kAdamax, kAdagrad };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& s);

struct OptimizerHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;      // sgd, signsgd
  double weight_decay = 0.1;  // adamw
  double adagrad_eps = 1e-10;
};

/// Per-layer parameter-space learning rates.
struct LrPlan {
  double base_lr = 0.0;
  std::map<std::string, double> rates;

  /// Every name gets `eta0`.
  static LrPlan uniform(const std::vector<std::string>& names, double eta0);
  double at(const std::string& name) const;
  /// Throws if a name is missing or a rate is not positive and finite.
  void validate(const std::vector<std::string>& names) const;
};

struct Moments {
  Tensor first;
  Tensor second;
};

class OptimState {
 public:
  explicit OptimState(OptimizerKind kind, OptimizerHyper hyper = {});

  OptimizerKind kind() const { return kind_; }
  const OptimizerHyper& hyper() const { return hyper_; }
  std::size_t step_count() const { return steps_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  /// Applies one update to every parameter: W ← W − η^ℓ·multiplier·rule(g).
  void step(Model& model, const GradMap& grads, const LrPlan& plan, double lr_multiplier = 1.0);

 private:
  void update_one(Tensor& w, const Tensor& g, Moments& m, double lr) const;

  OptimizerKind kind_;
  OptimizerHyper hyper_;
  std::size_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

/// The update implied by a learning rate of 1:
/// ΔW^ℓ = (after − before) / (η^ℓ · multiplier).
ParamValues unit_deltas(const ParamValues& before, const ParamValues& after, const LrPlan& plan,
                        double lr_multiplier = 1.0);

}  // namespace fslr
