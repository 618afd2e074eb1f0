// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fslr/autodiff.hpp"
#include "fslr/models.hpp"
#include "fslr/rng.hpp"

namespace fslr {

/// Covariance assumption used to turn Z statistics into an FSLR.
enum class EstimatorKind {
  kRaw,      // variance of Δφ directly, no assumption
  kIid,      // independent, identically distributed Z entries
  kKron,     // Kronecker / tensor-normal separable covariance
  kReadout,  // kron, with the independent-rows forms for the readout layer
};

std::string to_string(EstimatorKind kind);
EstimatorKind parse_estimator(const std::string& s);

/// A layer whose update statistics are all zero (or vanish in a contraction),
/// so its function-space learning rate cannot be divided by.
class DegenerateLayerError : public std::runtime_error {
 public:
  explicit DegenerateLayerError(std::string layer);
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

/// φ = (1/√(NK)) Σ ω_nk f_nk evaluated on one probe batch, with dφ/dW.
struct ProbeSample {
  Tensor omega;
  double phi = 0.0;
  GradMap grads;
};

/// Draws ω ~ N(0,1) and runs one forward and one backward pass.
ProbeSample sample_phi(const Model& model, const Tensor& inputs, Rng& rng);
/// Same with caller-supplied ω of the logits' shape.
ProbeSample sample_phi(const Model& model, const Tensor& inputs, Tensor omega);

/// Z = ΔW ⊙ dφ/dW.
Tensor compute_z(const Tensor& unit_delta, const Tensor& grad_phi);

/// Sufficient statistics of one Z sample.
struct ZStats {
  std::size_t rank = 0;
  /// Σ Z².
  double frob2 = 0.0;
  /// dim_sumsq[d] = Σ over the other axes of (Σ over axis d of Z)². For a
  /// matrix, [0] = Σ_ii′ (ZZᵀ)_ii′ and [1] = Σ_jj′ (ZᵀZ)_jj′.
  std::vector<double> dim_sumsq;
  /// Σ Z = Δ_ℓφ.
  double delta_phi = 0.0;
};

ZStats z_stats(const Tensor& z);

/// Bias-corrected EMAs of the D+1 Kronecker statistics (plus Δφ², used by
/// the raw estimator). New samples enter with weight β.
class EmaState {
 public:
  EmaState(std::size_t rank, double beta);

  void update(const ZStats& stats);

  std::size_t rank() const { return rank_; }
  std::size_t count() const { return count_; }
  double beta() const { return beta_; }

  double frob2() const { return corrected(frob2_); }
  double dim_sumsq(std::size_t d) const { return corrected(dims_.at(d)); }
  double delta_phi_sq() const { return corrected(phi_sq_); }
  /// Raw (uncorrected) accumulator of Σ Z².
  double raw_frob2() const { return frob2_ * weight_; }

 private:
  double corrected(double mean) const;

  std::size_t rank_;
  double beta_;
  std::size_t count_ = 0;
  double weight_ = 0.0;  // 1 − (1−β)^t
  double frob2_ = 0.0;
  std::vector<double> dims_;
  double phi_sq_ = 0.0;
};

/// sqrt(Π_d E_d / E_frob^(D−1)) evaluated in log domain. Throws
/// DegenerateLayerError (with an empty layer name) if any expectation is ≤ 0.
double kron_from_expectations(std::span<const double> dim_sumsq, double frob2);

double fslr_kron(const EmaState& state);
double fslr_iid(const EmaState& state);
double fslr_raw(std::span<const double> delta_phi_samples);
/// Readout weight with independent rows: sqrt(E[Σ_jj′ (ZᵀZ)_jj′]).
double fslr_readout_weight(const EmaState& state, const Parameter& param);
/// Readout bias with diagonal covariance: sqrt(E[Σ z_i²]).
double fslr_readout_bias(const EmaState& state, const Parameter& param);

/// Single-sample conveniences.
double fslr_iid(const Tensor& z);
double fslr_readout_bias(const Tensor& z);

struct FslrEstimate {
  EstimatorKind kind = EstimatorKind::kKron;
  std::map<std::string, double> values;

  double at(const std::string& name) const;
};

/// Per-layer EMA bookkeeping for one training run.
class FslrEstimator {
 public:
  FslrEstimator(const Model& model, double beta, EstimatorKind kind);

  /// Folds one probe sample into every layer's EMA.
  void observe(const ParamValues& unit_deltas, const GradMap& grad_phi);
  /// Current estimate for every layer; throws DegenerateLayerError naming
  /// the first layer that cannot be estimated.
  FslrEstimate estimate() const;
  FslrEstimate estimate(EstimatorKind kind) const;

  std::size_t samples() const { return samples_; }
  EstimatorKind kind() const { return kind_; }
  const EmaState& state(const std::string& name) const { return states_.at(name); }

 private:
  EstimatorKind kind_;
  std::vector<Parameter> tags_;  // values unused, tags only
  std::map<std::string, EmaState> states_;
  std::size_t samples_ = 0;
};

}  // namespace fslr
