// SPDX-License-Identifier: Apache-2.0
#include "fslr/estimator.hpp"

#include <cmath>

namespace fslr {

namespace {

constexpr double kLogFloor = 1e-300;

}  // namespace

std::string to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::kRaw: return "raw";
    case EstimatorKind::kIid: return "iid";
    case EstimatorKind::kKron: return "kron";
    case EstimatorKind::kReadout: return "readout";
  }
  return "?";
}

EstimatorKind parse_estimator(const std::string& s) {
  for (auto k : {EstimatorKind::kRaw, EstimatorKind::kIid, EstimatorKind::kKron,
                 EstimatorKind::kReadout}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown estimator '" + s + "'");
}

DegenerateLayerError::DegenerateLayerError(std::string layer)
    : std::runtime_error("degenerate layer '" + layer +
                         "': update statistics are zero, function-space learning rate undefined"),
      layer_(std::move(layer)) {}

ProbeSample sample_phi(const Model& model, const Tensor& inputs, Rng& rng) {
  if (inputs.empty()) throw ShapeError("sample_phi: empty probe batch");
  Tape tape;
  Var f = model.forward(tape, inputs);
  Tensor omega = standard_normal(rng, f.shape());
  const double norm = 1.0 / std::sqrt(static_cast<double>(f.value().numel()));
  Var phi = ops::scale(ops::sum(ops::mul(f, tape.constant(omega))), norm);
  ProbeSample out;
  out.phi = phi.value().item();
  out.grads = tape.backward(phi);
  out.omega = std::move(omega);
  return out;
}

ProbeSample sample_phi(const Model& model, const Tensor& inputs, Tensor omega) {
  if (inputs.empty()) throw ShapeError("sample_phi: empty probe batch");
  Tape tape;
  Var f = model.forward(tape, inputs);
  if (!omega.same_shape(f.value())) {
    throw ShapeError("sample_phi: omega shape " + shape_str(omega.shape()) +
                     " does not match logits " + shape_str(f.shape()));
  }
  const double norm = 1.0 / std::sqrt(static_cast<double>(f.value().numel()));
  Var phi = ops::scale(ops::sum(ops::mul(f, tape.constant(omega))), norm);
  ProbeSample out;
  out.phi = phi.value().item();
  out.grads = tape.backward(phi);
  out.omega = std::move(omega);
  return out;
}

Tensor compute_z(const Tensor& unit_delta, const Tensor& grad_phi) {
  return tensor_math::mul(unit_delta, grad_phi);
}

ZStats z_stats(const Tensor& z) {
  const std::size_t rank = z.rank();
  if (rank == 0) throw ShapeError("z_stats: rank must be at least 1");
  ZStats s;
  s.rank = rank;
  s.dim_sumsq.assign(rank, 0.0);
  for (double v : z.values()) {
    s.frob2 += v * v;
    s.delta_phi += v;
  }
  // For axis d, view Z as [outer, n_d, inner]; summing over n_d leaves an
  // [outer × inner] array whose squared entries are accumulated.
  const Shape& shape = z.shape();
  for (std::size_t d = 0; d < rank; ++d) {
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (std::size_t a = 0; a < d; ++a) outer *= shape[a];
    for (std::size_t a = d + 1; a < rank; ++a) inner *= shape[a];
    const std::size_t n = shape[d];
    std::vector<double> partial(inner);
    double acc = 0.0;
    for (std::size_t o = 0; o < outer; ++o) {
      std::fill(partial.begin(), partial.end(), 0.0);
      const double* base = z.data() + o * n * inner;
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = base + i * inner;
        for (std::size_t j = 0; j < inner; ++j) partial[j] += row[j];
      }
      for (double p : partial) acc += p * p;
    }
    s.dim_sumsq[d] = acc;
  }
  return s;
}

EmaState::EmaState(std::size_t rank, double beta) : rank_(rank), beta_(beta), dims_(rank, 0.0) {
  if (!(beta > 0.0 && beta <= 1.0)) throw std::domain_error("EMA weight must be in (0, 1]");
}

// Stored as the bias-corrected mean m = acc / w with w = 1 − (1−β)^t. The
// update m += (β/w)(x − m) is the same recurrence, and a constant input is an
// exact fixed point in floating point (the first gain is β/β = 1).
void EmaState::update(const ZStats& stats) {
  if (stats.rank != rank_) throw ShapeError("EMA rank mismatch");
  weight_ = (1.0 - beta_) * weight_ + beta_;
  const double gain = beta_ / weight_;
  frob2_ += gain * (stats.frob2 - frob2_);
  for (std::size_t d = 0; d < rank_; ++d) dims_[d] += gain * (stats.dim_sumsq[d] - dims_[d]);
  phi_sq_ += gain * (stats.delta_phi * stats.delta_phi - phi_sq_);
  ++count_;
}

double EmaState::corrected(double mean) const {
  if (count_ == 0) throw std::logic_error("EMA read before any update");
  return mean;
}

double kron_from_expectations(std::span<const double> dim_sumsq, double frob2) {
  if (!(frob2 > 0.0)) throw DegenerateLayerError("");
  double log_num = 0.0;
  for (double e : dim_sumsq) {
    if (!(e > 0.0)) throw DegenerateLayerError("");
    log_num += std::log(std::max(e, kLogFloor));
  }
  const double exponent = static_cast<double>(dim_sumsq.size()) - 1.0;
  const double log_den = exponent * std::log(std::max(frob2, kLogFloor));
  return std::exp(0.5 * (log_num - log_den));
}

double fslr_kron(const EmaState& state) {
  std::vector<double> dims(state.rank());
  for (std::size_t d = 0; d < state.rank(); ++d) dims[d] = state.dim_sumsq(d);
  return kron_from_expectations(dims, state.frob2());
}

double fslr_iid(const EmaState& state) { return std::sqrt(state.frob2()); }

double fslr_raw(std::span<const double> delta_phi_samples) {
  if (delta_phi_samples.size() < 2) throw std::invalid_argument("fslr_raw needs >= 2 samples");
  double s = 0.0;
  for (double v : delta_phi_samples) s += v * v;
  return std::sqrt(s / static_cast<double>(delta_phi_samples.size()));
}

double fslr_readout_weight(const EmaState& state, const Parameter& param) {
  if (!param.is_readout_weight() || state.rank() != 2) {
    throw std::invalid_argument("'" + param.name + "' is not a readout weight matrix");
  }
  return std::sqrt(state.dim_sumsq(1));
}

double fslr_readout_bias(const EmaState& state, const Parameter& param) {
  if (!param.is_readout_bias() || state.rank() != 1) {
    throw std::invalid_argument("'" + param.name + "' is not a readout bias vector");
  }
  // A diagonal covariance gives the same sum of variances as the IID form.
  return fslr_iid(state);
}

double fslr_iid(const Tensor& z) { return std::sqrt(tensor_math::sum_squares(z)); }

double fslr_readout_bias(const Tensor& z) {
  if (z.rank() != 1) throw ShapeError("fslr_readout_bias expects a vector");
  return fslr_iid(z);
}

double FslrEstimate::at(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw std::out_of_range("no FSLR estimate for '" + name + "'");
  return it->second;
}

FslrEstimator::FslrEstimator(const Model& model, double beta, EstimatorKind kind) : kind_(kind) {
  for (const auto& p : model.parameters()) {
    Parameter tag = p;
    tag.value = Tensor();
    tags_.push_back(std::move(tag));
    states_.emplace(p.name, EmaState(p.value.rank(), beta));
  }
}

void FslrEstimator::observe(const ParamValues& unit_deltas, const GradMap& grad_phi) {
  for (const auto& tag : tags_) {
    const Tensor z = compute_z(unit_deltas.at(tag.name), grad_phi.at(tag.name));
    states_.at(tag.name).update(z_stats(z));
  }
  ++samples_;
}

FslrEstimate FslrEstimator::estimate() const { return estimate(kind_); }

FslrEstimate FslrEstimator::estimate(EstimatorKind kind) const {
  FslrEstimate out;
  out.kind = kind;
  for (const auto& tag : tags_) {
    const EmaState& s = states_.at(tag.name);
    double v = 0.0;
    try {
      switch (kind) {
        case EstimatorKind::kRaw: v = std::sqrt(s.delta_phi_sq()); break;
        case EstimatorKind::kIid: v = fslr_iid(s); break;
        case EstimatorKind::kKron: v = fslr_kron(s); break;
        case EstimatorKind::kReadout:
          if (tag.is_readout_weight()) {
            v = fslr_readout_weight(s, tag);
          } else if (tag.is_readout_bias()) {
            v = fslr_readout_bias(s, tag);
          } else {
            v = fslr_kron(s);
          }
          break;
      }
    } catch (const DegenerateLayerError&) {
      throw DegenerateLayerError(tag.name);
    }
    if (!std::isfinite(v)) throw DegenerateLayerError(tag.name);
    out.values.emplace(tag.name, v);
  }
  return out;
}

}  // namespace fslr
