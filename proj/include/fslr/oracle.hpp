// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fslr/models.hpp"
#include "fslr/rng.hpp"

namespace fslr {

inline constexpr std::size_t kOracleMaxOutputs = 256;

/// Exact first-order output change per layer.
struct ExactFslr {
  std::map<std::string, double> rms;
  /// Δ_ℓf [N×K] per layer; only filled when requested.
  std::map<std::string, Tensor> delta_f;
};

/// One backward pass per output f_nk; Δ_ℓf_nk = Σ ΔW ⊙ df_nk/dW.
/// Throws std::length_error when N·K exceeds kOracleMaxOutputs.
ExactFslr exact_delta_f(const Model& model, const Tensor& inputs, const ParamValues& unit_deltas,
                        bool retain = false);

/// Builds the logits [N×K] from parameter leaves registered on the tape.
using ForwardFn = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

/// Same for an arbitrary differentiable function of named parameters.
ExactFslr exact_delta_f(const ForwardFn& forward, const ParamValues& params,
                        const ParamValues& unit_deltas, bool retain = false);

using ScalarFn = std::function<double(const ParamValues&)>;

/// Central differences (f(w+h) − f(w−h)) / 2h for every coordinate.
GradMap finite_diff_grad(const ScalarFn& fn, const ParamValues& params, double h = 1e-5);

/// Z = L_U · G · L_Vᵀ with G IID N(0,1). Covariance U ⊗ V with U = L_U L_Uᵀ.
std::vector<Tensor> sample_matrix_normal(Rng& rng, const Tensor& l_u, const Tensor& l_v,
                                         std::size_t n_samples);

/// Tensor-normal samples: G multiplied by factors[d] along mode d.
std::vector<Tensor> sample_tensor_normal(Rng& rng, const std::vector<Tensor>& factors,
                                         std::size_t n_samples);

/// Π_d Σ_{ii′} (L_d L_dᵀ)_{ii′}: the exact Var[ΣZ] of a tensor-normal sample.
double tensor_normal_target(const std::vector<Tensor>& factors);

}  // namespace fslr
