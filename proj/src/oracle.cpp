// SPDX-License-Identifier: Apache-2.0
#include "fslr/oracle.hpp"

#include <cmath>
#include <stdexcept>

namespace fslr {

namespace {

ExactFslr exact_from_graph(Tape& tape, Var f, const std::vector<std::string>& names,
                           const ParamValues& unit_deltas, bool retain) {
  if (f.shape().size() != 2) throw ShapeError("exact_delta_f: outputs must be [N x K]");
  const std::size_t rows = f.shape()[0];
  const std::size_t k = f.shape()[1];
  if (rows * k > kOracleMaxOutputs) {
    throw std::length_error("exact_delta_f: N*K = " + std::to_string(rows * k) + " exceeds " +
                            std::to_string(kOracleMaxOutputs));
  }
  std::map<std::string, Tensor> delta;
  for (const auto& name : names) delta.emplace(name, Tensor::zeros({rows, k}));

  Tensor seed = Tensor::zeros({rows, k});
  for (std::size_t idx = 0; idx < rows * k; ++idx) {
    seed[idx] = 1.0;
    const GradMap g = tape.backward(f, seed);
    seed[idx] = 0.0;
    for (const auto& name : names) {
      const Tensor& dw = unit_deltas.at(name);
      const Tensor& gw = g.at(name);
      if (!dw.same_shape(gw)) throw ShapeError("exact_delta_f: delta shape mismatch for " + name);
      double s = 0.0;
      for (std::size_t i = 0; i < dw.numel(); ++i) s += dw[i] * gw[i];
      delta.at(name)[idx] = s;
    }
  }

  ExactFslr out;
  const double nk = static_cast<double>(rows * k);
  for (auto& [name, d] : delta) {
    out.rms[name] = std::sqrt(tensor_math::sum_squares(d) / nk);
    if (retain) out.delta_f.emplace(name, std::move(d));
  }
  return out;
}

}  // namespace

ExactFslr exact_delta_f(const Model& model, const Tensor& inputs, const ParamValues& unit_deltas,
                        bool retain) {
  Tape tape;
  Var f = model.forward(tape, inputs);
  return exact_from_graph(tape, f, model.names(), unit_deltas, retain);
}

ExactFslr exact_delta_f(const ForwardFn& forward, const ParamValues& params,
                        const ParamValues& unit_deltas, bool retain) {
  Tape tape;
  std::map<std::string, Var> vars;
  std::vector<std::string> names;
  for (const auto& [name, value] : params) {
    vars.emplace(name, tape.parameter(name, value));
    names.push_back(name);
  }
  Var f = forward(tape, vars);
  return exact_from_graph(tape, f, names, unit_deltas, retain);
}

GradMap finite_diff_grad(const ScalarFn& fn, const ParamValues& params, double h) {
  if (!(h > 0.0)) throw std::domain_error("finite_diff_grad: h must be positive");
  ParamValues work = params;
  GradMap out;
  for (auto& [name, t] : work) {
    Tensor g(t.shape(), 0.0);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double w = t[i];
      t[i] = w + h;
      const double up = fn(work);
      t[i] = w - h;
      const double down = fn(work);
      t[i] = w;
      g[i] = (up - down) / (2.0 * h);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

namespace {

void require_square(const Tensor& f) {
  if (f.rank() != 2 || f.dim(0) != f.dim(1)) {
    throw ShapeError("sampler factor must be square, got " + shape_str(f.shape()));
  }
}

// Multiplies t along `mode` by the square matrix m: t' = m ×_mode t.
Tensor mode_multiply(const Tensor& t, const Tensor& m, std::size_t mode) {
  const Shape& s = t.shape();
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t a = 0; a < mode; ++a) outer *= s[a];
  for (std::size_t a = mode + 1; a < s.size(); ++a) inner *= s[a];
  const std::size_t n = s[mode];
  Tensor out(s, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < n; ++i) {
      double* dst = out.data() + (o * n + i) * inner;
      for (std::size_t j = 0; j < n; ++j) {
        const double c = m.at(i, j);
        if (c == 0.0) continue;
        const double* src = t.data() + (o * n + j) * inner;
        for (std::size_t q = 0; q < inner; ++q) dst[q] += c * src[q];
      }
    }
  }
  return out;
}

}  // namespace

std::vector<Tensor> sample_tensor_normal(Rng& rng, const std::vector<Tensor>& factors,
                                         std::size_t n_samples) {
  if (factors.empty() || factors.size() > kMaxRank) {
    throw ShapeError("sample_tensor_normal: need 1 to 4 factors");
  }
  Shape shape;
  for (const auto& f : factors) {
    require_square(f);
    shape.push_back(f.dim(0));
  }
  std::vector<Tensor> out;
  out.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    Tensor z = standard_normal(rng, shape);
    for (std::size_t d = 0; d < factors.size(); ++d) z = mode_multiply(z, factors[d], d);
    out.push_back(std::move(z));
  }
  return out;
}

std::vector<Tensor> sample_matrix_normal(Rng& rng, const Tensor& l_u, const Tensor& l_v,
                                         std::size_t n_samples) {
  return sample_tensor_normal(rng, {l_u, l_v}, n_samples);
}

double tensor_normal_target(const std::vector<Tensor>& factors) {
  double prod = 1.0;
  for (const auto& l : factors) {
    require_square(l);
    // Σ_{ii′} (L Lᵀ)_{ii′} = ‖Lᵀ 1‖².
    const std::size_t n = l.dim(0);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < n; ++i) col += l.at(i, j);
      total += col * col;
    }
    prod *= total;
  }
  return prod;
}

}  // namespace fslr
