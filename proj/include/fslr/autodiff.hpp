// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fslr/tensor.hpp"

namespace fslr {

class Tape;

/// Gradients keyed by parameter name.
using GradMap = std::map<std::string, Tensor>;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Define-by-run computation graph. A fresh tape is built for every forward
/// pass; nodes are appended in evaluation order so the reverse pass is a
/// backwards sweep over the node list.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Named leaf whose gradient is reported by backward().
  Var parameter(const std::string& name, const Tensor& value);
  /// Leaf that never receives a gradient (data, probe weights).
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse pass from a scalar root. Every parameter on the tape gets an
  /// entry (zeros if it did not influence the root).
  GradMap backward(Var root);
  /// Reverse pass seeded with an explicit output cotangent of the root's shape.
  GradMap backward(Var root, const Tensor& seed);

  // Used by op implementations.
  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient accumulator of an input node, zero-initialised on first use.
  Tensor& grad_accumulator(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::string param_name;
  };
  std::vector<Node> nodes_;
  std::vector<std::size_t> params_;
};

/// Differentiable operations. All take and return Vars on the same tape.
namespace ops {

Var matmul(Var a, Var b);
/// a · bᵀ for a [m×k], b [n×k].
Var matmul_nt(Var a, Var b);
/// x Wᵀ (+ bias) for x [m×in], W [out×in], bias [out].
Var linear(Var x, Var weight);
Var linear(Var x, Var weight, Var bias);

// Elementwise with trailing-dimension broadcast of `b` (b's shape must be a
// suffix of a's shape).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// max(x, 0); subgradient 0 at 0.
Var relu(Var a);

/// Reduction over `axes`; an empty list reduces everything to a scalar.
Var sum(Var a, const std::vector<int>& axes = {});
Var mean(Var a, const std::vector<int>& axes = {});

/// Normalise over the last axis to zero mean and unit variance.
Var layernorm(Var x, double eps);
Var reshape(Var a, Shape shape);
/// Row gather: out[i] = table[ids[i]].
Var embedding(Var table, const std::vector<std::size_t>& ids);

/// Causal multi-head softmax attention on row-major [batch*seq, heads*dh]
/// activations with 1/sqrt(dh) logit scaling.
Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq,
                     std::size_t heads);

/// Mean softmax cross-entropy of logits [m×K] against integer targets.
Var cross_entropy(Var logits, const std::vector<int>& targets);

}  // namespace ops

}  // namespace fslr
