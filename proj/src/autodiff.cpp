// SPDX-License-Identifier: Apache-2.0
#include "fslr/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace fslr {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.dim(0)),
                     static_cast<Eigen::Index>(t.dim(1)));
}

MatMap as_matrix(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.dim(0)),
                static_cast<Eigen::Index>(t.dim(1)));
}

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::logic_error("operands recorded on different tapes");
  }
  return *a.tape;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

// b broadcasts against a when b's shape is a suffix of a's.
bool is_trailing_broadcast(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

void require_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (!is_trailing_broadcast(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
}

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::parameter(const std::string& name, const Tensor& value) {
  Node n;
  n.value = value;
  n.requires_grad = true;
  n.param_name = name;
  nodes_.push_back(std::move(n));
  params_.push_back(nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_accumulator(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

GradMap Tape::backward(Var root) {
  if (root.tape != this) throw std::logic_error("backward: root is not on this tape");
  if (value(root).numel() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " +
                     shape_str(value(root).shape()));
  }
  return backward(root, Tensor(value(root).shape(), 1.0));
}

GradMap Tape::backward(Var root, const Tensor& seed) {
  if (root.tape != this) throw std::logic_error("backward: root is not on this tape");
  if (!seed.same_shape(value(root))) {
    throw ShapeError("backward: seed shape " + shape_str(seed.shape()) +
                     " does not match root " + shape_str(value(root).shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_accumulator(root.id) = seed;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, i);
  }
  GradMap out;
  for (std::size_t id : params_) {
    const Node& n = nodes_[id];
    out[n.param_name] = n.has_grad ? n.grad : Tensor::zeros(n.value.shape());
  }
  return out;
}

namespace ops {

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  if (av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  }
  Tensor out({av.dim(0), bv.dim(1)});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return t.push(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      as_matrix(tp.grad_accumulator(ai)).noalias() +=
          as_matrix(g) * as_matrix(tp.value(bi)).transpose();
    }
    if (tp.requires_grad(bi)) {
      as_matrix(tp.grad_accumulator(bi)).noalias() +=
          as_matrix(tp.value(ai)).transpose() * as_matrix(g);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  if (av.dim(1) != bv.dim(1)) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()) + "^T");
  }
  Tensor out({av.dim(0), bv.dim(0)});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv).transpose();
  return t.push(std::move(out), {a.id, b.id}, [ai = a.id, bi = b.id](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      as_matrix(tp.grad_accumulator(ai)).noalias() += as_matrix(g) * as_matrix(tp.value(bi));
    }
    if (tp.requires_grad(bi)) {
      as_matrix(tp.grad_accumulator(bi)).noalias() +=
          as_matrix(g).transpose() * as_matrix(tp.value(ai));
    }
  });
}

Var linear(Var x, Var weight) { return matmul_nt(x, weight); }

Var linear(Var x, Var weight, Var bias) { return add(matmul_nt(x, weight), bias); }

namespace {

enum class Binary { kAdd, kSub, kMul };

Var binary(Var a, Var b, Binary kind, const char* name) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_broadcast(av, bv, name);
  const std::size_t nb = bv.numel();
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double y = bv[nb == 0 ? 0 : i % nb];
    switch (kind) {
      case Binary::kAdd: out[i] += y; break;
      case Binary::kSub: out[i] -= y; break;
      case Binary::kMul: out[i] *= y; break;
    }
  }
  return t.push(std::move(out), {a.id, b.id},
                [ai = a.id, bi = b.id, kind](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.grad(self);
                  const std::size_t nbb = tp.value(bi).numel();
                  if (tp.requires_grad(ai)) {
                    Tensor& ga = tp.grad_accumulator(ai);
                    if (kind == Binary::kMul) {
                      const Tensor& bval = tp.value(bi);
                      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bval[i % nbb];
                    } else {
                      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
                    }
                  }
                  if (tp.requires_grad(bi)) {
                    Tensor& gb = tp.grad_accumulator(bi);
                    if (kind == Binary::kMul) {
                      const Tensor& aval = tp.value(ai);
                      for (std::size_t i = 0; i < g.numel(); ++i) gb[i % nbb] += g[i] * aval[i];
                    } else {
                      const double sign = kind == Binary::kSub ? -1.0 : 1.0;
                      for (std::size_t i = 0; i < g.numel(); ++i) gb[i % nbb] += sign * g[i];
                    }
                  }
                });
}

}  // namespace

Var add(Var a, Var b) { return binary(a, b, Binary::kAdd, "add"); }
Var sub(Var a, Var b) { return binary(a, b, Binary::kSub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, Binary::kMul, "mul"); }

Var scale(Var a, double s) {
  Tensor out = tensor_math::scale(a.value(), s);
  return a.tape->push(std::move(out), {a.id}, [ai = a.id, s](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad_accumulator(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  return a.tape->push(std::move(out), {a.id}, [ai = a.id](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad_accumulator(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return a.tape->push(std::move(out), {a.id}, [ai = a.id](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& x = tp.value(ai);
    Tensor& ga = tp.grad_accumulator(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (x[i] > 0.0) ga[i] += g[i];
    }
  });
}

namespace {

// Maps every input element to its slot in the reduced output.
struct Reduction {
  Shape out_shape;
  std::vector<std::size_t> target;
  std::size_t group = 1;  // inputs per output element
};

Reduction plan_reduction(const Shape& in, const std::vector<int>& axes) {
  const int rank = static_cast<int>(in.size());
  std::vector<bool> reduce(in.size(), axes.empty());
  for (int ax : axes) {
    const int a = ax < 0 ? ax + rank : ax;
    if (a < 0 || a >= rank) {
      throw ShapeError("reduce: axis " + std::to_string(ax) + " invalid for shape " +
                       shape_str(in));
    }
    reduce[static_cast<std::size_t>(a)] = true;
  }
  Reduction r;
  std::vector<std::size_t> out_stride(in.size(), 0);
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (reduce[d]) {
      r.group *= in[d];
    } else {
      r.out_shape.push_back(in[d]);
    }
  }
  std::size_t stride = 1;
  for (std::size_t d = in.size(); d-- > 0;) {
    if (!reduce[d]) {
      out_stride[d] = stride;
      stride *= in[d];
    }
  }
  const std::size_t n = shape_numel(in);
  r.target.resize(n);
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < in.size(); ++d) o += idx[d] * out_stride[d];
    r.target[flat] = o;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  return r;
}

Var reduce(Var a, const std::vector<int>& axes, bool average) {
  auto plan = std::make_shared<Reduction>(plan_reduction(a.shape(), axes));
  const double factor = average ? 1.0 / static_cast<double>(std::max<std::size_t>(plan->group, 1))
                                : 1.0;
  Tensor out(plan->out_shape, 0.0);
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.numel(); ++i) out[plan->target[i]] += x[i];
  if (average) {
    for (auto& v : out.values()) v *= factor;
  }
  return a.tape->push(std::move(out), {a.id},
                      [ai = a.id, plan, factor](Tape& tp, std::size_t self) {
                        const Tensor& g = tp.grad(self);
                        Tensor& ga = tp.grad_accumulator(ai);
                        for (std::size_t i = 0; i < ga.numel(); ++i) {
                          ga[i] += factor * g[plan->target[i]];
                        }
                      });
}

}  // namespace

Var sum(Var a, const std::vector<int>& axes) { return reduce(a, axes, false); }
Var mean(Var a, const std::vector<int>& axes) { return reduce(a, axes, true); }

Var layernorm(Var x, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("layernorm: scalar input");
  const std::size_t d = xv.shape().back();
  if (d < 2) throw ShapeError("layernorm: last axis must have at least 2 entries");
  const std::size_t rows = xv.numel() / d;
  Tensor out(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    double* o = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mu) * inv;
  }
  return x.tape->push(std::move(out), {x.id},
                      [xi = x.id, inv_std, d, rows](Tape& tp, std::size_t self) {
                        const Tensor& g = tp.grad(self);
                        const Tensor& y = tp.value(self);
                        Tensor& gx = tp.grad_accumulator(xi);
                        const double inv_d = 1.0 / static_cast<double>(d);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const double* gr = g.data() + r * d;
                          const double* yr = y.data() + r * d;
                          double mg = 0.0;
                          double mgy = 0.0;
                          for (std::size_t j = 0; j < d; ++j) {
                            mg += gr[j];
                            mgy += gr[j] * yr[j];
                          }
                          mg *= inv_d;
                          mgy *= inv_d;
                          double* out = gx.data() + r * d;
                          const double inv = (*inv_std)[r];
                          for (std::size_t j = 0; j < d; ++j) {
                            out[j] += inv * (gr[j] - mg - yr[j] * mgy);
                          }
                        }
                      });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->push(std::move(out), {a.id}, [ai = a.id](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad_accumulator(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Var embedding(Var table, const std::vector<std::size_t>& ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "embedding");
  const std::size_t d = tv.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.dim(0)) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range " +
                       std::to_string(tv.dim(0)));
    }
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  return table.tape->push(std::move(out), {table.id},
                          [ti = table.id, ids, d](Tape& tp, std::size_t self) {
                            const Tensor& g = tp.grad(self);
                            Tensor& gt = tp.grad_accumulator(ti);
                            for (std::size_t i = 0; i < ids.size(); ++i) {
                              const double* src = g.data() + i * d;
                              double* dst = gt.data() + ids[i] * d;
                              for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                            }
                          });
}

namespace {

using Strided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using MutStrided = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;

}  // namespace

Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads) {
  Tape& t = same_tape(q, k);
  same_tape(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix(qv, "causal_attention");
  if (!qv.same_shape(kv) || !qv.same_shape(vv) || qv.dim(0) != batch * seq ||
      heads == 0 || qv.dim(1) % heads != 0) {
    throw ShapeError("causal_attention: inconsistent q/k/v shapes " + shape_str(qv.shape()));
  }
  const std::size_t width = qv.dim(1);
  const std::size_t dh = width / heads;
  const double logit_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto T = static_cast<Eigen::Index>(seq);
  const auto DH = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));

  // Softmax probabilities per (batch, head), kept for the reverse pass.
  auto probs = std::make_shared<std::vector<RowMatrix>>(batch * heads);
  Tensor out({batch * seq, width});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * width + h * dh;
      Strided Q(qv.data() + off, T, DH, stride);
      Strided K(kv.data() + off, T, DH, stride);
      Strided V(vv.data() + off, T, DH, stride);
      RowMatrix S = (Q * K.transpose()) * logit_scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        const double mx = S.row(i).head(i + 1).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          S(i, j) = std::exp(S(i, j) - mx);
          z += S(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) S(i, j) /= z;
        for (Eigen::Index j = i + 1; j < T; ++j) S(i, j) = 0.0;
      }
      MutStrided O(out.data() + off, T, DH, stride);
      O.noalias() = S * V;
      (*probs)[b * heads + h] = std::move(S);
    }
  }
  return t.push(
      std::move(out), {q.id, k.id, v.id},
      [qi = q.id, ki = k.id, vi = v.id, probs, batch, seq, heads, dh, width, logit_scale](
          Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const auto T = static_cast<Eigen::Index>(seq);
        const auto DH = static_cast<Eigen::Index>(dh);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
        Tensor& gq = tp.grad_accumulator(qi);
        Tensor& gk = tp.grad_accumulator(ki);
        Tensor& gv = tp.grad_accumulator(vi);
        const Tensor& qv = tp.value(qi);
        const Tensor& kv = tp.value(ki);
        const Tensor& vv = tp.value(vi);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq * width + h * dh;
            const RowMatrix& P = (*probs)[b * heads + h];
            Strided G(g.data() + off, T, DH, stride);
            Strided Q(qv.data() + off, T, DH, stride);
            Strided K(kv.data() + off, T, DH, stride);
            Strided V(vv.data() + off, T, DH, stride);
            MutStrided GV(gv.data() + off, T, DH, stride);
            GV.noalias() += P.transpose() * G;
            RowMatrix dP = G * V.transpose();
            // dS = P ⊙ (dP - rowsum(dP ⊙ P)); masked entries have P = 0.
            RowMatrix dS = P.cwiseProduct(dP);
            const Eigen::VectorXd rs = dS.rowwise().sum();
            dS -= P.cwiseProduct(rs.replicate(1, T));
            dS *= logit_scale;
            MutStrided GQ(gq.data() + off, T, DH, stride);
            MutStrided GK(gk.data() + off, T, DH, stride);
            GQ.noalias() += dS * K;
            GK.noalias() += dS.transpose() * Q;
          }
        }
      });
}

Var cross_entropy(Var logits, const std::vector<int>& targets) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  const std::size_t m = lv.dim(0);
  const std::size_t classes = lv.dim(1);
  if (targets.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(m) + " rows");
  }
  if (m == 0) throw ShapeError("cross_entropy: empty batch");
  auto softmax = std::make_shared<Tensor>(lv.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int y = targets[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(y) + " out of range");
    }
    const double* row = lv.data() + i * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    double* sm = softmax->data() + i * classes;
    for (std::size_t c = 0; c < classes; ++c) {
      sm[c] = std::exp(row[c] - mx);
      z += sm[c];
    }
    for (std::size_t c = 0; c < classes; ++c) sm[c] /= z;
    loss += -(row[y] - mx - std::log(z));
  }
  loss /= static_cast<double>(m);
  return logits.tape->push(Tensor::scalar(loss), {logits.id},
                           [li = logits.id, softmax, targets, m, classes](Tape& tp,
                                                                         std::size_t self) {
                             const double g = tp.grad(self)[0] / static_cast<double>(m);
                             Tensor& gl = tp.grad_accumulator(li);
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t c = 0; c < classes; ++c) {
                                 double p = (*softmax)[i * classes + c];
                                 if (static_cast<int>(c) == targets[i]) p -= 1.0;
                                 gl[i * classes + c] += g * p;
                               }
                             }
                           });
}

}  // namespace ops

}  // namespace fslr
