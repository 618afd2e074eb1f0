// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fslr/estimator.hpp"
#include "fslr/oracle.hpp"
#include "test_util.hpp"

namespace fslr {
namespace {

// Naive oracle: Σ_{ii′} (Z Zᵀ)_{ii′} and Σ_{jj′} (ZᵀZ)_{jj′} via explicit triple loops.
std::pair<double, double> naive_matrix_sums(const Tensor& z) {
  const std::size_t r = z.dim(0);
  const std::size_t c = z.dim(1);
  double zzt = 0.0;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t ip = 0; ip < r; ++ip)
      for (std::size_t k = 0; k < c; ++k) zzt += z.at(i, k) * z.at(ip, k);
  double ztz = 0.0;
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t jp = 0; jp < c; ++jp)
      for (std::size_t k = 0; k < r; ++k) ztz += z.at(k, j) * z.at(k, jp);
  return {zzt, ztz};
}

// Rank-3 analog: for axis d, Σ over pairs (i, i′) along d of Σ over the rest of Z[..i..] Z[..i′..].
double naive_rank3(const Tensor& z, std::size_t d) {
  const Shape& s = z.shape();
  auto at = [&](std::size_t a, std::size_t b, std::size_t c) { return z[(a * s[1] + b) * s[2] + c]; };
  double total = 0.0;
  for (std::size_t a = 0; a < s[0]; ++a)
    for (std::size_t b = 0; b < s[1]; ++b)
      for (std::size_t c = 0; c < s[2]; ++c)
        for (std::size_t x = 0; x < s[d]; ++x) {
          std::size_t idx[3] = {a, b, c};
          idx[d] = x;
          total += at(a, b, c) * at(idx[0], idx[1], idx[2]);
        }
  return total;
}

double relerr(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

TEST(SamplePhi, AllOnesOmega) {
  // A 2-class readout of identity features reproduces f = [[1,2],[3,4]].
  ModelConfig c = testing::tiny_resmlp();
  c.input_dim = 2;
  c.num_classes = 2;
  c.hidden = 2;
  Rng rng(1);
  Model m = build_model(c, rng);
  for (auto& p : m.parameters()) p.value.fill(0.0);
  m.param("input.weight").value = Tensor::identity(2);
  m.param("readout.weight").value = Tensor::identity(2);
  // Blocks add W·relu(h) + b = 0, so f = x.
  const Tensor x = Tensor::matrix({{1, 2}, {3, 4}});
  const ProbeSample s = sample_phi(m, x, Tensor::ones({2, 2}));
  EXPECT_DOUBLE_EQ(s.phi, 5.0);
}

TEST(SamplePhi, ZeroOmegaGivesZeroGradients) {
  Rng rng(2);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  const ProbeSample s = sample_phi(m, standard_normal(rng, {4, 5}), Tensor::zeros({4, 3}));
  EXPECT_EQ(s.phi, 0.0);
  for (const auto& [n, g] : s.grads) EXPECT_EQ(tensor_math::max_abs(g), 0.0) << n;
}

TEST(SamplePhi, RecomputableFromOmegaAndLogits) {
  Rng rng(3);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  const Tensor x = standard_normal(rng, {4, 5});
  const ProbeSample s = sample_phi(m, x, rng);
  const Tensor f = m.logits(x);
  const double phi = tensor_math::sum(tensor_math::mul(s.omega, f)) / std::sqrt(12.0);
  EXPECT_NEAR(s.phi, phi, 1e-12);
}

TEST(SamplePhi, EmptyBatchThrows) {
  Rng rng(3);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  EXPECT_THROW(sample_phi(m, Tensor::zeros({0, 5}), rng), ShapeError);
}

TEST(SamplePhi, VarianceOfDeltaPhiMatchesOracle) {
  Rng rng(4);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  const Tensor x = standard_normal(rng, {4, 5});
  const ParamValues dw = testing::random_like(rng, m);
  const ExactFslr exact = exact_delta_f(m, x, dw);
  std::map<std::string, double> acc;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const ProbeSample s = sample_phi(m, x, rng);
    for (const auto& [name, d] : dw) {
      const double dphi = z_stats(compute_z(d, s.grads.at(name))).delta_phi;
      acc[name] += dphi * dphi;
    }
  }
  for (const auto& [name, v] : acc) {
    const double target = exact.rms.at(name) * exact.rms.at(name);
    EXPECT_LT(relerr(v / n, target), 0.05) << name;
  }
}

TEST(ComputeZ, IdentityMask) {
  EXPECT_EQ(compute_z(Tensor::identity(2), Tensor::matrix({{2, 3}, {4, 5}})),
            Tensor::matrix({{2, 0}, {0, 5}}));
}

TEST(ComputeZ, ZeroDelta) {
  EXPECT_EQ(compute_z(Tensor::zeros({2, 2}), Tensor::matrix({{2, 3}, {4, 5}})), Tensor::zeros({2, 2}));
}

TEST(ComputeZ, ShapeMismatchThrows) {
  EXPECT_THROW(compute_z(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(ComputeZ, SumEqualsDeltaPhiOnLinearModel) {
  // f = x Wᵀ is linear in W, so Δφ = φ(W + ΔW) − φ(W) exactly.
  Rng rng(5);
  const Tensor x = standard_normal(rng, {6, 4});
  const Tensor w = standard_normal(rng, {3, 4});
  const Tensor dw = standard_normal(rng, {3, 4});
  const Tensor omega = standard_normal(rng, {6, 3});
  auto phi = [&](const Tensor& weights, GradMap* grads) {
    Tape tape;
    Var wv = tape.parameter("w", weights);
    Var f = ops::linear(tape.constant(x), wv);
    Var p = ops::scale(ops::sum(ops::mul(f, tape.constant(omega))), 1.0 / std::sqrt(18.0));
    if (grads) *grads = tape.backward(p);
    return p.value().item();
  };
  GradMap g;
  const double before = phi(w, &g);
  const double after = phi(tensor_math::add(w, dw), nullptr);
  EXPECT_NEAR(tensor_math::sum(compute_z(dw, g.at("w"))), after - before, 1e-10);
}

TEST(ZStats, HandExample) {
  const ZStats s = z_stats(Tensor::matrix({{1, 2}, {3, 4}}));
  EXPECT_EQ(s.rank, 2u);
  EXPECT_DOUBLE_EQ(s.frob2, 30.0);
  EXPECT_DOUBLE_EQ(s.dim_sumsq[0], 52.0);  // Σ_k (Σ_i Z_ik)² = 4² + 6²
  EXPECT_DOUBLE_EQ(s.dim_sumsq[1], 58.0);  // Σ_k (Σ_j Z_kj)² = 3² + 7²
  EXPECT_DOUBLE_EQ(s.delta_phi, 10.0);
  const auto [zzt, ztz] = naive_matrix_sums(Tensor::matrix({{1, 2}, {3, 4}}));
  EXPECT_DOUBLE_EQ(s.dim_sumsq[0], zzt);
  EXPECT_DOUBLE_EQ(s.dim_sumsq[1], ztz);
}

TEST(ZStats, ZeroTensor) {
  const ZStats s = z_stats(Tensor::zeros({3, 4}));
  EXPECT_EQ(s.frob2, 0.0);
  for (double v : s.dim_sumsq) EXPECT_EQ(v, 0.0);
}

TEST(ZStats, RankZeroThrows) { EXPECT_THROW(z_stats(Tensor::scalar(1.0)), ShapeError); }

TEST(ZStats, MatchesNaiveSumsOnRandomMatrices) {
  Rng rng(6);
  for (std::size_t r = 1; r <= 32; r += 3) {
    for (std::size_t c : {1u, 5u, 8u, 32u}) {
      const Tensor z = standard_normal(rng, {r, c});
      const ZStats s = z_stats(z);
      const auto [zzt, ztz] = naive_matrix_sums(z);
      EXPECT_LT(relerr(s.dim_sumsq[0], zzt), 1e-12);
      EXPECT_LT(relerr(s.dim_sumsq[1], ztz), 1e-12);
      EXPECT_LT(relerr(s.frob2, tensor_math::sum_squares(z)), 1e-12);
    }
  }
}

TEST(ZStats, MatchesNaiveSumsOnRank3) {
  Rng rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    const Shape shape{1 + rng.index(8), 1 + rng.index(8), 1 + rng.index(8)};
    const Tensor z = standard_normal(rng, shape);
    const ZStats s = z_stats(z);
    for (std::size_t d = 0; d < 3; ++d) EXPECT_LT(relerr(s.dim_sumsq[d], naive_rank3(z, d)), 1e-12);
  }
}

TEST(Ema, ConstantInputIsFixedPoint) {
  for (double beta : {0.5, 0.9, 1.0}) {
    EmaState e(2, beta);
    ZStats s{2, 30.0, {52.0, 58.0}, 10.0};
    for (int t = 1; t <= 50; ++t) {
      e.update(s);
      EXPECT_EQ(e.frob2(), 30.0);
      EXPECT_EQ(e.dim_sumsq(0), 52.0);
      EXPECT_EQ(e.dim_sumsq(1), 58.0);
    }
  }
}

TEST(Ema, MatchesAccumulatorOverDebias) {
  Rng rng(3);
  for (double beta : {0.1, 0.5, 0.9}) {
    EmaState e(1, beta);
    double acc = 0.0;
    for (int t = 1; t <= 60; ++t) {
      const double x = std::exp(rng.normal());
      acc = (1.0 - beta) * acc + beta * x;
      e.update({1, x, {x}, 0.0});
      const double expect = acc / (1.0 - std::pow(1.0 - beta, t));
      EXPECT_NEAR(e.frob2(), expect, 1e-13 * expect);
      EXPECT_NEAR(e.raw_frob2(), acc, 1e-13 * acc);
    }
  }
}

TEST(Ema, FirstUpdateArithmetic) {
  EmaState e(1, 0.9);
  e.update({1, 10.0, {10.0}, 0.0});
  EXPECT_DOUBLE_EQ(e.raw_frob2(), 9.0);
  EXPECT_DOUBLE_EQ(e.frob2(), 10.0);
}

TEST(Ema, BetaOneKeepsLatest) {
  EmaState e(1, 1.0);
  e.update({1, 10.0, {1.0}, 0.0});
  e.update({1, 3.0, {2.0}, 0.0});
  EXPECT_EQ(e.frob2(), 3.0);
  EXPECT_EQ(e.dim_sumsq(0), 2.0);
}

TEST(Ema, ReadBeforeUpdateThrows) {
  EmaState e(2, 0.9);
  EXPECT_THROW(e.frob2(), std::logic_error);
  EXPECT_THROW(EmaState(2, 0.0), std::domain_error);
  EXPECT_THROW(EmaState(2, 1.5), std::domain_error);
}

TEST(Kron, HandExample) {
  EmaState e(2, 0.9);
  e.update(z_stats(Tensor::matrix({{1, 2}, {3, 4}})));
  EXPECT_NEAR(fslr_kron(e), std::sqrt(52.0 * 58.0 / 30.0), 1e-12);
  EXPECT_NEAR(fslr_kron(e), 10.0266, 1e-4);
}

TEST(Kron, RankOneIsRootOfSquaredSum) {
  EmaState e(1, 0.9);
  e.update(z_stats(Tensor::vector({1, -3, 5})));
  EXPECT_NEAR(fslr_kron(e), 3.0, 1e-12);
}

TEST(Kron, DegenerateLayerThrows) {
  EmaState e(2, 0.9);
  e.update(z_stats(Tensor::zeros({2, 2})));
  EXPECT_THROW(fslr_kron(e), DegenerateLayerError);
  // Zero column contraction with nonzero Frobenius also cannot be divided by.
  EmaState f(2, 0.9);
  f.update(z_stats(Tensor::matrix({{1, -1}, {-1, 1}})));
  EXPECT_THROW(fslr_kron(f), DegenerateLayerError);
}

TEST(Kron, LogDomainHandlesExtremeMagnitudes) {
  const double dims[] = {1e200, 1e200, 1e200};
  EXPECT_NEAR(std::log(kron_from_expectations(dims, 1e150)), std::log(1e150), 1e-9);
}

TEST(Kron, ConvergesOnMatrixNormal) {
  // U = [[2,1],[1,2]] = L_U L_Uᵀ, V = diag(1,3).
  const Tensor lu = Tensor::matrix({{std::sqrt(2.0), 0}, {1 / std::sqrt(2.0), std::sqrt(1.5)}});
  const Tensor lv = Tensor::matrix({{1, 0}, {0, std::sqrt(3.0)}});
  EXPECT_NEAR(tensor_normal_target({lu, lv}), 24.0, 1e-12);
  Rng rng(8);
  std::vector<double> dims(2, 0.0);
  double frob = 0.0;
  const std::size_t n = 100000;
  for (const Tensor& z : sample_matrix_normal(rng, lu, lv, n)) {
    const ZStats s = z_stats(z);
    dims[0] += s.dim_sumsq[0];
    dims[1] += s.dim_sumsq[1];
    frob += s.frob2;
  }
  for (double& d : dims) d /= n;
  const double est = kron_from_expectations(dims, frob / n);
  EXPECT_LT(relerr(est * est, 24.0), 0.02);
}

TEST(Kron, ConvergesOnRank3TensorNormal) {
  Rng rng(9);
  std::vector<Tensor> factors;
  for (std::size_t d : {2u, 3u, 2u}) {
    Tensor l = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) l.at(i, j) = i == j ? 1.0 + rng.uniform() : 0.5 * rng.normal();
    factors.push_back(l);
  }
  const double target = tensor_normal_target(factors);
  std::vector<double> dims(3, 0.0);
  double frob = 0.0;
  const std::size_t n = 100000;
  for (const Tensor& z : sample_tensor_normal(rng, factors, n)) {
    const ZStats s = z_stats(z);
    for (std::size_t d = 0; d < 3; ++d) dims[d] += s.dim_sumsq[d];
    frob += s.frob2;
  }
  for (double& d : dims) d /= n;
  const double est = kron_from_expectations(dims, frob / n);
  EXPECT_LT(relerr(est * est, target), 0.02);
}

TEST(Raw, SymmetricPair) {
  const double s[] = {1.0, -1.0};
  EXPECT_DOUBLE_EQ(fslr_raw(s), 1.0);
}

TEST(Raw, AllZero) {
  const double s[] = {0.0, 0.0, 0.0};
  EXPECT_EQ(fslr_raw(s), 0.0);
}

TEST(Raw, NeedsTwoSamples) {
  const double s[] = {1.0};
  EXPECT_THROW(fslr_raw(s), std::invalid_argument);
}

TEST(Raw, RecoversStandardDeviation) {
  Rng rng(10);
  std::vector<double> v(10000);
  for (double& x : v) x = 3.0 * rng.normal();
  const double est = fslr_raw(v);
  EXPECT_GT(est, 2.91);
  EXPECT_LT(est, 3.09);
}

TEST(Iid, ThreeFourFive) { EXPECT_DOUBLE_EQ(fslr_iid(Tensor::matrix({{3, 4}})), 5.0); }

TEST(Iid, Zero) { EXPECT_EQ(fslr_iid(Tensor::zeros({2, 2})), 0.0); }

TEST(Iid, BiasFactorOnFullyCorrelatedZ) {
  const std::size_t n = 6;
  const double c = 0.7;
  const Tensor z(Shape{n, n}, c);
  EmaState e(2, 1.0);
  e.update(z_stats(z));
  EXPECT_NEAR(fslr_iid(e), n * c, 1e-12);
  EXPECT_NEAR(fslr_kron(e), n * n * c, 1e-12);  // |Δφ| for a deterministic Z
}

Parameter tagged(const std::string& name, Role role, ParamKind kind) {
  Parameter p;
  p.name = name;
  p.role = role;
  p.kind = kind;
  return p;
}

TEST(Readout, WeightIdentity) {
  EmaState e(2, 1.0);
  e.update(z_stats(Tensor::identity(2)));
  const Parameter p = tagged("readout.weight", Role::kReadout, ParamKind::kWeight);
  EXPECT_DOUBLE_EQ(fslr_readout_weight(e, p), std::sqrt(2.0));
}

TEST(Readout, WeightSingleRow) {
  const double a = 1.5;
  const double b = -0.25;
  EmaState e(2, 1.0);
  e.update(z_stats(Tensor::matrix({{a, b}, {0, 0}})));
  const Parameter p = tagged("readout.weight", Role::kReadout, ParamKind::kWeight);
  EXPECT_DOUBLE_EQ(fslr_readout_weight(e, p) * fslr_readout_weight(e, p), a * a + 2 * a * b + b * b);
}

TEST(Readout, TagMismatchThrows) {
  EmaState e(2, 1.0);
  e.update(z_stats(Tensor::identity(2)));
  EXPECT_THROW(fslr_readout_weight(e, tagged("block0.weight", Role::kHidden, ParamKind::kWeight)),
               std::invalid_argument);
  EXPECT_THROW(fslr_readout_bias(e, tagged("readout.weight", Role::kReadout, ParamKind::kWeight)),
               std::invalid_argument);
}

TEST(Readout, BiasThreeFourFive) {
  EXPECT_DOUBLE_EQ(fslr_readout_bias(Tensor::vector({3, 4})), 5.0);
  EXPECT_EQ(fslr_readout_bias(Tensor::vector({0, 0})), 0.0);
}

TEST(Readout, BiasBitIdenticalToIid) {
  Rng rng(11);
  const Parameter p = tagged("readout.bias", Role::kReadout, ParamKind::kBias);
  EmaState e(1, 0.9);
  for (int i = 0; i < 20; ++i) {
    const Tensor z = standard_normal(rng, {7});
    EXPECT_EQ(fslr_readout_bias(z), fslr_iid(z));
    e.update(z_stats(z));
    EXPECT_EQ(fslr_readout_bias(e, p), fslr_iid(e));
  }
}

TEST(Estimators, ScaleEquivariance) {
  Rng rng(12);
  const Tensor dw = standard_normal(rng, {4, 3});
  const Tensor g = standard_normal(rng, {4, 3});
  const Parameter p = tagged("readout.weight", Role::kReadout, ParamKind::kWeight);
  auto all = [&](const Tensor& delta) {
    EmaState e(2, 1.0);
    const Tensor z = compute_z(delta, g);
    e.update(z_stats(z));
    const double raw_pair[] = {z_stats(z).delta_phi, -z_stats(z).delta_phi};
    return std::vector<double>{fslr_kron(e), fslr_iid(e), fslr_readout_weight(e, p), fslr_raw(raw_pair)};
  };
  const auto base = all(dw);
  for (double c : {-2.5, 0.1, 7.0}) {
    const auto scaled = all(tensor_math::scale(dw, c));
    for (std::size_t i = 0; i < base.size(); ++i) {
      EXPECT_LT(relerr(scaled[i], std::abs(c) * base[i]), 1e-12) << i;
    }
  }
}

TEST(FslrEstimator, TracksEveryLayerAndNamesDegenerateOnes) {
  Rng rng(13);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  FslrEstimator est(m, 0.9, EstimatorKind::kReadout);
  ParamValues dw = testing::random_like(rng, m);
  const Tensor x = standard_normal(rng, {4, 5});
  est.observe(dw, sample_phi(m, x, rng).grads);
  const FslrEstimate e = est.estimate();
  EXPECT_EQ(e.values.size(), m.parameters().size());
  for (const auto& [n, v] : e.values) EXPECT_TRUE(std::isfinite(v) && v > 0.0) << n;

  FslrEstimator dead(m, 0.9, EstimatorKind::kKron);
  dw["block1.weight"].fill(0.0);
  dead.observe(dw, sample_phi(m, x, rng).grads);
  try {
    dead.estimate();
    FAIL() << "expected a degenerate-layer error";
  } catch (const DegenerateLayerError& err) {
    EXPECT_EQ(err.layer(), "block1.weight");
  }
}

TEST(FslrEstimator, ReadoutKindUsesReadoutForms) {
  Rng rng(14);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  FslrEstimator est(m, 0.9, EstimatorKind::kReadout);
  est.observe(testing::random_like(rng, m), sample_phi(m, standard_normal(rng, {4, 5}), rng).grads);
  const auto& s = est.state("readout.weight");
  EXPECT_DOUBLE_EQ(est.estimate().at("readout.weight"), std::sqrt(s.dim_sumsq(1)));
  EXPECT_DOUBLE_EQ(est.estimate().at("block0.weight"), fslr_kron(est.state("block0.weight")));
  EXPECT_DOUBLE_EQ(est.estimate().at("readout.bias"), fslr_iid(est.state("readout.bias")));
}

}  // namespace
}  // namespace fslr
