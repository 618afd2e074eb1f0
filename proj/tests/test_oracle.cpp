// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "fslr/estimator.hpp"
#include "fslr/oracle.hpp"
#include "test_util.hpp"

namespace fslr {
namespace {

Var linear_forward(Tape& tape, const std::map<std::string, Var>& p, const Tensor& x) {
  return ops::linear(tape.constant(x), p.at("W"));
}

TEST(ExactDeltaF, ScalarLinearMap) {
  const Tensor x = Tensor::matrix({{2}});
  auto fwd = [&](Tape& t, const std::map<std::string, Var>& p) { return linear_forward(t, p, x); };
  const ExactFslr e =
      exact_delta_f(fwd, {{"W", Tensor::matrix({{1.3}})}}, {{"W", Tensor::matrix({{0.5}})}}, true);
  EXPECT_DOUBLE_EQ(e.delta_f.at("W")[0], 1.0);
  EXPECT_DOUBLE_EQ(e.rms.at("W"), 1.0);
}

TEST(ExactDeltaF, ZeroDelta) {
  Rng rng(1);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  ParamValues zero;
  for (const auto& p : m.parameters()) zero[p.name] = Tensor::zeros(p.value.shape());
  const ExactFslr e = exact_delta_f(m, standard_normal(rng, {4, 5}), zero, true);
  for (const auto& [n, v] : e.rms) EXPECT_EQ(v, 0.0) << n;
  for (const auto& [n, d] : e.delta_f) EXPECT_EQ(tensor_math::max_abs(d), 0.0) << n;
}

TEST(ExactDeltaF, MatchesAnalyticJacobianOnLinearModel) {
  // f = x Wᵀ: Δf = x ΔWᵀ.
  Rng rng(2);
  const Tensor x = standard_normal(rng, {7, 4});
  const Tensor w = standard_normal(rng, {5, 4});
  const Tensor dw = standard_normal(rng, {5, 4});
  auto fwd = [&](Tape& t, const std::map<std::string, Var>& p) { return linear_forward(t, p, x); };
  const ExactFslr e = exact_delta_f(fwd, {{"W", w}}, {{"W", dw}}, true);
  const Tensor analytic = tensor_math::matmul(x, tensor_math::transpose(dw));
  EXPECT_LT(tensor_math::max_abs_diff(e.delta_f.at("W"), analytic), 1e-10);
  const double rms = std::sqrt(tensor_math::sum_squares(analytic) / 35.0);
  EXPECT_NEAR(e.rms.at("W"), rms, 1e-12);
}

TEST(ExactDeltaF, RmsEqualsRetainedTensor) {
  Rng rng(3);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  const ExactFslr e = exact_delta_f(m, standard_normal(rng, {4, 5}), testing::random_like(rng, m), true);
  for (const auto& [n, d] : e.delta_f) {
    EXPECT_NEAR(e.rms.at(n), std::sqrt(tensor_math::sum_squares(d) / d.numel()), 1e-12);
  }
}

TEST(ExactDeltaF, SizeCapEnforced) {
  Rng rng(4);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  EXPECT_THROW(exact_delta_f(m, standard_normal(rng, {86, 5}), testing::random_like(rng, m)),
               std::length_error);
  EXPECT_NO_THROW(exact_delta_f(m, standard_normal(rng, {85, 5}), testing::random_like(rng, m)));
}

TEST(ExactDeltaF, RawEstimatorWithinThreeStandardErrors) {
  Rng rng(5);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  const Tensor x = standard_normal(rng, {4, 5});
  const ParamValues dw = testing::random_like(rng, m);
  const ExactFslr exact = exact_delta_f(m, x, dw);
  std::map<std::string, std::vector<double>> sq;
  for (int i = 0; i < 10000; ++i) {
    const ProbeSample s = sample_phi(m, x, rng);
    for (const auto& [n, d] : dw) {
      const double v = z_stats(compute_z(d, s.grads.at(n))).delta_phi;
      sq[n].push_back(v * v);
    }
  }
  for (const auto& [n, v] : sq) {
    const double k = static_cast<double>(v.size());
    double mean = 0.0;
    for (double a : v) mean += a;
    mean /= k;
    double var = 0.0;
    for (double a : v) var += (a - mean) * (a - mean);
    const double se = std::sqrt(var / (k - 1.0) / k);
    const double target = exact.rms.at(n) * exact.rms.at(n);
    EXPECT_LT(std::abs(mean - target), 3.0 * se) << n;
  }
}

TEST(FiniteDiff, Square) {
  const auto g = finite_diff_grad([](const ParamValues& p) { return p.at("w")[0] * p.at("w")[0]; },
                                  {{"w", Tensor::scalar(3.0)}}, 1e-5);
  EXPECT_NEAR(g.at("w")[0], 6.0, 1e-9);
}

TEST(FiniteDiff, Constant) {
  const auto g = finite_diff_grad([](const ParamValues&) { return 4.0; },
                                  {{"w", Tensor::vector({1, 2, 3})}}, 1e-5);
  EXPECT_EQ(g.at("w"), Tensor::zeros({3}));
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  EXPECT_THROW(finite_diff_grad([](const ParamValues&) { return 0.0; }, {}, 0.0), std::domain_error);
}

TEST(FiniteDiff, PhiGradientsMatchBackward) {
  Rng rng(6);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  const Tensor x = standard_normal(rng, {4, 5});
  const ProbeSample s = sample_phi(m, x, rng);
  auto phi = [&](const ParamValues& v) {
    Model copy = m;
    copy.set_values(v);
    return sample_phi(copy, x, s.omega).phi;
  };
  const GradMap fd = finite_diff_grad(phi, m.values(), 1e-5);
  for (const auto& [n, g] : s.grads) EXPECT_LT(testing::rel_error(g, fd.at(n), 1e-8), 1e-5) << n;
}

TEST(MatrixNormal, IdentityFactorsGiveIdentityRowCovariance) {
  Rng rng(7);
  const std::size_t n = 100000;
  Tensor acc = Tensor::zeros({2, 2});
  for (const Tensor& z : sample_matrix_normal(rng, Tensor::identity(2), Tensor::identity(2), n)) {
    acc = tensor_math::add(acc, tensor_math::matmul(z, tensor_math::transpose(z)));
  }
  const Tensor est = tensor_math::scale(acc, 1.0 / (n * 2.0));  // tr(V) = 2
  EXPECT_NEAR(est.at(0, 0), 1.0, 0.03);
  EXPECT_NEAR(est.at(1, 1), 1.0, 0.03);
  EXPECT_NEAR(est.at(0, 1), 0.0, 0.03);
}

TEST(MatrixNormal, ZeroFactorGivesZeros) {
  Rng rng(8);
  for (const Tensor& z : sample_matrix_normal(rng, Tensor::zeros({2, 2}), Tensor::identity(3), 10)) {
    EXPECT_EQ(tensor_math::max_abs(z), 0.0);
  }
}

TEST(MatrixNormal, NonSquareFactorThrows) {
  Rng rng(9);
  EXPECT_THROW(sample_matrix_normal(rng, Tensor::zeros({2, 3}), Tensor::identity(2), 1), ShapeError);
}

TEST(MatrixNormal, TraceIdentity) {
  const Tensor lu = Tensor::matrix({{std::sqrt(2.0), 0}, {1 / std::sqrt(2.0), std::sqrt(1.5)}});
  const Tensor lv = Tensor::matrix({{1, 0}, {0, std::sqrt(3.0)}});
  Rng rng(10);
  const std::size_t n = 100000;
  double tr_zzt = 0.0;
  double frob = 0.0;
  for (const Tensor& z : sample_matrix_normal(rng, lu, lv, n)) {
    const Tensor zzt = tensor_math::matmul(z, tensor_math::transpose(z));
    tr_zzt += zzt.at(0, 0) + zzt.at(1, 1);
    frob += tensor_math::sum_squares(z);
  }
  EXPECT_NEAR(tr_zzt / frob, 1.0, 1e-12);
  EXPECT_NEAR(frob / n, 4.0 * 4.0, 0.02 * 16.0);  // tr(U) tr(V) = 4 · 4
}

}  // namespace
}  // namespace fslr
