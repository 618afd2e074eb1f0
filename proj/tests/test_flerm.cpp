// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fslr/flerm.hpp"
#include "test_util.hpp"

namespace fslr {
namespace {

FslrSchedule two_layer_schedule() {
  FslrSchedule s;
  s.entries = {{0, {{"a", 1.0}, {"b", 2.0}}}, {100, {{"a", 3.0}, {"b", 4.0}}}};
  return s;
}

struct Fixture {
  ClassificationData data;
  DataStreams streams;
};

Fixture make_setup(std::uint64_t seed) {
  Fixture s;
  Rng rng(seed);
  s.data = synthetic_classification(rng, 600, 5, 3, 3.0);
  s.streams = classification_streams(s.data, 16, Rng(seed + 1));
  return s;
}

TEST(Schedule, LookupPicksLatestEntry) {
  const FslrSchedule s = two_layer_schedule();
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.lookup(0).step, 0u);
  EXPECT_EQ(s.lookup(99).step, 0u);
  EXPECT_EQ(s.lookup(100).step, 100u);
  EXPECT_EQ(s.lookup(5000).step, 100u);
  EXPECT_EQ(s.layers(), (std::vector<std::string>{"a", "b"}));
}

TEST(Schedule, ValidateRejectsBadSchedules) {
  FslrSchedule s = two_layer_schedule();
  s.entries[1].step = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = two_layer_schedule();
  s.entries[1].fslr.erase("b");
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = two_layer_schedule();
  s.entries[0].fslr["a"] = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = two_layer_schedule();
  s.entries[0].fslr["a"] = std::nan("");
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_THROW(FslrSchedule{}.validate(), std::invalid_argument);
}

TEST(SeedAverage, ArithmeticMean) {
  FslrSchedule a;
  a.entries = {{0, {{"x", 1.0}}}};
  FslrSchedule b;
  b.entries = {{0, {{"x", 3.0}}}};
  const std::vector<FslrSchedule> both{a, b};
  const FslrSchedule m = seed_average(both);
  EXPECT_DOUBLE_EQ(m.entries[0].fslr.at("x"), 2.0);
  EXPECT_EQ(m.seeds, 2u);
}

TEST(SeedAverage, SingleScheduleIsIdentity) {
  const FslrSchedule s = two_layer_schedule();
  const std::vector<FslrSchedule> one{s};
  EXPECT_EQ(seed_average(one), s);
}

TEST(SeedAverage, MismatchedStepsThrow) {
  FslrSchedule a = two_layer_schedule();
  FslrSchedule b = two_layer_schedule();
  b.entries[1].step = 150;
  const std::vector<FslrSchedule> both{a, b};
  EXPECT_THROW(seed_average(both), std::invalid_argument);
}

TEST(DepthSplit, DoubledDepthHalvesFractions) {
  Rng rng(1);
  const ModelConfig base = testing::tiny_resmlp(8, 2);
  ModelConfig deep = base;
  deep.depth_multiplier = 2;
  const Model b = build_model(base, rng);
  const Model d = build_model(deep, rng);
  const LayerMap map = depth_split(b, d);
  ASSERT_EQ(map.size(), d.parameters().size());
  for (const auto& p : d.parameters()) {
    const LayerShare& s = map.at(p.name);
    if (p.block < 0) {
      EXPECT_EQ(s.base, p.name);
      EXPECT_EQ(s.fraction, 1.0);
    } else {
      EXPECT_EQ(s.base, "block" + std::to_string(p.block / 2) + "." + p.local);
      EXPECT_EQ(s.fraction, 0.5);
    }
  }
}

TEST(DepthSplit, MassIsConserved) {
  Rng rng(2);
  const ModelConfig base = testing::tiny_resmlp(8, 2);
  for (int m : {1, 2, 3, 4}) {
    ModelConfig deep = base;
    deep.depth_multiplier = m;
    const Model b = build_model(base, rng);
    const LayerMap map = depth_split(b, build_model(deep, rng));
    std::map<std::string, double> mass;
    for (const auto& [scaled, share] : map) mass[share.base] += share.fraction;
    ASSERT_EQ(mass.size(), b.parameters().size());
    for (const auto& [name, total] : mass) EXPECT_NEAR(total, 1.0, 1e-12) << name << " m=" << m;
  }
}

TEST(DepthSplit, NonMultipleThrows) {
  Rng rng(3);
  const Model b = build_model(testing::tiny_resmlp(8, 2), rng);
  const Model c = build_model(testing::tiny_resmlp(8, 3), rng);
  EXPECT_THROW(depth_split(b, c), ConfigError);
}

TEST(SetLrs, Examples) {
  FslrSchedule s;
  s.entries = {{0, {{"a", 0.2}}}};
  FslrEstimate cur;
  cur.values = {{"a", 0.1}};
  EXPECT_DOUBLE_EQ(set_lrs(s, {{"a", {"a", 1.0}}}, cur, 0.01, 0).at("a"), 0.02);
  cur.values = {{"a", 0.2}};
  EXPECT_DOUBLE_EQ(set_lrs(s, {{"a", {"a", 1.0}}}, cur, 0.01, 0).at("a"), 0.01);
  cur.values = {{"a", 0.0}};
  EXPECT_THROW(set_lrs(s, {{"a", {"a", 1.0}}}, cur, 0.01, 0), DegenerateLayerError);
}

TEST(SetLrs, AppliesFraction) {
  FslrSchedule s;
  s.entries = {{0, {{"block0.w", 0.4}}}};
  FslrEstimate cur;
  cur.values = {{"block0.w", 0.1}, {"block1.w", 0.1}};
  const LayerMap map{{"block0.w", {"block0.w", 0.5}}, {"block1.w", {"block0.w", 0.5}}};
  const LrPlan p = set_lrs(s, map, cur, 1.0, 0);
  EXPECT_DOUBLE_EQ(p.at("block0.w"), 2.0);
  EXPECT_DOUBLE_EQ(p.at("block1.w"), 2.0);
}

TEST(SetLrs, ScalesLinearlyAndInverselyOnGrid) {
  FslrSchedule s;
  s.entries = {{0, {{"a", 0.3}}}};
  const LayerMap map{{"a", {"a", 1.0}}};
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const double eta = std::exp(rng.normal());
    const double cur = std::exp(rng.normal());
    const double c = std::exp(rng.normal());
    FslrEstimate e;
    e.values = {{"a", cur}};
    const double base = set_lrs(s, map, e, eta, 0).at("a");
    EXPECT_NEAR(set_lrs(s, map, e, c * eta, 0).at("a"), c * base, 1e-12 * c * base);
    e.values = {{"a", c * cur}};
    EXPECT_NEAR(set_lrs(s, map, e, eta, 0).at("a"), base / c, 1e-12 * base / c);
  }
}

TEST(ReplayScheduler, Examples) {
  const std::vector<double> lr{0.1, 0.05, 0.025};
  EXPECT_EQ(replay_scheduler(lr), (std::vector<double>{1.0, 0.5, 0.25}));
  const std::vector<double> flat{0.3, 0.3};
  EXPECT_EQ(replay_scheduler(flat), (std::vector<double>{1.0, 1.0}));
  const std::vector<double> zero{0.0, 1.0};
  EXPECT_THROW(replay_scheduler(zero), std::domain_error);
}

TEST(CosineSchedule, Shape) {
  const auto c = cosine_schedule(2.0, 4);
  ASSERT_EQ(c.size(), 4u);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_NEAR(c[t], 2.0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t / 4.0)), 1e-15);
  }
  EXPECT_DOUBLE_EQ(c[0], 2.0);
  EXPECT_NEAR(c[2], 1.0, 1e-15);
}

TEST(UniformSchedules, SumToOne) {
  Rng rng(5);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  for (const FslrSchedule& s : {uniform_split_schedule(m), uniform_flat_schedule(m)}) {
    ASSERT_EQ(s.entries.size(), 1u);
    double total = 0.0;
    for (const auto& [n, v] : s.entries[0].fslr) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_EQ(s.entries[0].fslr.size(), m.parameters().size());
    EXPECT_NO_THROW(s.validate());
  }
}

TrainOptions record_options(std::size_t steps) {
  TrainOptions o;
  o.mode = TrainMode::kRecord;
  o.optimizer = OptimizerKind::kAdam;
  o.eta0 = 1e-2;
  o.steps = steps;
  return o;
}

TEST(Train, RecordEntriesAtCadence) {
  Fixture s = make_setup(10);
  Rng rng(11);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  const TrainResult r = train(m, *s.streams.train, *s.streams.probe, record_options(500), Rng(12));
  ASSERT_FALSE(r.diverged) << r.divergence_reason;
  ASSERT_EQ(r.recorded.entries.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r.recorded.entries[i].step, 100 * i);
  EXPECT_NO_THROW(r.recorded.validate());
  EXPECT_EQ(r.recorded.eta0, 1e-2);
  EXPECT_EQ(r.losses.size(), 500u);
  EXPECT_LT(r.final_loss(500), r.losses.front());
}

TEST(Train, WarmupSamplesAtFirstMeasurement) {
  Fixture s = make_setup(13);
  Rng rng(14);
  Model m = build_model(testing::tiny_resmlp(), rng);
  // Reproduce step 0 by hand: 40 probe samples folded into fresh EMAs.
  TrainOptions o = record_options(1);
  const TrainResult r = train(m, *s.streams.train, *s.streams.probe, o, Rng(15));

  Fixture s2 = make_setup(13);
  const Batch b = s2.streams.train->next();
  OptimState opt(o.optimizer);
  Tape tape;
  const GradMap g = tape.backward(training_loss(m, tape, b.inputs, b.targets));
  const Model start = m;
  const LrPlan plan = LrPlan::uniform(m.names(), o.eta0);
  opt.step(m, g, plan);
  const ParamValues unit = unit_deltas(start.values(), m.values(), plan);
  FslrEstimator est(m, o.beta, o.estimator);
  Rng omega(15);
  // Probes linearise at the pre-step weights.
  for (int i = 0; i < 40; ++i) est.observe(unit, sample_phi(start, s2.streams.probe->next().inputs, omega).grads);
  EXPECT_EQ(est.samples(), 40u);
  const FslrEstimate e = est.estimate();
  for (const auto& [name, v] : e.values) {
    EXPECT_DOUBLE_EQ(r.recorded.entries.at(0).fslr.at(name), v) << name;
  }
}

TEST(Train, RecordingIsDeterministic) {
  Rng rng(16);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  Fixture a = make_setup(17);
  Fixture b = make_setup(17);
  const TrainResult ra = train(m, *a.streams.train, *a.streams.probe, record_options(250), Rng(18));
  const TrainResult rb = train(m, *b.streams.train, *b.streams.probe, record_options(250), Rng(18));
  EXPECT_EQ(ra.recorded, rb.recorded);
  EXPECT_EQ(ra.losses, rb.losses);
}

TEST(Train, PeriodicRevisesAtEveryCadenceStep) {
  Rng rng(19);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  Fixture a = make_setup(20);
  const TrainResult rec = train(m, *a.streams.train, *a.streams.probe, record_options(500), Rng(21));
  Fixture b = make_setup(20);
  TrainOptions o = record_options(500);
  o.mode = TrainMode::kPeriodic;
  o.schedule = &rec.recorded;
  const TrainResult r = train(m, *b.streams.train, *b.streams.probe, o, Rng(22));
  ASSERT_FALSE(r.diverged) << r.divergence_reason;
  EXPECT_EQ(r.plan_revisions, 5u);
  o.mode = TrainMode::kSetOnce;
  Fixture c = make_setup(20);
  EXPECT_EQ(train(m, *c.streams.train, *c.streams.probe, o, Rng(22)).plan_revisions, 1u);
}

TEST(Train, SetOnceOnBaseRecoversBaseRates) {
  Rng rng(23);
  const Model m = build_model(testing::tiny_resmlp(), rng);
  Fixture a = make_setup(24);
  TrainOptions ro = record_options(100);
  ro.warmup = 400;
  ro.beta = 0.01;
  const TrainResult rec = train(m, *a.streams.train, *a.streams.probe, ro, Rng(25));
  Fixture b = make_setup(24);
  TrainOptions o = record_options(100);
  o.mode = TrainMode::kSetOnce;
  o.schedule = &rec.recorded;
  o.warmup = 400;
  o.beta = 0.01;
  // Different ω stream: η^ℓ differs from η₀ only through estimator noise.
  const TrainResult r = train(m, *b.streams.train, *b.streams.probe, o, Rng(26));
  for (const auto& [name, eta] : r.final_plan.rates) {
    EXPECT_NEAR(eta / o.eta0, 1.0, 0.2) << name;
  }
}

TEST(Train, SetModesNeedSchedule) {
  Fixture s = make_setup(27);
  Rng rng(28);
  TrainOptions o = record_options(10);
  o.mode = TrainMode::kSetOnce;
  EXPECT_THROW(train(build_model(testing::tiny_resmlp(), rng), *s.streams.train, *s.streams.probe, o,
                     Rng(1)),
               std::invalid_argument);
}

TEST(Train, HugeRateDiverges) {
  Fixture s = make_setup(29);
  Rng rng(30);
  TrainOptions o;
  o.optimizer = OptimizerKind::kSgd;
  o.eta0 = 1e6;
  o.steps = 50;
  const TrainResult r =
      train(build_model(testing::tiny_resmlp(), rng), *s.streams.train, *s.streams.probe, o, Rng(1));
  EXPECT_TRUE(r.diverged);
  EXPECT_LT(r.losses.size(), 50u);
  EXPECT_TRUE(std::isfinite(r.final_loss(50)));
}

TEST(Train, FinalLossWindow) {
  TrainResult r(Model(ModelConfig{}, {}));
  for (int i = 0; i < 1000; ++i) r.losses.push_back(i < 800 ? 10.0 : 1.0);
  EXPECT_DOUBLE_EQ(r.final_loss(1000), 1.0);
  r.losses = {4.0, 2.0, 3.0, 1.0};
  EXPECT_DOUBLE_EQ(r.final_loss(4), 2.0);
}

TEST(Train, LrTraceFollowsCosine) {
  Fixture s = make_setup(31);
  Rng rng(32);
  TrainOptions o;
  o.steps = 300;
  o.trace_fslr = true;
  const auto lr = cosine_schedule(1.0, o.steps);
  o.lr_multipliers = replay_scheduler(lr);
  const TrainResult r =
      train(build_model(testing::tiny_resmlp(), rng), *s.streams.train, *s.streams.probe, o, Rng(1));
  ASSERT_FALSE(r.lr_trace.empty());
  for (const auto& row : r.lr_trace) EXPECT_NEAR(row.eta, o.eta0 * lr[row.step], 1e-15);
  EXPECT_EQ(r.fslr_trace.size(), 3 * build_model(testing::tiny_resmlp(), rng).parameters().size());
}

}  // namespace
}  // namespace fslr
