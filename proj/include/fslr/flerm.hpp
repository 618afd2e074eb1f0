// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fslr/data.hpp"
#include "fslr/estimator.hpp"
#include "fslr/models.hpp"
#include "fslr/optim.hpp"

namespace fslr {

struct ScheduleEntry {
  std::size_t step = 0;
  std::map<std::string, double> fslr;

  friend bool operator==(const ScheduleEntry&, const ScheduleEntry&) = default;
};

/// Recorded base-model function-space learning rates over time.
struct FslrSchedule {
  std::vector<ScheduleEntry> entries;
  ModelConfig base_config;
  std::size_t seeds = 1;
  double eta0 = 0.0;

  /// Steps strictly increasing, identical layer sets, values positive and finite.
  void validate() const;
  /// Latest entry at or before `step`.
  const ScheduleEntry& lookup(std::size_t step) const;
  std::vector<std::string> layers() const;

  friend bool operator==(const FslrSchedule&, const FslrSchedule&) = default;
};

/// Arithmetic mean per (step, layer). Inputs must share steps and layers.
FslrSchedule seed_average(std::span<const FslrSchedule> schedules);

/// Where a scaled layer takes its base FSLR from, and which share of it.
struct LayerShare {
  std::string base;
  double fraction = 1.0;
};
using LayerMap = std::map<std::string, LayerShare>;

/// Every layer maps to itself with fraction 1.
LayerMap identity_map(const Model& model);
/// Base block i feeds scaled blocks i·m … (i+1)·m − 1, each with fraction
/// 1/m. Non-block layers map by name with fraction 1.
LayerMap depth_split(const Model& base, const Model& scaled);

/// η^ℓ = η₀ · fraction · base / current, using the latest schedule entry ≤ step.
LrPlan set_lrs(const FslrSchedule& schedule, const LayerMap& map, const FslrEstimate& current,
               double eta0, std::size_t step);

/// multiplier(t) = base_lr(t) / base_lr(0).
std::vector<double> replay_scheduler(std::span<const double> base_lr);
/// lr(t) = lr0 · ½(1 + cos(π t / T)) for t = 0 … T − 1.
std::vector<double> cosine_schedule(double lr0, std::size_t total_steps);

/// Equal base FSLRs summing to 1 over the base model's layers (depth-split later).
FslrSchedule uniform_split_schedule(const Model& base);
/// Equal FSLRs summing to 1 over all layers of the scaled model itself.
FslrSchedule uniform_flat_schedule(const Model& scaled);

enum class TrainMode { kStandard, kRecord, kSetOnce, kPeriodic };

std::string to_string(TrainMode mode);

struct TrainOptions {
  TrainMode mode = TrainMode::kStandard;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  OptimizerHyper hyper;
  double eta0 = 1e-3;
  std::size_t steps = 100;
  std::size_t cadence = 100;
  std::size_t warmup = 40;
  /// Weight of the newest sample in each EMA; 0.1 is a decay rate of 0.9.
  double beta = 0.1;
  EstimatorKind estimator = EstimatorKind::kReadout;
  /// Required for kSetOnce and kPeriodic.
  const FslrSchedule* schedule = nullptr;
  LayerMap layer_map;
  /// Per-step LR multipliers; empty means constant 1.
  std::vector<double> lr_multipliers;
  /// Measure FSLRs at every cadence step even when nothing consumes them.
  bool trace_fslr = false;
};

struct FslrTraceRow {
  std::size_t step;
  std::string layer;
  EstimatorKind estimator;
  double fslr;
};

struct LrTraceRow {
  std::size_t step;
  std::string layer;
  double eta;
};

struct TrainResult {
  explicit TrainResult(Model m) : model(std::move(m)) {}

  std::vector<double> losses;  // finite training losses, one per completed step
  bool diverged = false;
  std::string divergence_reason;
  FslrSchedule recorded;  // filled in kRecord mode
  std::vector<FslrTraceRow> fslr_trace;
  std::vector<LrTraceRow> lr_trace;
  std::size_t plan_revisions = 0;
  LrPlan final_plan;
  Model model;

  /// Mean over the last min(200, steps/2) losses, or the last finite loss
  /// for a diverged run.
  double final_loss(std::size_t steps) const;
};

/// Training loop with optional FSLR recording or FLeRM learning-rate control.
/// On measured steps the optimizer step is first taken as a trial; probe
/// samples are folded into the EMAs (the warmup count at step 0, one later);
/// setting modes then rewind to the pre-step state and retake the step with
/// the new plan.
TrainResult train(Model model, BatchSource& train_data, BatchSource& probe_data,
                  const TrainOptions& options, Rng omega_rng);

}  // namespace fslr
