// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "fslr/data.hpp"
#include "fslr/flerm.hpp"
#include "fslr/models.hpp"
#include "fslr/optim.hpp"

namespace fslr {

enum class ScaleAxis { kWidth, kDepth, kInitScale, kWidthDepth };
enum class RunMode { kStandard, kSetOnce, kPeriodic, kUniformSplit, kUniformFlat };
enum class LrShape { kConstant, kCosine };

std::string to_string(ScaleAxis axis);
std::string to_string(RunMode mode);
std::string to_string(LrShape shape);
ScaleAxis parse_axis(const std::string& s);
RunMode parse_mode(const std::string& s);
LrShape parse_lr_shape(const std::string& s);

/// Modes that need a recorded base schedule.
bool needs_recorded_schedule(RunMode mode);

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | cifar10 | text | synthetic-text
  std::string path;                // cifar10 / text; relative paths use $FSLR_DATA_ROOT
  std::size_t n = 4096;
  std::size_t dim = 32;
  std::size_t classes = 10;
  double separation = 4.0;
  std::size_t text_length = 60000;
  std::size_t seq_len = 64;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1234;
};

struct ExperimentConfig {
  ModelConfig model;
  DatasetSpec dataset;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  OptimizerHyper hyper;
  std::vector<double> eta0_grid;
  ScaleAxis axis = ScaleAxis::kWidth;
  /// The first multiplier is the base scale.
  std::vector<double> multipliers{1.0};
  std::vector<RunMode> modes{RunMode::kStandard};
  std::vector<std::uint64_t> seeds{0};
  /// Seeds averaged into each base schedule; defaults to `seeds`.
  std::vector<std::uint64_t> base_seeds;
  std::size_t steps = 1000;
  std::size_t cadence = 100;
  std::size_t warmup = 40;
  /// Weight of the newest sample in each EMA; 0.1 is a decay rate of 0.9.
  double beta = 0.1;
  EstimatorKind estimator = EstimatorKind::kReadout;
  LrShape lr_shape = LrShape::kConstant;
  std::string schedule_dir;

  /// Throws ConfigError listing every problem found.
  void validate() const;
  const std::vector<std::uint64_t>& recording_seeds() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment(const std::string& path);

/// Model config at one point of the scale axis.
ModelConfig scaled_config(const ExperimentConfig& config, double multiplier);

/// Loaded dataset plus the glue to build models, streams and training runs.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig config);

  const ExperimentConfig& config() const { return config_; }
  Model build(double multiplier, std::uint64_t seed) const;
  DataStreams streams(std::uint64_t seed) const;
  /// Learning-rate multipliers for the configured shape.
  std::vector<double> lr_multipliers() const;

  /// Base-scale recording run.
  FslrSchedule record(double eta0, std::uint64_t seed) const;
  /// One sweep cell. `base_schedule` is needed for the recorded-schedule modes.
  TrainResult run_cell(double multiplier, RunMode mode, double eta0, std::uint64_t seed,
                       const FslrSchedule* base_schedule) const;

 private:
  ExperimentConfig config_;
  ClassificationData classification_;
  TextCorpus corpus_;
};

struct ResultRow {
  ScaleAxis axis = ScaleAxis::kWidth;
  double multiplier = 1.0;
  RunMode mode = RunMode::kStandard;
  double eta0 = 0.0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  bool diverged = false;
  double runtime_s = 0.0;
};

/// Raw per-seed and seed-averaged base schedules for every grid η₀.
struct RecordedSchedules {
  std::vector<std::vector<FslrSchedule>> raw;  // [eta index][seed index]
  std::vector<FslrSchedule> averaged;          // [eta index]
};

RecordedSchedules record_base(const Experiment& experiment);
/// Writes eta{i}_seed{s}.csv and eta{i}_mean.csv, each with a .json sidecar.
void write_recorded(const RecordedSchedules& recorded, const ExperimentConfig& config,
                    const std::string& dir);
/// Reads eta{i}_mean.csv for every grid point.
std::vector<FslrSchedule> read_averaged(const ExperimentConfig& config, const std::string& dir);

/// Every (multiplier, mode, η₀, seed) cell in deterministic order. `averaged`
/// must hold one schedule per grid η₀ when a recorded-schedule mode is present.
std::vector<ResultRow> run_grid(const Experiment& experiment,
                                const std::vector<FslrSchedule>* averaged);

void write_schedule_csv(const FslrSchedule& schedule, const std::string& path);
FslrSchedule read_schedule_csv(const std::string& path);
void write_schedule_sidecar(const FslrSchedule& schedule, const std::string& path);
void read_schedule_sidecar(FslrSchedule& schedule, const std::string& path);

/// `axis,multiplier,mode,eta0,seed,final_loss,diverged`; runtimes go to
/// `<path>.timing.csv` so the main file is reproducible byte for byte.
void write_results_csv(const std::vector<ResultRow>& rows, const std::string& path);
std::vector<ResultRow> read_results_csv(const std::string& path);

void write_fslr_trace(const std::vector<FslrTraceRow>& rows, const std::string& path);
void write_lr_trace(const std::vector<LrTraceRow>& rows, const std::string& path);

struct SummaryRow {
  RunMode mode = RunMode::kStandard;
  double multiplier = 1.0;
  double argmin_eta0 = 0.0;
  std::size_t argmin_index = 0;
  /// argmin_index minus the base scale's argmin index.
  long shift = 0;
  double best_loss = 0.0;
};

/// Per (mode, multiplier): η₀ minimising the seed-mean final loss (diverged
/// runs count as +inf, ties go to the smallest η₀). The base scale is the
/// first multiplier seen. Throws on missing grid cells.
std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows);
/// max − min argmin index over the multipliers of one mode.
long argmin_spread(const std::vector<SummaryRow>& summary, RunMode mode);
void write_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path);

/// Seed-mean final loss per (mode, multiplier, η₀); diverged runs give +inf.
std::map<std::tuple<RunMode, double, double>, double> mean_losses(
    const std::vector<ResultRow>& rows);

}  // namespace fslr
