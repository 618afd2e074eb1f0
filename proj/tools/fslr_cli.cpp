// SPDX-License-Identifier: Apache-2.0
// Command-line front end: record, run, summarize, oracle-check.
#include <cmath>
#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fslr/estimator.hpp"
#include "fslr/harness.hpp"
#include "fslr/oracle.hpp"

namespace {

using namespace fslr;

struct Overrides {
  std::string config_path;
  std::vector<double> eta0;
  std::vector<double> multipliers;
  std::vector<std::string> modes;
  std::vector<std::uint64_t> seeds;
  std::optional<std::string> axis;
  std::optional<std::string> optimizer;
  std::optional<std::string> estimator;
  std::optional<std::string> lr_schedule;
  std::optional<std::string> schedule_dir;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> cadence;
  std::optional<std::size_t> warmup;
  std::optional<double> beta;
};

void add_config_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config_path, "Experiment config (JSON)")->required();
  cmd->add_option("--eta0", o.eta0, "Base learning-rate grid");
  cmd->add_option("--multipliers", o.multipliers, "Scale multipliers, base first");
  cmd->add_option("--mode", o.modes, "standard, flerm-set-once, flerm-periodic, ...");
  cmd->add_option("--seeds", o.seeds, "Run seeds");
  cmd->add_option("--axis", o.axis, "width, depth, init-scale, width+depth");
  cmd->add_option("--optimizer", o.optimizer, "sgd, signsgd, adam, adamw, adamax, adagrad");
  cmd->add_option("--estimator", o.estimator, "raw, iid, kron, readout");
  cmd->add_option("--lr-schedule", o.lr_schedule, "constant or cosine");
  cmd->add_option("--schedule-dir", o.schedule_dir, "Directory of recorded base schedules");
  cmd->add_option("--steps", o.steps, "Training steps");
  cmd->add_option("--cadence", o.cadence, "Steps between FSLR samples");
  cmd->add_option("--warmup", o.warmup, "Probe samples before the first read");
  cmd->add_option("--beta", o.beta, "EMA weight of a new sample");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = load_experiment(o.config_path);
  if (!o.eta0.empty()) c.eta0_grid = o.eta0;
  if (!o.multipliers.empty()) c.multipliers = o.multipliers;
  if (!o.modes.empty()) {
    c.modes.clear();
    for (const auto& m : o.modes) c.modes.push_back(parse_mode(m));
  }
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (o.axis) c.axis = parse_axis(*o.axis);
  if (o.optimizer) c.optimizer = parse_optimizer(*o.optimizer);
  if (o.estimator) c.estimator = parse_estimator(*o.estimator);
  if (o.lr_schedule) c.lr_shape = parse_lr_shape(*o.lr_schedule);
  if (o.schedule_dir) c.schedule_dir = *o.schedule_dir;
  if (o.steps) c.steps = *o.steps;
  if (o.cadence) c.cadence = *o.cadence;
  if (o.warmup) c.warmup = *o.warmup;
  if (o.beta) c.beta = *o.beta;
  c.validate();
  return c;
}

int cmd_record(const Overrides& o, std::string out_dir) {
  ExperimentConfig c = resolve(o);
  if (out_dir.empty()) out_dir = c.schedule_dir;
  if (out_dir.empty()) throw ConfigError("record: give --out or schedule_dir");
  const Experiment exp(c);
  const RecordedSchedules rec = record_base(exp);
  write_recorded(rec, c, out_dir);
  std::cerr << "recorded " << rec.averaged.size() << " averaged schedules ("
            << rec.averaged.size() * c.recording_seeds().size() << " raw) in " << out_dir << '\n';
  return 0;
}

int cmd_run(const Overrides& o, const std::string& out) {
  const ExperimentConfig c = resolve(o);
  const Experiment exp(c);
  std::vector<FslrSchedule> averaged;
  const bool needs = std::any_of(c.modes.begin(), c.modes.end(), needs_recorded_schedule);
  if (needs) averaged = read_averaged(c, c.schedule_dir);
  const auto rows = run_grid(exp, needs ? &averaged : nullptr);
  write_results_csv(rows, out);
  std::size_t diverged = 0;
  for (const auto& r : rows) diverged += r.diverged ? 1 : 0;
  std::cerr << rows.size() << " cells written to " << out << " (" << diverged << " diverged)\n";
  return 0;
}

int cmd_summarize(const std::string& in, const std::string& out) {
  const auto summary = summarize(read_results_csv(in));
  if (!out.empty()) write_summary_csv(summary, out);
  std::printf("%-24s %10s %12s %6s %12s\n", "mode", "multiplier", "argmin_eta0", "shift", "loss");
  for (const auto& r : summary) {
    std::printf("%-24s %10g %12g %6ld %12.6g\n", to_string(r.mode).c_str(), r.multiplier,
                r.argmin_eta0, r.shift, r.best_loss);
  }
  return 0;
}

int cmd_oracle_check(std::uint64_t seed, std::size_t probes) {
  ModelConfig mc;
  mc.arch = Arch::kResMlp;
  mc.input_dim = 5;
  mc.num_classes = 3;
  mc.hidden = 8;
  mc.resmlp_blocks = 2;
  Rng rng(seed);
  Model model = build_model(mc, rng);
  const Tensor x = standard_normal(rng, {4, mc.input_dim});
  ParamValues delta;
  for (const auto& p : model.parameters()) delta[p.name] = standard_normal(rng, p.value.shape());
  const ExactFslr exact = exact_delta_f(model, x, delta);

  std::map<std::string, std::vector<double>> sq;
  Rng omega = rng.derive(static_cast<std::uint64_t>(StreamPurpose::kProbeOmega));
  for (std::size_t i = 0; i < probes; ++i) {
    const ProbeSample s = sample_phi(model, x, omega);
    for (const auto& p : model.parameters()) {
      const double dphi = z_stats(compute_z(delta.at(p.name), s.grads.at(p.name))).delta_phi;
      sq[p.name].push_back(dphi * dphi);
    }
  }
  bool ok = true;
  std::printf("%-16s %12s %12s %8s\n", "layer", "exact^2", "mc^2", "z");
  for (const auto& p : model.parameters()) {
    const auto& v = sq.at(p.name);
    double mean = 0.0;
    for (double a : v) mean += a;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double a : v) var += (a - mean) * (a - mean);
    var /= static_cast<double>(v.size() - 1);
    const double se = std::sqrt(var / static_cast<double>(v.size()));
    const double target = exact.rms.at(p.name) * exact.rms.at(p.name);
    const double z = se > 0 ? (mean - target) / se : 0.0;
    ok = ok && std::abs(z) < 3.0;
    std::printf("%-16s %12.6g %12.6g %8.3f\n", p.name.c_str(), target, mean, z);
  }
  std::printf("%s\n", ok ? "oracle-check: PASS" : "oracle-check: FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layerwise function-space learning rates and FLeRM experiments"};
  app.require_subcommand(1);

  Overrides rec_o;
  std::string rec_out;
  auto* rec = app.add_subcommand("record", "Record base-model FSLR schedules");
  add_config_flags(rec, rec_o);
  rec->add_option("-o,--out", rec_out, "Output directory (default: schedule_dir)");

  Overrides run_o;
  std::string run_out = "results.csv";
  auto* run = app.add_subcommand("run", "Run the eta0 x scale sweep");
  add_config_flags(run, run_o);
  run->add_option("-o,--out", run_out, "Results CSV");

  std::string sum_in;
  std::string sum_out;
  auto* sum = app.add_subcommand("summarize", "Argmin-eta0 table from a results CSV");
  sum->add_option("results", sum_in, "Results CSV")->required();
  sum->add_option("-o,--out", sum_out, "Summary CSV");

  std::uint64_t oc_seed = 0;
  std::size_t oc_probes = 10000;
  auto* oc = app.add_subcommand("oracle-check", "Probe estimator vs brute-force oracle");
  oc->add_option("--seed", oc_seed);
  oc->add_option("--probes", oc_probes);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*rec) return cmd_record(rec_o, rec_out);
    if (*run) return cmd_run(run_o, run_out);
    if (*sum) return cmd_summarize(sum_in, sum_out);
    if (*oc) return cmd_oracle_check(oc_seed, oc_probes);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
