// SPDX-License-Identifier: Apache-2.0
#include "fslr/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "fslr/json_io.hpp"

namespace fslr {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ofstream open_out(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  return in;
}

std::string resolve_data_path(const std::string& path) {
  if (path.empty() || std::filesystem::path(path).is_absolute()) return path;
  if (const char* root = std::getenv("FSLR_DATA_ROOT")) {
    return (std::filesystem::path(root) / path).string();
  }
  return path;
}

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const E (&all)[N], const char* what) {
  for (E e : all) {
    if (to_string(e) == s) return e;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

constexpr ScaleAxis kAxes[] = {ScaleAxis::kWidth, ScaleAxis::kDepth, ScaleAxis::kInitScale,
                               ScaleAxis::kWidthDepth};
constexpr RunMode kModes[] = {RunMode::kStandard, RunMode::kSetOnce, RunMode::kPeriodic,
                              RunMode::kUniformSplit, RunMode::kUniformFlat};
constexpr LrShape kShapes[] = {LrShape::kConstant, LrShape::kCosine};

}  // namespace

std::string to_string(ScaleAxis axis) {
  switch (axis) {
    case ScaleAxis::kWidth: return "width";
    case ScaleAxis::kDepth: return "depth";
    case ScaleAxis::kInitScale: return "init-scale";
    case ScaleAxis::kWidthDepth: return "width+depth";
  }
  return "?";
}

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::kStandard: return "standard";
    case RunMode::kSetOnce: return "flerm-set-once";
    case RunMode::kPeriodic: return "flerm-periodic";
    case RunMode::kUniformSplit: return "ablation-uniform-split";
    case RunMode::kUniformFlat: return "ablation-uniform-flat";
  }
  return "?";
}

std::string to_string(LrShape shape) {
  return shape == LrShape::kConstant ? "constant" : "cosine";
}

ScaleAxis parse_axis(const std::string& s) { return parse_enum(s, kAxes, "scale axis"); }
RunMode parse_mode(const std::string& s) { return parse_enum(s, kModes, "mode"); }
LrShape parse_lr_shape(const std::string& s) { return parse_enum(s, kShapes, "lr schedule"); }

bool needs_recorded_schedule(RunMode mode) {
  return mode == RunMode::kSetOnce || mode == RunMode::kPeriodic;
}

const std::vector<std::uint64_t>& ExperimentConfig::recording_seeds() const {
  return base_seeds.empty() ? seeds : base_seeds;
}

void ExperimentConfig::validate() const {
  std::vector<std::string> problems;
  try {
    model.validate();
  } catch (const std::exception& e) {
    problems.emplace_back(e.what());
  }
  if (eta0_grid.empty()) problems.emplace_back("eta0 grid is empty");
  for (double e : eta0_grid) {
    if (!(std::isfinite(e) && e > 0.0)) problems.push_back("eta0 " + fmt_double(e) + " is not positive");
  }
  if (std::set<double>(eta0_grid.begin(), eta0_grid.end()).size() != eta0_grid.size()) {
    problems.emplace_back("eta0 grid has duplicates");
  }
  if (multipliers.empty()) problems.emplace_back("multiplier list is empty");
  for (double m : multipliers) {
    if (!(std::isfinite(m) && m > 0.0)) {
      problems.push_back("multiplier " + fmt_double(m) + " is not positive");
      continue;
    }
    const bool depth = axis == ScaleAxis::kDepth || axis == ScaleAxis::kWidthDepth;
    if (depth && m != std::floor(m)) {
      problems.push_back("depth multiplier " + fmt_double(m) + " is not an integer");
      continue;
    }
    try {
      scaled_config(*this, m).validate();
    } catch (const std::exception& e) {
      problems.push_back("multiplier " + fmt_double(m) + ": " + e.what());
    }
  }
  if (modes.empty()) problems.emplace_back("mode list is empty");
  if (seeds.empty()) problems.emplace_back("seed list is empty");
  if (steps == 0) problems.emplace_back("steps must be positive");
  if (cadence == 0) problems.emplace_back("cadence must be positive");
  if (!(beta > 0.0 && beta <= 1.0)) problems.emplace_back("beta must be in (0, 1]");
  if (dataset.batch_size == 0) problems.emplace_back("batch size must be positive");
  const bool text = dataset.kind == "text" || dataset.kind == "synthetic-text";
  if (text != (model.arch == Arch::kTransformer)) {
    problems.push_back("dataset '" + dataset.kind + "' does not fit arch '" + to_string(model.arch) + "'");
  }
  if (dataset.kind != "synthetic" && dataset.kind != "cifar10" && !text) {
    problems.push_back("unknown dataset kind '" + dataset.kind + "'");
  }
  if ((dataset.kind == "cifar10" || dataset.kind == "text") && dataset.path.empty()) {
    problems.push_back("dataset '" + dataset.kind + "' needs a path");
  }
  if (text && dataset.seq_len > model.max_seq) problems.emplace_back("seq_len exceeds model max_seq");
  if (dataset.kind == "synthetic" && dataset.dim != model.input_dim) {
    problems.emplace_back("synthetic dataset dim differs from model input_dim");
  }
  for (RunMode m : modes) {
    if (needs_recorded_schedule(m) && schedule_dir.empty()) {
      problems.push_back("mode " + to_string(m) + " needs schedule_dir");
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid experiment config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  std::vector<std::string> modes;
  for (RunMode m : c.modes) modes.push_back(to_string(m));
  j = nlohmann::json{
      {"model", c.model},
      {"dataset",
       {{"kind", c.dataset.kind},
        {"path", c.dataset.path},
        {"n", c.dataset.n},
        {"dim", c.dataset.dim},
        {"classes", c.dataset.classes},
        {"separation", c.dataset.separation},
        {"text_length", c.dataset.text_length},
        {"seq_len", c.dataset.seq_len},
        {"batch_size", c.dataset.batch_size},
        {"seed", c.dataset.seed}}},
      {"optimizer",
       {{"kind", to_string(c.optimizer)},
        {"beta1", c.hyper.beta1},
        {"beta2", c.hyper.beta2},
        {"eps", c.hyper.eps},
        {"momentum", c.hyper.momentum},
        {"weight_decay", c.hyper.weight_decay},
        {"adagrad_eps", c.hyper.adagrad_eps}}},
      {"eta0_grid", c.eta0_grid},
      {"axis", to_string(c.axis)},
      {"multipliers", c.multipliers},
      {"modes", modes},
      {"seeds", c.seeds},
      {"base_seeds", c.base_seeds},
      {"steps", c.steps},
      {"cadence", c.cadence},
      {"warmup", c.warmup},
      {"beta", c.beta},
      {"estimator", to_string(c.estimator)},
      {"lr_schedule", to_string(c.lr_shape)},
      {"schedule_dir", c.schedule_dir}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    auto& s = c.dataset;
    s.kind = d.value("kind", s.kind);
    s.path = d.value("path", s.path);
    s.n = d.value("n", s.n);
    s.dim = d.value("dim", s.dim);
    s.classes = d.value("classes", s.classes);
    s.separation = d.value("separation", s.separation);
    s.text_length = d.value("text_length", s.text_length);
    s.seq_len = d.value("seq_len", s.seq_len);
    s.batch_size = d.value("batch_size", s.batch_size);
    s.seed = d.value("seed", s.seed);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    if (o.is_string()) {
      c.optimizer = parse_optimizer(o.get<std::string>());
    } else {
      c.optimizer = parse_optimizer(o.value("kind", to_string(c.optimizer)));
      auto& h = c.hyper;
      h.beta1 = o.value("beta1", h.beta1);
      h.beta2 = o.value("beta2", h.beta2);
      h.eps = o.value("eps", h.eps);
      h.momentum = o.value("momentum", h.momentum);
      h.weight_decay = o.value("weight_decay", h.weight_decay);
      h.adagrad_eps = o.value("adagrad_eps", h.adagrad_eps);
    }
  }
  c.eta0_grid = j.value("eta0_grid", c.eta0_grid);
  if (j.contains("axis")) c.axis = parse_axis(j.at("axis").get<std::string>());
  c.multipliers = j.value("multipliers", c.multipliers);
  if (j.contains("mode")) c.modes = {parse_mode(j.at("mode").get<std::string>())};
  if (j.contains("modes")) {
    c.modes.clear();
    for (const auto& m : j.at("modes")) c.modes.push_back(parse_mode(m.get<std::string>()));
  }
  c.seeds = j.value("seeds", c.seeds);
  c.base_seeds = j.value("base_seeds", c.base_seeds);
  c.steps = j.value("steps", c.steps);
  c.cadence = j.value("cadence", c.cadence);
  c.warmup = j.value("warmup", c.warmup);
  c.beta = j.value("beta", c.beta);
  if (j.contains("estimator")) c.estimator = parse_estimator(j.at("estimator").get<std::string>());
  if (j.contains("lr_schedule")) c.lr_shape = parse_lr_shape(j.at("lr_schedule").get<std::string>());
  c.schedule_dir = j.value("schedule_dir", c.schedule_dir);
}

ExperimentConfig load_experiment(const std::string& path) {
  auto in = open_in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse '" + path + "': " + e.what());
  }
  return j.get<ExperimentConfig>();
}

ModelConfig scaled_config(const ExperimentConfig& config, double multiplier) {
  ModelConfig m = config.model;
  switch (config.axis) {
    case ScaleAxis::kWidth: m.width_multiplier *= multiplier; break;
    case ScaleAxis::kDepth: m.depth_multiplier *= static_cast<int>(multiplier); break;
    case ScaleAxis::kInitScale: m.init_scale *= multiplier; break;
    case ScaleAxis::kWidthDepth:
      m.width_multiplier *= multiplier;
      m.depth_multiplier *= static_cast<int>(multiplier);
      break;
  }
  return m;
}

Experiment::Experiment(ExperimentConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& d = config_.dataset;
  Rng data_rng = Rng(d.seed).derive(static_cast<std::uint64_t>(StreamPurpose::kData));
  if (d.kind == "synthetic") {
    classification_ = synthetic_classification(data_rng, d.n, d.dim, d.classes, d.separation);
  } else if (d.kind == "cifar10") {
    classification_ = load_cifar10_bin(resolve_data_path(d.path));
  } else if (d.kind == "text") {
    corpus_ = load_corpus(resolve_data_path(d.path));
  } else {
    corpus_ = make_corpus(synthetic_text(data_rng, d.text_length));
  }
  if (config_.model.arch == Arch::kResMlp) {
    if (classification_.dim() != config_.model.input_dim) {
      throw ConfigError("dataset feature dim " + std::to_string(classification_.dim()) +
                        " differs from model input_dim " + std::to_string(config_.model.input_dim));
    }
    if (classification_.num_classes > config_.model.num_classes) {
      throw ConfigError("dataset has more classes than the model outputs");
    }
  } else if (corpus_.vocab() > config_.model.vocab) {
    throw ConfigError("corpus vocabulary " + std::to_string(corpus_.vocab()) +
                      " exceeds model vocab " + std::to_string(config_.model.vocab));
  }
}

Model Experiment::build(double multiplier, std::uint64_t seed) const {
  Rng rng = Rng(seed).derive(static_cast<std::uint64_t>(StreamPurpose::kInit));
  return build_model(scaled_config(config_, multiplier), rng);
}

DataStreams Experiment::streams(std::uint64_t seed) const {
  const Rng run(seed);
  if (config_.model.arch == Arch::kResMlp) {
    return classification_streams(classification_, config_.dataset.batch_size, run);
  }
  return char_streams(corpus_, config_.dataset.seq_len, config_.dataset.batch_size, run);
}

std::vector<double> Experiment::lr_multipliers() const {
  if (config_.lr_shape == LrShape::kConstant) return {};
  return replay_scheduler(cosine_schedule(1.0, config_.steps));
}

namespace {

TrainOptions base_options(const ExperimentConfig& c, double eta0) {
  TrainOptions o;
  o.optimizer = c.optimizer;
  o.hyper = c.hyper;
  o.eta0 = eta0;
  o.steps = c.steps;
  o.cadence = c.cadence;
  o.warmup = c.warmup;
  o.beta = c.beta;
  o.estimator = c.estimator;
  return o;
}

Rng omega_rng(std::uint64_t seed) {
  return Rng(seed).derive(static_cast<std::uint64_t>(StreamPurpose::kProbeOmega));
}

}  // namespace

FslrSchedule Experiment::record(double eta0, std::uint64_t seed) const {
  TrainOptions o = base_options(config_, eta0);
  o.mode = TrainMode::kRecord;
  o.lr_multipliers = lr_multipliers();
  DataStreams s = streams(seed);
  TrainResult r = train(build(config_.multipliers.front(), seed), *s.train, *s.probe, o, omega_rng(seed));
  return r.recorded;
}

TrainResult Experiment::run_cell(double multiplier, RunMode mode, double eta0, std::uint64_t seed,
                                 const FslrSchedule* base_schedule) const {
  TrainOptions o = base_options(config_, eta0);
  o.lr_multipliers = lr_multipliers();
  Model model = build(multiplier, seed);
  FslrSchedule synthesized;
  switch (mode) {
    case RunMode::kStandard: o.mode = TrainMode::kStandard; break;
    case RunMode::kSetOnce:
    case RunMode::kPeriodic: {
      if (base_schedule == nullptr) throw std::invalid_argument(to_string(mode) + " needs a base schedule");
      o.mode = mode == RunMode::kSetOnce ? TrainMode::kSetOnce : TrainMode::kPeriodic;
      o.schedule = base_schedule;
      o.layer_map = depth_split(build(config_.multipliers.front(), seed), model);
      break;
    }
    case RunMode::kUniformSplit: {
      const Model base = build(config_.multipliers.front(), seed);
      synthesized = uniform_split_schedule(base);
      o.mode = TrainMode::kSetOnce;
      o.schedule = &synthesized;
      o.layer_map = depth_split(base, model);
      break;
    }
    case RunMode::kUniformFlat:
      synthesized = uniform_flat_schedule(model);
      o.mode = TrainMode::kSetOnce;
      o.schedule = &synthesized;
      o.layer_map = identity_map(model);
      break;
  }
  DataStreams s = streams(seed);
  return train(std::move(model), *s.train, *s.probe, o, omega_rng(seed));
}

RecordedSchedules record_base(const Experiment& experiment) {
  const auto& c = experiment.config();
  RecordedSchedules out;
  for (double eta0 : c.eta0_grid) {
    std::vector<FslrSchedule> per_seed;
    for (std::uint64_t seed : c.recording_seeds()) per_seed.push_back(experiment.record(eta0, seed));
    out.averaged.push_back(seed_average(per_seed));
    out.raw.push_back(std::move(per_seed));
  }
  return out;
}

void write_recorded(const RecordedSchedules& recorded, const ExperimentConfig& config,
                    const std::string& dir) {
  const auto& seeds = config.recording_seeds();
  for (std::size_t i = 0; i < recorded.averaged.size(); ++i) {
    const std::string stem = dir + "/eta" + std::to_string(i);
    for (std::size_t s = 0; s < recorded.raw[i].size(); ++s) {
      const std::string path = stem + "_seed" + std::to_string(seeds[s]);
      write_schedule_csv(recorded.raw[i][s], path + ".csv");
      write_schedule_sidecar(recorded.raw[i][s], path + ".json");
    }
    write_schedule_csv(recorded.averaged[i], stem + "_mean.csv");
    write_schedule_sidecar(recorded.averaged[i], stem + "_mean.json");
  }
}

std::vector<FslrSchedule> read_averaged(const ExperimentConfig& config, const std::string& dir) {
  std::vector<FslrSchedule> out;
  for (std::size_t i = 0; i < config.eta0_grid.size(); ++i) {
    const std::string stem = dir + "/eta" + std::to_string(i) + "_mean";
    FslrSchedule s = read_schedule_csv(stem + ".csv");
    read_schedule_sidecar(s, stem + ".json");
    if (s.eta0 != config.eta0_grid[i]) {
      throw ConfigError("schedule '" + stem + ".csv' was recorded at eta0 " + fmt_double(s.eta0) +
                        ", grid point is " + fmt_double(config.eta0_grid[i]));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<ResultRow> run_grid(const Experiment& experiment,
                                const std::vector<FslrSchedule>* averaged) {
  const auto& c = experiment.config();
  const bool needs = std::any_of(c.modes.begin(), c.modes.end(), needs_recorded_schedule);
  if (needs && (averaged == nullptr || averaged->size() != c.eta0_grid.size())) {
    throw std::invalid_argument("run_grid: one base schedule per eta0 is required");
  }
  std::vector<ResultRow> rows;
  for (double mult : c.multipliers) {
    for (RunMode mode : c.modes) {
      for (std::size_t e = 0; e < c.eta0_grid.size(); ++e) {
        for (std::uint64_t seed : c.seeds) {
          const auto start = std::chrono::steady_clock::now();
          const FslrSchedule* sched = needs_recorded_schedule(mode) ? &(*averaged)[e] : nullptr;
          TrainResult r = experiment.run_cell(mult, mode, c.eta0_grid[e], seed, sched);
          const double secs =
              std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          rows.push_back({c.axis, mult, mode, c.eta0_grid[e], seed, r.final_loss(c.steps),
                          r.diverged, secs});
        }
      }
    }
  }
  return rows;
}

void write_schedule_csv(const FslrSchedule& schedule, const std::string& path) {
  auto out = open_out(path);
  out << "step,layer,fslr\n";
  for (const auto& e : schedule.entries) {
    for (const auto& [name, v] : e.fslr) out << e.step << ',' << name << ',' << fmt_double(v) << '\n';
  }
}

FslrSchedule read_schedule_csv(const std::string& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != "step,layer,fslr") {
    throw std::runtime_error("'" + path + "' is not a schedule file");
  }
  FslrSchedule s;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 3) throw std::runtime_error("malformed schedule row: " + line);
    const std::size_t step = std::stoull(cells[0]);
    if (s.entries.empty() || s.entries.back().step != step) s.entries.push_back({step, {}});
    s.entries.back().fslr[cells[1]] = std::stod(cells[2]);
  }
  s.validate();
  return s;
}

void write_schedule_sidecar(const FslrSchedule& schedule, const std::string& path) {
  auto out = open_out(path);
  nlohmann::json j{{"base_config", schedule.base_config},
                   {"eta0", schedule.eta0},
                   {"seeds", schedule.seeds}};
  out << j.dump(2) << '\n';
}

void read_schedule_sidecar(FslrSchedule& schedule, const std::string& path) {
  auto in = open_in(path);
  const auto j = nlohmann::json::parse(in);
  j.at("base_config").get_to(schedule.base_config);
  schedule.eta0 = j.at("eta0").get<double>();
  schedule.seeds = j.at("seeds").get<std::size_t>();
}

void write_results_csv(const std::vector<ResultRow>& rows, const std::string& path) {
  auto out = open_out(path);
  auto timing = open_out(path + ".timing.csv");
  out << "axis,multiplier,mode,eta0,seed,final_loss,diverged\n";
  timing << "axis,multiplier,mode,eta0,seed,runtime_s\n";
  for (const auto& r : rows) {
    const std::string key = to_string(r.axis) + ',' + fmt_double(r.multiplier) + ',' +
                            to_string(r.mode) + ',' + fmt_double(r.eta0) + ',' +
                            std::to_string(r.seed);
    out << key << ',' << fmt_double(r.final_loss) << ',' << (r.diverged ? "true" : "false") << '\n';
    timing << key << ',' << fmt_double(r.runtime_s) << '\n';
  }
}

std::vector<ResultRow> read_results_csv(const std::string& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != "axis,multiplier,mode,eta0,seed,final_loss,diverged") {
    throw std::runtime_error("'" + path + "' is not a results file");
  }
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 7) throw std::runtime_error("malformed results row: " + line);
    ResultRow r;
    r.axis = parse_axis(c[0]);
    r.multiplier = std::stod(c[1]);
    r.mode = parse_mode(c[2]);
    r.eta0 = std::stod(c[3]);
    r.seed = std::stoull(c[4]);
    r.final_loss = c[5] == "nan" || c[5] == "-nan" ? std::numeric_limits<double>::quiet_NaN()
                                                   : std::stod(c[5]);
    if (c[6] != "true" && c[6] != "false") throw std::runtime_error("bad diverged flag: " + line);
    r.diverged = c[6] == "true";
    rows.push_back(r);
  }
  return rows;
}

void write_fslr_trace(const std::vector<FslrTraceRow>& rows, const std::string& path) {
  auto out = open_out(path);
  out << "step,layer,estimator,fslr\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.layer << ',' << to_string(r.estimator) << ',' << fmt_double(r.fslr)
        << '\n';
  }
}

void write_lr_trace(const std::vector<LrTraceRow>& rows, const std::string& path) {
  auto out = open_out(path);
  out << "step,layer,eta\n";
  for (const auto& r : rows) out << r.step << ',' << r.layer << ',' << fmt_double(r.eta) << '\n';
}

std::map<std::tuple<RunMode, double, double>, double> mean_losses(
    const std::vector<ResultRow>& rows) {
  std::map<std::tuple<RunMode, double, double>, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows) {
    const double v = r.diverged || !std::isfinite(r.final_loss)
                         ? std::numeric_limits<double>::infinity()
                         : r.final_loss;
    auto& [sum, n] = acc[{r.mode, r.multiplier, r.eta0}];
    sum += v;
    ++n;
  }
  std::map<std::tuple<RunMode, double, double>, double> out;
  for (const auto& [k, v] : acc) out[k] = v.first / static_cast<double>(v.second);
  return out;
}

std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("summarize: no result rows");
  std::vector<RunMode> modes;
  std::map<RunMode, std::vector<double>> mults;
  std::map<RunMode, std::set<double>> etas;
  std::map<RunMode, std::set<std::uint64_t>> seeds;
  std::map<std::tuple<RunMode, double, double, std::uint64_t>, int> seen;
  for (const auto& r : rows) {
    if (std::find(modes.begin(), modes.end(), r.mode) == modes.end()) modes.push_back(r.mode);
    auto& ml = mults[r.mode];
    if (std::find(ml.begin(), ml.end(), r.multiplier) == ml.end()) ml.push_back(r.multiplier);
    etas[r.mode].insert(r.eta0);
    seeds[r.mode].insert(r.seed);
    if (++seen[{r.mode, r.multiplier, r.eta0, r.seed}] > 1) {
      throw std::invalid_argument("summarize: duplicate cell for mode " + to_string(r.mode));
    }
  }
  for (RunMode m : modes) {
    for (double mult : mults[m]) {
      for (double e : etas[m]) {
        for (std::uint64_t s : seeds[m]) {
          if (!seen.contains({m, mult, e, s})) {
            throw std::invalid_argument("summarize: missing cell mode=" + to_string(m) +
                                        " multiplier=" + fmt_double(mult) + " eta0=" +
                                        fmt_double(e) + " seed=" + std::to_string(s));
          }
        }
      }
    }
  }
  const auto means = mean_losses(rows);
  std::vector<SummaryRow> out;
  for (RunMode m : modes) {
    const std::vector<double> grid(etas[m].begin(), etas[m].end());
    long base_index = 0;
    for (std::size_t mi = 0; mi < mults[m].size(); ++mi) {
      const double mult = mults[m][mi];
      std::size_t best = 0;
      double best_loss = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < grid.size(); ++i) {
        const double v = means.at({m, mult, grid[i]});
        if (v < best_loss) {
          best_loss = v;
          best = i;
        }
      }
      if (mi == 0) base_index = static_cast<long>(best);
      out.push_back({m, mult, grid[best], best, static_cast<long>(best) - base_index, best_loss});
    }
  }
  return out;
}

long argmin_spread(const std::vector<SummaryRow>& summary, RunMode mode) {
  long lo = std::numeric_limits<long>::max();
  long hi = std::numeric_limits<long>::min();
  for (const auto& r : summary) {
    if (r.mode != mode) continue;
    lo = std::min(lo, static_cast<long>(r.argmin_index));
    hi = std::max(hi, static_cast<long>(r.argmin_index));
  }
  if (lo > hi) throw std::invalid_argument("argmin_spread: mode not in summary");
  return hi - lo;
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::string& path) {
  auto out = open_out(path);
  out << "mode,multiplier,argmin_eta0,argmin_index,shift,best_loss\n";
  for (const auto& r : rows) {
    out << to_string(r.mode) << ',' << fmt_double(r.multiplier) << ',' << fmt_double(r.argmin_eta0)
        << ',' << r.argmin_index << ',' << r.shift << ',' << fmt_double(r.best_loss) << '\n';
  }
}

}  // namespace fslr
