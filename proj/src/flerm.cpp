// SPDX-License-Identifier: Apache-2.0
#include "fslr/flerm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace fslr {

namespace {

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

bool all_finite(const Model& m) {
  return std::all_of(m.parameters().begin(), m.parameters().end(),
                     [](const Parameter& p) { return p.value.all_finite(); });
}

}  // namespace

void FslrSchedule::validate() const {
  if (entries.empty()) throw std::invalid_argument("schedule has no entries");
  const auto& first = entries.front().fslr;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (i > 0 && e.step <= entries[i - 1].step) {
      throw std::invalid_argument("schedule steps must be strictly increasing");
    }
    if (e.fslr.size() != first.size()) {
      throw std::invalid_argument("schedule entry at step " + std::to_string(e.step) +
                                  " covers a different layer set");
    }
    for (const auto& [name, v] : e.fslr) {
      if (!first.contains(name)) {
        throw std::invalid_argument("schedule entry at step " + std::to_string(e.step) +
                                    " has unexpected layer '" + name + "'");
      }
      if (!positive_finite(v)) {
        throw std::invalid_argument("schedule value for '" + name + "' at step " +
                                    std::to_string(e.step) + " is not positive and finite");
      }
    }
  }
}

const ScheduleEntry& FslrSchedule::lookup(std::size_t step) const {
  auto it = std::upper_bound(entries.begin(), entries.end(), step,
                             [](std::size_t s, const ScheduleEntry& e) { return s < e.step; });
  if (it == entries.begin()) {
    throw std::out_of_range("schedule has no entry at or before step " + std::to_string(step));
  }
  return *std::prev(it);
}

std::vector<std::string> FslrSchedule::layers() const {
  std::vector<std::string> out;
  if (entries.empty()) return out;
  for (const auto& [name, v] : entries.front().fslr) out.push_back(name);
  return out;
}

FslrSchedule seed_average(std::span<const FslrSchedule> schedules) {
  if (schedules.empty()) throw std::invalid_argument("seed_average: no schedules");
  const FslrSchedule& ref = schedules.front();
  FslrSchedule out = ref;
  out.seeds = 0;
  for (const auto& s : schedules) {
    if (s.entries.size() != ref.entries.size()) {
      throw std::invalid_argument("seed_average: schedules have different lengths");
    }
    for (std::size_t i = 0; i < s.entries.size(); ++i) {
      if (s.entries[i].step != ref.entries[i].step) {
        throw std::invalid_argument("seed_average: schedules have different steps");
      }
      if (s.entries[i].fslr.size() != ref.entries[i].fslr.size()) {
        throw std::invalid_argument("seed_average: schedules have different layers");
      }
      for (const auto& [name, v] : s.entries[i].fslr) {
        if (!ref.entries[i].fslr.contains(name)) {
          throw std::invalid_argument("seed_average: unexpected layer '" + name + "'");
        }
      }
    }
    out.seeds += s.seeds;
  }
  const double n = static_cast<double>(schedules.size());
  for (std::size_t i = 0; i < out.entries.size(); ++i) {
    for (auto& [name, v] : out.entries[i].fslr) {
      double sum = 0.0;
      for (const auto& s : schedules) sum += s.entries[i].fslr.at(name);
      v = sum / n;
    }
  }
  return out;
}

LayerMap identity_map(const Model& model) {
  LayerMap out;
  for (const auto& p : model.parameters()) out[p.name] = {p.name, 1.0};
  return out;
}

LayerMap depth_split(const Model& base, const Model& scaled) {
  const std::size_t lb = base.config().num_blocks();
  const std::size_t ls = scaled.config().num_blocks();
  if (lb == 0 || ls % lb != 0) {
    throw ConfigError("depth_split: scaled block count " + std::to_string(ls) +
                      " is not an integer multiple of base block count " + std::to_string(lb));
  }
  const std::size_t m = ls / lb;
  LayerMap out;
  for (const auto& p : scaled.parameters()) {
    LayerShare share;
    if (p.block < 0) {
      share = {p.name, 1.0};
    } else {
      const std::size_t base_block = static_cast<std::size_t>(p.block) / m;
      share = {"block" + std::to_string(base_block) + "." + p.local, 1.0 / static_cast<double>(m)};
    }
    if (!base.has_param(share.base)) {
      throw ConfigError("depth_split: scaled layer '" + p.name + "' has no base layer '" +
                        share.base + "'");
    }
    out[p.name] = share;
  }
  return out;
}

LrPlan set_lrs(const FslrSchedule& schedule, const LayerMap& map, const FslrEstimate& current,
               double eta0, std::size_t step) {
  const ScheduleEntry& entry = schedule.lookup(step);
  LrPlan plan;
  plan.base_lr = eta0;
  for (const auto& [name, share] : map) {
    const double cur = current.at(name);
    if (!positive_finite(cur)) throw DegenerateLayerError(name);
    auto it = entry.fslr.find(share.base);
    if (it == entry.fslr.end()) {
      throw std::out_of_range("schedule has no layer '" + share.base + "' (needed by '" + name +
                              "')");
    }
    plan.rates[name] = eta0 * share.fraction * it->second / cur;
  }
  return plan;
}

std::vector<double> replay_scheduler(std::span<const double> base_lr) {
  if (base_lr.empty()) throw std::invalid_argument("replay_scheduler: empty trace");
  const double lr0 = base_lr.front();
  if (!positive_finite(lr0)) throw std::domain_error("replay_scheduler: base lr(0) must be positive");
  std::vector<double> out;
  out.reserve(base_lr.size());
  for (double lr : base_lr) out.push_back(lr / lr0);
  return out;
}

std::vector<double> cosine_schedule(double lr0, std::size_t total_steps) {
  std::vector<double> out(total_steps);
  const double t_max = static_cast<double>(total_steps);
  for (std::size_t t = 0; t < total_steps; ++t) {
    out[t] = lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / t_max));
  }
  return out;
}

namespace {

FslrSchedule flat_schedule(const Model& model) {
  FslrSchedule s;
  s.base_config = model.config();
  ScheduleEntry e;
  const double v = 1.0 / static_cast<double>(model.parameters().size());
  for (const auto& p : model.parameters()) e.fslr[p.name] = v;
  s.entries.push_back(std::move(e));
  return s;
}

}  // namespace

FslrSchedule uniform_split_schedule(const Model& base) { return flat_schedule(base); }

FslrSchedule uniform_flat_schedule(const Model& scaled) { return flat_schedule(scaled); }

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kStandard: return "standard";
    case TrainMode::kRecord: return "record";
    case TrainMode::kSetOnce: return "flerm-set-once";
    case TrainMode::kPeriodic: return "flerm-periodic";
  }
  return "?";
}

double TrainResult::final_loss(std::size_t steps) const {
  if (losses.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (diverged) return losses.back();
  const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(200, steps / 2));
  const std::size_t n = std::min(window, losses.size());
  double s = 0.0;
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) s += losses[i];
  return s / static_cast<double>(n);
}

TrainResult train(Model model, BatchSource& train_data, BatchSource& probe_data,
                  const TrainOptions& options, Rng omega_rng) {
  const bool sets = options.mode == TrainMode::kSetOnce || options.mode == TrainMode::kPeriodic;
  if (sets && options.schedule == nullptr) {
    throw std::invalid_argument(to_string(options.mode) + " requires a base schedule");
  }
  if (options.cadence == 0) throw std::invalid_argument("cadence must be at least 1");
  if (!options.lr_multipliers.empty() && options.lr_multipliers.size() < options.steps) {
    throw std::invalid_argument("lr multiplier trace shorter than the run");
  }
  const LayerMap layer_map = options.layer_map.empty() ? identity_map(model) : options.layer_map;

  const std::vector<std::string> names = model.names();
  OptimState opt(options.optimizer, options.hyper);
  LrPlan plan = LrPlan::uniform(names, options.eta0);
  FslrEstimator estimator(model, options.beta, options.estimator);

  TrainResult out(model);
  if (options.mode == TrainMode::kRecord) {
    out.recorded.base_config = model.config();
    out.recorded.eta0 = options.eta0;
  }

  auto multiplier = [&](std::size_t t) {
    return options.lr_multipliers.empty() ? 1.0 : options.lr_multipliers[t];
  };
  auto measured = [&](std::size_t t) {
    if (t % options.cadence != 0) return false;
    switch (options.mode) {
      case TrainMode::kRecord:
      case TrainMode::kPeriodic: return true;
      case TrainMode::kSetOnce: return t == 0 || options.trace_fslr;
      case TrainMode::kStandard: return options.trace_fslr;
    }
    return false;
  };

  for (std::size_t t = 0; t < options.steps; ++t) {
    const Batch batch = train_data.next();
    const double mult = multiplier(t);
    GradMap grads;
    double loss = 0.0;
    {
      Tape tape;
      Var l = training_loss(model, tape, batch.inputs, batch.targets);
      loss = l.value().item();
      if (!std::isfinite(loss)) {
        out.diverged = true;
        out.divergence_reason = "non-finite loss at step " + std::to_string(t);
        break;
      }
      grads = tape.backward(l);
    }
    out.losses.push_back(loss);

    if (!measured(t)) {
      opt.step(model, grads, plan, mult);
      continue;
    }

    const Model before_model = model;
    const OptimState before_opt = opt;
    const ParamValues before = model.values();
    opt.step(model, grads, plan, mult);
    if (!all_finite(model)) {
      out.diverged = true;
      out.divergence_reason = "non-finite parameters at step " + std::to_string(t);
      break;
    }
    const ParamValues unit = unit_deltas(before, model.values(), plan, mult);
    const std::size_t samples = t == 0 ? std::max<std::size_t>(1, options.warmup) : 1;
    for (std::size_t i = 0; i < samples; ++i) {
      const Batch probe = probe_data.next();
      // dphi/dW at the weights the step was taken from.
      const ProbeSample s = sample_phi(before_model, probe.inputs, omega_rng);
      estimator.observe(unit, s.grads);
    }

    FslrEstimate est;
    try {
      est = estimator.estimate();
    } catch (const DegenerateLayerError& e) {
      // A layer that stops moving mid-run ends the run; at step 0 or while
      // recording it is a configuration problem and propagates.
      if (t == 0 || options.mode == TrainMode::kRecord) throw;
      out.diverged = true;
      out.divergence_reason = std::string(e.what()) + " at step " + std::to_string(t);
      break;
    }
    for (const auto& [name, v] : est.values) {
      out.fslr_trace.push_back({t, name, est.kind, v});
    }
    if (options.mode == TrainMode::kRecord) {
      out.recorded.entries.push_back({t, est.values});
    }

    const bool revise =
        options.mode == TrainMode::kPeriodic || (options.mode == TrainMode::kSetOnce && t == 0);
    if (revise) {
      plan = set_lrs(*options.schedule, layer_map, est, options.eta0, t);
      ++out.plan_revisions;
      model = before_model;
      opt = before_opt;
      opt.step(model, grads, plan, mult);
    }
    for (const auto& name : names) out.lr_trace.push_back({t, name, plan.at(name) * mult});
  }
  if (!out.diverged && !all_finite(model)) {
    out.diverged = true;
    out.divergence_reason = "non-finite parameters after the last step";
  }
  out.final_plan = plan;
  out.model = std::move(model);
  return out;
}

}  // namespace fslr
