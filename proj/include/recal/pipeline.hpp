#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "recal/cycles.hpp"
#include "recal/distrib.hpp"
#include "recal/ecu.hpp"
#include "recal/errors.hpp"
#include "recal/io.hpp"
#include "recal/kvconfig.hpp"
#include "recal/maps.hpp"
#include "recal/plant.hpp"
#include "recal/rl.hpp"

// Calibration round orchestration: experience generation, training,
// validation, best-agent selection, and distillation back into the map.
namespace recal::pipeline {

// ---- validation bookkeeping ----

struct ValidationRecord {
  int iteration = 0;        // training iterations completed when validated
  double val_return = 0.0;  // deterministic (exploration-free) episode return
  double entropy = 0.0;
  double nox_g = 0.0;
  double soot_g = 0.0;
  double mean_hp_egr = 0.0;  // mean valve position over the episode, %
  double mean_lp_egr = 0.0;
  bool episode_aborted = false;
  rl::PolicyParameters agent;  // snapshot of the policy that was validated
  maps::Grid2 visits;          // visitation histogram up to this point
};

// Highest validation return wins; ties fall to the lower-entropy (more
// settled) agent, then to the earlier iteration.
inline size_t select_best_agent(const std::vector<ValidationRecord>& records) {
  if (records.empty()) throw ContractError("select_best_agent: no validation records");
  size_t best = 0;
  for (size_t k = 1; k < records.size(); ++k) {
    if (records[k].val_return > records[best].val_return ||
        (records[k].val_return == records[best].val_return &&
         records[k].entropy < records[best].entropy))
      best = k;
  }
  return best;
}

// ---- stopping rule ----

struct StoppingConfig {
  int window = 5;                     // validation records examined
  double entropy_slope_tol = 0.02;    // nats per validation step
  double return_std_threshold = 10.0; // reward units

  void validate() const {
    if (window < 2) throw ConfigError("stopping window must be >= 2");
    if (entropy_slope_tol < 0.0 || return_std_threshold < 0.0)
      throw ConfigError("stopping thresholds must be >= 0");
  }
};

struct StopDecision {
  bool stop = false;
  std::string reason;
};

// Stops only when both degradation indicators are present in the trailing
// window: the entropy trend is rising (least-squares slope beyond tolerance)
// and the validation return has become unstable (population std above its
// threshold). Either alone is not enough.
inline StopDecision stopping_rule(const std::vector<ValidationRecord>& history,
                                  const StoppingConfig& cfg) {
  cfg.validate();
  if (history.size() < static_cast<size_t>(cfg.window)) return {};

  size_t n = static_cast<size_t>(cfg.window);
  size_t first = history.size() - n;
  double mean_x = (n - 1) / 2.0;
  double mean_h = 0.0, mean_r = 0.0;
  for (size_t k = 0; k < n; ++k) {
    mean_h += history[first + k].entropy;
    mean_r += history[first + k].val_return;
  }
  mean_h /= n;
  mean_r /= n;

  double sxy = 0.0, sxx = 0.0, var_r = 0.0;
  for (size_t k = 0; k < n; ++k) {
    double dx = k - mean_x;
    sxy += dx * (history[first + k].entropy - mean_h);
    sxx += dx * dx;
    double dr = history[first + k].val_return - mean_r;
    var_r += dr * dr;
  }
  double slope = sxy / sxx;
  double ret_std = std::sqrt(var_r / n);

  if (slope > cfg.entropy_slope_tol && ret_std > cfg.return_std_threshold)
    return {true, "entropy rising (slope " + text::format_double(slope) +
                      "/step) with unstable returns (std " + text::format_double(ret_std) + ")"};
  return {};
}

// ---- visitation histogram ----

struct VisitHistogram {
  maps::Grid2 counts;
};

inline VisitHistogram make_histogram(const maps::LookupMap2D& map) {
  return {maps::Grid2(map.values().nx(), map.values().ny())};
}

// Every experience bumps the four support points enclosing its operating
// point (its bilinear footprint). Aborted episodes never train, so they do
// not count here either.
inline void accumulate_visits(VisitHistogram& hist, const maps::LookupMap2D& map,
                              const rl::ObsNorm& norm, const std::vector<rl::Episode>& episodes) {
  if (!hist.counts.same_shape(map.values()))
    throw ShapeError("visit histogram shape does not match the map");
  for (const auto& ep : episodes) {
    if (ep.aborted) continue;
    for (const auto& e : ep.steps) {
      auto [n_eng, m_inj] = norm.denormalize(e.s);
      auto [i, fx] = map.x_axis().locate(n_eng);
      auto [j, fy] = map.y_axis().locate(m_inj);
      (void)fx;
      (void)fy;
      hist.counts.at(i, j) += 1.0;
      hist.counts.at(i, j + 1) += 1.0;
      hist.counts.at(i + 1, j) += 1.0;
      hist.counts.at(i + 1, j + 1) += 1.0;
    }
  }
}

// ---- distillation ----

struct DistillConfig {
  double visit_threshold = 10.0;  // footprint hits a support point needs
  int probe_per_cell = 8;         // probe-grid density per cell and axis

  void validate() const {
    if (visit_threshold < 0.0) throw ConfigError("visit threshold must be >= 0");
    if (probe_per_cell < 1) throw ConfigError("probe density must be >= 1");
  }
};

struct DistillResult {
  maps::Grid2 deltas;          // requested per-cell change (pre-clamp)
  maps::LookupMap2D map_after;
  maps::MapDiffReport report;  // applied change + clip audit
  double quantization_loss = 0.0;
};

using MeanFn = std::function<double(double x, double y)>;

// Evaluates a mean function at every sufficiently visited support point and
// adds the (clamped) result to the map. Quantization loss is the worst
// disagreement between the function and the bilinear delta surface over a
// dense probe grid, measured only across fully visited cells — elsewhere the
// map intentionally ignores the function.
inline DistillResult distill_core(const MeanFn& mean, const maps::LookupMap2D& map,
                                  const VisitHistogram& visits, const maps::DeltaClamp& clamp,
                                  const DistillConfig& cfg) {
  cfg.validate();
  if (!visits.counts.same_shape(map.values()))
    throw ShapeError("visit histogram shape does not match the map");

  const auto& X = map.x_axis();
  const auto& Y = map.y_axis();
  auto visited = [&](size_t i, size_t j) { return visits.counts.at(i, j) >= cfg.visit_threshold; };

  DistillResult out;
  out.deltas = maps::Grid2(X.size(), Y.size());
  for (size_t i = 0; i < X.size(); ++i)
    for (size_t j = 0; j < Y.size(); ++j)
      out.deltas.at(i, j) = visited(i, j) ? mean(X[i], Y[j]) : 0.0;

  auto [after, report] = maps::apply_deltas(map, out.deltas, clamp);
  out.map_after = std::move(after);
  out.report = std::move(report);

  maps::LookupMap2D delta_surface(X, Y, out.report.delta, map.name() + ".delta");
  const int P = cfg.probe_per_cell;
  double loss = 0.0;
  for (size_t ci = 0; ci + 1 < X.size(); ++ci)
    for (size_t cj = 0; cj + 1 < Y.size(); ++cj) {
      if (!(visited(ci, cj) && visited(ci + 1, cj) && visited(ci, cj + 1) &&
            visited(ci + 1, cj + 1)))
        continue;
      for (int u = 0; u <= P; ++u)
        for (int v = 0; v <= P; ++v) {
          double x = X[ci] + (X[ci + 1] - X[ci]) * u / P;
          double y = Y[cj] + (Y[cj + 1] - Y[cj]) * v / P;
          loss = std::max(loss, std::abs(mean(x, y) - maps::interpolate(delta_surface, x, y)));
        }
    }
  out.quantization_loss = loss;
  return out;
}

// Policy-backed distillation. The normalization window must span the map
// axes, otherwise distinct support points would alias to one observation.
inline DistillResult distill_to_map(const rl::PolicyParameters& agent,
                                    const maps::LookupMap2D& map, const VisitHistogram& visits,
                                    const maps::DeltaClamp& clamp, const rl::ObsNorm& norm,
                                    const DistillConfig& cfg) {
  if (!(norm.n_lo < norm.n_hi) || !(norm.m_lo < norm.m_hi))
    throw ContractError("observation normalization window is degenerate");
  if (norm.n_lo > map.x_axis().front() || norm.n_hi < map.x_axis().back() ||
      norm.m_lo > map.y_axis().front() || norm.m_hi < map.y_axis().back())
    throw ContractError(
        "observation normalization window does not span the map axes; "
        "support points outside it would alias");
  MeanFn mean = [&agent, &norm](double x, double y) {
    return rl::policy_forward(agent, norm.normalize(x, y)).first;
  };
  return distill_core(mean, map, visits, clamp, cfg);
}

// ---- particle swarm optimization ----

struct PsoConfig {
  int particles = 40;
  int iterations = 300;
  double inertia = 0.72;
  double cognitive = 1.49;
  double social = 1.49;
  std::uint64_t seed = 1;

  void validate() const {
    if (particles < 2) throw ConfigError("pso needs at least 2 particles");
    if (iterations < 1) throw ConfigError("pso needs at least 1 iteration");
    if (!(inertia >= 0.0 && inertia < 1.0)) throw ConfigError("pso inertia must be in [0, 1)");
    if (cognitive < 0.0 || social < 0.0)
      throw ConfigError("pso acceleration coefficients must be >= 0");
  }
};

struct PsoResult {
  std::vector<double> best;
  double best_value = std::numeric_limits<double>::infinity();
  int evaluations = 0;
};

// Global-best PSO with box constraints; deterministic for a fixed seed.
inline PsoResult pso_minimize(const std::function<double(const std::vector<double>&)>& f,
                              const std::vector<double>& lo, const std::vector<double>& hi,
                              const PsoConfig& cfg) {
  cfg.validate();
  if (lo.empty() || lo.size() != hi.size())
    throw ContractError("pso bounds need matching non-empty lo/hi");
  for (size_t d = 0; d < lo.size(); ++d)
    if (!std::isfinite(lo[d]) || !std::isfinite(hi[d]) || !(lo[d] < hi[d]))
      throw ConfigError("pso bounds must be finite with lo < hi");

  const size_t dim = lo.size();
  Rng rng(mix_seed(cfg.seed, 0x9507));
  PsoResult out;

  std::vector<std::vector<double>> x(cfg.particles, std::vector<double>(dim));
  std::vector<std::vector<double>> v(cfg.particles, std::vector<double>(dim));
  std::vector<std::vector<double>> pbest = x;
  std::vector<double> pbest_f(cfg.particles);

  for (int p = 0; p < cfg.particles; ++p) {
    for (size_t d = 0; d < dim; ++d) {
      double range = hi[d] - lo[d];
      x[p][d] = rng.uniform(lo[d], hi[d]);
      v[p][d] = rng.uniform(-0.1 * range, 0.1 * range);
    }
    pbest[p] = x[p];
    pbest_f[p] = f(x[p]);
    ++out.evaluations;
    if (pbest_f[p] < out.best_value) {
      out.best_value = pbest_f[p];
      out.best = x[p];
    }
  }

  for (int it = 0; it < cfg.iterations; ++it) {
    for (int p = 0; p < cfg.particles; ++p) {
      for (size_t d = 0; d < dim; ++d) {
        double r1 = rng.uniform(), r2 = rng.uniform();
        v[p][d] = cfg.inertia * v[p][d] + cfg.cognitive * r1 * (pbest[p][d] - x[p][d]) +
                  cfg.social * r2 * (out.best[d] - x[p][d]);
        x[p][d] += v[p][d];
        // Reflecting walls: without the bounce the swarm can collectively
        // pin a coordinate to a box face and lose it for good.
        if (x[p][d] < lo[d] || x[p][d] > hi[d]) {
          x[p][d] = std::clamp(x[p][d], lo[d], hi[d]);
          v[p][d] = -0.5 * v[p][d];
        }
      }
      double fe = f(x[p]);
      ++out.evaluations;
      if (fe < pbest_f[p]) {
        pbest_f[p] = fe;
        pbest[p] = x[p];
      }
      if (fe < out.best_value) {
        out.best_value = fe;
        out.best = x[p];
      }
    }
  }
  return out;
}

// Behavior-matching fit: pick controller parameters minimizing mean squared
// error against recorded (observation, desired output) pairs.
using ControllerFn =
    std::function<double(const std::vector<double>& params, const std::vector<double>& obs)>;
using BehaviorDataset = std::vector<std::pair<std::vector<double>, double>>;

inline PsoResult pso_fit(const ControllerFn& controller, const BehaviorDataset& dataset,
                         const std::vector<double>& lo, const std::vector<double>& hi,
                         const PsoConfig& cfg) {
  if (dataset.empty()) throw ContractError("pso_fit: empty behavior dataset");
  auto objective = [&](const std::vector<double>& params) {
    double acc = 0.0;
    for (const auto& [obs, target] : dataset) {
      double e = controller(params, obs) - target;
      acc += e * e;
    }
    return acc / dataset.size();
  };
  return pso_minimize(objective, lo, hi, cfg);
}

// ---- Pareto reporting ----

struct ParetoRecord {
  double nox_g = 0.0;
  double soot_g = 0.0;
  double ret = 0.0;
};

struct ParetoReport {
  std::vector<ParetoRecord> points;    // every record, unchanged
  std::vector<ParetoRecord> frontier;  // non-dominated under (NOx down, soot down)
};

inline ParetoReport pareto_report(const std::vector<ParetoRecord>& records) {
  if (records.empty()) throw ContractError("pareto_report: no records");
  ParetoReport out;
  out.points = records;
  for (const auto& p : records) {
    bool dominated = false;
    for (const auto& q : records) {
      if (q.nox_g <= p.nox_g && q.soot_g <= p.soot_g &&
          (q.nox_g < p.nox_g || q.soot_g < p.soot_g)) {
        dominated = true;
        break;
      }
    }
    if (dominated) continue;
    bool duplicate = false;
    for (const auto& kept : out.frontier)
      duplicate |= kept.nox_g == p.nox_g && kept.soot_g == p.soot_g;
    if (!duplicate) out.frontier.push_back(p);
  }
  std::sort(out.frontier.begin(), out.frontier.end(), [](const auto& a, const auto& b) {
    return a.nox_g != b.nox_g ? a.nox_g < b.nox_g : a.soot_g < b.soot_g;
  });
  return out;
}

// ---- round configuration ----

struct PipelineConfig {
  int rounds = 3;
  int iterations = 40;             // PPO updates per round
  int cadence = 10;                // validate every n-th iteration
  int episodes_per_iteration = 8;
  std::string train_cycle = "demo_60s";
  std::string validation_cycle = "demo_60s";
  std::uint64_t master_seed = 1;
  bool warm_start = false;         // default: fresh agent each round
  int agent_period_steps = 10;

  maps::DeltaClamp clamp{60.0, 0.15};
  rl::RewardWeights weights;
  rl::TrainConfig train;
  StoppingConfig stopping;
  DistillConfig distill;
  rl::ObsNorm obs_norm;
  cycles::DriverConfig driver;

  void validate() const {
    if (rounds < 1) throw ConfigError("pipeline rounds must be >= 1");
    if (iterations < 1) throw ConfigError("pipeline iterations must be >= 1");
    if (cadence < 1) throw ConfigError("validation cadence must be >= 1");
    if (episodes_per_iteration < 1) throw ConfigError("episodes per iteration must be >= 1");
    if (agent_period_steps < 1) throw ConfigError("agent period must be >= 1");
    clamp.validate();
    weights.validate();
    train.validate();
    stopping.validate();
    distill.validate();
    driver.validate();
  }

  cycles::RunOptions episode_options() const {
    cycles::RunOptions opt;
    opt.agent_period_steps = agent_period_steps;
    opt.weights = weights;
    opt.obs_norm = obs_norm;
    opt.driver = driver;
    return opt;
  }
};

// ---- environment handles ----

// Minions for one round, already holding the round's map. `shutdown` must be
// safe to call once after the transports are closed.
struct MinionSet {
  std::vector<std::shared_ptr<distrib::Transport>> transports;
  std::function<void()> shutdown;
};

using MinionFactory = std::function<MinionSet(const maps::LookupMap2D&)>;

struct Environment {
  cycles::CycleLibrary library;
  ecu::EcuConfig ecu_cfg;
  plant::PlantConfig plant_cfg;
  MinionFactory minions;  // null or empty result -> in-process generation
  distrib::DispatchOptions dispatch;
};

inline distrib::EpisodeRunner make_runner(const Environment& env, const maps::LookupMap2D& map,
                                          const cycles::RunOptions& opts) {
  auto source = cycles::make_episode_source(env.library, env.ecu_cfg, map, env.plant_cfg, opts);
  return [source](const distrib::msg::RunEpisodes& req, const rl::PolicyParameters& policy,
                  bool explore) { return source(req.cycle_id, req.count, req.seed, policy, explore); };
}

// In-process execution of a plan, stamping episodes exactly like a serving
// minion does, so local and distributed runs merge to identical batches.
inline std::vector<rl::Episode> run_plan(const distrib::EpisodeRunner& runner,
                                         const distrib::Plan& plan,
                                         const rl::PolicyParameters& policy) {
  std::vector<rl::Episode> out;
  for (const auto& item : plan.items) {
    distrib::msg::RunEpisodes req{item.id, item.count, item.cycle_id, item.seed};
    auto eps = runner(req, policy, plan.explore);
    for (auto& ep : eps) {
      ep.work_item_id = item.id;
      ep.cycle_id = item.cycle_id;
      ep.policy_version = policy.version;
      out.push_back(std::move(ep));
    }
  }
  return out;
}

// Spin up n in-process minions per round, each serving episodes from a fresh
// copy of the round's environment.
inline MinionFactory make_local_minions(int n, cycles::CycleLibrary library,
                                        ecu::EcuConfig ecu_cfg, plant::PlantConfig plant_cfg,
                                        cycles::RunOptions opts) {
  if (n < 1) throw ConfigError("minion count must be >= 1");
  Environment proto{std::move(library), std::move(ecu_cfg), plant_cfg, nullptr, {}};
  return [n, proto = std::move(proto), opts](const maps::LookupMap2D& map) {
    MinionSet set;
    auto threads = std::make_shared<std::vector<std::thread>>();
    for (int k = 0; k < n; ++k) {
      auto pair = distrib::make_inproc_pair();
      std::shared_ptr<distrib::Transport> master_side = std::move(pair.first);
      std::shared_ptr<distrib::Transport> minion_side = std::move(pair.second);
      auto runner = make_runner(proto, map, opts);
      threads->emplace_back(
          [minion_side, runner] { distrib::serve_minion(*minion_side, runner); });
      set.transports.push_back(master_side);
    }
    set.shutdown = [threads, transports = set.transports] {
      for (const auto& t : transports) t->close();
      for (auto& th : *threads)
        if (th.joinable()) th.join();
    };
    return set;
  };
}

// ---- one calibration round ----

struct RoundResult {
  int round_index = 0;
  maps::LookupMap2D map_before;
  maps::LookupMap2D map_after;
  maps::MapDiffReport diff;
  double quantization_loss = 0.0;
  std::vector<rl::TrainStats> training;        // one entry per iteration
  std::vector<ValidationRecord> validations;   // cadence records + final
  size_t best_index = 0;
  double best_return = 0.0;
  rl::PolicyParameters best_agent;
  std::vector<ParetoRecord> pareto;            // one point per validation
  bool stopped_early = false;
  bool training_aborted = false;  // divergence abort, not a benign entropy stop
  std::string stop_reason;
};

// Train -> validate -> select -> distill, on a frozen map_in. On training
// divergence the round stops with the last good agent still selectable.
inline RoundResult run_round(const PipelineConfig& cfg, const Environment& env,
                             const maps::LookupMap2D& map_in, int round_index,
                             const rl::PolicyParameters* warm_start = nullptr) {
  cfg.validate();
  const std::uint64_t round_seed = mix_seed(cfg.master_seed, static_cast<std::uint64_t>(round_index));

  rl::TrainConfig tc = cfg.train;
  tc.seed = mix_seed(round_seed, 0x7261);
  rl::PolicyParameters policy = warm_start ? *warm_start : rl::make_params(tc);

  RoundResult res;
  res.round_index = round_index;
  res.map_before = map_in;

  MinionSet minions;
  if (env.minions) minions = env.minions(map_in);
  const bool distributed = !minions.transports.empty();
  struct Closer {
    MinionSet& set;
    ~Closer() {
      if (set.shutdown) set.shutdown();
    }
  } closer{minions};

  distrib::EpisodeRunner local_runner;
  if (!distributed) local_runner = make_runner(env, map_in, cfg.episode_options());

  VisitHistogram visits = make_histogram(map_in);

  auto validate_now = [&](int after_iterations) {
    ValidationRecord rec;
    rec.iteration = after_iterations;
    cycles::RunOptions vopt = cfg.episode_options();
    vopt.explore = false;
    vopt.seed = 0;
    double hp = 0.0, lp = 0.0;
    size_t steps = 0;
    cycles::TraceSink sink = [&](const cycles::StepTrace& tr) {
      hp += tr.command.u_hp_egr;
      lp += tr.command.u_lp_egr;
      ++steps;
    };
    auto ep = cycles::run_episode(env.library.find(cfg.validation_cycle),
                                  ecu::VirtualEcu(env.ecu_cfg, map_in), env.plant_cfg, &policy,
                                  vopt, sink);
    rec.val_return = ep.cumulative_return;
    rec.entropy = rl::entropy(policy, {rl::Observation{}});
    for (const auto& d : ep.diag) {
      rec.nox_g += d.nox_mg / 1000.0;
      rec.soot_g += d.soot_mg / 1000.0;
    }
    rec.mean_hp_egr = steps ? hp / steps : 0.0;
    rec.mean_lp_egr = steps ? lp / steps : 0.0;
    rec.episode_aborted = ep.aborted;
    rec.agent = policy;
    rec.visits = visits.counts;
    return rec;
  };

  int done = 0;
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    auto plan = distrib::make_plan(cfg.train_cycle, cfg.episodes_per_iteration,
                                   mix_seed(round_seed, static_cast<std::uint64_t>(iter)), true);
    std::vector<rl::Episode> episodes;
    if (distributed) {
      std::vector<distrib::Transport*> ptrs;
      for (const auto& t : minions.transports) ptrs.push_back(t.get());
      episodes = distrib::master_dispatch(ptrs, policy, plan, env.dispatch).episodes;
    } else {
      episodes = run_plan(local_runner, plan, policy);
    }
    accumulate_visits(visits, map_in, cfg.obs_norm, episodes);

    auto [next, stats] = rl::ppo_update(policy, episodes, tc);
    policy = std::move(next);  // unchanged when the update aborted
    res.training.push_back(stats);
    ++done;
    if (stats.aborted) {
      res.stopped_early = true;
      res.training_aborted = true;
      res.stop_reason = "training aborted: " + stats.note;
      break;
    }
    if ((iter + 1) % cfg.cadence == 0) {
      res.validations.push_back(validate_now(iter + 1));
      auto decision = stopping_rule(res.validations, cfg.stopping);
      if (decision.stop) {
        res.stopped_early = true;
        res.stop_reason = decision.reason;
        break;
      }
    }
  }
  res.validations.push_back(validate_now(done));  // final validation, always

  res.best_index = select_best_agent(res.validations);
  const ValidationRecord& best = res.validations[res.best_index];
  res.best_agent = best.agent;
  res.best_return = best.val_return;

  auto distilled = distill_to_map(best.agent, map_in, VisitHistogram{best.visits}, cfg.clamp,
                                  cfg.obs_norm, cfg.distill);
  res.map_after = std::move(distilled.map_after);
  res.diff = std::move(distilled.report);
  res.quantization_loss = distilled.quantization_loss;

  for (const auto& rec : res.validations)
    res.pareto.push_back({rec.nox_g, rec.soot_g, rec.val_return});
  return res;
}

struct CalibrationRun {
  std::vector<RoundResult> rounds;
  maps::LookupMap2D final_map;
};

inline CalibrationRun run_calibration(const PipelineConfig& cfg, const Environment& env,
                                      const maps::LookupMap2D& map0) {
  cfg.validate();
  CalibrationRun out;
  maps::LookupMap2D map = map0;
  std::optional<rl::PolicyParameters> carry;
  for (int r = 1; r <= cfg.rounds; ++r) {
    auto res = run_round(cfg, env, map, r, cfg.warm_start && carry ? &*carry : nullptr);
    map = res.map_after;
    carry = res.best_agent;
    out.rounds.push_back(std::move(res));
  }
  out.final_map = std::move(map);
  return out;
}

// ---- artifacts ----

inline std::string validations_csv(const std::vector<ValidationRecord>& records) {
  io::CsvWriter csv({"iteration", "val_return", "entropy", "nox_g", "soot_g", "mean_hp_egr",
                     "mean_lp_egr"});
  for (const auto& r : records)
    csv.row({static_cast<double>(r.iteration), r.val_return, r.entropy, r.nox_g, r.soot_g,
             r.mean_hp_egr, r.mean_lp_egr});
  return csv.str();
}

inline std::string training_csv(const std::vector<rl::TrainStats>& stats) {
  io::CsvWriter csv(rl::stats_header());
  for (size_t i = 0; i < stats.size(); ++i) csv.row(rl::stats_row(static_cast<int>(i) + 1, stats[i]));
  return csv.str();
}

inline std::string pareto_csv(const std::vector<ParetoRecord>& records) {
  io::CsvWriter csv({"nox_g", "soot_g", "return"});
  for (const auto& r : records) csv.row({r.nox_g, r.soot_g, r.ret});
  return csv.str();
}

inline std::string diff_report_text(const RoundResult& res) {
  auto line = [](const std::string& k, const std::string& v) { return k + ": " + v + "\n"; };
  std::string out;
  out += line("round", std::to_string(res.round_index));
  out += line("best_validation_index", std::to_string(res.best_index));
  out += line("best_validation_return", text::format_double(res.best_return));
  out += line("stopped_early", res.stopped_early ? "true" : "false");
  if (!res.stop_reason.empty()) out += line("stop_reason", res.stop_reason);
  out += line("cells_changed",
              std::to_string(res.map_before.values().nx() * res.map_before.values().ny() -
                             res.diff.unchanged.size()));
  out += line("cells_unchanged", std::to_string(res.diff.unchanged.size()));
  out += line("max_abs_change", text::format_double(res.diff.max_abs_change));
  out += line("rms_change", text::format_double(res.diff.rms_change));
  out += line("clipped_cells", std::to_string(res.diff.clipped_cells));
  out += line("max_clip_amount", text::format_double(res.diff.max_clip_amount));
  out += line("max_grad_x", text::format_double(res.diff.max_grad_x));
  out += line("max_grad_y", text::format_double(res.diff.max_grad_y));
  out += line("quantization_loss", text::format_double(res.quantization_loss));
  return out;
}

inline std::filesystem::path round_dir(const std::filesystem::path& run_dir, int round_index) {
  return run_dir / ("round_" + std::to_string(round_index));
}

inline void write_round_artifacts(const std::filesystem::path& run_dir, const RoundResult& res) {
  auto dir = round_dir(run_dir, res.round_index);
  io::atomic_write(dir / "map_before.map", maps::serialize(res.map_before));
  io::atomic_write(dir / "map_after.map", maps::serialize(res.map_after));
  io::atomic_write(dir / "best_policy.snapshot", rl::serialize_policy(res.best_agent));
  io::atomic_write(dir / "training.csv", training_csv(res.training));
  io::atomic_write(dir / "validations.csv", validations_csv(res.validations));
  io::atomic_write(dir / "pareto.csv", pareto_csv(res.pareto));
  io::atomic_write(dir / "pareto_frontier.csv", pareto_csv(pareto_report(res.pareto).frontier));
  io::atomic_write(dir / "map_diff.txt", diff_report_text(res));
}

// ---- config plumbing ----

inline PipelineConfig pipeline_config_from_kv(const KvConfig& kv) {
  PipelineConfig c;
  c.rounds = static_cast<int>(kv.get_int("pipeline.rounds", c.rounds));
  c.iterations = static_cast<int>(kv.get_int("pipeline.iterations", c.iterations));
  c.cadence = static_cast<int>(kv.get_int("pipeline.cadence", c.cadence));
  c.episodes_per_iteration =
      static_cast<int>(kv.get_int("pipeline.episodes_per_iteration", c.episodes_per_iteration));
  c.train_cycle = kv.get_string("pipeline.train_cycle", c.train_cycle);
  c.validation_cycle = kv.get_string("pipeline.validation_cycle", c.validation_cycle);
  c.master_seed = static_cast<std::uint64_t>(
      kv.get_int("pipeline.master_seed", static_cast<long long>(c.master_seed)));
  c.warm_start = kv.get_bool("pipeline.warm_start", c.warm_start);
  c.agent_period_steps =
      static_cast<int>(kv.get_int("pipeline.agent_period_steps", c.agent_period_steps));

  c.clamp.max_abs_delta = kv.get_double("clamp.max_abs_delta", c.clamp.max_abs_delta);
  c.clamp.max_rel_delta = kv.get_double("clamp.max_rel_delta", c.clamp.max_rel_delta);

  c.weights.alpha1 = kv.get_double("reward.alpha1", c.weights.alpha1);
  c.weights.alpha2 = kv.get_double("reward.alpha2", c.weights.alpha2);
  c.weights.alpha3 = kv.get_double("reward.alpha3", c.weights.alpha3);

  c.train = rl::train_config_from_kv(kv);
  c.train.value_scale = kv.get_double("rl.value_scale", c.train.value_scale);
  c.train.log_sigma_min = kv.get_double("rl.log_sigma_min", c.train.log_sigma_min);
  c.train.log_sigma_max = kv.get_double("rl.log_sigma_max", c.train.log_sigma_max);
  if (kv.has("rl.hidden")) {
    c.train.hidden.clear();
    std::string hidden_csv = kv.get_string("rl.hidden", "");
    for (auto part : text::split(hidden_csv, ',')) {
      auto layer = text::trim(part);
      if (layer.empty()) continue;  // "" means no hidden layers at all
      c.train.hidden.push_back(static_cast<int>(text::parse_int(layer, "rl.hidden")));
    }
  }

  c.stopping.window = static_cast<int>(kv.get_int("stopping.window", c.stopping.window));
  c.stopping.entropy_slope_tol =
      kv.get_double("stopping.entropy_slope_tol", c.stopping.entropy_slope_tol);
  c.stopping.return_std_threshold =
      kv.get_double("stopping.return_std_threshold", c.stopping.return_std_threshold);

  c.distill.visit_threshold = kv.get_double("distill.visit_threshold", c.distill.visit_threshold);
  c.distill.probe_per_cell =
      static_cast<int>(kv.get_int("distill.probe_per_cell", c.distill.probe_per_cell));

  c.obs_norm.n_lo = kv.get_double("obs.n_lo", c.obs_norm.n_lo);
  c.obs_norm.n_hi = kv.get_double("obs.n_hi", c.obs_norm.n_hi);
  c.obs_norm.m_lo = kv.get_double("obs.m_lo", c.obs_norm.m_lo);
  c.obs_norm.m_hi = kv.get_double("obs.m_hi", c.obs_norm.m_hi);

  c.driver.kp = kv.get_double("driver.kp", c.driver.kp);
  c.driver.ki = kv.get_double("driver.ki", c.driver.ki);
  c.driver.m_inj_max = kv.get_double("driver.m_inj_max", c.driver.m_inj_max);
  c.driver.cut_in_kmh = kv.get_double("driver.cut_in_kmh", c.driver.cut_in_kmh);
  c.driver.cut_out_kmh = kv.get_double("driver.cut_out_kmh", c.driver.cut_out_kmh);

  c.validate();
  return c;
}

// Inverse of pipeline_config_from_kv: overwrite every pipeline-owned key so a
// serialized KvConfig replays the run exactly, regardless of CLI overrides.
inline void config_to_kv(const PipelineConfig& c, KvConfig& kv) {
  kv.set_int("pipeline.rounds", c.rounds);
  kv.set_int("pipeline.iterations", c.iterations);
  kv.set_int("pipeline.cadence", c.cadence);
  kv.set_int("pipeline.episodes_per_iteration", c.episodes_per_iteration);
  kv.set_string("pipeline.train_cycle", c.train_cycle);
  kv.set_string("pipeline.validation_cycle", c.validation_cycle);
  kv.set_int("pipeline.master_seed", static_cast<long long>(c.master_seed));
  kv.set_bool("pipeline.warm_start", c.warm_start);
  kv.set_int("pipeline.agent_period_steps", c.agent_period_steps);

  kv.set_double("clamp.max_abs_delta", c.clamp.max_abs_delta);
  kv.set_double("clamp.max_rel_delta", c.clamp.max_rel_delta);

  kv.set_double("reward.alpha1", c.weights.alpha1);
  kv.set_double("reward.alpha2", c.weights.alpha2);
  kv.set_double("reward.alpha3", c.weights.alpha3);

  kv.set_double("rl.gamma", c.train.gamma);
  kv.set_double("rl.lambda_gae", c.train.lambda_gae);
  kv.set_double("rl.clip_ratio", c.train.clip_ratio);
  kv.set_double("rl.entropy_coef", c.train.entropy_coef);
  kv.set_double("rl.value_coef", c.train.value_coef);
  kv.set_double("rl.learning_rate", c.train.learning_rate);
  kv.set_int("rl.epochs", c.train.epochs);
  kv.set_int("rl.minibatch", c.train.minibatch);
  kv.set_int("rl.seed", static_cast<long long>(c.train.seed));
  kv.set_double("rl.action_scale", c.train.action_scale);
  kv.set_double("rl.value_scale", c.train.value_scale);
  kv.set_double("rl.sigma_init", c.train.sigma_init);
  kv.set_double("rl.log_sigma_min", c.train.log_sigma_min);
  kv.set_double("rl.log_sigma_max", c.train.log_sigma_max);
  std::string hidden;
  for (size_t i = 0; i < c.train.hidden.size(); ++i) {
    if (i) hidden += ',';
    hidden += std::to_string(c.train.hidden[i]);
  }
  kv.set_string("rl.hidden", hidden);

  kv.set_int("stopping.window", c.stopping.window);
  kv.set_double("stopping.entropy_slope_tol", c.stopping.entropy_slope_tol);
  kv.set_double("stopping.return_std_threshold", c.stopping.return_std_threshold);

  kv.set_double("distill.visit_threshold", c.distill.visit_threshold);
  kv.set_int("distill.probe_per_cell", c.distill.probe_per_cell);

  kv.set_double("obs.n_lo", c.obs_norm.n_lo);
  kv.set_double("obs.n_hi", c.obs_norm.n_hi);
  kv.set_double("obs.m_lo", c.obs_norm.m_lo);
  kv.set_double("obs.m_hi", c.obs_norm.m_hi);

  kv.set_double("driver.kp", c.driver.kp);
  kv.set_double("driver.ki", c.driver.ki);
  kv.set_double("driver.m_inj_max", c.driver.m_inj_max);
  kv.set_double("driver.cut_in_kmh", c.driver.cut_in_kmh);
  kv.set_double("driver.cut_out_kmh", c.driver.cut_out_kmh);
}

}  // namespace recal::pipeline
