#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "recal/ecu.hpp"
#include "recal/errors.hpp"
#include "recal/io.hpp"
#include "recal/plant.hpp"
#include "recal/rl.hpp"
#include "recal/text.hpp"

// Drive cycles, the driver model, and the episode loop that binds
// cycle -> driver -> ECU -> plant -> experiences.
namespace recal::cycles {

struct DriveCycle {
  std::string id;
  double dt_s = 0.01;
  std::vector<double> speed_kmh;  // uniform grid starting at t = 0

  double duration_s() const { return (speed_kmh.size() - 1) * dt_s; }

  double mean_speed_kmh() const {
    if (speed_kmh.empty()) return 0.0;
    return std::accumulate(speed_kmh.begin(), speed_kmh.end(), 0.0) / speed_kmh.size();
  }

  double speed_at(size_t i) const { return speed_kmh[std::min(i, speed_kmh.size() - 1)]; }

  void validate() const {
    if (id.empty()) throw ConfigError("drive cycle needs an id");
    if (!(dt_s > 0.0)) throw ConfigError("drive cycle dt must be > 0");
    if (speed_kmh.size() < 2) throw ConfigError("drive cycle '" + id + "' has no duration");
    for (double v : speed_kmh)
      if (!std::isfinite(v) || v < 0.0)
        throw ConfigError("drive cycle '" + id + "' contains a negative or non-finite speed");
  }
};

// Linear resampling of (time, speed) breakpoints onto the uniform dt grid.
inline DriveCycle cycle_from_breakpoints(std::string id, const std::vector<double>& t,
                                         const std::vector<double>& v, double dt) {
  if (t.size() != v.size() || t.size() < 2)
    throw ConfigError("cycle breakpoints need matching time/speed lists of length >= 2");
  DriveCycle c;
  c.id = std::move(id);
  c.dt_s = dt;
  double duration = t.back() - t.front();
  size_t n = static_cast<size_t>(std::floor(duration / dt + 1e-9)) + 1;
  c.speed_kmh.reserve(n);
  size_t seg = 0;
  for (size_t i = 0; i < n; ++i) {
    double ti = t.front() + i * dt;
    while (seg + 2 < t.size() && ti > t[seg + 1]) ++seg;
    double span = t[seg + 1] - t[seg];
    double frac = std::clamp((ti - t[seg]) / span, 0.0, 1.0);
    c.speed_kmh.push_back(v[seg] + frac * (v[seg + 1] - v[seg]));
  }
  c.validate();
  return c;
}

// CSV with header `time_s,speed_kmh`; the source grid must be uniform and
// strictly increasing, speeds non-negative.
inline DriveCycle load_cycle(const std::string& csv, const std::string& origin, double dt) {
  std::vector<double> times, speeds;
  size_t line_no = 0;
  bool header_seen = false;
  for (auto raw : text::split(csv, '\n')) {
    ++line_no;
    auto line = text::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    auto ctx = origin + ":" + std::to_string(line_no);
    if (!header_seen) {
      auto cols = text::split(line, ',');
      if (cols.size() != 2 || text::trim(cols[0]) != "time_s" ||
          text::trim(cols[1]) != "speed_kmh")
        throw ParseError(ctx + ": expected header 'time_s,speed_kmh'");
      header_seen = true;
      continue;
    }
    auto cols = text::split(line, ',');
    if (cols.size() != 2) throw ParseError(ctx + ": expected two columns");
    times.push_back(text::parse_double(cols[0], ctx));
    speeds.push_back(text::parse_double(cols[1], ctx));
    if (speeds.back() < 0.0) throw ConfigError(ctx + ": negative speed");
  }
  if (!header_seen) throw ParseError(origin + ": empty cycle file");
  if (times.size() < 2) throw ParseError(origin + ": cycle needs at least two samples");
  double step0 = times[1] - times[0];
  if (!(step0 > 0.0)) throw ParseError(origin + ": time must be strictly increasing");
  for (size_t i = 1; i < times.size(); ++i) {
    double step = times[i] - times[i - 1];
    if (!(step > 0.0)) throw ParseError(origin + ": time must be strictly increasing");
    if (std::abs(step - step0) > 1e-9 * std::max(1.0, step0))
      throw ParseError(origin + ": non-uniform time grid (row " + std::to_string(i + 1) + ")");
  }
  return cycle_from_breakpoints(origin, times, speeds, dt);
}

// Synthetic urban/suburban segment sized to the published summary statistics
// of the reference trace: 430.9 s long, mean speed within 37.6 +/- 0.5 km/h,
// grades limited to what engine braking alone can absorb.
inline DriveCycle synthetic_wltc(double dt = 0.01) {
  const std::vector<double> t{0,   14,  44,  68,  88,  98,  128, 158, 183, 193,
                              228, 268, 293, 308, 338, 368, 398, 420, 430.9};
  const std::vector<double> v{0,  0,  32, 32, 18, 18, 46, 46, 30, 30,
                              58, 58, 46, 46, 52, 52, 28, 12, 6};
  return cycle_from_breakpoints("wltc_like_segment", t, v, dt);
}

// Short part-load cycle for desk-scale calibration demos.
inline DriveCycle demo_cycle(double dt = 0.01) {
  const std::vector<double> t{0, 4, 26, 36, 48, 56, 60};
  const std::vector<double> v{0, 0, 24, 24, 38, 38, 34};
  return cycle_from_breakpoints("demo_60s", t, v, dt);
}

// ---- driver ----

struct DriverConfig {
  double kp = 3.0;             // mg/stroke per km/h error
  double ki = 1.2;             // mg/stroke per km/h-second
  double m_inj_max = 45.0;     // mg/stroke
  double cut_in_kmh = -3.0;    // error below this enters fuel cut-off
  double cut_out_kmh = -1.0;   // error above this leaves it

  void validate() const {
    if (!(kp >= 0.0) || !(ki >= 0.0)) throw ConfigError("driver gains must be >= 0");
    if (!(m_inj_max > 0.0)) throw ConfigError("driver m_inj_max must be > 0");
    if (!(cut_in_kmh < cut_out_kmh))
      throw ConfigError("driver cut-off hysteresis needs cut_in < cut_out");
  }
};

struct DriverState {
  double integrator = 0.0;
  bool fuel_cut = false;
};

// PI on speed error with fuel cut-off hysteresis. Cut-off demands exactly 0.
inline double driver_step(DriverState& st, double target_kmh, double actual_kmh, double dt,
                          const DriverConfig& cfg) {
  double err = target_kmh - actual_kmh;
  if (st.fuel_cut) {
    if (err > cfg.cut_out_kmh) st.fuel_cut = false;
  } else if (err < cfg.cut_in_kmh) {
    st.fuel_cut = true;
  }
  if (st.fuel_cut) {
    st.integrator = 0.0;
    return 0.0;
  }
  st.integrator = std::clamp(st.integrator + cfg.ki * err * dt, 0.0, cfg.m_inj_max);
  return std::clamp(cfg.kp * err + st.integrator, 0.0, cfg.m_inj_max);
}

// ---- episode runner ----

struct RunOptions {
  int agent_period_steps = 10;  // plant dts per agent step
  rl::RewardWeights weights;
  rl::ObsNorm obs_norm;
  DriverConfig driver;
  std::uint64_t seed = 0;
  bool explore = false;
};

// Everything worth logging about one plant dt, for trace sinks.
struct StepTrace {
  double time_s = 0.0;
  double v_target_kmh = 0.0;
  double v_actual_kmh = 0.0;
  double n_eng = 0.0;
  double m_inj_demand = 0.0;
  double delta_injection = 0.0;
  plant::ActuatorCommand command;
  plant::SensorFrame sensors;  // post-ECU frame: boost deviation filled
  double m_air_setpoint = 0.0;
};

using TraceSink = std::function<void(const StepTrace&)>;

// Runs one episode: driver PI -> setpoint stage (+ residual delta) -> air-path
// PI -> plant, at plant dt; the agent acts every agent_period_steps. The
// policy may be null (baseline run). A plant numerical fault aborts the
// episode, keeping the partial data but flagging it unusable for training.
inline rl::Episode run_episode(const DriveCycle& cycle, ecu::VirtualEcu ecu,
                               const plant::PlantConfig& pcfg,
                               const rl::PolicyParameters* policy, const RunOptions& opt,
                               const TraceSink& sink = {}) {
  cycle.validate();
  if (opt.agent_period_steps < 1) throw ConfigError("agent period must be >= 1 plant step");
  opt.weights.validate();
  opt.driver.validate();
  if (std::abs(cycle.dt_s - pcfg.dt_s) > 1e-12)
    throw ContractError("cycle is sampled at " + text::format_double(cycle.dt_s) +
                        " s but the plant steps at " + text::format_double(pcfg.dt_s) + " s");

  rl::Episode ep;
  ep.seed = opt.seed;
  ep.cycle_id = cycle.id;
  ep.policy_version = policy ? policy->version : 0;

  Rng rng(opt.seed);
  DriverState driver;
  plant::PlantState state;

  // Bootstrap sensors with one neutral plant step so the first control step
  // sees a physically consistent frame.
  auto [state0, frame] = plant::step(state, plant::ActuatorCommand{}, pcfg);
  state = state0;

  const auto& delta_var = ecu.variables().at("setpoint.delta_injection");
  const double delta_lo = delta_var.lo, delta_hi = delta_var.hi;

  const size_t period = static_cast<size_t>(opt.agent_period_steps);
  const size_t agent_steps = (cycle.speed_kmh.size() - 1) / period;
  const size_t plant_steps = agent_steps * period;

  rl::Experience pending;
  rl::StepDiag diag;
  bool have_pending = false;
  double delta_applied = 0.0;

  auto close_pending = [&](const rl::Observation& s_next) {
    pending.s_next = s_next;
    ep.steps.push_back(pending);
    ep.diag.push_back(diag);
    diag = {};
  };

  double m_inj_demand = 0.0;
  for (size_t i = 0; i < plant_steps; ++i) {
    double target = cycle.speed_at(i);
    m_inj_demand = driver_step(driver, target, state.v_vehicle, cycle.dt_s, opt.driver);

    if (i % period == 0) {
      rl::Observation obs = opt.obs_norm.normalize(state.n_eng, m_inj_demand);
      if (have_pending) close_pending(obs);
      pending = {};
      pending.s = obs;
      have_pending = true;
      if (policy) {
        auto a = rl::sample_action(*policy, obs, rng, opt.explore);
        pending.a = a.action;
        pending.logp = a.logp;
        delta_applied = std::clamp(a.action.sample, delta_lo, delta_hi);
      } else {
        pending.a = {};
        pending.logp = 0.0;
        delta_applied = 0.0;
      }
      ecu.write_variable("setpoint.delta_injection", delta_applied);
    }

    auto ecu_out = ecu.step(state.n_eng, m_inj_demand, frame, cycle.dt_s);
    pending.r += rl::reward(ecu_out.sensors, opt.weights) * cycle.dt_s;
    diag.nox_mg += ecu_out.sensors.mdot_nox * cycle.dt_s;
    diag.soot_mg += ecu_out.sensors.mdot_soot * cycle.dt_s;
    diag.boost_dev_kpa += std::abs(ecu_out.sensors.p_boost_dev) / period;

    try {
      auto [next, f] = plant::step(state, ecu_out.command, pcfg);
      state = next;
      frame = f;
    } catch (const NumericalFault&) {
      close_pending(pending.s);  // partial agent step kept for diagnosis
      ep.finalize();
      ep.aborted = true;
      return ep;
    }

    if (sink) {
      StepTrace tr;
      tr.time_s = i * cycle.dt_s;
      tr.v_target_kmh = target;
      tr.v_actual_kmh = state.v_vehicle;
      tr.n_eng = state.n_eng;
      tr.m_inj_demand = m_inj_demand;
      tr.delta_injection = delta_applied;
      tr.command = ecu_out.command;
      tr.sensors = ecu_out.sensors;
      tr.m_air_setpoint = ecu_out.setpoint.validated;
      sink(tr);
    }
  }

  if (have_pending) close_pending(opt.obs_norm.normalize(state.n_eng, m_inj_demand));
  ep.finalize();
  return ep;
}

// Speed RMSE of a completed run against its cycle, from collected traces.
inline double speed_rmse_kmh(const std::vector<double>& target, const std::vector<double>& actual) {
  if (target.size() != actual.size() || target.empty())
    throw ShapeError("speed_rmse_kmh: trace length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < target.size(); ++i) {
    double d = target[i] - actual[i];
    acc += d * d;
  }
  return std::sqrt(acc / target.size());
}

// Per-agent-step episode log (time, observation, action, reward split,
// cumulative emissions). The diag boost channel is a period mean in kPa, so
// its reward share carries the agent-step duration.
inline std::string episode_log_csv(const rl::Episode& ep, const rl::RewardWeights& w,
                                   double agent_dt_s) {
  io::CsvWriter csv({"time_s", "obs_n_eng", "obs_m_inj", "mu", "sigma", "delta_sample",
                     "reward", "nox_term", "soot_term", "boost_term", "cum_nox_mg",
                     "cum_soot_mg"});
  double cum_nox = 0.0, cum_soot = 0.0;
  for (size_t t = 0; t < ep.steps.size(); ++t) {
    const auto& e = ep.steps[t];
    const auto& d = t < ep.diag.size() ? ep.diag[t] : rl::StepDiag{};
    cum_nox += d.nox_mg;
    cum_soot += d.soot_mg;
    csv.row({t * agent_dt_s, e.s.n_eng, e.s.m_inj_tot, e.a.mu, e.a.sigma, e.a.sample, e.r,
             -w.alpha1 * d.nox_mg, -w.alpha2 * d.soot_mg,
             -w.alpha3 * d.boost_dev_kpa * agent_dt_s, cum_nox, cum_soot});
  }
  return csv.str();
}

struct CycleLibrary {
  std::vector<DriveCycle> cycles;

  const DriveCycle& find(const std::string& id) const {
    for (const auto& c : cycles)
      if (c.id == id) return c;
    throw LookupError("unknown drive cycle '" + id + "'");
  }
};

// Distrib-facing episode runner: fresh ECU and plant per episode, work-item
// seeds expanded per episode index.
inline std::function<std::vector<rl::Episode>(const std::string&, std::uint32_t, std::uint64_t,
                                              const rl::PolicyParameters&, bool)>
make_episode_source(CycleLibrary library, ecu::EcuConfig ecu_cfg, maps::LookupMap2D base_map,
                    plant::PlantConfig plant_cfg, RunOptions opt_template) {
  return [library = std::move(library), ecu_cfg = std::move(ecu_cfg),
          base_map = std::move(base_map), plant_cfg,
          opt_template](const std::string& cycle_id, std::uint32_t count, std::uint64_t seed,
                        const rl::PolicyParameters& policy, bool explore) {
    const DriveCycle& cycle = library.find(cycle_id);
    std::vector<rl::Episode> out;
    for (std::uint32_t k = 0; k < count; ++k) {
      RunOptions opt = opt_template;
      opt.seed = mix_seed(seed, k);
      opt.explore = explore;
      ecu::VirtualEcu ecu(ecu_cfg, base_map);
      out.push_back(run_episode(cycle, std::move(ecu), plant_cfg, &policy, opt));
      out.back().seed = opt.seed;
    }
    return out;
  };
}

}  // namespace recal::cycles
