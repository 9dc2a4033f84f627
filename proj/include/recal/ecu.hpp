#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "recal/errors.hpp"
#include "recal/kvconfig.hpp"
#include "recal/maps.hpp"
#include "recal/plant.hpp"

// Virtual ECU: the production-style side of the loop. An air-mass setpoint is
// read from a calibration map, corrected, validated, then tracked by decoupled
// PI loops driving EGR/VGT/throttle. Everything the calibration tooling may
// touch goes through a named variable registry with write-latching semantics,
// standing in for a soft-real-time calibration protocol.
namespace recal::ecu {

struct EcuConfig {
  // setpoint validation bounds (synthetic, derived from the plant envelope)
  double setpoint_min_mg = 150.0;
  double setpoint_max_mg = 950.0;

  // residual-correction clamp applied to delta_injection at the stage
  maps::DeltaClamp delta_clamp{60.0, 0.15};

  // dynamic (lead) correction on the base value for acceleration maneuvers
  double dyn_gain = 0.35;
  double dyn_tau_s = 0.6;

  // air-mass loop -> EGR demand (positive error = too much fresh air)
  double kp_air = 0.15;    // % demand per mg
  double ki_air = 0.8;     // % demand per (mg s)
  double hp_share = 0.75;  // fraction of demand range served by the HP valve

  // boost loop -> VGT; deliberately slower than the air loop so the two
  // do not fight over the shared gas path
  double kp_boost = 0.45;  // % per kPa
  double ki_boost = 0.55;

  // throttle governor: closes only when EGR demand saturates
  double thr_gate = 95.0;  // % EGR demand where the governor engages
  double kp_thr = 0.30;
  double ki_thr = 1.0;
  double thr_release = 40.0;  // %/s reopen rate when disengaged

  // analytic boost reference over the operating point
  double boost_ref_base = 101.325;
  double boost_ref_per_rpm = 0.012;   // kPa per rpm above idle
  double boost_ref_per_mg = 1.1;      // kPa per mg/stroke
  double boost_ref_max = 185.0;
  double n_idle = 800.0;

  double m_inj_max = 45.0;  // driver demand ceiling, mg/stroke

  void validate() const {
    if (!(setpoint_min_mg >= 0.0 && setpoint_max_mg > setpoint_min_mg))
      throw ConfigError("ecu config: setpoint bounds invalid");
    delta_clamp.validate();
    if (!(hp_share > 0.0 && hp_share < 1.0))
      throw ConfigError("ecu config: hp_share must be in (0, 1)");
    for (double g : {kp_air, ki_air, kp_boost, ki_boost, kp_thr, ki_thr})
      if (!std::isfinite(g) || g < 0.0) throw ConfigError("ecu config: gains must be finite, >= 0");
  }
};

// Air-mass setpoint determination: base map, multiplicative environment
// correction, additive lead correction, externally writable delta, then the
// validation clamp -- always last.
struct SetpointStage {
  maps::LookupMap2D base_map;
  double env_correction = 1.0;
  double dyn_filter_state = 0.0;  // low-pass of the base value
  bool dyn_primed = false;
  double delta_injection = 0.0;
};

struct SetpointBreakdown {
  double base = 0.0;
  double dyn_correction = 0.0;
  double delta_applied = 0.0;  // post-clamp
  double validated = 0.0;
};

inline SetpointBreakdown compute_setpoint_detail(const SetpointStage& stage, double n_eng,
                                                 double m_inj_tot, const EcuConfig& cfg) {
  SetpointBreakdown out;
  out.base = maps::interpolate(stage.base_map, n_eng, m_inj_tot) * stage.env_correction;
  double filt = stage.dyn_primed ? stage.dyn_filter_state : out.base;
  out.dyn_correction = cfg.dyn_gain * (out.base - filt);
  out.delta_applied = cfg.delta_clamp.clip(stage.delta_injection, out.base);
  out.validated = std::clamp(out.base + out.dyn_correction + out.delta_applied,
                             cfg.setpoint_min_mg, cfg.setpoint_max_mg);
  return out;
}

inline double compute_setpoint(const SetpointStage& stage, double n_eng, double m_inj_tot,
                               const EcuConfig& cfg) {
  return compute_setpoint_detail(stage, n_eng, m_inj_tot, cfg).validated;
}

// Decoupled PI air-path loops. Positional form: output = Kp e + I with the
// integrator clamped to the actuator range, so saturation cannot wind up.
struct AirPathController {
  double i_egr = 0.0;
  double i_vgt = 40.0;   // start near a neutral vane position
  double i_thr = 0.0;    // accumulated throttle closing, 0 = wide open
  double egr_demand = 0.0;
};

inline plant::ActuatorCommand control_step(AirPathController& ctrl, double setpoint_mg,
                                           double p_boost_ref, const plant::SensorFrame& sensors,
                                           double dt, const EcuConfig& cfg,
                                           double m_inj_demand) {
  if (!(dt > 0.0)) throw ContractError("control_step: dt must be > 0");

  // air-mass loop: excess fresh air raises EGR demand
  double e_air = sensors.m_air_act - setpoint_mg;
  ctrl.i_egr = std::clamp(ctrl.i_egr + cfg.ki_air * dt * e_air, 0.0, 100.0);
  double demand = std::clamp(cfg.kp_air * e_air + ctrl.i_egr, 0.0, 100.0);
  ctrl.egr_demand = demand;

  // static split schedule: HP valve serves the first hp_share of the demand
  // range, LP the remainder
  double hp_edge = cfg.hp_share * 100.0;
  double u_hp = std::clamp(demand / cfg.hp_share, 0.0, 100.0);
  double u_lp = demand > hp_edge ? (demand - hp_edge) / (1.0 - cfg.hp_share) : 0.0;

  // boost loop: low boost closes the vanes
  double e_boost = p_boost_ref - sensors.p_boost_act;
  ctrl.i_vgt = std::clamp(ctrl.i_vgt + cfg.ki_boost * dt * e_boost, 0.0, 100.0);
  double u_vgt = std::clamp(cfg.kp_boost * e_boost + ctrl.i_vgt, 0.0, 100.0);

  // throttle governor: engages only when the EGR path alone cannot displace
  // enough fresh air
  if (demand >= cfg.thr_gate && e_air > 0.0) {
    ctrl.i_thr = std::clamp(ctrl.i_thr + cfg.ki_thr * dt * e_air, 0.0, 100.0);
  } else {
    ctrl.i_thr = std::max(0.0, ctrl.i_thr - cfg.thr_release * dt);
  }
  double closing = demand >= cfg.thr_gate ? cfg.kp_thr * std::max(e_air, 0.0) + ctrl.i_thr
                                          : ctrl.i_thr;
  double u_thr = std::clamp(100.0 - closing, 0.0, 100.0);

  plant::ActuatorCommand cmd;
  cmd.u_hp_egr = u_hp;
  cmd.u_lp_egr = std::clamp(u_lp, 0.0, 100.0);
  cmd.u_vgt = u_vgt;
  cmd.u_throttle = u_thr;
  cmd.m_inj_tot = std::clamp(m_inj_demand, 0.0, cfg.m_inj_max);
  return cmd;
}

struct CalibrationVariable {
  std::string name;
  double value = 0.0;
  double default_value = 0.0;
  bool writable = false;
  double lo = 0.0;
  double hi = 0.0;
  std::string units;
  std::string description;
};

class VirtualEcu {
 public:
  VirtualEcu(EcuConfig cfg, maps::LookupMap2D base_map) : cfg_(std::move(cfg)) {
    cfg_.validate();
    stage_.base_map = std::move(base_map);
    register_variable({"setpoint.delta_injection", 0.0, 0.0, true,
                       -cfg_.delta_clamp.max_abs_delta, cfg_.delta_clamp.max_abs_delta,
                       "mg/stroke", "additive air-mass setpoint correction (residual channel)"});
    register_variable({"setpoint.env_correction", 1.0, 1.0, true, 0.8, 1.2, "-",
                       "multiplicative environment correction on the base map"});
    register_variable({"monitor.m_air_setpoint", 0.0, 0.0, false, 0.0, 2000.0, "mg/stroke",
                       "validated air-mass setpoint of the last step"});
    register_variable({"monitor.p_boost_ref", 0.0, 0.0, false, 0.0, 1000.0, "kPa",
                       "boost reference of the last step"});
    register_variable({"monitor.egr_demand", 0.0, 0.0, false, 0.0, 100.0, "%",
                       "air-loop EGR demand of the last step"});
  }

  const EcuConfig& config() const { return cfg_; }
  const SetpointStage& stage() const { return stage_; }
  const maps::LookupMap2D& base_map() const { return stage_.base_map; }

  void replace_base_map(maps::LookupMap2D map) { stage_.base_map = std::move(map); }

  // Calibration access. Writes are staged and latch at the start of the next
  // control step; they never alter a step already computed.
  double read_variable(const std::string& name) const {
    return find(name).value;
  }

  void write_variable(const std::string& name, double value) {
    CalibrationVariable& var = find(name);
    if (!var.writable)
      throw ContractError("calibration variable '" + name + "' is read-only");
    if (!std::isfinite(value) || value < var.lo || value > var.hi)
      throw ContractError("calibration write to '" + name + "' out of bounds [" +
                          std::to_string(var.lo) + ", " + std::to_string(var.hi) + "]");
    var.value = value;
  }

  const std::map<std::string, CalibrationVariable>& variables() const { return registry_; }

  double boost_reference(double n_eng, double m_inj) const {
    double p = cfg_.boost_ref_base + cfg_.boost_ref_per_rpm * std::max(n_eng - cfg_.n_idle, 0.0) +
               cfg_.boost_ref_per_mg * m_inj;
    return std::min(p, cfg_.boost_ref_max);
  }

  // Convenience mirror of the free function, over the latched stage.
  double compute_setpoint(double n_eng, double m_inj_tot) {
    latch();
    return ecu::compute_setpoint(stage_, n_eng, m_inj_tot, cfg_);
  }

  struct StepResult {
    plant::ActuatorCommand command;
    plant::SensorFrame sensors;  // with p_boost_dev filled in
    SetpointBreakdown setpoint;
    double p_boost_ref = 0.0;
  };

  // One control step: latch staged writes, determine the setpoint, fill in
  // the boost deviation, run the PI loops.
  StepResult step(double n_eng, double m_inj_demand, const plant::SensorFrame& sensors_in,
                  double dt) {
    latch();
    double m_inj = std::clamp(m_inj_demand, 0.0, cfg_.m_inj_max);
    auto detail = compute_setpoint_detail(stage_, n_eng, m_inj, cfg_);

    // advance the lead-filter state after use (first-order low-pass of base)
    if (!stage_.dyn_primed) {
      stage_.dyn_filter_state = detail.base;
      stage_.dyn_primed = true;
    } else {
      stage_.dyn_filter_state +=
          dt / std::max(cfg_.dyn_tau_s, dt) * (detail.base - stage_.dyn_filter_state);
    }

    StepResult out;
    out.p_boost_ref = boost_reference(n_eng, m_inj);
    out.sensors = sensors_in;
    out.sensors.p_boost_dev = sensors_in.p_boost_act - out.p_boost_ref;
    out.setpoint = detail;
    out.command =
        control_step(ctrl_, detail.validated, out.p_boost_ref, sensors_in, dt, cfg_, m_inj);

    set_monitor("monitor.m_air_setpoint", detail.validated);
    set_monitor("monitor.p_boost_ref", out.p_boost_ref);
    set_monitor("monitor.egr_demand", ctrl_.egr_demand);
    return out;
  }

  static std::vector<std::string> signal_header() {
    return {"m_air_setpoint", "setpoint_base", "setpoint_delta", "p_boost_ref", "egr_demand"};
  }

  std::vector<double> signal_row(const StepResult& r) const {
    return {r.setpoint.validated, r.setpoint.base, r.setpoint.delta_applied, r.p_boost_ref,
            ctrl_.egr_demand};
  }

  // Human-readable registry dump for the calibration manifest.
  std::string manifest() const {
    std::string out = "# Calibration variable manifest\n";
    out += "# name | writable | bounds | units | default | description\n";
    for (const auto& [name, v] : registry_) {
      out += name + " | " + (v.writable ? "rw" : "ro") + " | [" + text::format_double(v.lo) +
             ", " + text::format_double(v.hi) + "] | " + v.units + " | " +
             text::format_double(v.default_value) + " | " + v.description + "\n";
    }
    return out;
  }

 private:
  void register_variable(CalibrationVariable v) { registry_[v.name] = std::move(v); }

  CalibrationVariable& find(const std::string& name) {
    auto it = registry_.find(name);
    if (it == registry_.end())
      throw LookupError("unknown calibration variable '" + name + "'");
    return it->second;
  }
  const CalibrationVariable& find(const std::string& name) const {
    auto it = registry_.find(name);
    if (it == registry_.end())
      throw LookupError("unknown calibration variable '" + name + "'");
    return it->second;
  }

  void latch() {
    stage_.delta_injection = find("setpoint.delta_injection").value;
    stage_.env_correction = find("setpoint.env_correction").value;
  }

  void set_monitor(const std::string& name, double value) { registry_[name].value = value; }

  EcuConfig cfg_;
  SetpointStage stage_;
  AirPathController ctrl_;
  std::map<std::string, CalibrationVariable> registry_;
};

// Plausible production calibration over the plant envelope: more fuel and
// speed ask for more air. Used as the shipped default; calibration rounds
// replace it.
inline maps::LookupMap2D default_base_map() {
  maps::AxisGrid n_axis({800.0, 1200.0, 1600.0, 2000.0, 2400.0, 2800.0, 3200.0, 3600.0});
  maps::AxisGrid m_axis({0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 37.0, 45.0});
  maps::Grid2 values(n_axis.size(), m_axis.size());
  for (size_t i = 0; i < n_axis.size(); ++i)
    for (size_t j = 0; j < m_axis.size(); ++j) {
      double v = 400.0 + 7.0 * m_axis[j] + 0.03 * (n_axis[i] - 800.0);
      values.at(i, j) = std::clamp(v, 250.0, 900.0);
    }
  return maps::LookupMap2D(std::move(n_axis), std::move(m_axis), std::move(values),
                           "m_air_setpoint_base", "mg/stroke", "base");
}

inline EcuConfig config_from_kv(const KvConfig& kv) {
  EcuConfig c;
  c.setpoint_min_mg = kv.get_double("ecu.setpoint_min_mg", c.setpoint_min_mg);
  c.setpoint_max_mg = kv.get_double("ecu.setpoint_max_mg", c.setpoint_max_mg);
  c.delta_clamp.max_abs_delta = kv.get_double("ecu.delta_abs_mg", c.delta_clamp.max_abs_delta);
  c.delta_clamp.max_rel_delta = kv.get_double("ecu.delta_rel", c.delta_clamp.max_rel_delta);
  c.kp_air = kv.get_double("ecu.kp_air", c.kp_air);
  c.ki_air = kv.get_double("ecu.ki_air", c.ki_air);
  c.kp_boost = kv.get_double("ecu.kp_boost", c.kp_boost);
  c.ki_boost = kv.get_double("ecu.ki_boost", c.ki_boost);
  c.hp_share = kv.get_double("ecu.hp_share", c.hp_share);
  c.m_inj_max = kv.get_double("ecu.m_inj_max", c.m_inj_max);
  c.boost_ref_per_rpm = kv.get_double("ecu.boost_ref_per_rpm", c.boost_ref_per_rpm);
  c.boost_ref_per_mg = kv.get_double("ecu.boost_ref_per_mg", c.boost_ref_per_mg);
  c.validate();
  return c;
}

}  // namespace recal::ecu
