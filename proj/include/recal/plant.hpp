#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "recal/errors.hpp"
#include "recal/kvconfig.hpp"

// Surrogate mean-value diesel air path. The structure follows the classic
// control-oriented decomposition -- speed-density cylinder filling, orifice
// EGR paths, a turbocharger power balance, first-order manifold dynamics and
// semi-physical emission closures -- but every coefficient here is synthetic.
// The closures are deliberately smooth and monotone so the NOx/soot trade-off
// under EGR is a structural property, not a tuning accident.
namespace recal::plant {

inline constexpr double kGasConstant = 0.287;    // kJ/(kg K), air
inline constexpr double kCpExhaust = 1.05;       // kJ/(kg K)
inline constexpr double kKappaExp = 0.263;       // (gamma-1)/gamma, exhaust-ish
inline constexpr double kLowerHeating = 42.5e3;  // kJ/kg diesel
inline constexpr double kO2MassFraction = 0.232;
inline constexpr double kGravity = 9.81;
inline constexpr double kAirDensity = 1.20;      // kg/m^3 ambient

// Sentinel lambda for fuel cut-off: no combustion, infinitely lean.
inline constexpr double kLambdaNoCombustion = std::numeric_limits<double>::infinity();

struct VolEffCurve {
  double eta_peak = 0.90;
  double n_peak = 2250.0;      // 1/min
  double droop = 0.035;        // eta loss per (1000 rpm)^2 off peak

  double operator()(double n_eng) const {
    double d = (n_eng - n_peak) / 1000.0;
    return std::clamp(eta_peak - droop * d * d, 0.50, 1.0);
  }
};

struct PlantConfig {
  double dt_s = 0.01;

  // Geometry / environment
  double displacement_cm3 = 1999.0;
  int n_cyl = 4;
  double curb_mass_kg = 1590.0;
  double p_ambient_kpa = 101.325;
  double t_ambient_k = 293.0;
  double t_intake_k = 320.0;       // post-intercooler charge temperature
  double v_intake_m3 = 4.0e-3;
  double v_exhaust_m3 = 3.5e-3;

  VolEffCurve vol_eff;

  // Orifice coefficients (effective-area scale, kg/s per sqrt(kPa))
  double c_hp_egr = 9.0e-3;
  double c_lp_egr = 5.0e-3;
  double throttle_min_frac = 0.15;  // fully "closed" throttle still leaks

  // Compressor / turbine / shaft
  double c_comp = 0.085;            // kg/s at reference speed, unit pressure factor
  double n_turbo_ref = 120000.0;    // 1/min
  double k_comp_pr = 1.2;           // back-pressure sensitivity
  double c_turb = 0.012;            // kg/s per sqrt(kPa) at full area
  double vgt_min_area = 0.30;       // closed-vane area fraction
  double turbo_inertia = 3.0e-5;    // kg m^2
  double eta_compressor = 0.72;
  double eta_turbine = 0.60;
  double turbo_fric = 1.0e-5;       // W s^2/rad^2 -- the shaft's stabilizing load

  // Combustion / torque
  double stoich_ratio = 14.5;
  double eta_indicated = 0.42;
  double k_comb_eff = 2.0;          // lambda penalty shape
  double fric_torque_base = 12.0;   // Nm
  double fric_torque_slope = 0.008; // Nm per rpm
  double pump_torque_coeff = 0.09;  // Nm per kPa of (p_exh - p_int)
  double m_inj_cap_mg = 80.0;       // injector ceiling

  // Exhaust temperature relaxation
  double t_exh_base_k = 450.0;
  double t_exh_per_mg = 18.0;       // K per mg/stroke
  double t_exh_tau_s = 0.8;

  // Emission closures
  double c_nox = 0.022;             // mg NOx per mg fuel at reference O2
  double k_nox_o2 = 3.2;            // sensitivity to intake O2 depletion
  double nox_load_ref_mg = 20.0;
  double c_soot = 0.0045;           // mg soot per mg fuel at full logistic
  double k_soot = 8.0;
  double lambda_soot_ref = 1.6;

  // Driveline / vehicle
  double n_idle = 800.0;            // 1/min
  double n_redline = 4500.0;
  double k_gear = 22.0;             // rpm per km/h above idle
  double eta_driveline = 0.92;
  double c_rr = 0.009;
  double cd_area = 0.64;            // cd * frontal area, m^2

  void validate() const {
    auto pos = [](double v, const char* name) {
      if (!(v > 0.0)) throw ConfigError(std::string("plant config: ") + name + " must be > 0");
    };
    if (!(dt_s > 0.0 && dt_s <= 0.1)) throw ConfigError("plant config: dt_s must be in (0, 0.1]");
    pos(displacement_cm3, "displacement_cm3");
    pos(curb_mass_kg, "curb_mass_kg");
    pos(p_ambient_kpa, "p_ambient_kpa");
    pos(t_intake_k, "t_intake_k");
    pos(v_intake_m3, "v_intake_m3");
    pos(v_exhaust_m3, "v_exhaust_m3");
    pos(c_comp, "c_comp");
    pos(n_turbo_ref, "n_turbo_ref");
    pos(c_turb, "c_turb");
    pos(turbo_inertia, "turbo_inertia");
    pos(stoich_ratio, "stoich_ratio");
    pos(eta_indicated, "eta_indicated");
    pos(n_idle, "n_idle");
    pos(k_gear, "k_gear");
    if (n_cyl < 1) throw ConfigError("plant config: n_cyl must be >= 1");
    if (!(vgt_min_area > 0.0 && vgt_min_area < 1.0))
      throw ConfigError("plant config: vgt_min_area must be in (0, 1)");
    if (!(throttle_min_frac > 0.0 && throttle_min_frac <= 1.0))
      throw ConfigError("plant config: throttle_min_frac must be in (0, 1]");
  }
};

struct PlantState {
  double p_intake = 101.325;   // kPa
  double p_exhaust = 105.0;    // kPa
  double n_turbo = 20000.0;    // 1/min
  double x_burned = 0.0;       // burned-gas fraction of intake charge
  double n_eng = 800.0;        // 1/min
  double v_vehicle = 0.0;      // km/h
  double t_exhaust = 500.0;    // K
};

struct ActuatorCommand {
  double u_hp_egr = 0.0;    // %
  double u_lp_egr = 0.0;    // %
  double u_throttle = 100.0;
  double u_vgt = 40.0;
  double m_inj_tot = 0.0;   // mg/stroke
};

struct SensorFrame {
  double m_air_act = 0.0;      // mg/stroke fresh air in cylinder charge
  double p_boost_act = 0.0;    // kPa (intake manifold absolute)
  double p_boost_dev = 0.0;    // kPa, filled in by the ECU against its setpoint
  double mdot_nox = 0.0;       // mg/s
  double mdot_soot = 0.0;      // mg/s
  double lambda = kLambdaNoCombustion;
  double torque = 0.0;         // Nm brake
  // Diagnostics beyond the ECU-visible set (logging and conservation checks).
  double m_fresh_per_stroke = 0.0;  // mg/stroke delivered by the compressor path
  double mdot_fuel = 0.0;           // mg/s
};

// Relative air/fuel ratio; fuel cut returns the no-combustion sentinel.
inline double lambda_of(double m_air_mg, double m_fuel_mg, const PlantConfig& cfg) {
  if (m_air_mg < 0.0 || m_fuel_mg < 0.0)
    throw ContractError("lambda_of: negative mass argument");
  if (m_fuel_mg == 0.0) return kLambdaNoCombustion;
  return m_air_mg / (m_fuel_mg * cfg.stoich_ratio);
}

namespace detail {

// Smooth signed orifice law: ~ sign(dp) * sqrt(|dp|) away from zero, linear
// through zero so derivatives stay bounded.
inline double orifice_flow(double dp_kpa, double eps = 1.0) {
  return dp_kpa / std::pow(dp_kpa * dp_kpa + eps * eps, 0.25);
}

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline void check_finite(double v, const char* field) {
  if (!std::isfinite(v))
    throw NumericalFault(std::string("plant state field ") + field + " is non-finite");
}

inline ActuatorCommand sanitize(const ActuatorCommand& cmd, const PlantConfig& cfg) {
  ActuatorCommand c = cmd;
  c.u_hp_egr = std::clamp(c.u_hp_egr, 0.0, 100.0);
  c.u_lp_egr = std::clamp(c.u_lp_egr, 0.0, 100.0);
  c.u_throttle = std::clamp(c.u_throttle, 0.0, 100.0);
  c.u_vgt = std::clamp(c.u_vgt, 0.0, 100.0);
  c.m_inj_tot = std::clamp(c.m_inj_tot, 0.0, cfg.m_inj_cap_mg);
  return c;
}

inline void clamp_state(PlantState& s, const PlantConfig& cfg) {
  s.p_intake = std::clamp(s.p_intake, 20.0, 600.0);
  s.p_exhaust = std::clamp(s.p_exhaust, 20.0, 800.0);
  s.n_turbo = std::clamp(s.n_turbo, 0.0, 260000.0);
  s.x_burned = std::clamp(s.x_burned, 0.0, 1.0);
  s.t_exhaust = std::clamp(s.t_exhaust, 250.0, 1200.0);
  s.v_vehicle = std::clamp(s.v_vehicle, 0.0, 300.0);
  s.n_eng = std::clamp(s.n_eng, cfg.n_idle, cfg.n_redline);
}

}  // namespace detail

// One explicit-Euler advance of dt. Engine speed follows a fixed driveline
// schedule of vehicle speed; with `pin_speed` the operating point is held
// (dyno mode) and the vehicle does not move.
inline std::pair<PlantState, SensorFrame> step(const PlantState& state,
                                               const ActuatorCommand& cmd_in,
                                               const PlantConfig& cfg,
                                               bool pin_speed = false) {
  detail::check_finite(state.p_intake, "p_intake");
  detail::check_finite(state.p_exhaust, "p_exhaust");
  detail::check_finite(state.n_turbo, "n_turbo");
  detail::check_finite(state.x_burned, "x_burned");
  detail::check_finite(state.n_eng, "n_eng");
  detail::check_finite(state.v_vehicle, "v_vehicle");
  detail::check_finite(state.t_exhaust, "t_exhaust");

  PlantState s = state;
  detail::clamp_state(s, cfg);
  const ActuatorCommand cmd = detail::sanitize(cmd_in, cfg);
  const double dt = cfg.dt_s;

  // --- cylinder filling (speed-density) ---
  const double v_disp_m3 = cfg.displacement_cm3 * 1e-6;
  const double rt_int = kGasConstant * cfg.t_intake_k;          // kPa m^3 / kg
  const double eta_v = cfg.vol_eff(s.n_eng);
  const double m_charge_kg = eta_v * s.p_intake * (v_disp_m3 / cfg.n_cyl) / rt_int;
  const double events_per_s = s.n_eng / 60.0 * cfg.n_cyl / 2.0;  // 4-stroke
  const double mdot_cyl = m_charge_kg * events_per_s;            // kg/s out of intake

  const double m_air_mg = m_charge_kg * (1.0 - s.x_burned) * 1e6;
  const double m_inj_mg = cmd.m_inj_tot;
  const double mdot_fuel_kgs = m_inj_mg * 1e-6 * events_per_s;

  // --- compressor path (throttle folded into delivered flow) ---
  const double n_turbo_norm = s.n_turbo / cfg.n_turbo_ref;
  const double pr_comp = s.p_intake / cfg.p_ambient_kpa;
  const double f_pr = 2.0 / (1.0 + std::exp(cfg.k_comp_pr * (pr_comp - 1.0)));
  const double r_thr =
      cfg.throttle_min_frac + (1.0 - cfg.throttle_min_frac) * (cmd.u_throttle / 100.0);
  const double mdot_comp = cfg.c_comp * n_turbo_norm * f_pr * r_thr;  // >= 0

  // --- EGR paths ---
  const double mdot_hp =
      cfg.c_hp_egr * (cmd.u_hp_egr / 100.0) * detail::orifice_flow(s.p_exhaust - s.p_intake);
  const double mdot_lp =
      cfg.c_lp_egr * (cmd.u_lp_egr / 100.0) *
      detail::orifice_flow(s.p_exhaust - cfg.p_ambient_kpa);

  // Burned fraction of the exhaust gas itself: recirculated burned gas plus
  // freshly created stoichiometric products.
  const double m_fuel_kg = m_inj_mg * 1e-6;  // per stroke
  const double m_exh_kg = m_charge_kg + m_fuel_kg;
  const double m_burn_products = std::min(
      m_charge_kg * s.x_burned + (1.0 + cfg.stoich_ratio) * m_fuel_kg, m_exh_kg);
  const double x_exh = std::clamp(m_burn_products / std::max(m_exh_kg, 1e-12), 0.0, 1.0);

  // Composition delivered by the compressor (LP EGR mixes upstream of it).
  const double lp_in = std::max(mdot_lp, 0.0);
  const double x_comp = x_exh * std::clamp(lp_in / std::max(mdot_comp, 1e-9), 0.0, 1.0);
  const double mdot_fresh = mdot_comp * (1.0 - x_comp);

  // --- turbine and shaft power balance ---
  const double a_vgt = cfg.vgt_min_area + (1.0 - cfg.vgt_min_area) * (1.0 - cmd.u_vgt / 100.0);
  const double mdot_turb =
      cfg.c_turb * a_vgt * detail::orifice_flow(s.p_exhaust - cfg.p_ambient_kpa);

  const double omega = std::max(s.n_turbo, 2000.0) * 2.0 * M_PI / 60.0;  // rad/s
  const double expand =
      1.0 - std::pow(cfg.p_ambient_kpa / std::max(s.p_exhaust, cfg.p_ambient_kpa), kKappaExp);
  const double p_turbine =
      cfg.eta_turbine * std::max(mdot_turb, 0.0) * kCpExhaust * 1e3 * s.t_exhaust * expand;
  const double compress =
      std::pow(std::max(pr_comp, 1.0), kKappaExp) - 1.0;
  const double p_compressor =
      mdot_comp * kCpExhaust * 1e3 * cfg.t_ambient_k * compress / cfg.eta_compressor;
  const double p_fric = cfg.turbo_fric * omega * omega;
  const double domega = (p_turbine - p_compressor - p_fric) / (cfg.turbo_inertia * omega);

  // --- combustion, torque ---
  const double lambda = lambda_of(m_air_mg, m_inj_mg, cfg);
  const double m_burn_mg = std::min(m_inj_mg, m_air_mg / cfg.stoich_ratio);
  const double eta_comb =
      m_inj_mg > 0.0 ? 1.0 - std::exp(-cfg.k_comb_eff * std::min(lambda, 50.0)) : 0.0;
  const double p_ind_kw =
      cfg.eta_indicated * eta_comb * (m_burn_mg * 1e-6 * events_per_s) * kLowerHeating;
  const double omega_eng = s.n_eng * 2.0 * M_PI / 60.0;
  const double t_fric = cfg.fric_torque_base + cfg.fric_torque_slope * s.n_eng +
                        cfg.pump_torque_coeff * std::max(s.p_exhaust - s.p_intake, 0.0);
  const double torque = p_ind_kw * 1e3 / omega_eng - t_fric;

  // --- emissions (smooth monotone closures) ---
  const double mdot_fuel_mgs = m_inj_mg * events_per_s;
  const double o2_ratio = 1.0 - s.x_burned;  // intake O2 relative to fresh air
  const double load_fact = 0.5 + 0.5 * (m_inj_mg / cfg.nox_load_ref_mg);
  const double mdot_nox =
      cfg.c_nox * mdot_fuel_mgs * load_fact * std::exp(cfg.k_nox_o2 * (o2_ratio - 1.0));
  const double inv_lambda = m_inj_mg > 0.0 ? 1.0 / lambda : 0.0;
  const double mdot_soot =
      cfg.c_soot * mdot_fuel_mgs *
      detail::logistic(cfg.k_soot * (inv_lambda - 1.0 / cfg.lambda_soot_ref));

  // --- manifold / composition / temperature dynamics ---
  const double m_int_kg = s.p_intake * cfg.v_intake_m3 / rt_int;
  const double dp_int = rt_int / cfg.v_intake_m3 * (mdot_comp + mdot_hp - mdot_cyl);
  const double rt_exh = kGasConstant * s.t_exhaust;
  const double dp_exh = rt_exh / cfg.v_exhaust_m3 *
                        (mdot_cyl + mdot_fuel_kgs - std::max(mdot_hp, 0.0) - lp_in - mdot_turb);
  double dx = (mdot_comp * (x_comp - s.x_burned) +
               std::max(mdot_hp, 0.0) * (x_exh - s.x_burned)) /
              std::max(m_int_kg, 1e-6);
  const double t_exh_target =
      cfg.t_exh_base_k + cfg.t_exh_per_mg * m_burn_mg * (0.6 + 0.4 * s.n_eng / 2000.0);
  const double dt_exh = (t_exh_target - s.t_exhaust) / cfg.t_exh_tau_s;

  // --- vehicle longitudinal dynamics ---
  const double v_ms = s.v_vehicle / 3.6;
  const double p_wheel_w = torque * omega_eng * cfg.eta_driveline;
  const double f_trac = p_wheel_w / std::max(v_ms, 3.0);
  const double f_roll = cfg.c_rr * cfg.curb_mass_kg * kGravity * (v_ms / (v_ms + 0.5));
  const double f_aero = 0.5 * kAirDensity * cfg.cd_area * v_ms * v_ms;
  const double accel = (f_trac - f_roll - f_aero) / cfg.curb_mass_kg;

  PlantState next = s;
  next.p_intake = s.p_intake + dt * dp_int;
  next.p_exhaust = s.p_exhaust + dt * dp_exh;
  next.n_turbo = s.n_turbo + dt * domega * 60.0 / (2.0 * M_PI);
  next.x_burned = s.x_burned + dt * dx;
  next.t_exhaust = s.t_exhaust + dt * dt_exh;
  if (!pin_speed) {
    next.v_vehicle = s.v_vehicle + dt * accel * 3.6;
    next.v_vehicle = std::clamp(next.v_vehicle, 0.0, 300.0);
    next.n_eng = std::clamp(cfg.n_idle + cfg.k_gear * next.v_vehicle, cfg.n_idle,
                            cfg.n_redline);
  }
  detail::clamp_state(next, cfg);

  SensorFrame frame;
  frame.m_air_act = m_air_mg;
  frame.p_boost_act = s.p_intake;
  frame.p_boost_dev = 0.0;
  frame.mdot_nox = m_inj_mg > 0.0 ? mdot_nox : 0.0;
  frame.mdot_soot = m_inj_mg > 0.0 ? mdot_soot : 0.0;
  frame.lambda = lambda;
  frame.torque = torque;
  frame.m_fresh_per_stroke = mdot_fresh / std::max(events_per_s, 1e-9) * 1e6;
  frame.mdot_fuel = mdot_fuel_mgs;
  return {next, frame};
}

struct OperatingPoint {
  double n_eng = 1500.0;  // 1/min, held fixed (dyno mode)
};

struct SteadyResult {
  PlantState state;
  SensorFrame frame;
  int iterations = 0;
};

// Iterate to a fixed point at pinned engine speed. Convergence: every state
// field moves < tol relative per step.
inline SteadyResult steady_state_full(const ActuatorCommand& cmd, const OperatingPoint& op,
                                      const PlantConfig& cfg, double tol = 1e-6,
                                      int max_steps = 40000) {
  PlantState s;
  s.n_eng = std::clamp(op.n_eng, cfg.n_idle, cfg.n_redline);
  s.v_vehicle = std::max(0.0, (s.n_eng - cfg.n_idle) / cfg.k_gear);
  s.p_intake = cfg.p_ambient_kpa;
  s.p_exhaust = cfg.p_ambient_kpa + 5.0;
  s.n_turbo = 30000.0;
  s.x_burned = 0.0;
  s.t_exhaust = 600.0;

  SensorFrame frame;
  double resid[5] = {};
  int settled = 0;  // consecutive steps below tol, so oscillation peaks don't pass
  for (int i = 0; i < max_steps; ++i) {
    auto [next, f] = step(s, cmd, cfg, /*pin_speed=*/true);
    auto rel = [](double a, double b) { return std::abs(b - a) / std::max(std::abs(a), 1.0); };
    resid[0] = rel(s.p_intake, next.p_intake);
    resid[1] = rel(s.p_exhaust, next.p_exhaust);
    resid[2] = rel(s.n_turbo, next.n_turbo);
    resid[3] = rel(s.x_burned, next.x_burned);
    resid[4] = rel(s.t_exhaust, next.t_exhaust);
    s = next;
    frame = f;
    if (std::max({resid[0], resid[1], resid[2], resid[3], resid[4]}) < tol) {
      if (++settled >= 10) return {s, frame, i + 1};
    } else {
      settled = 0;
    }
  }
  throw ConvergenceError(
      "plant steady_state did not converge; per-step residuals: p_intake=" +
      std::to_string(resid[0]) + " p_exhaust=" + std::to_string(resid[1]) +
      " n_turbo=" + std::to_string(resid[2]) + " x_burned=" + std::to_string(resid[3]) +
      " t_exhaust=" + std::to_string(resid[4]));
}

inline SensorFrame steady_state(const ActuatorCommand& cmd, const OperatingPoint& op,
                                const PlantConfig& cfg) {
  return steady_state_full(cmd, op, cfg).frame;
}

// ---- config & logging plumbing ----

inline PlantConfig config_from_kv(const KvConfig& kv) {
  PlantConfig c;
  c.dt_s = kv.get_double("plant.dt_s", c.dt_s);
  c.displacement_cm3 = kv.get_double("plant.displacement_cm3", c.displacement_cm3);
  c.n_cyl = static_cast<int>(kv.get_int("plant.n_cyl", c.n_cyl));
  c.curb_mass_kg = kv.get_double("plant.curb_mass_kg", c.curb_mass_kg);
  c.p_ambient_kpa = kv.get_double("plant.p_ambient_kpa", c.p_ambient_kpa);
  c.t_intake_k = kv.get_double("plant.t_intake_k", c.t_intake_k);
  c.c_hp_egr = kv.get_double("plant.c_hp_egr", c.c_hp_egr);
  c.c_lp_egr = kv.get_double("plant.c_lp_egr", c.c_lp_egr);
  c.c_comp = kv.get_double("plant.c_comp", c.c_comp);
  c.c_turb = kv.get_double("plant.c_turb", c.c_turb);
  c.turbo_inertia = kv.get_double("plant.turbo_inertia", c.turbo_inertia);
  c.c_nox = kv.get_double("plant.c_nox", c.c_nox);
  c.c_soot = kv.get_double("plant.c_soot", c.c_soot);
  c.k_nox_o2 = kv.get_double("plant.k_nox_o2", c.k_nox_o2);
  c.k_soot = kv.get_double("plant.k_soot", c.k_soot);
  c.n_idle = kv.get_double("plant.n_idle", c.n_idle);
  c.k_gear = kv.get_double("plant.k_gear", c.k_gear);
  c.m_inj_cap_mg = kv.get_double("plant.m_inj_cap_mg", c.m_inj_cap_mg);
  c.validate();
  return c;
}

inline std::vector<std::string> trajectory_header() {
  return {"time_s",     "p_intake",  "p_exhaust", "n_turbo",   "x_burned",
          "n_eng",      "v_vehicle", "t_exhaust", "m_air_act", "p_boost_act",
          "p_boost_dev", "mdot_nox", "mdot_soot", "lambda",    "torque",
          "u_hp_egr",   "u_lp_egr",  "u_throttle", "u_vgt",    "m_inj_tot"};
}

inline std::vector<double> trajectory_row(double time_s, const PlantState& s,
                                          const SensorFrame& f, const ActuatorCommand& c) {
  return {time_s,     s.p_intake,  s.p_exhaust, s.n_turbo,   s.x_burned,
          s.n_eng,    s.v_vehicle, s.t_exhaust, f.m_air_act, f.p_boost_act,
          f.p_boost_dev, f.mdot_nox, f.mdot_soot, f.lambda,   f.torque,
          c.u_hp_egr, c.u_lp_egr,  c.u_throttle, c.u_vgt,    c.m_inj_tot};
}

}  // namespace recal::plant
