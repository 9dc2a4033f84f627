// Command-line shell over the calibration library: run rounds, validate
// artifacts, export maps, and turn run directories into report CSVs.

#include "CLI11.hpp"
#include "recal/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace recal;
namespace fs = std::filesystem;

// RECAL_LOG=quiet|info|debug (default info). Logs go to stderr so stdout
// stays clean for piped data.
int log_level() {
  const char* v = std::getenv("RECAL_LOG");
  if (!v) return 1;
  std::string s(v);
  if (s == "quiet") return 0;
  if (s == "debug") return 2;
  return 1;
}

void info(const std::string& m) {
  if (log_level() >= 1) std::cerr << m << "\n";
}

void debug(const std::string& m) {
  if (log_level() >= 2) std::cerr << m << "\n";
}

std::string timestamp_utc() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

KvConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  return KvConfig::parse(io::read_file(path), path);
}

cycles::CycleLibrary builtin_cycles(double dt) {
  cycles::CycleLibrary lib;
  lib.cycles.push_back(cycles::demo_cycle(dt));
  lib.cycles.push_back(cycles::synthetic_wltc(dt));
  return lib;
}

maps::LookupMap2D resolve_base_map(const KvConfig& kv) {
  maps::LookupMap2D map;
  if (kv.has("map.base_file")) {
    auto path = kv.get_string("map.base_file", "");
    if (!fs::exists(path)) throw ConfigError("base map file not found: " + path);
    map = maps::deserialize(io::read_file(path));
  } else {
    map = ecu::default_base_map();
  }
  double f = kv.get_double("map.detune_factor", 1.0);
  if (f != 1.0) {
    if (!(f > 0.0)) throw ConfigError("map.detune_factor must be > 0");
    maps::Grid2 v = map.values();
    for (size_t i = 0; i < v.nx(); ++i)
      for (size_t j = 0; j < v.ny(); ++j) v.at(i, j) *= f;
    map = map.with_values(std::move(v), map.version() + "*" + text::format_double(f));
  }
  return map;
}

struct MinionSpec {
  int local_count = 0;  // 0 means run in the master process
  std::vector<std::pair<std::string, std::uint16_t>> remotes;
};

MinionSpec parse_minions(const std::string& spec) {
  MinionSpec out;
  if (spec.empty()) return out;
  if (spec.find(':') == std::string::npos) {
    out.local_count = static_cast<int>(text::parse_int(spec, "--minions"));
    if (out.local_count < 1) throw ConfigError("--minions count must be >= 1");
    return out;
  }
  for (auto part : text::split(spec, ',')) {
    auto entry = text::trim(part);
    auto colon = entry.rfind(':');
    if (colon == std::string_view::npos || colon == 0 || colon + 1 == entry.size())
      throw ConfigError("--minions entry '" + std::string(entry) + "' is not host:port");
    long long port = text::parse_int(entry.substr(colon + 1), "--minions port");
    if (port < 1 || port > 65535)
      throw ConfigError("--minions port out of range: " + std::to_string(port));
    out.remotes.emplace_back(std::string(entry.substr(0, colon)),
                             static_cast<std::uint16_t>(port));
  }
  return out;
}

pipeline::MinionFactory remote_minions(std::vector<std::pair<std::string, std::uint16_t>> eps) {
  // The wire protocol carries policies and experience, not maps; a remote
  // minion keeps whatever map its own config loaded. That is why remote
  // workers are restricted to single-round runs.
  return [eps = std::move(eps)](const maps::LookupMap2D&) {
    pipeline::MinionSet set;
    for (const auto& [host, port] : eps) {
      debug("connecting to minion " + host + ":" + std::to_string(port));
      set.transports.push_back(
          std::shared_ptr<distrib::Transport>(distrib::connect_to(host, port)));
    }
    set.shutdown = [transports = set.transports] {
      for (const auto& t : transports) t->close();
    };
    return set;
  };
}

struct RunSetup {
  pipeline::PipelineConfig cfg;
  pipeline::Environment env;
  maps::LookupMap2D base_map;
};

RunSetup make_setup(const KvConfig& kv) {
  RunSetup s;
  s.cfg = pipeline::pipeline_config_from_kv(kv);
  s.env.ecu_cfg = ecu::config_from_kv(kv);
  // One residual-authority knob: unless the ecu keys are set explicitly, the
  // runtime delta bounds follow the pipeline clamp that also limits
  // distillation, so the agent can never explore outside what the map may
  // absorb.
  if (!kv.has("ecu.delta_abs_mg"))
    s.env.ecu_cfg.delta_clamp.max_abs_delta = s.cfg.clamp.max_abs_delta;
  if (!kv.has("ecu.delta_rel"))
    s.env.ecu_cfg.delta_clamp.max_rel_delta = s.cfg.clamp.max_rel_delta;
  s.env.plant_cfg = plant::config_from_kv(kv);
  s.env.library = builtin_cycles(s.env.plant_cfg.dt_s);
  s.base_map = resolve_base_map(kv);
  return s;
}

// ---- calibrate ----

int cmd_calibrate(const std::string& config_path, int rounds_override,
                  long long seed_override, const std::string& minion_spec,
                  const std::string& out_dir) {
  KvConfig kv = load_config(config_path);
  if (rounds_override > 0) kv.set_int("pipeline.rounds", rounds_override);
  if (seed_override >= 0) kv.set_int("pipeline.master_seed", seed_override);

  RunSetup setup = make_setup(kv);
  pipeline::PipelineConfig& cfg = setup.cfg;

  MinionSpec minions = parse_minions(minion_spec);
  if (!minions.remotes.empty() && cfg.rounds > 1)
    throw ConfigError(
        "remote minions cannot receive per-round map updates; "
        "use --rounds 1 or local --minions <n>");
  if (minions.local_count > 0)
    setup.env.minions = pipeline::make_local_minions(minions.local_count, setup.env.library,
                                                     setup.env.ecu_cfg, setup.env.plant_cfg,
                                                     cfg.episode_options());
  else if (!minions.remotes.empty())
    setup.env.minions = remote_minions(minions.remotes);

  fs::path out(out_dir);

  // The manifest is the resolved configuration: replaying it reproduces the
  // run byte-for-byte. Written before the rounds so aborted runs keep it.
  KvConfig manifest = kv;
  pipeline::config_to_kv(cfg, manifest);
  std::string manifest_text = "# resolved calibration manifest\n# written: " + timestamp_utc() +
                              "\n" + manifest.serialize();
  io::atomic_write(out / "manifest.toml", manifest_text);
  io::atomic_write(out / "map_initial.map", maps::serialize(setup.base_map));

  maps::LookupMap2D map = setup.base_map;
  std::optional<rl::PolicyParameters> carry;
  for (int r = 1; r <= cfg.rounds; ++r) {
    info("round " + std::to_string(r) + "/" + std::to_string(cfg.rounds) + " on '" +
         cfg.train_cycle + "' ...");
    auto res = pipeline::run_round(cfg, setup.env, map, r,
                                   cfg.warm_start && carry ? &*carry : nullptr);
    pipeline::write_round_artifacts(out, res);
    info("  best validation return " + text::format_double(res.best_return) + ", " +
         std::to_string(res.diff.clipped_cells) + " clipped cells, quantization loss " +
         text::format_double(res.quantization_loss));
    if (res.training_aborted) {
      std::cerr << "error: round " << r << " aborted: " << res.stop_reason
                << " (partial artifacts kept under " << out.string() << ")\n";
      return 1;
    }
    if (res.stopped_early) info("  stopped early: " + res.stop_reason);
    map = res.map_after;
    carry = res.best_agent;
  }
  io::atomic_write(out / "final_map.map", maps::serialize(map));
  info("done; artifacts under " + out.string());
  return 0;
}

// ---- validate ----

int cmd_validate(const std::string& config_path, const std::string& map_path,
                 const std::string& policy_path, const std::string& cycle_id,
                 const std::string& out_dir) {
  KvConfig kv = load_config(config_path);
  RunSetup setup = make_setup(kv);
  const pipeline::PipelineConfig& cfg = setup.cfg;

  maps::LookupMap2D map = setup.base_map;
  if (!map_path.empty()) {
    if (!fs::exists(map_path)) throw ConfigError("map file not found: " + map_path);
    map = maps::deserialize(io::read_file(map_path));
  }
  const auto& norm = cfg.obs_norm;
  if (norm.n_lo > map.x_axis().front() || norm.n_hi < map.x_axis().back() ||
      norm.m_lo > map.y_axis().front() || norm.m_hi < map.y_axis().back())
    throw ContractError("map axes fall outside the configured observation window; "
                        "this map was not calibrated for this configuration");

  std::optional<rl::PolicyParameters> policy;
  if (!policy_path.empty()) {
    if (!fs::exists(policy_path)) throw ConfigError("policy file not found: " + policy_path);
    policy = rl::deserialize_policy(io::read_file(policy_path));
  }

  const auto& cycle = setup.env.library.find(cycle_id.empty() ? cfg.validation_cycle : cycle_id);
  cycles::RunOptions opt = cfg.episode_options();
  opt.explore = false;
  opt.seed = 0;

  io::CsvWriter csv({"time_s", "v_target_kmh", "v_actual_kmh", "u_hp_egr_pct", "u_lp_egr_pct",
                     "mdot_nox_mg_s", "mdot_soot_mg_s", "p_boost_dev_kpa", "cum_nox_g",
                     "cum_soot_g"});
  const int period = opt.agent_period_steps;
  const double dt = setup.env.plant_cfg.dt_s;
  int k = 0;
  double hp = 0, lp = 0, nox = 0, soot = 0, dev = 0;
  double cum_nox_g = 0, cum_soot_g = 0, sum_hp = 0, sum_lp = 0;
  std::vector<double> target, actual;
  size_t steps = 0;
  cycles::TraceSink sink = [&](const cycles::StepTrace& tr) {
    hp += tr.command.u_hp_egr;
    lp += tr.command.u_lp_egr;
    nox += tr.sensors.mdot_nox;
    soot += tr.sensors.mdot_soot;
    dev += tr.sensors.p_boost_dev;
    cum_nox_g += tr.sensors.mdot_nox * dt / 1000.0;
    cum_soot_g += tr.sensors.mdot_soot * dt / 1000.0;
    sum_hp += tr.command.u_hp_egr;
    sum_lp += tr.command.u_lp_egr;
    target.push_back(tr.v_target_kmh);
    actual.push_back(tr.v_actual_kmh);
    ++steps;
    if (++k == period) {
      csv.row({tr.time_s, tr.v_target_kmh, tr.v_actual_kmh, hp / period, lp / period,
               nox / period, soot / period, dev / period, cum_nox_g, cum_soot_g});
      k = 0;
      hp = lp = nox = soot = dev = 0;
    }
  };

  auto ep = cycles::run_episode(cycle, ecu::VirtualEcu(setup.env.ecu_cfg, map),
                                setup.env.plant_cfg, policy ? &*policy : nullptr, opt, sink);

  fs::path out(out_dir);
  io::atomic_write(out / "validation.csv", csv.str());

  io::CsvWriter summary({"return", "nox_g", "soot_g", "speed_rmse_kmh", "mean_hp_egr_pct",
                         "mean_lp_egr_pct", "aborted"});
  summary.row({ep.cumulative_return, cum_nox_g, cum_soot_g,
               cycles::speed_rmse_kmh(target, actual), steps ? sum_hp / steps : 0.0,
               steps ? sum_lp / steps : 0.0, ep.aborted ? 1.0 : 0.0});
  io::atomic_write(out / "summary.csv", summary.str());

  info("validated '" + cycle.id + "': return " + text::format_double(ep.cumulative_return) +
       ", NOx " + text::format_double(cum_nox_g) + " g, soot " +
       text::format_double(cum_soot_g) + " g");
  return ep.aborted ? 1 : 0;
}

// ---- export ----

std::string map_long_csv(const maps::LookupMap2D& map) {
  io::CsvWriter csv({"n_eng_rpm", "m_inj_mg", "m_air_setpoint_mg"});
  for (size_t i = 0; i < map.x_axis().size(); ++i)
    for (size_t j = 0; j < map.y_axis().size(); ++j)
      csv.row({map.x_axis()[i], map.y_axis()[j], map.value(i, j)});
  return csv.str();
}

int cmd_export(const std::string& map_path, const std::string& format,
               const std::string& out_path) {
  if (!fs::exists(map_path)) throw ConfigError("map file not found: " + map_path);
  auto map = maps::deserialize(io::read_file(map_path));
  if (format == "map")
    io::atomic_write(out_path, maps::serialize(map));
  else if (format == "csv")
    io::atomic_write(out_path, map_long_csv(map));
  else
    throw ConfigError("unknown export format '" + format + "' (expected map|csv)");
  info("exported " + map_path + " -> " + out_path);
  return 0;
}

// ---- report ----

std::vector<std::vector<double>> read_csv_rows(const fs::path& path) {
  auto content = io::read_file(path);
  std::vector<std::vector<double>> rows;
  bool header = true;
  for (auto line : text::split(content, '\n')) {
    auto t = text::trim(line);
    if (t.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    rows.push_back(text::parse_double_list(t, path.string()));
  }
  return rows;
}

int cmd_report(const std::string& run_dir, const std::string& out_override) {
  fs::path run(run_dir);
  int n_rounds = 0;
  while (fs::exists(pipeline::round_dir(run, n_rounds + 1))) ++n_rounds;
  if (n_rounds == 0) throw ConfigError("no round artifacts under " + run_dir);
  fs::path out = out_override.empty() ? run / "report" : fs::path(out_override);

  // Pareto cloud across all rounds, plus the global frontier.
  io::CsvWriter pareto({"round", "nox_g", "soot_g", "return"});
  std::vector<pipeline::ParetoRecord> all;
  for (int r = 1; r <= n_rounds; ++r) {
    for (const auto& row : read_csv_rows(pipeline::round_dir(run, r) / "pareto.csv")) {
      pareto.row({static_cast<double>(r), row[0], row[1], row[2]});
      all.push_back({row[0], row[1], row[2]});
    }
  }
  io::atomic_write(out / "pareto.csv", pareto.str());
  io::CsvWriter frontier({"nox_g", "soot_g", "return"});
  for (const auto& p : pipeline::pareto_report(all).frontier)
    frontier.row({p.nox_g, p.soot_g, p.ret});
  io::atomic_write(out / "pareto_frontier.csv", frontier.str());

  // One continuous learning curve across rounds. Validation returns are
  // sparse, so each training iteration carries the most recent one (rows
  // before the first validation borrow it backwards).
  io::CsvWriter curve({"iteration", "train_return", "val_return", "entropy"});
  int offset = 0;
  for (int r = 1; r <= n_rounds; ++r) {
    auto train = read_csv_rows(pipeline::round_dir(run, r) / "training.csv");
    auto vals = read_csv_rows(pipeline::round_dir(run, r) / "validations.csv");
    for (const auto& row : train) {
      int iter = static_cast<int>(row[0]);
      double val = vals.empty() ? 0.0 : vals.front()[1];
      for (const auto& v : vals)
        if (v[0] <= iter) val = v[1];
      curve.row({static_cast<double>(offset + iter), row[1], val, row[2]});
    }
    offset += static_cast<int>(train.size());
  }
  io::atomic_write(out / "learning_curve.csv", curve.str());

  for (int r = 1; r <= n_rounds; ++r) {
    auto map = maps::deserialize(io::read_file(pipeline::round_dir(run, r) / "map_after.map"));
    io::atomic_write(out / ("map_evolution_round_" + std::to_string(r) + ".csv"),
                     map_long_csv(map));
  }

  info("report for " + std::to_string(n_rounds) + " round(s) under " + out.string());
  return 0;
}

// ---- minion ----

int cmd_minion(const std::string& config_path, int port) {
  KvConfig kv = load_config(config_path);
  RunSetup setup = make_setup(kv);
  distrib::Listener listener(static_cast<std::uint16_t>(port));
  info("minion listening on 127.0.0.1:" + std::to_string(listener.port()));
  std::unique_ptr<distrib::SocketTransport> t;
  while (!t) t = listener.accept_one(std::chrono::milliseconds(500));
  info("master connected; serving episodes");
  auto runner = pipeline::make_runner(setup.env, setup.base_map, setup.cfg.episode_options());
  distrib::serve_minion(*t, runner);
  info("master disconnected; exiting");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"map-based air-mass setpoint calibration with residual policy learning"};
  app.require_subcommand(1);

  std::string config_path, minions, out_dir = "run_out";
  int rounds_override = 0;
  long long seed_override = -1;
  auto* calibrate = app.add_subcommand("calibrate", "run calibration rounds");
  calibrate->add_option("--config", config_path, "configuration file")->required();
  calibrate->add_option("--rounds", rounds_override, "override configured round count");
  calibrate->add_option("--seed", seed_override, "override the master seed");
  calibrate->add_option("--minions", minions, "worker count or host:port list");
  calibrate->add_option("--out", out_dir, "run directory for artifacts");

  std::string v_map, v_policy, v_cycle, v_out = ".";
  auto* validate = app.add_subcommand("validate", "run a deterministic validation episode");
  validate->add_option("--config", config_path, "configuration file")->required();
  validate->add_option("--map", v_map, "setpoint map file (default: configured base map)");
  validate->add_option("--policy", v_policy, "policy snapshot applied as a residual");
  validate->add_option("--cycle", v_cycle, "drive cycle id (default: configured)");
  validate->add_option("--out", v_out, "output directory");

  std::string e_map, e_format = "map", e_out;
  auto* exp = app.add_subcommand("export", "re-emit a map in a text format");
  exp->add_option("--map", e_map, "map file")->required();
  exp->add_option("--format", e_format, "map|csv");
  exp->add_option("--out", e_out, "output file")->required();

  std::string r_run, r_out;
  auto* report = app.add_subcommand("report", "emit report CSVs from a run directory");
  report->add_option("--run", r_run, "run directory written by calibrate")->required();
  report->add_option("--out", r_out, "report directory (default: <run>/report)");

  int m_port = 0;
  auto* minion = app.add_subcommand("minion", "serve episodes to a remote master");
  minion->add_option("--config", config_path, "configuration file")->required();
  minion->add_option("--port", m_port, "listen port (0 picks a free one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad usage is distinct from runtime failure
  }

  try {
    if (calibrate->parsed())
      return cmd_calibrate(config_path, rounds_override, seed_override, minions, out_dir);
    if (validate->parsed()) return cmd_validate(config_path, v_map, v_policy, v_cycle, v_out);
    if (exp->parsed()) return cmd_export(e_map, e_format, e_out);
    if (report->parsed()) return cmd_report(r_run, r_out);
    if (minion->parsed()) return cmd_minion(config_path, m_port);
    return 2;
  } catch (const recal::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const recal::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
