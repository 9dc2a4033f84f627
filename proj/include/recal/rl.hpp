#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "recal/errors.hpp"
#include "recal/kvconfig.hpp"
#include "recal/nets.hpp"
#include "recal/rng.hpp"
#include "recal/text.hpp"

// Residual PPO learner. The policy proposes a Gaussian delta on the air-mass
// setpoint over a 2D operating-point observation; everything (GAE, the
// clipped surrogate, entropy bonus, Adam) is implemented here so the gradient
// path can be audited against finite differences.
namespace recal::rl {

inline constexpr double kLog2Pi = 1.8378770664093453;  // ln(2*pi)

// Operating-point observation, normalized channel-wise to [-1, 1].
struct Observation {
  double n_eng = 0.0;
  double m_inj_tot = 0.0;
};

struct ObsNorm {
  double n_lo = 800.0, n_hi = 3600.0;
  double m_lo = 0.0, m_hi = 45.0;

  Observation normalize(double n_eng, double m_inj) const {
    auto to_unit = [](double v, double lo, double hi) {
      return std::clamp(2.0 * (v - lo) / (hi - lo) - 1.0, -1.0, 1.0);
    };
    return {to_unit(n_eng, n_lo, n_hi), to_unit(m_inj, m_lo, m_hi)};
  }
  std::pair<double, double> denormalize(const Observation& o) const {
    return {n_lo + (o.n_eng + 1.0) / 2.0 * (n_hi - n_lo),
            m_lo + (o.m_inj_tot + 1.0) / 2.0 * (m_hi - m_lo)};
  }
};

struct ResidualAction {
  double mu = 0.0;      // mg/stroke
  double sigma = 0.0;   // mg/stroke
  double sample = 0.0;  // mg/stroke, pre-clamp draw (clamped at injection)
};

struct Experience {
  Observation s;
  ResidualAction a;
  Observation s_next;
  double r = 0.0;
  bool done = false;
  double logp = 0.0;  // of a.sample under the acting policy
};

// Per-agent-step diagnostics carried alongside the experiences.
struct StepDiag {
  double nox_mg = 0.0;        // integrated over the agent period
  double soot_mg = 0.0;
  double boost_dev_kpa = 0.0; // mean |deviation|
};

struct Episode {
  std::vector<Experience> steps;
  std::vector<StepDiag> diag;
  double cumulative_return = 0.0;  // undiscounted sum of rewards
  std::uint64_t work_item_id = 0;
  std::uint64_t seed = 0;
  std::string cycle_id;
  std::uint64_t policy_version = 0;
  bool aborted = false;  // plant fault: preserved for diagnosis, not training

  void finalize() {
    cumulative_return = 0.0;
    for (auto& e : steps) {
      cumulative_return += e.r;
      e.done = false;
    }
    if (!steps.empty()) steps.back().done = true;
  }
};

struct RewardWeights {
  double alpha1 = 1.0;  // per mg/s NOx
  double alpha2 = 1.0;  // per mg/s soot
  double alpha3 = 1.0;  // per kPa |boost deviation|

  void validate() const {
    if (alpha1 < 0 || alpha2 < 0 || alpha3 < 0)
      throw ConfigError("reward weights must be >= 0");
    if (alpha1 + alpha2 + alpha3 <= 0.0)
      throw ConfigError("at least one reward weight must be > 0");
  }
};

// Penalty-only reward on one sensor frame.
template <typename Frame>
inline double reward(const Frame& frame, const RewardWeights& w) {
  return -w.alpha1 * frame.mdot_nox - w.alpha2 * frame.mdot_soot -
         w.alpha3 * std::abs(frame.p_boost_dev);
}

// Scale weights so each penalty term contributes comparably on a baseline
// run. Inputs are the mean magnitudes observed on that run; zero-mean
// channels keep their prior weight.
inline RewardWeights balance_weights(double mean_nox, double mean_soot, double mean_boost_dev,
                                     const RewardWeights& prior = {}) {
  if (mean_nox < 0 || mean_soot < 0 || mean_boost_dev < 0)
    throw ContractError("balance_weights: mean magnitudes must be >= 0");
  RewardWeights w = prior;
  double target = 1.0;  // each term ~= 1 reward unit on the baseline
  if (mean_nox > 0) w.alpha1 = target / mean_nox;
  if (mean_soot > 0) w.alpha2 = target / mean_soot;
  if (mean_boost_dev > 0) w.alpha3 = target / mean_boost_dev;
  w.validate();
  return w;
}

struct TrainConfig {
  double gamma = 0.99;
  double lambda_gae = 0.95;
  double clip_ratio = 0.2;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double learning_rate = 3e-4;
  int epochs = 8;
  int minibatch = 256;
  std::uint64_t seed = 1;
  std::vector<int> hidden = {32, 32};
  double action_scale = 25.0;   // mg per unit of raw policy output
  double value_scale = 25.0;    // reward units per unit of raw value output
  double sigma_init = 10.0;     // mg
  double log_sigma_min = -4.0;
  double log_sigma_max = 2.5;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
    if (!(lambda_gae >= 0.0 && lambda_gae <= 1.0))
      throw ConfigError("lambda_gae must be in [0, 1]");
    if (!(clip_ratio > 0.0 && clip_ratio < 1.0))
      throw ConfigError("clip_ratio must be in (0, 1)");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (epochs < 1 || minibatch < 1) throw ConfigError("epochs/minibatch must be >= 1");
    if (!(sigma_init > 0.0)) throw ConfigError("sigma_init must be > 0");
  }
};

struct PolicyParameters {
  nets::Mlp policy;       // 2 -> hidden -> 1 (mu, scaled)
  nets::Mlp value;        // 2 -> hidden -> 1 (scaled)
  double log_sigma = 0.0; // state-independent, learned
  double action_scale = 25.0;
  double value_scale = 25.0;
  std::uint64_t version = 0;

  bool finite() const {
    return policy.params_finite() && value.params_finite() && std::isfinite(log_sigma);
  }
};

inline PolicyParameters make_params(const TrainConfig& cfg) {
  cfg.validate();
  std::vector<int> psizes{2};
  psizes.insert(psizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  psizes.push_back(1);
  PolicyParameters p;
  p.policy = nets::Mlp(psizes);
  p.value = nets::Mlp(psizes);
  Rng rng(mix_seed(cfg.seed, 0x5eed));
  p.policy.init(rng);
  p.value.init(rng);
  p.log_sigma = std::log(cfg.sigma_init);
  p.action_scale = cfg.action_scale;
  p.value_scale = cfg.value_scale;
  p.version = 0;
  return p;
}

inline std::pair<double, double> policy_forward(const PolicyParameters& p,
                                                const Observation& obs) {
  double mu = p.policy.forward({obs.n_eng, obs.m_inj_tot})[0] * p.action_scale;
  double sigma = std::exp(p.log_sigma);
  if (!std::isfinite(mu) || !std::isfinite(sigma))
    throw NumericalFault("policy network produced non-finite output");
  return {mu, sigma};
}

inline double value_forward(const PolicyParameters& p, const Observation& obs) {
  return p.value.forward({obs.n_eng, obs.m_inj_tot})[0] * p.value_scale;
}

inline double gaussian_logp(double x, double mu, double sigma) {
  double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * kLog2Pi;
}

struct ActionSample {
  ResidualAction action;
  double logp = 0.0;
};

// explore=true draws from N(mu, sigma^2); explore=false is validation mode and
// returns the mean. logp always refers to the returned sample, pre-clamp.
inline ActionSample sample_action(const PolicyParameters& p, const Observation& obs, Rng& rng,
                                  bool explore) {
  auto [mu, sigma] = policy_forward(p, obs);
  ActionSample out;
  out.action.mu = mu;
  out.action.sigma = sigma;
  out.action.sample = explore ? mu + sigma * rng.gaussian() : mu;
  out.logp = gaussian_logp(out.action.sample, mu, sigma);
  return out;
}

inline double episode_return(const Episode& ep, double gamma) {
  double g = 1.0, sum = 0.0;
  for (const auto& e : ep.steps) {
    sum += g * e.r;
    g *= gamma;
  }
  return sum;
}

// Standard GAE recursion; values carries one bootstrap entry beyond the last
// step. Advantages are returned raw -- normalization happens per update batch.
inline std::vector<double> compute_gae(const Episode& ep, const std::vector<double>& values,
                                       double gamma, double lambda_gae) {
  if (values.size() != ep.steps.size() + 1)
    throw ShapeError("compute_gae: values must have length steps+1 (bootstrap)");
  std::vector<double> adv(ep.steps.size(), 0.0);
  double carry = 0.0;
  for (size_t t = ep.steps.size(); t-- > 0;) {
    double mask = ep.steps[t].done ? 0.0 : 1.0;
    double delta = ep.steps[t].r + gamma * values[t + 1] * mask - values[t];
    carry = delta + gamma * lambda_gae * mask * carry;
    adv[t] = carry;
  }
  return adv;
}

inline void normalize_advantages(std::vector<double>& adv) {
  if (adv.empty()) return;
  double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / adv.size();
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  var /= adv.size();
  double sd = std::sqrt(std::max(var, 1e-16));
  for (double& a : adv) a = (a - mean) / sd;
}

// Mean Gaussian differential entropy over a batch of observations. With the
// state-independent sigma this is constant per policy, but the batch form is
// the contract.
inline double entropy(const PolicyParameters& p, const std::vector<Observation>& obs_batch) {
  if (obs_batch.empty()) throw ContractError("entropy: empty observation batch");
  double sigma = std::exp(p.log_sigma);
  double h = 0.5 * std::log(2.0 * M_PI * M_E * sigma * sigma);
  return h;  // identical for every obs; mean of a constant
}

struct TrainStats {
  double mean_return = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double value_loss = 0.0;
  double policy_loss = 0.0;
  int samples = 0;
  bool aborted = false;
  std::string note;
};

// Column layout for the training-stats CSV appended once per update.
inline std::vector<std::string> stats_header() {
  return {"iteration", "mean_return", "entropy", "clip_fraction", "value_loss"};
}

inline std::vector<double> stats_row(int iteration, const TrainStats& s) {
  return {static_cast<double>(iteration), s.mean_return, s.entropy, s.clip_fraction,
          s.value_loss};
}

struct SampleBatch {
  std::vector<Observation> obs;
  std::vector<double> act;       // raw samples
  std::vector<double> logp_old;
  std::vector<double> adv;       // normalized
  std::vector<double> ret;       // GAE returns (value targets)
};

inline SampleBatch build_batch(const PolicyParameters& p, const std::vector<Episode>& episodes,
                               const TrainConfig& cfg) {
  SampleBatch b;
  for (const auto& ep : episodes) {
    if (ep.aborted || ep.steps.empty()) continue;
    std::vector<double> values(ep.steps.size() + 1, 0.0);
    for (size_t t = 0; t < ep.steps.size(); ++t) values[t] = value_forward(p, ep.steps[t].s);
    values.back() = value_forward(p, ep.steps.back().s_next);
    auto adv = compute_gae(ep, values, cfg.gamma, cfg.lambda_gae);
    for (size_t t = 0; t < ep.steps.size(); ++t) {
      b.obs.push_back(ep.steps[t].s);
      b.act.push_back(ep.steps[t].a.sample);
      b.logp_old.push_back(ep.steps[t].logp);
      b.adv.push_back(adv[t]);
      b.ret.push_back(adv[t] + values[t]);
    }
  }
  normalize_advantages(b.adv);
  return b;
}

struct LossDetail {
  double total = 0.0;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
};

// Mean PPO loss over the index set and its gradient, accumulated into the
// networks' grad buffers plus g_log_sigma. This is the exact function the
// finite-difference oracle probes.
inline LossDetail ppo_loss_and_grad(PolicyParameters& p, const SampleBatch& b,
                                    const std::vector<int>& idx, const TrainConfig& cfg,
                                    double& g_log_sigma) {
  p.policy.zero_grad();
  p.value.zero_grad();
  g_log_sigma = 0.0;
  LossDetail out;
  const double inv_n = 1.0 / static_cast<double>(idx.size());
  const double sigma = std::exp(p.log_sigma);
  const double eps = cfg.clip_ratio;

  for (int i : idx) {
    const Observation& o = b.obs[i];
    double raw_mu = p.policy.forward({o.n_eng, o.m_inj_tot})[0];
    double mu = raw_mu * p.action_scale;
    double a = b.act[i];
    double logp = gaussian_logp(a, mu, sigma);
    double ratio = std::exp(logp - b.logp_old[i]);
    double adv = b.adv[i];

    double unclipped = ratio * adv;
    double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv;
    double surrogate = std::min(unclipped, clipped);
    out.policy += -surrogate * inv_n;
    if (ratio < 1.0 - eps || ratio > 1.0 + eps) out.clip_fraction += inv_n;

    // gradient flows through the unclipped branch only where it is active
    bool active = (adv >= 0.0 && ratio <= 1.0 + eps) || (adv < 0.0 && ratio >= 1.0 - eps);
    double g_logp = active ? -adv * ratio * inv_n : 0.0;

    double z = (a - mu) / sigma;
    double dlogp_dmu = z / sigma;
    double dlogp_dlogsigma = z * z - 1.0;
    if (g_logp != 0.0) {
      p.policy.backward({g_logp * dlogp_dmu * p.action_scale});
      g_log_sigma += g_logp * dlogp_dlogsigma;
    }

    // entropy bonus: H = const + log_sigma
    out.entropy += (0.5 * (kLog2Pi + 1.0) + p.log_sigma) * inv_n;

    double raw_v = p.value.forward({o.n_eng, o.m_inj_tot})[0];
    double v = raw_v * p.value_scale;
    double verr = v - b.ret[i];
    out.value += 0.5 * verr * verr * inv_n;
    p.value.backward({cfg.value_coef * verr * inv_n * p.value_scale});
  }
  g_log_sigma -= cfg.entropy_coef;  // d(-entropy_coef * H)/dlog_sigma
  out.total = out.policy + cfg.value_coef * out.value - cfg.entropy_coef * out.entropy;
  return out;
}

// Flat layout shared by the optimizer and the gradient oracle:
// [policy weights | log_sigma | value weights].
inline std::vector<double> flatten_policy(const PolicyParameters& p) {
  std::vector<double> flat;
  p.policy.flatten_params(flat);
  flat.push_back(p.log_sigma);
  p.value.flatten_params(flat);
  return flat;
}

inline void load_policy(PolicyParameters& p, const std::vector<double>& flat) {
  if (flat.size() != p.policy.param_count() + 1 + p.value.param_count())
    throw ShapeError("policy parameter vector length mismatch");
  auto it = flat.begin();
  p.policy.load_params(it);
  p.log_sigma = *it++;
  p.value.load_params(it);
}

inline std::vector<double> flatten_grads(const PolicyParameters& p, double g_log_sigma) {
  std::vector<double> flat;
  p.policy.flatten_grads(flat);
  flat.push_back(g_log_sigma);
  p.value.flatten_grads(flat);
  return flat;
}

// Clipped-surrogate PPO over the batch. On any non-finite loss the update is
// aborted and the input parameters are returned unchanged.
inline std::pair<PolicyParameters, TrainStats> ppo_update(const PolicyParameters& params,
                                                          const std::vector<Episode>& episodes,
                                                          const TrainConfig& cfg) {
  cfg.validate();
  if (episodes.empty()) throw ContractError("ppo_update: empty episode batch");

  TrainStats stats;
  double ret_sum = 0.0;
  int ret_n = 0;
  for (const auto& ep : episodes) {
    if (ep.aborted) continue;
    ret_sum += ep.cumulative_return;
    ++ret_n;
  }
  if (ret_n == 0) {
    stats.aborted = true;
    stats.note = "all episodes aborted";
    return {params, stats};
  }
  stats.mean_return = ret_sum / ret_n;

  PolicyParameters work = params;
  SampleBatch batch = build_batch(work, episodes, cfg);
  stats.samples = static_cast<int>(batch.obs.size());
  if (batch.obs.empty()) {
    stats.aborted = true;
    stats.note = "no usable experiences";
    return {params, stats};
  }

  std::vector<double> flat = flatten_policy(work);
  nets::Adam adam(flat.size(), cfg.learning_rate);
  Rng shuffle_rng(mix_seed(cfg.seed, params.version + 1));

  std::vector<int> order(batch.obs.size());
  std::iota(order.begin(), order.end(), 0);
  double clip_sum = 0.0, vloss_sum = 0.0, ploss_sum = 0.0;
  int mb_count = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // deterministic Fisher-Yates under our own rng
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);
    for (size_t start = 0; start < order.size(); start += cfg.minibatch) {
      size_t end = std::min(order.size(), start + cfg.minibatch);
      std::vector<int> idx(order.begin() + start, order.begin() + end);
      double g_log_sigma = 0.0;
      auto loss = ppo_loss_and_grad(work, batch, idx, cfg, g_log_sigma);
      if (!std::isfinite(loss.total)) {
        stats.aborted = true;
        stats.note = "non-finite loss at epoch " + std::to_string(epoch);
        return {params, stats};
      }
      clip_sum += loss.clip_fraction;
      vloss_sum += loss.value;
      ploss_sum += loss.policy;
      ++mb_count;

      std::vector<double> grads = flatten_grads(work, g_log_sigma);
      adam.step(flat, grads);
      load_policy(work, flat);
      work.log_sigma = std::clamp(work.log_sigma, cfg.log_sigma_min, cfg.log_sigma_max);
      flat[work.policy.param_count()] = work.log_sigma;
    }
  }

  if (!work.finite()) {
    stats.aborted = true;
    stats.note = "non-finite parameters after update";
    return {params, stats};
  }

  work.version = params.version + 1;
  stats.entropy = entropy(work, batch.obs);
  stats.clip_fraction = mb_count ? clip_sum / mb_count : 0.0;
  stats.value_loss = mb_count ? vloss_sum / mb_count : 0.0;
  stats.policy_loss = mb_count ? ploss_sum / mb_count : 0.0;
  return {std::move(work), stats};
}

// ---- snapshot serialization: versioned flat weight list ----

inline std::string serialize_policy(const PolicyParameters& p) {
  auto arch_line = [](const nets::Mlp& net) {
    std::string s;
    for (size_t i = 0; i < net.sizes().size(); ++i) {
      if (i) s += ' ';
      s += std::to_string(net.sizes()[i]);
    }
    return s;
  };
  auto weights_line = [](const nets::Mlp& net) {
    std::vector<double> flat;
    net.flatten_params(flat);
    std::string s;
    for (size_t i = 0; i < flat.size(); ++i) {
      if (i) s += ' ';
      s += text::format_double(flat[i]);
    }
    return s;
  };
  std::string out = "policy_snapshot v1\n";
  out += "version: " + std::to_string(p.version) + "\n";
  out += "arch_policy: " + arch_line(p.policy) + "\n";
  out += "arch_value: " + arch_line(p.value) + "\n";
  out += "action_scale: " + text::format_double(p.action_scale) + "\n";
  out += "value_scale: " + text::format_double(p.value_scale) + "\n";
  out += "log_sigma: " + text::format_double(p.log_sigma) + "\n";
  out += "policy_weights: " + weights_line(p.policy) + "\n";
  out += "value_weights: " + weights_line(p.value) + "\n";
  return out;
}

inline PolicyParameters deserialize_policy(const std::string& content) {
  auto lines = text::split(content, '\n');
  if (lines.empty() || text::trim(lines[0]) != "policy_snapshot v1")
    throw ParseError("policy snapshot: bad magic line");
  PolicyParameters p;
  std::vector<int> arch_policy, arch_value;
  std::vector<double> wp, wv;
  bool have_wp = false, have_wv = false;
  for (size_t li = 1; li < lines.size(); ++li) {
    auto line = text::trim(lines[li]);
    if (line.empty()) continue;
    auto colon = line.find(':');
    if (colon == std::string_view::npos)
      throw ParseError("policy snapshot line " + std::to_string(li + 1) + ": missing ':'");
    std::string key(text::trim(line.substr(0, colon)));
    auto value = text::trim(line.substr(colon + 1));
    std::string ctx = "policy snapshot " + key;
    if (key == "version")
      p.version = static_cast<std::uint64_t>(text::parse_int(value, ctx));
    else if (key == "log_sigma")
      p.log_sigma = text::parse_double(value, ctx);
    else if (key == "action_scale")
      p.action_scale = text::parse_double(value, ctx);
    else if (key == "value_scale")
      p.value_scale = text::parse_double(value, ctx);
    else if (key == "arch_policy" || key == "arch_value") {
      std::vector<int>& arch = key == "arch_policy" ? arch_policy : arch_value;
      for (auto tok : text::split(value, ' '))
        if (!text::trim(tok).empty())
          arch.push_back(static_cast<int>(text::parse_int(text::trim(tok), ctx)));
    } else if (key == "policy_weights" || key == "value_weights") {
      std::vector<double>& w = key == "policy_weights" ? wp : wv;
      (key == "policy_weights" ? have_wp : have_wv) = true;
      for (auto tok : text::split(value, ' '))
        if (!text::trim(tok).empty()) w.push_back(text::parse_double(text::trim(tok), ctx));
    } else {
      throw ParseError("policy snapshot: unknown key '" + key + "'");
    }
  }
  if (arch_policy.empty() || arch_value.empty() || !have_wp || !have_wv)
    throw ParseError("policy snapshot: missing sections");
  p.policy = nets::Mlp(arch_policy);
  p.value = nets::Mlp(arch_value);
  if (wp.size() != p.policy.param_count() || wv.size() != p.value.param_count())
    throw ParseError("policy snapshot: weight count does not match architecture");
  auto itp = wp.begin();
  p.policy.load_params(itp);
  auto itv = wv.begin();
  p.value.load_params(itv);
  if (!p.finite()) throw ParseError("policy snapshot: non-finite weights");
  return p;
}

inline TrainConfig train_config_from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.gamma = kv.get_double("rl.gamma", c.gamma);
  c.lambda_gae = kv.get_double("rl.lambda_gae", c.lambda_gae);
  c.clip_ratio = kv.get_double("rl.clip_ratio", c.clip_ratio);
  c.entropy_coef = kv.get_double("rl.entropy_coef", c.entropy_coef);
  c.value_coef = kv.get_double("rl.value_coef", c.value_coef);
  c.learning_rate = kv.get_double("rl.learning_rate", c.learning_rate);
  c.epochs = static_cast<int>(kv.get_int("rl.epochs", c.epochs));
  c.minibatch = static_cast<int>(kv.get_int("rl.minibatch", c.minibatch));
  c.seed = static_cast<std::uint64_t>(kv.get_int("rl.seed", static_cast<long long>(c.seed)));
  c.action_scale = kv.get_double("rl.action_scale", c.action_scale);
  c.sigma_init = kv.get_double("rl.sigma_init", c.sigma_init);
  c.validate();
  return c;
}

}  // namespace recal::rl
