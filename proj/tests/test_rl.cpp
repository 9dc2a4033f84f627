#include "recal/rl.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "recal/io.hpp"

using namespace recal;

namespace {

// Bare frame carrying just the penalty channels.
struct PenaltyFrame {
  double mdot_nox = 0.0;
  double mdot_soot = 0.0;
  double p_boost_dev = 0.0;
};

rl::Episode episode_from_rewards(const std::vector<double>& rewards) {
  rl::Episode ep;
  for (double r : rewards) {
    rl::Experience e;
    e.r = r;
    ep.steps.push_back(e);
  }
  ep.finalize();
  return ep;
}

// Direct GAE definition: A_t = sum_l (gamma*lambda)^l * delta_{t+l}, truncated
// at episode end. Slow but obviously correct; the recursion must agree.
std::vector<double> gae_brute_force(const rl::Episode& ep, const std::vector<double>& values,
                                    double gamma, double lambda) {
  size_t T = ep.steps.size();
  std::vector<double> delta(T);
  for (size_t t = 0; t < T; ++t) {
    double mask = ep.steps[t].done ? 0.0 : 1.0;
    delta[t] = ep.steps[t].r + gamma * values[t + 1] * mask - values[t];
  }
  std::vector<double> adv(T, 0.0);
  for (size_t t = 0; t < T; ++t) {
    double w = 1.0;
    for (size_t l = t; l < T; ++l) {
      adv[t] += w * delta[l];
      if (ep.steps[l].done) break;
      w *= gamma * lambda;
    }
  }
  return adv;
}

rl::TrainConfig small_net_config(std::uint64_t seed) {
  rl::TrainConfig cfg;
  cfg.hidden = {2};
  cfg.action_scale = 2.0;
  cfg.value_scale = 3.0;
  cfg.sigma_init = 1.0;
  cfg.seed = seed;
  return cfg;
}

// Batch with ratios spread around 1 but kept clear of the clip boundaries so
// central differences never straddle the kink.
rl::SampleBatch random_batch(const rl::PolicyParameters& p, Rng& rng, int n, double clip_ratio) {
  rl::SampleBatch b;
  for (int i = 0; i < n; ++i) {
    rl::Observation o{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    auto [mu, sigma] = rl::policy_forward(p, o);
    double a = mu + sigma * rng.gaussian();
    double logp = rl::gaussian_logp(a, mu, sigma);
    double logp_old, ratio;
    do {
      logp_old = logp - rng.uniform(-0.35, 0.35);
      ratio = std::exp(logp - logp_old);
    } while (std::abs(ratio - (1.0 - clip_ratio)) < 5e-3 ||
             std::abs(ratio - (1.0 + clip_ratio)) < 5e-3);
    b.obs.push_back(o);
    b.act.push_back(a);
    b.logp_old.push_back(logp_old);
    b.adv.push_back(rng.gaussian());
    b.ret.push_back(5.0 * rng.gaussian());
  }
  return b;
}

double loss_at(rl::PolicyParameters& p, const rl::SampleBatch& b, const std::vector<int>& idx,
               const rl::TrainConfig& cfg) {
  double g_ls = 0.0;
  return rl::ppo_loss_and_grad(p, b, idx, cfg, g_ls).total;
}

}  // namespace

// ---- derived oracles ----

TEST(GaeOracle, RecursionMatchesBruteForceDefinition) {
  Rng rng(404);
  for (int trial = 0; trial < 200; ++trial) {
    int T = rng.uniform_int(1, 12);
    rl::Episode ep;
    std::vector<double> values(T + 1);
    for (int t = 0; t < T; ++t) {
      rl::Experience e;
      e.r = rng.uniform(-2.0, 2.0);
      ep.steps.push_back(e);
      values[t] = rng.uniform(-1.0, 1.0);
    }
    values[T] = rng.uniform(-1.0, 1.0);
    ep.finalize();
    double gamma = rng.uniform(0.5, 1.0);
    double lambda = rng.uniform(0.0, 1.0);
    auto fast = rl::compute_gae(ep, values, gamma, lambda);
    auto slow = gae_brute_force(ep, values, gamma, lambda);
    ASSERT_EQ(fast.size(), slow.size());
    for (size_t t = 0; t < fast.size(); ++t) EXPECT_NEAR(fast[t], slow[t], 1e-12);
  }
}

TEST(GaeOracle, TwoStepHandUnrolled) {
  // r = [1, 0], V = [0, 0, 0], gamma = 1, lambda = 0.5:
  // delta = [1, 0]; A_1 = 0; A_0 = 1 + 0.5 * 0 = 1.
  auto ep = episode_from_rewards({1.0, 0.0});
  auto adv = rl::compute_gae(ep, {0.0, 0.0, 0.0}, 1.0, 0.5);
  ASSERT_EQ(adv.size(), 2u);
  EXPECT_NEAR(adv[0], 1.0, 1e-15);
  EXPECT_NEAR(adv[1], 0.0, 1e-15);
}

TEST(GradOracle, AnalyticGradientMatchesCentralDifferences) {
  int worst_seed = -1;
  double worst = 0.0;
  for (int seed = 0; seed < 100; ++seed) {
    auto cfg = small_net_config(1000 + seed);
    auto params = rl::make_params(cfg);
    Rng rng(mix_seed(77, seed));
    params.log_sigma = rng.uniform(-0.5, 0.5);
    auto batch = random_batch(params, rng, 16, cfg.clip_ratio);
    std::vector<int> idx(batch.obs.size());
    std::iota(idx.begin(), idx.end(), 0);

    double g_ls = 0.0;
    rl::ppo_loss_and_grad(params, batch, idx, cfg, g_ls);
    auto analytic = rl::flatten_grads(params, g_ls);

    auto flat = rl::flatten_policy(params);
    std::vector<double> fd(flat.size());
    for (size_t i = 0; i < flat.size(); ++i) {
      double h = 1e-6 * std::max(1.0, std::abs(flat[i]));
      auto plus = flat, minus = flat;
      plus[i] += h;
      minus[i] -= h;
      rl::load_policy(params, plus);
      double lp = loss_at(params, batch, idx, cfg);
      rl::load_policy(params, minus);
      double lm = loss_at(params, batch, idx, cfg);
      fd[i] = (lp - lm) / (2.0 * h);
      rl::load_policy(params, flat);
    }

    double num = 0.0, den_a = 0.0, den_f = 0.0;
    for (size_t i = 0; i < fd.size(); ++i) {
      num += (fd[i] - analytic[i]) * (fd[i] - analytic[i]);
      den_a += analytic[i] * analytic[i];
      den_f += fd[i] * fd[i];
    }
    double rel = std::sqrt(num) / std::max({std::sqrt(den_a), std::sqrt(den_f), 1e-12});
    if (rel > worst) {
      worst = rel;
      worst_seed = seed;
    }
  }
  EXPECT_LT(worst, 1e-4) << "worst seed " << worst_seed;
}

TEST(TrainingBenchmark, ToyTrackingTaskClosesHalfTheGap) {
  // Contextual task: ideal action is -obs. The learner must close at least
  // half the gap between the initial deterministic score and the optimum (0).
  rl::TrainConfig cfg;
  cfg.hidden = {16};
  cfg.action_scale = 2.0;
  cfg.value_scale = 10.0;
  cfg.sigma_init = 0.5;
  cfg.gamma = 0.99;
  cfg.lambda_gae = 0.95;
  cfg.learning_rate = 5e-3;
  cfg.entropy_coef = 1e-3;
  cfg.epochs = 4;
  cfg.minibatch = 64;
  cfg.seed = 99;

  auto eval_policy = [](const rl::PolicyParameters& p) {
    double sum = 0.0;
    int n = 0;
    for (int k = -10; k <= 10; ++k) {
      double s = 0.1 * k;
      auto [mu, sigma] = rl::policy_forward(p, {s, 0.0});
      (void)sigma;
      double err = mu + s;
      sum += -err * err;
      ++n;
    }
    return sum / n;
  };

  auto roll = [](const rl::PolicyParameters& p, Rng& rng, int T) {
    rl::Episode ep;
    for (int t = 0; t < T; ++t) {
      rl::Observation s{rng.uniform(-1.0, 1.0), 0.0};
      auto as = rl::sample_action(p, s, rng, true);
      rl::Experience e;
      e.s = s;
      e.a = as.action;
      e.logp = as.logp;
      double err = as.action.sample + s.n_eng;
      e.r = -err * err;
      e.s_next = {rng.uniform(-1.0, 1.0), 0.0};
      ep.steps.push_back(e);
    }
    ep.finalize();
    return ep;
  };

  auto params = rl::make_params(cfg);
  Rng env_rng(mix_seed(cfg.seed, 17));
  double initial = eval_policy(params);
  ASSERT_LT(initial, -0.05);  // random init must actually be off target
  double target = 0.5 * initial;  // halfway to the optimum at 0

  double best = initial;
  int updates_used = 0;
  for (int it = 0; it < 200; ++it) {
    std::vector<rl::Episode> batch;
    for (int e = 0; e < 8; ++e) batch.push_back(roll(params, env_rng, 16));
    auto [next, stats] = rl::ppo_update(params, batch, cfg);
    ASSERT_FALSE(stats.aborted) << stats.note;
    params = std::move(next);
    best = std::max(best, eval_policy(params));
    updates_used = it + 1;
    if (best >= target) break;
  }
  EXPECT_GE(best, target) << "after " << updates_used << " updates, best " << best
                          << " vs initial " << initial;
}

// ---- reward ----

TEST(Reward, WeightedPenaltyArithmetic) {
  rl::RewardWeights w;  // (1, 1, 1)
  PenaltyFrame f{0.5, 0.2, 0.1};
  EXPECT_NEAR(rl::reward(f, w), -0.8, 1e-15);

  PenaltyFrame silent{};
  EXPECT_EQ(rl::reward(silent, w), 0.0);

  rl::RewardWeights w2{2.0, 2.0, 2.0};
  PenaltyFrame g{1.3, 0.07, -4.2};
  EXPECT_NEAR(rl::reward(g, w2), 2.0 * rl::reward(g, w), 1e-12);
}

TEST(Reward, NonPositiveAndStrictlyDecreasingPerChannel) {
  rl::RewardWeights w{0.4, 1.5, 0.02};
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    PenaltyFrame f{rng.uniform(0.0, 3.0), rng.uniform(0.0, 1.0), rng.uniform(-20.0, 20.0)};
    double base = rl::reward(f, w);
    EXPECT_LE(base, 0.0);
    PenaltyFrame fn = f;
    fn.mdot_nox += 0.1;
    EXPECT_LT(rl::reward(fn, w), base);
    PenaltyFrame fs = f;
    fs.mdot_soot += 0.1;
    EXPECT_LT(rl::reward(fs, w), base);
    PenaltyFrame fb = f;
    fb.p_boost_dev = std::abs(fb.p_boost_dev) + 0.5;
    EXPECT_LT(rl::reward(fb, w), base);
  }
}

TEST(Reward, BalanceHelperEqualizesContributions) {
  auto w = rl::balance_weights(2.0, 0.5, 10.0);
  EXPECT_NEAR(w.alpha1 * 2.0, 1.0, 1e-15);
  EXPECT_NEAR(w.alpha2 * 0.5, 1.0, 1e-15);
  EXPECT_NEAR(w.alpha3 * 10.0, 1.0, 1e-15);

  // channel with zero baseline keeps the prior weight
  rl::RewardWeights prior{7.0, 1.0, 1.0};
  auto w2 = rl::balance_weights(0.0, 0.5, 10.0, prior);
  EXPECT_EQ(w2.alpha1, 7.0);
  EXPECT_THROW(rl::balance_weights(-1.0, 0.0, 0.0), ContractError);
}

TEST(Reward, WeightValidation) {
  rl::RewardWeights neg{-0.1, 1.0, 1.0};
  EXPECT_THROW(neg.validate(), ConfigError);
  rl::RewardWeights zero{0.0, 0.0, 0.0};
  EXPECT_THROW(zero.validate(), ConfigError);
  rl::RewardWeights one_hot{0.0, 0.0, 1.0};
  EXPECT_NO_THROW(one_hot.validate());
}

// ---- policy evaluation and sampling ----

TEST(Policy, ValidationModeReturnsMeanExactly) {
  auto params = rl::make_params(small_net_config(3));
  Rng rng(10);
  rl::Observation o{0.3, -0.7};
  auto s1 = rl::sample_action(params, o, rng, false);
  auto s2 = rl::sample_action(params, o, rng, false);
  EXPECT_EQ(s1.action.sample, s1.action.mu);
  EXPECT_EQ(s2.action.sample, s2.action.mu);
  EXPECT_EQ(s1.action.sample, s2.action.sample);
  EXPECT_GT(s1.action.sigma, 0.0);
}

TEST(Policy, LogProbAtMeanUnitSigma) {
  auto cfg = small_net_config(4);
  auto params = rl::make_params(cfg);
  params.log_sigma = 0.0;  // sigma = 1
  Rng rng(11);
  auto s = rl::sample_action(params, {0.0, 0.0}, rng, false);
  EXPECT_NEAR(s.logp, -0.5 * std::log(2.0 * M_PI), 1e-12);
  EXPECT_NEAR(s.logp, -0.9189385332046727, 1e-12);
}

TEST(Policy, ExplorationIsDeterministicGivenRngState) {
  auto params = rl::make_params(small_net_config(5));
  rl::Observation o{-0.2, 0.9};
  Rng a(123), b(123);
  auto sa = rl::sample_action(params, o, a, true);
  auto sb = rl::sample_action(params, o, b, true);
  EXPECT_EQ(sa.action.sample, sb.action.sample);
  EXPECT_EQ(sa.logp, sb.logp);
  EXPECT_NE(sa.action.sample, sa.action.mu);  // exploration actually perturbs
}

TEST(Policy, NonFiniteNetworkOutputFaults) {
  auto params = rl::make_params(small_net_config(6));
  auto flat = rl::flatten_policy(params);
  flat[0] = std::numeric_limits<double>::quiet_NaN();
  rl::load_policy(params, flat);
  EXPECT_THROW(rl::policy_forward(params, {0.1, 0.1}), NumericalFault);
  EXPECT_FALSE(params.finite());
}

TEST(Policy, ObservationNormalizationMapsEnvelope) {
  rl::ObsNorm norm;
  auto lo = norm.normalize(800.0, 0.0);
  auto hi = norm.normalize(3600.0, 45.0);
  auto mid = norm.normalize(2200.0, 22.5);
  EXPECT_NEAR(lo.n_eng, -1.0, 1e-15);
  EXPECT_NEAR(lo.m_inj_tot, -1.0, 1e-15);
  EXPECT_NEAR(hi.n_eng, 1.0, 1e-15);
  EXPECT_NEAR(hi.m_inj_tot, 1.0, 1e-15);
  EXPECT_NEAR(mid.n_eng, 0.0, 1e-15);
  EXPECT_NEAR(mid.m_inj_tot, 0.0, 1e-15);
  // outside the envelope clamps
  EXPECT_EQ(norm.normalize(5000.0, 60.0).n_eng, 1.0);
  auto [n_back, m_back] = norm.denormalize(mid);
  EXPECT_NEAR(n_back, 2200.0, 1e-9);
  EXPECT_NEAR(m_back, 22.5, 1e-9);
}

// ---- returns and advantages ----

TEST(EpisodeReturn, DiscountedSum) {
  auto ep = episode_from_rewards({1.0, 1.0, 1.0});
  EXPECT_NEAR(rl::episode_return(ep, 0.5), 1.75, 1e-15);
  EXPECT_NEAR(rl::episode_return(ep, 1.0), 3.0, 1e-15);
  EXPECT_NEAR(ep.cumulative_return, 3.0, 1e-15);
  rl::Episode empty;
  EXPECT_EQ(rl::episode_return(empty, 0.9), 0.0);
}

TEST(EpisodeReturn, FinalizeMarksOnlyLastStepDone) {
  auto ep = episode_from_rewards({0.1, 0.2, 0.3, 0.4});
  for (size_t t = 0; t + 1 < ep.steps.size(); ++t) EXPECT_FALSE(ep.steps[t].done);
  EXPECT_TRUE(ep.steps.back().done);
}

TEST(Gae, SingleStepUndiscounted) {
  auto ep = episode_from_rewards({1.0});
  auto adv = rl::compute_gae(ep, {0.0, 0.0}, 1.0, 1.0);
  ASSERT_EQ(adv.size(), 1u);
  EXPECT_NEAR(adv[0], 1.0, 1e-15);
}

TEST(Gae, ZeroTdErrorGivesZeroAdvantages) {
  // V chosen so r + gamma*V' - V == 0 at every step (last step masked).
  double gamma = 0.9;
  rl::Episode ep = episode_from_rewards({0.5, 0.5, 1.0});
  std::vector<double> values(4);
  values[3] = 0.0;
  values[2] = ep.steps[2].r;  // done: no bootstrap
  values[1] = ep.steps[1].r + gamma * values[2];
  values[0] = ep.steps[0].r + gamma * values[1];
  auto adv = rl::compute_gae(ep, values, gamma, 0.7);
  for (double a : adv) EXPECT_NEAR(a, 0.0, 1e-14);
}

TEST(Gae, BootstrapLengthMismatchThrows) {
  auto ep = episode_from_rewards({1.0, 2.0});
  EXPECT_THROW(rl::compute_gae(ep, {0.0, 0.0}, 0.9, 0.9), ShapeError);
}

TEST(Advantages, NormalizationIsExact) {
  Rng rng(31);
  std::vector<double> adv(257);
  for (double& a : adv) a = rng.uniform(-5.0, 20.0);
  rl::normalize_advantages(adv);
  double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / adv.size();
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  var /= adv.size();
  EXPECT_LT(std::abs(mean), 1e-9);
  EXPECT_NEAR(var, 1.0, 1e-6);
}

// ---- entropy ----

TEST(Entropy, ClosedFormAndScaling) {
  auto params = rl::make_params(small_net_config(7));
  std::vector<rl::Observation> batch{{0.0, 0.0}, {0.5, -0.5}, {1.0, 1.0}};
  params.log_sigma = 0.0;
  double h1 = rl::entropy(params, batch);
  EXPECT_NEAR(h1, 0.5 * std::log(2.0 * M_PI * M_E), 1e-12);
  EXPECT_NEAR(h1, 1.4189385332046727, 1e-12);

  params.log_sigma = std::log(0.5);
  EXPECT_NEAR(h1 - rl::entropy(params, batch), std::log(2.0), 1e-12);

  EXPECT_THROW(rl::entropy(params, {}), ContractError);
}

TEST(Entropy, IndependentOfMean) {
  auto params = rl::make_params(small_net_config(8));
  std::vector<rl::Observation> b1{{-1.0, -1.0}};
  std::vector<rl::Observation> b2{{0.8, 0.2}};
  EXPECT_EQ(rl::entropy(params, b1), rl::entropy(params, b2));
  // shifting the mean network leaves entropy untouched
  auto flat = rl::flatten_policy(params);
  for (size_t i = 0; i < 4; ++i) flat[i] += 0.3;
  auto shifted = params;
  rl::load_policy(shifted, flat);
  EXPECT_EQ(rl::entropy(params, b1), rl::entropy(shifted, b1));
}

// ---- ppo update ----

TEST(PpoUpdate, RatioOneSurrogateEqualsMeanAdvantage) {
  auto cfg = small_net_config(9);
  auto params = rl::make_params(cfg);
  Rng rng(21);
  rl::SampleBatch b;
  for (int i = 0; i < 12; ++i) {
    rl::Observation o{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    auto [mu, sigma] = rl::policy_forward(params, o);
    double a = mu + sigma * rng.gaussian();
    b.obs.push_back(o);
    b.act.push_back(a);
    b.logp_old.push_back(rl::gaussian_logp(a, mu, sigma));  // ratio == 1 exactly
    b.adv.push_back(rng.gaussian());
    b.ret.push_back(rng.gaussian());
  }
  std::vector<int> idx(b.obs.size());
  std::iota(idx.begin(), idx.end(), 0);
  double g_ls = 0.0;
  auto loss = rl::ppo_loss_and_grad(params, b, idx, cfg, g_ls);
  double mean_adv = std::accumulate(b.adv.begin(), b.adv.end(), 0.0) / b.adv.size();
  EXPECT_NEAR(-loss.policy, mean_adv, 1e-12);
  EXPECT_EQ(loss.clip_fraction, 0.0);
}

TEST(PpoUpdate, ZeroLearningRateLeavesParametersUnchanged) {
  auto cfg = small_net_config(10);
  cfg.learning_rate = 0.0;
  auto params = rl::make_params(cfg);
  Rng rng(33);

  std::vector<rl::Episode> eps;
  for (int e = 0; e < 3; ++e) {
    rl::Episode ep;
    for (int t = 0; t < 8; ++t) {
      rl::Observation s{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      auto as = rl::sample_action(params, s, rng, true);
      rl::Experience x;
      x.s = s;
      x.a = as.action;
      x.logp = as.logp;
      x.r = rng.uniform(-1.0, 0.0);
      x.s_next = s;
      ep.steps.push_back(x);
    }
    ep.finalize();
    eps.push_back(ep);
  }

  auto before = rl::flatten_policy(params);
  auto [after, stats] = rl::ppo_update(params, eps, cfg);
  EXPECT_FALSE(stats.aborted);
  EXPECT_EQ(after.version, params.version + 1);
  auto flat_after = rl::flatten_policy(after);
  ASSERT_EQ(before.size(), flat_after.size());
  for (size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], flat_after[i]);
}

TEST(PpoUpdate, NonFiniteLossAbortsWithoutTouchingParameters) {
  auto cfg = small_net_config(11);
  auto params = rl::make_params(cfg);
  Rng rng(41);
  rl::Episode ep;
  for (int t = 0; t < 4; ++t) {
    rl::Observation s{0.0, 0.0};
    auto as = rl::sample_action(params, s, rng, true);
    rl::Experience x;
    x.s = s;
    x.a = as.action;
    x.logp = as.logp;
    x.r = 1e308;  // overflows the return accumulation
    x.s_next = s;
    ep.steps.push_back(x);
  }
  ep.finalize();

  auto before = rl::flatten_policy(params);
  auto [after, stats] = rl::ppo_update(params, {ep}, cfg);
  EXPECT_TRUE(stats.aborted);
  EXPECT_FALSE(stats.note.empty());
  EXPECT_EQ(after.version, params.version);
  auto flat_after = rl::flatten_policy(after);
  for (size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], flat_after[i]);
}

TEST(PpoUpdate, AbortedEpisodesAreExcludedFromTraining) {
  auto cfg = small_net_config(12);
  auto params = rl::make_params(cfg);
  Rng rng(51);
  rl::Episode good;
  for (int t = 0; t < 6; ++t) {
    rl::Observation s{rng.uniform(-1.0, 1.0), 0.0};
    auto as = rl::sample_action(params, s, rng, true);
    rl::Experience x;
    x.s = s;
    x.a = as.action;
    x.logp = as.logp;
    x.r = -1.0;
    x.s_next = s;
    good.steps.push_back(x);
  }
  good.finalize();
  rl::Episode bad = good;
  bad.aborted = true;
  bad.steps[2].r = std::numeric_limits<double>::infinity();

  auto [after, stats] = rl::ppo_update(params, {good, bad}, cfg);
  EXPECT_FALSE(stats.aborted);
  EXPECT_EQ(stats.samples, 6);
  EXPECT_NEAR(stats.mean_return, good.cumulative_return, 1e-12);

  rl::Episode bad2 = bad;
  auto [after2, stats2] = rl::ppo_update(params, {bad2}, cfg);
  EXPECT_TRUE(stats2.aborted);
  EXPECT_EQ(after2.version, params.version);
}

TEST(PpoUpdate, VersionIsStrictlyIncreasingAndConfigValidated) {
  auto cfg = small_net_config(13);
  auto params = rl::make_params(cfg);
  Rng rng(61);
  rl::Episode ep;
  for (int t = 0; t < 4; ++t) {
    rl::Observation s{rng.uniform(-1.0, 1.0), 0.0};
    auto as = rl::sample_action(params, s, rng, true);
    rl::Experience x;
    x.s = s;
    x.a = as.action;
    x.logp = as.logp;
    x.r = -0.5;
    x.s_next = s;
    ep.steps.push_back(x);
  }
  ep.finalize();
  auto [p1, s1] = rl::ppo_update(params, {ep}, cfg);
  auto [p2, s2] = rl::ppo_update(p1, {ep}, cfg);
  EXPECT_EQ(p1.version, 1u);
  EXPECT_EQ(p2.version, 2u);

  rl::TrainConfig bad = cfg;
  bad.gamma = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.clip_ratio = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.learning_rate = -1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(rl::ppo_update(params, {}, cfg), ContractError);
}

// ---- snapshots and stats ----

TEST(Snapshot, RoundTripIsBitExact) {
  for (int seed = 0; seed < 10; ++seed) {
    rl::TrainConfig cfg;
    cfg.hidden = seed % 2 ? std::vector<int>{8, 4} : std::vector<int>{5};
    cfg.seed = 900 + seed;
    auto params = rl::make_params(cfg);
    params.version = seed * 3 + 1;
    Rng rng(seed);
    params.log_sigma = rng.uniform(-2.0, 1.0);

    auto text1 = rl::serialize_policy(params);
    auto back = rl::deserialize_policy(text1);
    auto text2 = rl::serialize_policy(back);
    EXPECT_EQ(text1, text2);
    EXPECT_EQ(back.version, params.version);
    EXPECT_EQ(back.log_sigma, params.log_sigma);
    auto f1 = rl::flatten_policy(params);
    auto f2 = rl::flatten_policy(back);
    ASSERT_EQ(f1.size(), f2.size());
    for (size_t i = 0; i < f1.size(); ++i) EXPECT_EQ(f1[i], f2[i]);
  }
}

TEST(Snapshot, RejectsMalformedInput) {
  auto params = rl::make_params(small_net_config(14));
  auto good = rl::serialize_policy(params);

  EXPECT_THROW(rl::deserialize_policy("weights v9\n"), ParseError);
  EXPECT_THROW(rl::deserialize_policy("policy_snapshot v1\nversion: 1\n"), ParseError);

  auto truncated = good.substr(0, good.rfind("value_weights"));
  EXPECT_THROW(rl::deserialize_policy(truncated), ParseError);

  auto unknown = good + "mystery_key: 3\n";
  EXPECT_THROW(rl::deserialize_policy(unknown), ParseError);

  // drop one weight -> count mismatch
  auto pos = good.find("policy_weights: ");
  auto eol = good.find('\n', pos);
  auto cut = good.substr(0, good.rfind(' ', eol)) + good.substr(eol);
  EXPECT_THROW(rl::deserialize_policy(cut), ParseError);
}

TEST(Stats, CsvRowMatchesHeaderWidth) {
  io::CsvWriter csv(rl::stats_header());
  rl::TrainStats s;
  s.mean_return = -12.5;
  s.entropy = 1.3;
  s.clip_fraction = 0.08;
  s.value_loss = 4.2;
  csv.row(rl::stats_row(3, s));
  EXPECT_NE(csv.str().find("iteration,mean_return,entropy,clip_fraction,value_loss"),
            std::string::npos);
  EXPECT_NE(csv.str().find("3,-12.5,1.3,0.08,4.2"), std::string::npos);
}

TEST(Config, TrainConfigFromKv) {
  KvConfig kv = KvConfig::parse(
      "[rl]\n"
      "gamma = 0.97\n"
      "learning_rate = 0.001\n"
      "epochs = 5\n"
      "seed = 42\n",
      "inline");
  auto cfg = rl::train_config_from_kv(kv);
  EXPECT_NEAR(cfg.gamma, 0.97, 1e-15);
  EXPECT_NEAR(cfg.learning_rate, 0.001, 1e-15);
  EXPECT_EQ(cfg.epochs, 5);
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_NEAR(cfg.lambda_gae, 0.95, 1e-15);  // untouched default
}
