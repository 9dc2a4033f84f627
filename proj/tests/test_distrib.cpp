#include "recal/distrib.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <set>
#include <thread>

using namespace recal;
using namespace recal::distrib;
using namespace std::chrono_literals;

namespace {

rl::TrainConfig tiny_cfg(std::uint64_t seed) {
  rl::TrainConfig cfg;
  cfg.hidden = {3};
  cfg.seed = seed;
  return cfg;
}

// Episode content depends only on (seed, policy version), never on which
// minion produced it — the merge-determinism tests lean on this.
rl::Episode synth_episode(std::uint64_t seed, int steps, std::uint64_t version) {
  Rng rng(seed);
  rl::Episode ep;
  ep.seed = seed;
  ep.policy_version = version;
  for (int t = 0; t < steps; ++t) {
    rl::Experience e;
    e.s = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    e.a.mu = rng.gaussian();
    e.a.sigma = std::exp(rng.uniform(-1.0, 0.0));
    e.a.sample = e.a.mu + 0.25;
    e.s_next = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    e.r = -rng.uniform(0.0, 1.0);
    e.logp = rng.gaussian();
    ep.steps.push_back(e);
    ep.diag.push_back({rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.2), rng.uniform(-5.0, 5.0)});
  }
  ep.finalize();
  return ep;
}

EpisodeRunner stub_runner() {
  return [](const msg::RunEpisodes& req, const rl::PolicyParameters& p, bool) {
    std::vector<rl::Episode> eps;
    for (std::uint32_t k = 0; k < req.count; ++k)
      eps.push_back(synth_episode(mix_seed(req.seed, k), 5, p.version));
    return eps;
  };
}

std::string merged_bytes(const DispatchResult& r) {
  return encode_message(msg::ExperienceBatch{0, r.episodes});
}

// Spins up n stub minions on in-process transports and dispatches the plan.
DispatchResult dispatch_inproc(int n_minions, const rl::PolicyParameters& policy,
                               const Plan& plan, const DispatchOptions& opt = {}) {
  std::vector<std::unique_ptr<InprocTransport>> masters;
  std::vector<std::thread> threads;
  for (int i = 0; i < n_minions; ++i) {
    auto [a, b] = make_inproc_pair();
    masters.push_back(std::move(a));
    threads.emplace_back(
        [t = std::shared_ptr<InprocTransport>(std::move(b))] { serve_minion(*t, stub_runner()); });
  }
  std::vector<Transport*> ptrs;
  for (auto& m : masters) ptrs.push_back(m.get());
  DispatchResult result = master_dispatch(ptrs, policy, plan, opt);
  for (auto& m : masters) m->close();
  for (auto& th : threads) th.join();
  return result;
}

}  // namespace

// ---- wire format ----

TEST(Wire, RoundTripEveryVariant) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Message> msgs;
    msgs.push_back(msg::SetPolicy{rng.next_u64(), std::string(rng.uniform_int(0, 200), 'w')});
    msgs.push_back(msg::SetExplorationMode{trial % 2 == 0});
    msgs.push_back(msg::RunEpisodes{rng.next_u64(), static_cast<std::uint32_t>(rng.uniform_int(1, 9)),
                                    "cycle_" + std::to_string(trial), rng.next_u64()});
    msg::ExperienceBatch batch;
    batch.policy_version = rng.next_u64();
    for (int k = 0; k < rng.uniform_int(0, 3); ++k)
      batch.episodes.push_back(synth_episode(rng.next_u64(), rng.uniform_int(1, 6), 3));
    msgs.push_back(batch);
    msgs.push_back(msg::Heartbeat{});
    msgs.push_back(msg::ErrorReport{"err " + std::to_string(trial)});

    for (const auto& m : msgs) {
      auto bytes = encode_message(m);
      auto back = decode_message(bytes);
      EXPECT_EQ(bytes, encode_message(back));
      EXPECT_EQ(m.index(), back.index());
    }
  }
}

TEST(Wire, EpisodePayloadIsBitExact) {
  auto ep = synth_episode(42, 7, 11);
  ep.work_item_id = 9;
  ep.cycle_id = "wltc_segment";
  ep.aborted = true;
  auto bytes = encode_message(msg::ExperienceBatch{11, {ep}});
  auto back = std::get<msg::ExperienceBatch>(decode_message(bytes));
  ASSERT_EQ(back.episodes.size(), 1u);
  const auto& b = back.episodes[0];
  EXPECT_EQ(b.work_item_id, 9u);
  EXPECT_EQ(b.cycle_id, "wltc_segment");
  EXPECT_TRUE(b.aborted);
  EXPECT_EQ(b.cumulative_return, ep.cumulative_return);
  ASSERT_EQ(b.steps.size(), ep.steps.size());
  for (size_t t = 0; t < b.steps.size(); ++t) {
    EXPECT_EQ(b.steps[t].s.n_eng, ep.steps[t].s.n_eng);
    EXPECT_EQ(b.steps[t].a.sample, ep.steps[t].a.sample);
    EXPECT_EQ(b.steps[t].logp, ep.steps[t].logp);
    EXPECT_EQ(b.steps[t].done, ep.steps[t].done);
  }
  ASSERT_EQ(b.diag.size(), ep.diag.size());
  EXPECT_EQ(b.diag[3].soot_mg, ep.diag[3].soot_mg);
}

TEST(Wire, TruncatedFrameRaisesFramingError) {
  auto bytes = encode_message(msg::RunEpisodes{1, 2, "abc", 99});
  for (size_t cut = 1; cut < bytes.size(); ++cut) {
    auto part = bytes.substr(0, bytes.size() - cut);
    EXPECT_THROW(decode_message(part), FramingError) << "cut " << cut;
  }
  EXPECT_THROW(decode_message(""), FramingError);
}

TEST(Wire, UnknownTagNamesTheTag) {
  std::string frame;
  frame += '\x00';
  frame += '\x00';
  frame += '\x00';
  frame += '\x02';  // length 2: tag + version
  frame += static_cast<char>(0xff);
  frame += static_cast<char>(kProtocolVersion);
  try {
    decode_message(frame);
    FAIL() << "expected ProtocolError";
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("255"), std::string::npos);
  }
}

TEST(Wire, UnknownProtocolVersionRejected) {
  auto frame = encode_message(msg::Heartbeat{});
  frame[5] = 9;  // version byte sits right after the tag
  EXPECT_THROW(decode_message(frame), ProtocolError);
}

TEST(Wire, OversizedLengthPrefixRejected) {
  std::string frame = "\x7f\xff\xff\xff";
  EXPECT_THROW(decode_message(frame), FramingError);
}

// ---- dispatch over in-process transports ----

TEST(Dispatch, MergeIsIndependentOfMinionCount) {
  auto policy = rl::make_params(tiny_cfg(1));
  auto plan = make_plan("demo", 8, 777, true);
  auto r1 = dispatch_inproc(1, policy, plan);
  auto r4 = dispatch_inproc(4, policy, plan);
  ASSERT_EQ(r1.episodes.size(), 8u);
  ASSERT_EQ(r4.episodes.size(), 8u);
  EXPECT_EQ(merged_bytes(r1), merged_bytes(r4));
  EXPECT_EQ(r1.reassignments, 0);
  for (size_t i = 0; i < r1.episodes.size(); ++i) {
    EXPECT_EQ(r1.episodes[i].work_item_id, i);
    EXPECT_EQ(r1.episodes[i].policy_version, policy.version);
    EXPECT_EQ(r1.episodes[i].cycle_id, "demo");
  }
}

TEST(Dispatch, DeadMinionWorkIsReassignedOnce) {
  auto policy = rl::make_params(tiny_cfg(2));
  auto plan = make_plan("demo", 6, 31, true);

  auto [good_master, good_minion] = make_inproc_pair();
  auto [bad_master, bad_minion] = make_inproc_pair();

  std::thread good([t = std::shared_ptr<InprocTransport>(std::move(good_minion))] {
    serve_minion(*t, stub_runner());
  });
  // accepts setup and the first work request, then goes silent forever
  std::thread bad([t = std::shared_ptr<InprocTransport>(std::move(bad_minion))] {
    int seen = 0;
    while (t->alive()) {
      auto m = t->recv(50ms);
      if (!m) continue;
      if (std::holds_alternative<msg::RunEpisodes>(*m)) {
        ++seen;
        return;  // vanish mid-item
      }
    }
    (void)seen;
  });

  DispatchOptions opt;
  opt.item_timeout = 300ms;
  std::vector<Transport*> ptrs{good_master.get(), bad_master.get()};
  auto result = master_dispatch(ptrs, policy, plan, opt);

  ASSERT_EQ(result.episodes.size(), 6u);
  std::set<std::uint64_t> ids;
  for (const auto& ep : result.episodes) ids.insert(ep.work_item_id);
  EXPECT_EQ(ids.size(), 6u);  // no duplicates in the merge
  EXPECT_GE(result.reassignments, 1);
  EXPECT_EQ(result.minions_lost, 1);  // marked dead exactly once

  // identical to an all-healthy run: reassignment must not leak into the data
  auto clean = dispatch_inproc(1, policy, plan);
  EXPECT_EQ(merged_bytes(result), merged_bytes(clean));

  good_master->close();
  bad_master->close();
  good.join();
  bad.join();
}

TEST(Dispatch, StaleVersionBatchIsDiscardedWithWarning) {
  auto policy = rl::make_params(tiny_cfg(3));
  policy.version = 5;
  auto plan = make_plan("demo", 4, 99, false);

  auto [good_master, good_minion] = make_inproc_pair();
  auto [stale_master, stale_minion] = make_inproc_pair();

  std::thread good([t = std::shared_ptr<InprocTransport>(std::move(good_minion))] {
    serve_minion(*t, stub_runner());
  });
  // replies to every request with a batch stamped by an old policy version
  std::thread stale([t = std::shared_ptr<InprocTransport>(std::move(stale_minion))] {
    while (t->alive()) {
      auto m = t->recv(50ms);
      if (!m) continue;
      if (auto* run = std::get_if<msg::RunEpisodes>(&*m)) {
        msg::ExperienceBatch b;
        b.policy_version = 4;  // stale
        b.episodes.push_back(synth_episode(run->seed, 3, 4));
        t->send(b);
      }
    }
  });

  DispatchOptions opt;
  opt.item_timeout = 500ms;
  std::vector<Transport*> ptrs{stale_master.get(), good_master.get()};
  auto result = master_dispatch(ptrs, policy, plan, opt);

  ASSERT_EQ(result.episodes.size(), 4u);
  for (const auto& ep : result.episodes) EXPECT_EQ(ep.policy_version, 5u);
  bool warned = false;
  for (const auto& w : result.warnings)
    if (w.find("policy version") != std::string::npos) warned = true;
  EXPECT_TRUE(warned);

  stale_master->close();
  good_master->close();
  good.join();
  stale.join();
}

TEST(Dispatch, MasterSurvivesGarbageFrames) {
  auto policy = rl::make_params(tiny_cfg(4));
  auto plan = make_plan("demo", 3, 55, true);

  auto [good_master, good_minion] = make_inproc_pair();
  auto [evil_master, evil_minion] = make_inproc_pair();

  std::thread good([t = std::shared_ptr<InprocTransport>(std::move(good_minion))] {
    serve_minion(*t, stub_runner());
  });
  // responds to the first request with raw garbage: truncated frame bytes
  std::thread evil([t = std::shared_ptr<InprocTransport>(std::move(evil_minion))] {
    while (t->alive()) {
      auto m = t->recv(50ms);
      if (!m) continue;
      if (std::holds_alternative<msg::RunEpisodes>(*m)) {
        t->send_raw(std::string("\x00\x00\x00\x40garbage", 11));  // length lies
        t->send_raw(std::string("\x00\x00\x00\x02\xff\x01", 6));  // unknown tag
        return;
      }
    }
  });

  DispatchOptions opt;
  opt.item_timeout = 400ms;
  std::vector<Transport*> ptrs{evil_master.get(), good_master.get()};
  DispatchResult result;
  EXPECT_NO_THROW(result = master_dispatch(ptrs, policy, plan, opt));
  EXPECT_EQ(result.episodes.size(), 3u);
  EXPECT_EQ(result.minions_lost, 1);

  evil_master->close();
  good_master->close();
  good.join();
  evil.join();
}

TEST(Dispatch, AllMinionsLostRaises) {
  auto policy = rl::make_params(tiny_cfg(5));
  auto plan = make_plan("demo", 2, 1, true);
  auto [master, minion] = make_inproc_pair();
  // minion thread that never answers work requests
  std::thread mute([t = std::shared_ptr<InprocTransport>(std::move(minion))] {
    while (t->alive()) {
      if (!t->recv(50ms)) continue;
    }
  });
  DispatchOptions opt;
  opt.item_timeout = 200ms;
  std::vector<Transport*> ptrs{master.get()};
  EXPECT_THROW(master_dispatch(ptrs, policy, plan, opt), ProtocolError);
  master->close();
  mute.join();
}

TEST(Dispatch, RequiresAtLeastOneMinion) {
  auto policy = rl::make_params(tiny_cfg(6));
  auto plan = make_plan("demo", 1, 1, true);
  EXPECT_THROW(master_dispatch({}, policy, plan), ContractError);
}

// ---- minion protocol behavior ----

TEST(Minion, RunBeforePolicyYieldsErrorReport) {
  auto [master, minion] = make_inproc_pair();
  std::thread th([t = std::shared_ptr<InprocTransport>(std::move(minion))] {
    serve_minion(*t, stub_runner());
  });
  master->send(msg::RunEpisodes{1, 1, "demo", 7});
  auto reply = master->recv(2000ms);
  ASSERT_TRUE(reply.has_value());
  auto* err = std::get_if<msg::ErrorReport>(&*reply);
  ASSERT_NE(err, nullptr);
  EXPECT_NE(err->text.find("policy"), std::string::npos);
  master->close();
  th.join();
}

TEST(Minion, ModeChangeAppliesBeforeLaterWork) {
  auto [master, minion] = make_inproc_pair();
  std::vector<bool> seen_modes;
  std::mutex mu;
  EpisodeRunner recorder = [&](const msg::RunEpisodes& req, const rl::PolicyParameters& p,
                               bool explore) {
    std::lock_guard lock(mu);
    seen_modes.push_back(explore);
    return std::vector<rl::Episode>{synth_episode(req.seed, 2, p.version)};
  };
  std::thread th([t = std::shared_ptr<InprocTransport>(std::move(minion)), recorder] {
    serve_minion(*t, recorder);
  });

  auto policy = rl::make_params(tiny_cfg(7));
  master->send(msg::SetPolicy{policy.version, rl::serialize_policy(policy)});
  master->send(msg::SetExplorationMode{false});
  master->send(msg::RunEpisodes{1, 1, "demo", 3});
  ASSERT_TRUE(master->recv(2000ms).has_value());
  master->send(msg::SetExplorationMode{true});
  master->send(msg::RunEpisodes{2, 1, "demo", 4});
  ASSERT_TRUE(master->recv(2000ms).has_value());
  master->close();
  th.join();

  ASSERT_EQ(seen_modes.size(), 2u);
  EXPECT_FALSE(seen_modes[0]);
  EXPECT_TRUE(seen_modes[1]);
}

TEST(Minion, HeartbeatIsEchoed) {
  auto [master, minion] = make_inproc_pair();
  std::thread th([t = std::shared_ptr<InprocTransport>(std::move(minion))] {
    serve_minion(*t, stub_runner());
  });
  master->send(msg::Heartbeat{});
  auto reply = master->recv(2000ms);
  ASSERT_TRUE(reply.has_value());
  EXPECT_TRUE(std::holds_alternative<msg::Heartbeat>(*reply));
  master->close();
  th.join();
}

// ---- socket transport ----

TEST(Socket, DispatchOverLoopbackMatchesInproc) {
  auto policy = rl::make_params(tiny_cfg(8));
  auto plan = make_plan("demo", 6, 4242, true);

  Listener l1(0), l2(0);
  std::thread m1([&] {
    auto t = l1.accept_one(5000ms);
    ASSERT_NE(t, nullptr);
    serve_minion(*t, stub_runner());
  });
  std::thread m2([&] {
    auto t = l2.accept_one(5000ms);
    ASSERT_NE(t, nullptr);
    serve_minion(*t, stub_runner());
  });

  auto c1 = connect_to("127.0.0.1", l1.port());
  auto c2 = connect_to("127.0.0.1", l2.port());
  std::vector<Transport*> ptrs{c1.get(), c2.get()};
  auto socket_result = master_dispatch(ptrs, policy, plan);
  c1->close();
  c2->close();
  m1.join();
  m2.join();

  auto inproc_result = dispatch_inproc(3, policy, plan);
  EXPECT_EQ(merged_bytes(socket_result), merged_bytes(inproc_result));
}

TEST(Socket, FrameRoundTripAndCleanClose) {
  Listener l(0);
  std::thread peer([&] {
    auto t = l.accept_one(5000ms);
    ASSERT_NE(t, nullptr);
    auto m = t->recv(5000ms);
    ASSERT_TRUE(m.has_value());
    t->send(*m);  // echo
    t->close();
  });
  auto c = connect_to("127.0.0.1", l.port());
  msg::SetPolicy original{12, "snapshot-bytes-here"};
  c->send(original);
  auto echoed = c->recv(5000ms);
  ASSERT_TRUE(echoed.has_value());
  auto* sp = std::get_if<msg::SetPolicy>(&*echoed);
  ASSERT_NE(sp, nullptr);
  EXPECT_EQ(sp->version, 12u);
  EXPECT_EQ(sp->snapshot, original.snapshot);

  // peer closed: next recv reports a dead transport, not a hang or a throw
  auto after = c->recv(500ms);
  EXPECT_FALSE(after.has_value());
  EXPECT_FALSE(c->alive());
  peer.join();
}
