#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "recal/errors.hpp"
#include "recal/rl.hpp"

// Master/minion experience transport. The learner never talks to a plant
// directly: it ships policy snapshots out and receives episode batches back,
// over either an in-process queue pair or a TCP stream. Work items carry
// their own seeds so the merged result is identical no matter how many
// minions participate or in which order batches arrive.
namespace recal::distrib {

inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;  // sanity cap on length prefix

// ---- message set ----

namespace msg {

struct SetPolicy {
  std::uint64_t version = 0;
  std::string snapshot;  // serialized policy, exactly as written to disk
};

struct SetExplorationMode {
  bool explore = true;
};

struct RunEpisodes {
  std::uint64_t work_item_id = 0;
  std::uint32_t count = 1;
  std::string cycle_id;
  std::uint64_t seed = 0;
};

struct ExperienceBatch {
  std::uint64_t policy_version = 0;
  std::vector<rl::Episode> episodes;
};

struct Heartbeat {};

struct ErrorReport {
  std::string text;
};

}  // namespace msg

using Message = std::variant<msg::SetPolicy, msg::SetExplorationMode, msg::RunEpisodes,
                             msg::ExperienceBatch, msg::Heartbeat, msg::ErrorReport>;

enum class Tag : std::uint8_t {
  set_policy = 1,
  set_exploration_mode = 2,
  run_episodes = 3,
  experience_batch = 4,
  heartbeat = 5,
  error_report = 6,
};

// ---- payload encoding: little-endian fixed-width fields ----

namespace wire {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

struct Reader {
  std::string_view data;
  size_t pos = 0;

  void need(size_t n, const char* what) const {
    if (pos + n > data.size())
      throw FramingError(std::string("frame truncated inside ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(data[pos++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos++])) << (8 * i);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    std::uint32_t n = u32(what);
    need(n, what);
    std::string s(data.substr(pos, n));
    pos += n;
    return s;
  }
  void done() const {
    if (pos != data.size()) throw FramingError("frame has trailing bytes after payload");
  }
};

inline void put_episode(std::string& out, const rl::Episode& ep) {
  put_u64(out, ep.work_item_id);
  put_u64(out, ep.seed);
  put_str(out, ep.cycle_id);
  put_u64(out, ep.policy_version);
  put_u8(out, ep.aborted ? 1 : 0);
  put_f64(out, ep.cumulative_return);
  put_u32(out, static_cast<std::uint32_t>(ep.steps.size()));
  for (const auto& e : ep.steps) {
    put_f64(out, e.s.n_eng);
    put_f64(out, e.s.m_inj_tot);
    put_f64(out, e.a.mu);
    put_f64(out, e.a.sigma);
    put_f64(out, e.a.sample);
    put_f64(out, e.s_next.n_eng);
    put_f64(out, e.s_next.m_inj_tot);
    put_f64(out, e.r);
    put_u8(out, e.done ? 1 : 0);
    put_f64(out, e.logp);
  }
  put_u32(out, static_cast<std::uint32_t>(ep.diag.size()));
  for (const auto& d : ep.diag) {
    put_f64(out, d.nox_mg);
    put_f64(out, d.soot_mg);
    put_f64(out, d.boost_dev_kpa);
  }
}

inline rl::Episode get_episode(Reader& r) {
  rl::Episode ep;
  ep.work_item_id = r.u64("episode.work_item_id");
  ep.seed = r.u64("episode.seed");
  ep.cycle_id = r.str("episode.cycle_id");
  ep.policy_version = r.u64("episode.policy_version");
  ep.aborted = r.u8("episode.aborted") != 0;
  ep.cumulative_return = r.f64("episode.cumulative_return");
  std::uint32_t n = r.u32("episode.step_count");
  r.need(n * 8, "episode.steps");  // cheap lower bound before allocating
  ep.steps.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    rl::Experience e;
    e.s.n_eng = r.f64("step.s");
    e.s.m_inj_tot = r.f64("step.s");
    e.a.mu = r.f64("step.a");
    e.a.sigma = r.f64("step.a");
    e.a.sample = r.f64("step.a");
    e.s_next.n_eng = r.f64("step.s_next");
    e.s_next.m_inj_tot = r.f64("step.s_next");
    e.r = r.f64("step.r");
    e.done = r.u8("step.done") != 0;
    e.logp = r.f64("step.logp");
    ep.steps.push_back(e);
  }
  std::uint32_t nd = r.u32("episode.diag_count");
  r.need(nd * 8, "episode.diag");
  ep.diag.reserve(nd);
  for (std::uint32_t i = 0; i < nd; ++i) {
    rl::StepDiag d;
    d.nox_mg = r.f64("diag.nox");
    d.soot_mg = r.f64("diag.soot");
    d.boost_dev_kpa = r.f64("diag.boost_dev");
    ep.diag.push_back(d);
  }
  return ep;
}

}  // namespace wire

// Full frame: 4-byte big-endian length, then <tag, protocol version, payload>.
// The length counts everything after itself.
inline std::string encode_message(const Message& m) {
  std::string body;
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, msg::SetPolicy>) {
          wire::put_u8(body, static_cast<std::uint8_t>(Tag::set_policy));
          wire::put_u8(body, kProtocolVersion);
          wire::put_u64(body, v.version);
          wire::put_str(body, v.snapshot);
        } else if constexpr (std::is_same_v<T, msg::SetExplorationMode>) {
          wire::put_u8(body, static_cast<std::uint8_t>(Tag::set_exploration_mode));
          wire::put_u8(body, kProtocolVersion);
          wire::put_u8(body, v.explore ? 1 : 0);
        } else if constexpr (std::is_same_v<T, msg::RunEpisodes>) {
          wire::put_u8(body, static_cast<std::uint8_t>(Tag::run_episodes));
          wire::put_u8(body, kProtocolVersion);
          wire::put_u64(body, v.work_item_id);
          wire::put_u32(body, v.count);
          wire::put_str(body, v.cycle_id);
          wire::put_u64(body, v.seed);
        } else if constexpr (std::is_same_v<T, msg::ExperienceBatch>) {
          wire::put_u8(body, static_cast<std::uint8_t>(Tag::experience_batch));
          wire::put_u8(body, kProtocolVersion);
          wire::put_u64(body, v.policy_version);
          wire::put_u32(body, static_cast<std::uint32_t>(v.episodes.size()));
          for (const auto& ep : v.episodes) wire::put_episode(body, ep);
        } else if constexpr (std::is_same_v<T, msg::Heartbeat>) {
          wire::put_u8(body, static_cast<std::uint8_t>(Tag::heartbeat));
          wire::put_u8(body, kProtocolVersion);
        } else if constexpr (std::is_same_v<T, msg::ErrorReport>) {
          wire::put_u8(body, static_cast<std::uint8_t>(Tag::error_report));
          wire::put_u8(body, kProtocolVersion);
          wire::put_str(body, v.text);
        }
      },
      m);
  std::string frame;
  std::uint32_t len = static_cast<std::uint32_t>(body.size());
  for (int i = 3; i >= 0; --i) frame.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  frame += body;
  return frame;
}

// Decodes <tag, version, payload> (the frame body after the length prefix).
inline Message decode_body(std::string_view body) {
  wire::Reader r{body};
  std::uint8_t tag = r.u8("tag");
  std::uint8_t ver = r.u8("protocol version");
  if (ver != kProtocolVersion)
    throw ProtocolError("unsupported protocol version " + std::to_string(ver));
  switch (static_cast<Tag>(tag)) {
    case Tag::set_policy: {
      msg::SetPolicy m;
      m.version = r.u64("set_policy.version");
      m.snapshot = r.str("set_policy.snapshot");
      r.done();
      return m;
    }
    case Tag::set_exploration_mode: {
      msg::SetExplorationMode m;
      m.explore = r.u8("set_exploration_mode.flag") != 0;
      r.done();
      return m;
    }
    case Tag::run_episodes: {
      msg::RunEpisodes m;
      m.work_item_id = r.u64("run_episodes.work_item_id");
      m.count = r.u32("run_episodes.count");
      m.cycle_id = r.str("run_episodes.cycle_id");
      m.seed = r.u64("run_episodes.seed");
      r.done();
      return m;
    }
    case Tag::experience_batch: {
      msg::ExperienceBatch m;
      m.policy_version = r.u64("experience_batch.policy_version");
      std::uint32_t n = r.u32("experience_batch.episode_count");
      for (std::uint32_t i = 0; i < n; ++i) m.episodes.push_back(wire::get_episode(r));
      r.done();
      return m;
    }
    case Tag::heartbeat:
      r.done();
      return msg::Heartbeat{};
    case Tag::error_report: {
      msg::ErrorReport m;
      m.text = r.str("error_report.text");
      r.done();
      return m;
    }
    default:
      throw ProtocolError("unknown message tag " + std::to_string(tag));
  }
}

// Decodes a complete frame including its length prefix.
inline Message decode_message(std::string_view frame) {
  if (frame.size() < 4) throw FramingError("frame shorter than its length prefix");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i)
    len = (len << 8) | static_cast<unsigned char>(frame[i]);
  if (len > kMaxFrameBytes) throw FramingError("frame length " + std::to_string(len) + " exceeds cap");
  if (frame.size() != 4u + len)
    throw FramingError("frame length prefix says " + std::to_string(len) + " but " +
                       std::to_string(frame.size() - 4) + " bytes follow");
  return decode_body(frame.substr(4));
}

// ---- transports ----

class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(const Message& m) = 0;
  // nullopt on timeout or clean close (check alive() to tell them apart);
  // throws FramingError/ProtocolError on malformed input.
  virtual std::optional<Message> recv(std::chrono::milliseconds timeout) = 0;
  virtual bool alive() const = 0;
  virtual void close() = 0;
};

// Queue pair sharing the exact wire encoding with the socket path, so framing
// bugs cannot hide behind the in-process shortcut.
class InprocTransport : public Transport {
 public:
  struct Shared {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<std::string> to_a, to_b;
    bool open = true;
  };

  InprocTransport(std::shared_ptr<Shared> s, bool is_a) : shared_(std::move(s)), is_a_(is_a) {}

  void send(const Message& m) override { send_raw(encode_message(m)); }

  // Raw frame injection; tests use this to feed the peer malformed bytes.
  void send_raw(std::string frame) {
    std::lock_guard lock(shared_->mu);
    if (!shared_->open) return;
    (is_a_ ? shared_->to_b : shared_->to_a).push_back(std::move(frame));
    shared_->cv.notify_all();
  }

  std::optional<Message> recv(std::chrono::milliseconds timeout) override {
    std::unique_lock lock(shared_->mu);
    auto& q = is_a_ ? shared_->to_a : shared_->to_b;
    shared_->cv.wait_for(lock, timeout, [&] { return !q.empty() || !shared_->open; });
    if (q.empty()) return std::nullopt;
    std::string frame = std::move(q.front());
    q.pop_front();
    lock.unlock();
    return decode_message(frame);
  }

  bool alive() const override {
    std::lock_guard lock(shared_->mu);
    return shared_->open;
  }

  void close() override {
    std::lock_guard lock(shared_->mu);
    shared_->open = false;
    shared_->cv.notify_all();
  }

 private:
  std::shared_ptr<Shared> shared_;
  bool is_a_;
};

inline std::pair<std::unique_ptr<InprocTransport>, std::unique_ptr<InprocTransport>>
make_inproc_pair() {
  auto shared = std::make_shared<InprocTransport::Shared>();
  return {std::make_unique<InprocTransport>(shared, true),
          std::make_unique<InprocTransport>(shared, false)};
}

// Blocking TCP stream endpoint with the same framing.
class SocketTransport : public Transport {
 public:
  explicit SocketTransport(int fd) : fd_(fd) {}
  ~SocketTransport() override { close(); }
  SocketTransport(const SocketTransport&) = delete;
  SocketTransport& operator=(const SocketTransport&) = delete;

  void send(const Message& m) override {
    std::string frame = encode_message(m);
    size_t sent = 0;
    while (sent < frame.size()) {
      ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        alive_ = false;
        throw FramingError(std::string("socket send failed: ") + std::strerror(errno));
      }
      sent += static_cast<size_t>(n);
    }
  }

  std::optional<Message> recv(std::chrono::milliseconds timeout) override {
    unsigned char len_buf[4];
    if (!read_exact(len_buf, 4, timeout, /*allow_clean_eof=*/true)) return std::nullopt;
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len = (len << 8) | len_buf[i];
    if (len > kMaxFrameBytes)
      throw FramingError("frame length " + std::to_string(len) + " exceeds cap");
    std::string body(len, '\0');
    if (!read_exact(reinterpret_cast<unsigned char*>(body.data()), len, timeout,
                    /*allow_clean_eof=*/false))
      return std::nullopt;  // timeout mid-frame; caller will retry or give up
    return decode_body(body);
  }

  bool alive() const override { return alive_ && fd_ >= 0; }

  void close() override {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
    alive_ = false;
  }

 private:
  // Reads exactly n bytes, honoring the deadline across partial reads. EOF at
  // a frame boundary is a clean close; EOF mid-frame is a framing error.
  bool read_exact(unsigned char* buf, size_t n, std::chrono::milliseconds timeout,
                  bool allow_clean_eof) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    size_t got = 0;
    while (got < n) {
      auto remain = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - std::chrono::steady_clock::now());
      if (remain.count() <= 0) return false;
      pollfd pfd{fd_, POLLIN, 0};
      int pr = ::poll(&pfd, 1, static_cast<int>(remain.count()));
      if (pr == 0) return false;
      if (pr < 0) {
        if (errno == EINTR) continue;
        alive_ = false;
        throw FramingError(std::string("socket poll failed: ") + std::strerror(errno));
      }
      ssize_t r = ::recv(fd_, buf + got, n - got, 0);
      if (r == 0) {
        alive_ = false;
        if (got == 0 && allow_clean_eof) return false;
        throw FramingError("peer closed mid-frame");
      }
      if (r < 0) {
        if (errno == EINTR) continue;
        alive_ = false;
        throw FramingError(std::string("socket recv failed: ") + std::strerror(errno));
      }
      got += static_cast<size_t>(r);
    }
    return true;
  }

  int fd_ = -1;
  bool alive_ = true;
};

// Minions listen; the master connects out to each of them.
class Listener {
 public:
  explicit Listener(std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw ProtocolError(std::string("socket() failed: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
      ::close(fd_);
      throw ProtocolError("bind to port " + std::to_string(port) + " failed: " +
                          std::strerror(errno));
    }
    if (::listen(fd_, 8) < 0) {
      ::close(fd_);
      throw ProtocolError(std::string("listen failed: ") + std::strerror(errno));
    }
  }
  ~Listener() {
    if (fd_ >= 0) ::close(fd_);
  }
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;

  std::uint16_t port() const {
    sockaddr_in addr{};
    socklen_t len = sizeof(addr);
    if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len) < 0)
      throw ProtocolError(std::string("getsockname failed: ") + std::strerror(errno));
    return ntohs(addr.sin_port);
  }

  std::unique_ptr<SocketTransport> accept_one(std::chrono::milliseconds timeout) {
    pollfd pfd{fd_, POLLIN, 0};
    int pr = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (pr <= 0) return nullptr;
    int cfd = ::accept(fd_, nullptr, nullptr);
    if (cfd < 0) throw ProtocolError(std::string("accept failed: ") + std::strerror(errno));
    return std::make_unique<SocketTransport>(cfd);
  }

 private:
  int fd_ = -1;
};

inline std::unique_ptr<SocketTransport> connect_to(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  if (rc != 0)
    throw ProtocolError("cannot resolve " + host + ": " + gai_strerror(rc));
  int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(res);
    throw ProtocolError(std::string("socket() failed: ") + std::strerror(errno));
  }
  if (::connect(fd, res->ai_addr, res->ai_addrlen) < 0) {
    ::freeaddrinfo(res);
    ::close(fd);
    throw ProtocolError("connect to " + host + ":" + std::to_string(port) + " failed: " +
                        std::strerror(errno));
  }
  ::freeaddrinfo(res);
  return std::make_unique<SocketTransport>(fd);
}

// ---- master side ----

struct WorkItem {
  std::uint64_t id = 0;
  std::string cycle_id;
  std::uint64_t seed = 0;
  std::uint32_t count = 1;
};

struct Plan {
  std::vector<WorkItem> items;
  bool explore = true;
};

// Disjoint per-item seeds derived from one master seed.
inline Plan make_plan(const std::string& cycle_id, int episodes, std::uint64_t master_seed,
                      bool explore) {
  Plan plan;
  plan.explore = explore;
  for (int i = 0; i < episodes; ++i) {
    WorkItem item;
    item.id = static_cast<std::uint64_t>(i);
    item.cycle_id = cycle_id;
    item.seed = mix_seed(master_seed, static_cast<std::uint64_t>(i));
    plan.items.push_back(std::move(item));
  }
  return plan;
}

struct DispatchOptions {
  std::chrono::milliseconds item_timeout{10000};
  int max_item_attempts = 5;
};

struct DispatchResult {
  std::vector<rl::Episode> episodes;  // ordered by work-item id, then arrival within item
  std::vector<std::string> warnings;
  int reassignments = 0;
  int minions_lost = 0;
};

// Pushes the snapshot to every minion, then hands out work items pull-style.
// A silent or misbehaving minion is marked dead exactly once and its in-flight
// item goes back on the queue; the merge is keyed by item id, so the result
// cannot depend on which minion ran what.
inline DispatchResult master_dispatch(const std::vector<Transport*>& minions,
                                      const rl::PolicyParameters& policy, const Plan& plan,
                                      const DispatchOptions& opt = {}) {
  if (minions.empty()) throw ContractError("master_dispatch: no minions connected");

  // Shared scheduling board. A worker with nothing queued does not leave: an
  // in-flight item on another minion may still bounce back, and someone has
  // to be around to pick it up.
  struct Board {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<WorkItem> queue;
    std::map<std::uint64_t, int> attempts;
    std::map<std::uint64_t, std::vector<rl::Episode>> completed;
    std::vector<std::string> warnings;
    int reassignments = 0;
    int minions_lost = 0;
    int in_flight = 0;
    size_t total_items = 0;
    bool failed = false;
  } board;
  for (const auto& item : plan.items) board.queue.push_back(item);
  board.total_items = plan.items.size();

  const std::string snapshot = rl::serialize_policy(policy);

  auto worker = [&](Transport* t, int minion_index) {
    bool dead = false;
    auto mark_dead = [&](const std::string& why) {
      if (dead) return;  // a minion dies at most once
      dead = true;
      std::lock_guard lock(board.mu);
      ++board.minions_lost;
      board.warnings.push_back("minion " + std::to_string(minion_index) + ": " + why);
    };

    try {
      t->send(msg::SetPolicy{policy.version, snapshot});
      t->send(msg::SetExplorationMode{plan.explore});
    } catch (const Error& e) {
      mark_dead(std::string("setup failed: ") + e.what());
      return;
    }

    while (true) {
      WorkItem item;
      {
        std::unique_lock lock(board.mu);
        board.cv.wait(lock, [&] {
          return board.failed || board.completed.size() == board.total_items ||
                 !board.queue.empty() || board.in_flight == 0;
        });
        if (board.failed || board.completed.size() == board.total_items) return;
        if (board.queue.empty()) return;  // nothing queued, nothing in flight: stalled
        item = board.queue.front();
        board.queue.pop_front();
        if (++board.attempts[item.id] > opt.max_item_attempts) {
          board.failed = true;
          board.cv.notify_all();
          throw ProtocolError("work item " + std::to_string(item.id) + " failed " +
                              std::to_string(opt.max_item_attempts) + " times");
        }
        ++board.in_flight;
      }

      auto requeue = [&](const std::string& why, bool kill_minion) {
        {
          std::lock_guard lock(board.mu);
          --board.in_flight;
          if (!board.completed.count(item.id)) {
            board.queue.push_back(item);
            ++board.reassignments;
          }
          board.warnings.push_back("work item " + std::to_string(item.id) + ": " + why);
          board.cv.notify_all();
        }
        if (kill_minion) mark_dead(why);
      };

      try {
        t->send(msg::RunEpisodes{item.id, item.count, item.cycle_id, item.seed});
      } catch (const Error& e) {
        requeue(std::string("send failed: ") + e.what(), true);
        return;
      }

      bool item_done = false;
      while (!item_done) {
        std::optional<Message> m;
        try {
          m = t->recv(opt.item_timeout);
        } catch (const Error& e) {  // framing/protocol garbage: poisoned peer
          requeue(std::string("garbled reply: ") + e.what(), true);
          return;
        }
        if (!m) {
          requeue(t->alive() ? "timed out" : "connection lost", true);
          return;
        }
        if (std::holds_alternative<msg::Heartbeat>(*m)) continue;  // still alive, keep waiting
        if (auto* err = std::get_if<msg::ErrorReport>(&*m)) {
          requeue("minion error: " + err->text, false);
          break;  // minion stays usable; the item goes back on the queue
        }
        auto* batch = std::get_if<msg::ExperienceBatch>(&*m);
        if (!batch) {
          requeue("unexpected message kind in reply", true);
          return;
        }
        if (batch->policy_version != policy.version) {
          requeue("policy version " + std::to_string(batch->policy_version) +
                      " does not match dispatched " + std::to_string(policy.version) +
                      "; batch discarded",
                  true);
          return;
        }
        std::lock_guard lock(board.mu);
        --board.in_flight;
        if (!board.completed.count(item.id)) board.completed[item.id] = batch->episodes;
        board.cv.notify_all();
        item_done = true;
      }
    }
  };

  std::vector<std::thread> threads;
  std::exception_ptr failure;
  std::mutex failure_mu;
  for (size_t i = 0; i < minions.size(); ++i) {
    threads.emplace_back([&, i] {
      try {
        worker(minions[i], static_cast<int>(i));
      } catch (...) {
        {
          std::lock_guard lock(board.mu);
          board.failed = true;
          board.cv.notify_all();
        }
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  if (failure) std::rethrow_exception(failure);

  {
    std::lock_guard lock(board.mu);
    if (board.completed.size() != board.total_items)
      throw ProtocolError("dispatch incomplete: " +
                          std::to_string(board.total_items - board.completed.size()) +
                          " work items unfinished after all minions stopped");
  }

  DispatchResult result;
  result.warnings = std::move(board.warnings);
  result.reassignments = board.reassignments;
  result.minions_lost = board.minions_lost;
  for (auto& [id, eps] : board.completed)
    for (auto& ep : eps) result.episodes.push_back(std::move(ep));
  return result;
}

// ---- minion side ----

// Produces the episodes for one work item under the given policy and mode.
using EpisodeRunner = std::function<std::vector<rl::Episode>(
    const msg::RunEpisodes&, const rl::PolicyParameters&, bool explore)>;

// Serves one master connection until it closes. Messages are handled strictly
// in arrival order, so a mode or policy change is always applied before any
// later work request — a work item can never run under a stale setting.
inline void serve_minion(Transport& t, const EpisodeRunner& runner,
                         std::chrono::milliseconds idle_timeout = std::chrono::milliseconds(200)) {
  std::optional<rl::PolicyParameters> policy;
  bool explore = true;
  while (t.alive()) {
    std::optional<Message> m;
    try {
      m = t.recv(idle_timeout);
    } catch (const Error& e) {
      try {
        t.send(msg::ErrorReport{std::string("bad frame from master: ") + e.what()});
      } catch (const Error&) {
      }
      return;
    }
    if (!m) continue;  // idle; loop until the master hangs up
    if (auto* sp = std::get_if<msg::SetPolicy>(&*m)) {
      try {
        policy = rl::deserialize_policy(sp->snapshot);
      } catch (const Error& e) {
        t.send(msg::ErrorReport{std::string("unusable policy snapshot: ") + e.what()});
        policy.reset();
      }
    } else if (auto* se = std::get_if<msg::SetExplorationMode>(&*m)) {
      explore = se->explore;
    } else if (auto* run = std::get_if<msg::RunEpisodes>(&*m)) {
      if (!policy) {
        t.send(msg::ErrorReport{"run requested before any policy was set"});
        continue;
      }
      try {
        auto episodes = runner(*run, *policy, explore);
        for (auto& ep : episodes) {
          ep.work_item_id = run->work_item_id;
          ep.cycle_id = run->cycle_id;
          ep.policy_version = policy->version;
        }
        t.send(msg::ExperienceBatch{policy->version, std::move(episodes)});
      } catch (const std::exception& e) {
        t.send(msg::ErrorReport{std::string("episode run failed: ") + e.what()});
      }
    } else if (std::holds_alternative<msg::Heartbeat>(*m)) {
      t.send(msg::Heartbeat{});
    }
  }
}

}  // namespace recal::distrib
