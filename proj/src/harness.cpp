#include "txfs/harness.hpp"

#include <algorithm>
#include <chrono>
#include <mutex>
#include <cmath>
#include <sstream>
#include <thread>

#include "txfs/client.hpp"
#include "txfs/digest.hpp"
#include "txfs/path.hpp"
#include "txfs/wire.hpp"

namespace txfs {

using json = nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t now_ns() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

double percentile(std::vector<double>& v, double p) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const size_t idx = static_cast<size_t>(p * static_cast<double>(v.size() - 1));
  return v[idx];
}

}  // namespace

// ---------------------------------------------------------------------------
// Config / history / metrics JSON

json WorkloadConfig::to_json() const {
  return {{"clients", clients},
          {"read_only_clients", read_only_clients},
          {"total_txns", total_txns},
          {"duration_s", duration_s},
          {"file_size", file_size},
          {"block_size", block_size},
          {"hot_block_count", hot_block_count},
          {"hot_probability", hot_probability},
          {"think_time_ms", think_time_ms},
          {"mode", to_string(mode)},
          {"policy", to_string(policy)},
          {"seed", seed},
          {"sequential", sequential},
          {"data_path", data_path}};
}

WorkloadConfig WorkloadConfig::from_json(const json& j) {
  WorkloadConfig c;
  c.clients = j.value("clients", c.clients);
  c.read_only_clients = j.value("read_only_clients", c.read_only_clients);
  c.total_txns = j.value("total_txns", c.total_txns);
  c.duration_s = j.value("duration_s", c.duration_s);
  c.file_size = j.value("file_size", c.file_size);
  c.block_size = j.value("block_size", c.block_size);
  c.hot_block_count = j.value("hot_block_count", c.hot_block_count);
  c.hot_probability = j.value("hot_probability", c.hot_probability);
  c.think_time_ms = j.value("think_time_ms", c.think_time_ms);
  if (j.contains("mode")) mode_from_string(j.at("mode").get<std::string>(), c.mode);
  if (j.contains("policy")) policy_from_string(j.at("policy").get<std::string>(), c.policy);
  c.seed = j.value("seed", c.seed);
  c.sequential = j.value("sequential", c.sequential);
  c.data_path = j.value("data_path", c.data_path);
  return c;
}

json History::to_json() const {
  json evs = json::array();
  for (const HistoryEvent& e : events) {
    json o;
    switch (e.type) {
      case HistoryEvent::Type::Begin: o["e"] = "begin"; break;
      case HistoryEvent::Type::Read: o["e"] = "read"; break;
      case HistoryEvent::Type::Write: o["e"] = "write"; break;
      case HistoryEvent::Type::Assert: o["e"] = "assert"; break;
      case HistoryEvent::Type::Commit: o["e"] = "commit"; break;
      case HistoryEvent::Type::Abort: o["e"] = "abort"; break;
    }
    o["c"] = e.client;
    o["x"] = e.txn;
    switch (e.type) {
      case HistoryEvent::Type::Begin:
        o["ts"] = e.ts;
        o["w"] = e.wall_ns;
        break;
      case HistoryEvent::Type::Read:
      case HistoryEvent::Type::Write:
        o["f"] = e.file;
        o["b"] = e.block;
        o["off"] = e.offset;
        o["data"] = wire::base64_encode(e.bytes);
        break;
      case HistoryEvent::Type::Assert:
        o["f"] = e.file;
        o["kind"] = e.assert_kind == LengthKind::AtLeast ? "at_least"
                    : e.assert_kind == LengthKind::AtMost ? "at_most"
                                                          : "exactly";
        o["len"] = e.assert_len;
        break;
      case HistoryEvent::Type::Commit:
        o["ts"] = e.ts;
        o["w"] = e.wall_ns;
        o["ro"] = e.read_only;
        break;
      case HistoryEvent::Type::Abort:
        o["reason"] = e.reason;
        break;
    }
    evs.push_back(std::move(o));
  }
  return {{"events", std::move(evs)}};
}

History History::from_json(const json& j) {
  History h;
  for (const json& o : j.at("events")) {
    HistoryEvent e;
    const std::string t = o.at("e").get<std::string>();
    e.client = o.at("c").get<int>();
    e.txn = o.at("x").get<std::uint64_t>();
    if (t == "begin") {
      e.type = HistoryEvent::Type::Begin;
      e.ts = o.at("ts").get<Timestamp>();
      e.wall_ns = o.at("w").get<std::uint64_t>();
    } else if (t == "read" || t == "write") {
      e.type = t == "read" ? HistoryEvent::Type::Read : HistoryEvent::Type::Write;
      e.file = o.at("f").get<FileId>();
      e.block = o.at("b").get<std::uint64_t>();
      e.offset = o.at("off").get<std::uint32_t>();
      auto bytes = wire::base64_decode(o.at("data").get<std::string>());
      if (!bytes) throw FsError(ErrorCode::Malformed, "bad event bytes");
      e.bytes = std::move(*bytes);
    } else if (t == "assert") {
      e.type = HistoryEvent::Type::Assert;
      e.file = o.at("f").get<FileId>();
      const std::string k = o.at("kind").get<std::string>();
      e.assert_kind = k == "at_least" ? LengthKind::AtLeast
                      : k == "at_most" ? LengthKind::AtMost
                                       : LengthKind::Exactly;
      e.assert_len = o.at("len").get<std::uint64_t>();
    } else if (t == "commit") {
      e.type = HistoryEvent::Type::Commit;
      e.ts = o.at("ts").get<Timestamp>();
      e.wall_ns = o.at("w").get<std::uint64_t>();
      e.read_only = o.value("ro", false);
    } else if (t == "abort") {
      e.type = HistoryEvent::Type::Abort;
      e.reason = o.value("reason", "");
    } else {
      throw FsError(ErrorCode::Malformed, "bad event type: " + t);
    }
    h.events.push_back(std::move(e));
  }
  return h;
}

json Metrics::to_json() const {
  json reasons = json::object();
  for (const auto& [r, n] : abort_reasons) reasons[r] = n;
  json clients = json::array();
  for (const ClientStats& c : per_client) {
    clients.push_back({{"client", c.client},
                       {"read_only", c.read_only},
                       {"commits", c.commits},
                       {"aborts", c.aborts}});
  }
  return {{"committed", committed},
          {"aborted", aborted},
          {"elapsed_s", elapsed_s},
          {"committed_per_sec", committed_per_sec},
          {"abort_rate", abort_rate},
          {"abort_reasons", std::move(reasons)},
          {"latency_us",
           {{"begin", {{"p50", begin_p50}, {"p99", begin_p99}}},
            {"ops", {{"p50", ops_p50}, {"p99", ops_p99}}},
            {"commit", {{"p50", commit_p50}, {"p99", commit_p99}}}}},
          {"choice_digest", choice_digest},
          {"per_client", std::move(clients)}};
}

// ---------------------------------------------------------------------------
// Workload

namespace {

struct ClientRun {
  std::vector<HistoryEvent> events;
  std::vector<double> begin_us, ops_us, commit_us;
  std::uint64_t commits = 0;
  std::uint64_t aborts = 0;
  std::map<std::string, std::uint64_t> abort_reasons;
  std::uint64_t choice_digest = 0xcbf29ce484222325ULL;
};

class WorkloadDriver {
 public:
  WorkloadDriver(const WorkloadConfig& cfg, const TransportFactory& transports)
      : cfg_(cfg), transports_(transports) {}

  std::pair<Metrics, History> run() {
    setup();
    const int n = cfg_.clients;
    runs_.resize(static_cast<size_t>(n));
    mounts_.clear();
    for (int c = 0; c < n; ++c) {
      MountConfig mc;
      mc.policy = cfg_.policy;
      mounts_.push_back(std::make_unique<Mount>(transports_(), mc));
    }

    quotas_.assign(static_cast<size_t>(n), 0);
    if (cfg_.total_txns > 0) {
      for (int c = 0; c < n; ++c) {
        quotas_[static_cast<size_t>(c)] =
            cfg_.total_txns / static_cast<std::uint64_t>(n) +
            (static_cast<std::uint64_t>(c) <
                     cfg_.total_txns % static_cast<std::uint64_t>(n)
                 ? 1
                 : 0);
      }
    }

    const auto t0 = std::chrono::steady_clock::now();
    deadline_ = t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                         std::chrono::duration<double>(cfg_.duration_s));

    if (cfg_.sequential) {
      run_sequential();
    } else {
      std::vector<std::thread> threads;
      for (int c = 0; c < n; ++c) {
        threads.emplace_back([this, c] { client_loop(c); });
      }
      for (auto& t : threads) t.join();
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!run_error_.empty()) {
      throw FsError(ErrorCode::Transport, "workload client failed: " + run_error_);
    }
    return finish(elapsed);
  }

 private:
  bool is_read_only(int client) const { return client < cfg_.read_only_clients; }

  void setup() {
    MountConfig mc;
    mc.policy = cfg_.policy;
    Mount mount(transports_(), mc);
    {
      Txn txn = mount.begin();
      // Parent directories for the data file.
      const auto components = split_setup_dirs();
      for (const std::string& dir : components) {
        try {
          txn.stat(dir);
        } catch (const FsError& e) {
          if (e.code() != ErrorCode::NotFound) throw;
          txn.mkdir(dir);
        }
      }
      txn.close(txn.open(cfg_.data_path, kOpenCreate | kOpenWrite));
      if (!txn.commit().committed) {
        throw FsError(ErrorCode::Transport, "workload setup create failed");
      }
    }
    {
      // Separate transaction so history events carry the real file id.
      Txn txn = mount.begin();
      HistoryEvent be;
      be.type = HistoryEvent::Type::Begin;
      be.client = -1;
      be.txn = 0;
      be.ts = txn.read_ts();
      be.wall_ns = now_ns();
      setup_events_.push_back(std::move(be));
      const int fd = txn.open(cfg_.data_path, kOpenWrite);
      data_file_id_ = txn.stat(cfg_.data_path).file_id;
      std::uint64_t rng = cfg_.seed ^ 0x5eedf111eULL;
      const std::uint32_t bs = cfg_.block_size;
      for (std::uint64_t pos = 0; pos < cfg_.file_size; pos += bs) {
        std::vector<std::uint8_t> chunk(
            std::min<std::uint64_t>(bs, cfg_.file_size - pos));
        for (auto& b : chunk) b = static_cast<std::uint8_t>(splitmix64(rng));
        txn.pwrite(fd, chunk, pos);
        HistoryEvent e;
        e.type = HistoryEvent::Type::Write;
        e.client = -1;
        e.txn = 0;
        e.file = data_file_id_;
        e.block = pos / bs;
        e.offset = 0;
        e.bytes = std::move(chunk);
        setup_events_.push_back(std::move(e));
      }
      CommitResult r = txn.commit();
      if (!r.committed) {
        throw FsError(ErrorCode::Transport, "workload setup fill failed");
      }
      HistoryEvent e;
      e.type = HistoryEvent::Type::Commit;
      e.client = -1;
      e.txn = 0;
      e.ts = r.commit_ts;
      e.wall_ns = now_ns();
      setup_events_.push_back(std::move(e));
    }
  }

  std::vector<std::string> split_setup_dirs() const {
    std::vector<std::string> dirs;
    std::string cur;
    const auto comps = split_path(cfg_.data_path);
    for (size_t i = 0; i + 1 < comps.size(); ++i) {
      cur += "/" + comps[i];
      dirs.push_back(cur);
    }
    return dirs;
  }

  std::uint64_t pick_block(std::uint64_t& rng) const {
    const std::uint64_t nblocks = cfg_.file_size / cfg_.block_size;
    const std::uint64_t hot = static_cast<std::uint64_t>(cfg_.hot_block_count);
    const double u = static_cast<double>(splitmix64(rng) >> 11) *
                     (1.0 / 9007199254740992.0);
    if (u < cfg_.hot_probability && hot > 0) {
      return splitmix64(rng) % hot;
    }
    if (nblocks <= hot) return splitmix64(rng) % nblocks;
    return hot + splitmix64(rng) % (nblocks - hot);
  }

  bool budget_left(int client, std::uint64_t done) const {
    if (cfg_.total_txns > 0) return done < quotas_[static_cast<size_t>(client)];
    return std::chrono::steady_clock::now() < deadline_;
  }

  void client_loop(int client) {
    ClientRun& run = runs_[static_cast<size_t>(client)];
    std::uint64_t rng = (cfg_.seed * 0x9e3779b97f4a7c15ULL + 0xc0ffee) ^
                        (static_cast<std::uint64_t>(client) * 0x100000001b3ULL);
    std::uint64_t iter = 0;
    try {
      while (budget_left(client, iter)) {
        run_one(client, iter, rng, run);
        ++iter;
        if (cfg_.think_time_ms > 0 && !cfg_.sequential) {
          std::this_thread::sleep_for(
              std::chrono::duration<double, std::milli>(cfg_.think_time_ms));
        }
      }
    } catch (const FsError& e) {
      // A dead transport stops this client; the run reports what it has.
      std::lock_guard<std::mutex> g(error_mu_);
      if (run_error_.empty()) run_error_ = e.what();
    }
  }

  void run_sequential() {
    std::vector<std::uint64_t> rngs, iters;
    for (int c = 0; c < cfg_.clients; ++c) {
      rngs.push_back((cfg_.seed * 0x9e3779b97f4a7c15ULL + 0xc0ffee) ^
                     (static_cast<std::uint64_t>(c) * 0x100000001b3ULL));
      iters.push_back(0);
    }
    bool progress = true;
    while (progress) {
      progress = false;
      for (int c = 0; c < cfg_.clients; ++c) {
        if (!budget_left(c, iters[static_cast<size_t>(c)])) continue;
        run_one(c, iters[static_cast<size_t>(c)], rngs[static_cast<size_t>(c)],
                runs_[static_cast<size_t>(c)]);
        ++iters[static_cast<size_t>(c)];
        progress = true;
      }
    }
  }

  void run_one(int client, std::uint64_t iter, std::uint64_t& rng, ClientRun& run) {
    const bool ro = is_read_only(client);
    const std::uint64_t read_block = pick_block(rng);
    const std::uint64_t write_block = ro ? 0 : pick_block(rng);
    run.choice_digest =
        fnv1a64({reinterpret_cast<const std::uint8_t*>(&read_block), 8},
                run.choice_digest);
    if (!ro) {
      run.choice_digest =
          fnv1a64({reinterpret_cast<const std::uint8_t*>(&write_block), 8},
                  run.choice_digest);
    }

    Mount& mount = *mounts_[static_cast<size_t>(client)];
    const std::uint32_t bs = cfg_.block_size;
    std::vector<HistoryEvent> events;
    const std::uint64_t begin_wall = now_ns();
    const auto t_begin0 = std::chrono::steady_clock::now();

    try {
      Txn txn = mount.begin();
      const auto t_begin1 = std::chrono::steady_clock::now();
      run.begin_us.push_back(
          std::chrono::duration<double, std::micro>(t_begin1 - t_begin0).count());

      HistoryEvent be;
      be.type = HistoryEvent::Type::Begin;
      be.client = client;
      be.txn = iter;
      be.ts = txn.read_ts();
      be.wall_ns = begin_wall;
      events.push_back(std::move(be));

      const int fd = txn.open(cfg_.data_path, ro ? kOpenRead : (kOpenRead | kOpenWrite));
      txn.lock(fd, read_block * bs, bs, LockKind::Shared);
      auto bytes = txn.pread(fd, bs, read_block * bs);
      {
        HistoryEvent e;
        e.type = HistoryEvent::Type::Read;
        e.client = client;
        e.txn = iter;
        e.file = data_file_id_;
        e.block = read_block;
        e.offset = 0;
        e.bytes = bytes;
        events.push_back(std::move(e));
      }

      if (!ro) {
        txn.lock(fd, write_block * bs, bs, LockKind::Exclusive);
        std::vector<std::uint8_t> payload(bs);
        std::uint64_t prng = (rng ^ iter) + static_cast<std::uint64_t>(client);
        for (auto& b : payload) b = static_cast<std::uint8_t>(splitmix64(prng));
        txn.pwrite(fd, payload, write_block * bs);
        HistoryEvent e;
        e.type = HistoryEvent::Type::Write;
        e.client = client;
        e.txn = iter;
        e.file = data_file_id_;
        e.block = write_block;
        e.offset = 0;
        e.bytes = std::move(payload);
        events.push_back(std::move(e));
        txn.unlock(fd, write_block * bs, bs);
      }
      txn.unlock(fd, read_block * bs, bs);

      const auto t_ops = std::chrono::steady_clock::now();
      run.ops_us.push_back(
          std::chrono::duration<double, std::micro>(t_ops - t_begin1).count());

      // Record the assertions exactly as they will ship.
      CommitRequest req = txn.build_request_for_test();
      for (const LengthAssertion& a : req.assertions) {
        HistoryEvent e;
        e.type = HistoryEvent::Type::Assert;
        e.client = client;
        e.txn = iter;
        e.file = a.file_id;
        e.assert_kind = a.kind;
        e.assert_len = a.length;
        events.push_back(std::move(e));
      }

      CommitResult r = txn.commit();
      const auto t_commit = std::chrono::steady_clock::now();
      run.commit_us.push_back(
          std::chrono::duration<double, std::micro>(t_commit - t_ops).count());

      if (r.committed) {
        HistoryEvent e;
        e.type = HistoryEvent::Type::Commit;
        e.client = client;
        e.txn = iter;
        e.ts = r.commit_ts;
        e.wall_ns = now_ns();
        e.read_only = ro;
        events.push_back(std::move(e));
        ++run.commits;
      } else {
        HistoryEvent e;
        e.type = HistoryEvent::Type::Abort;
        e.client = client;
        e.txn = iter;
        e.reason = to_string(r.abort.reason);
        events.push_back(std::move(e));
        ++run.aborts;
        ++run.abort_reasons[to_string(r.abort.reason)];
      }
    } catch (const FsError& e) {
      if (e.code() == ErrorCode::SnapshotTooOld || e.code() == ErrorCode::StaleRead) {
        HistoryEvent ev;
        ev.type = HistoryEvent::Type::Abort;
        ev.client = client;
        ev.txn = iter;
        ev.reason = to_string(e.code());
        events.push_back(std::move(ev));
        ++run.aborts;
        ++run.abort_reasons[to_string(e.code())];
      } else {
        throw;
      }
    }
    run.events.insert(run.events.end(), std::make_move_iterator(events.begin()),
                      std::make_move_iterator(events.end()));
  }

  std::pair<Metrics, History> finish(double elapsed) {
    History history;
    history.events = std::move(setup_events_);
    for (ClientRun& run : runs_) {
      history.events.insert(history.events.end(),
                            std::make_move_iterator(run.events.begin()),
                            std::make_move_iterator(run.events.end()));
    }

    Metrics m;
    m.elapsed_s = elapsed;
    std::vector<double> begin_us, ops_us, commit_us;
    std::uint64_t digest = 0xcbf29ce484222325ULL;
    for (size_t c = 0; c < runs_.size(); ++c) {
      ClientRun& run = runs_[c];
      m.committed += run.commits;
      m.aborted += run.aborts;
      for (const auto& [r, n] : run.abort_reasons) m.abort_reasons[r] += n;
      begin_us.insert(begin_us.end(), run.begin_us.begin(), run.begin_us.end());
      ops_us.insert(ops_us.end(), run.ops_us.begin(), run.ops_us.end());
      commit_us.insert(commit_us.end(), run.commit_us.begin(), run.commit_us.end());
      digest = fnv1a64(
          {reinterpret_cast<const std::uint8_t*>(&run.choice_digest), 8}, digest);
      m.per_client.push_back(ClientStats{static_cast<int>(c),
                                         is_read_only(static_cast<int>(c)),
                                         run.commits, run.aborts});
    }
    m.committed_per_sec = elapsed > 0 ? static_cast<double>(m.committed) / elapsed : 0;
    const double total = static_cast<double>(m.committed + m.aborted);
    m.abort_rate = total > 0 ? static_cast<double>(m.aborted) / total : 0;
    m.begin_p50 = percentile(begin_us, 0.5);
    m.begin_p99 = percentile(begin_us, 0.99);
    m.ops_p50 = percentile(ops_us, 0.5);
    m.ops_p99 = percentile(ops_us, 0.99);
    m.commit_p50 = percentile(commit_us, 0.5);
    m.commit_p99 = percentile(commit_us, 0.99);
    m.choice_digest = digest;
    return {std::move(m), std::move(history)};
  }

  const WorkloadConfig& cfg_;
  const TransportFactory& transports_;
  std::vector<std::unique_ptr<Mount>> mounts_;
  std::vector<ClientRun> runs_;
  std::vector<std::uint64_t> quotas_;
  std::chrono::steady_clock::time_point deadline_;
  std::vector<HistoryEvent> setup_events_;
  FileId data_file_id_ = 0;
  std::mutex error_mu_;
  std::string run_error_;
};

}  // namespace

std::pair<Metrics, History> run_workload(const WorkloadConfig& config,
                                         const TransportFactory& transports) {
  if (config.hot_block_count >= 0 &&
      static_cast<std::uint64_t>(config.hot_block_count) >
          config.file_size / config.block_size) {
    throw FsError(ErrorCode::Malformed, "hot set larger than the file");
  }
  WorkloadDriver driver(config, transports);
  return driver.run();
}

ModeComparison compare_modes(const WorkloadConfig& base,
                             const BackendConfig& backend_template) {
  ModeComparison cmp;
  for (VersioningMode mode : {VersioningMode::FileVersioned,
                              VersioningMode::BlockVersioned,
                              VersioningMode::BlockMultiversioned}) {
    BackendConfig bc = backend_template;
    bc.mode = mode;
    bc.block_size = base.block_size;
    auto backend = std::make_shared<Backend>(bc);
    WorkloadConfig cfg = base;
    cfg.mode = mode;
    auto [metrics, history] = run_workload(
        cfg, [&backend] { return std::make_shared<EmbeddedTransport>(backend); });
    cmp.rows.emplace_back(mode, std::move(metrics));
    cmp.histories.push_back(std::move(history));
  }
  return cmp;
}

std::string comparison_to_csv(const ModeComparison& cmp, int clients) {
  std::ostringstream out;
  out << "mode,clients,committed_per_sec,abort_rate\n";
  for (const auto& [mode, metrics] : cmp.rows) {
    out << to_string(mode) << "," << clients << "," << metrics.committed_per_sec
        << "," << metrics.abort_rate << "\n";
  }
  return out.str();
}

}  // namespace txfs
