#include <doctest.h>

#include "support.hpp"
#include "txfs/client.hpp"
#include "txfs/harness.hpp"

using namespace txfs;
using namespace txfs::test;

namespace {

std::shared_ptr<Backend> make_backend(VersioningMode mode,
                                      std::uint32_t bs = 1024,
                                      std::uint64_t undo_window = 1 << 20) {
  BackendConfig c;
  c.mode = mode;
  c.block_size = bs;
  c.undo_window = undo_window;
  return std::make_shared<Backend>(c);
}

TransportFactory factory_for(std::shared_ptr<Backend> backend) {
  return [backend] { return std::make_shared<EmbeddedTransport>(backend); };
}

WorkloadConfig small_config(std::uint64_t seed, int clients,
                            std::uint64_t txns) {
  WorkloadConfig c;
  c.clients = clients;
  c.total_txns = txns;
  c.file_size = 64 * 1024;
  c.block_size = 1024;
  c.hot_block_count = 8;
  c.hot_probability = 0.5;
  c.think_time_ms = 0;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("single client never aborts") {
  auto backend = make_backend(VersioningMode::BlockVersioned);
  WorkloadConfig cfg = small_config(1, 1, 100);
  auto [metrics, history] = run_workload(cfg, factory_for(backend));
  CHECK(metrics.committed == 100);
  CHECK(metrics.aborted == 0);
  CHECK(metrics.abort_rate == 0.0);
  CHECK(check_strict_serializability(history).valid());
}

TEST_CASE("same seed gives identical block choices") {
  WorkloadConfig cfg = small_config(7, 4, 200);
  auto b1 = make_backend(VersioningMode::BlockVersioned);
  auto b2 = make_backend(VersioningMode::BlockVersioned);
  auto [m1, h1] = run_workload(cfg, factory_for(b1));
  auto [m2, h2] = run_workload(cfg, factory_for(b2));
  CHECK(m1.choice_digest == m2.choice_digest);

  WorkloadConfig other = cfg;
  other.seed = 8;
  auto b3 = make_backend(VersioningMode::BlockVersioned);
  auto [m3, h3] = run_workload(other, factory_for(b3));
  CHECK(m3.choice_digest != m1.choice_digest);
}

TEST_CASE("sequential runs are fully deterministic") {
  WorkloadConfig cfg = small_config(13, 4, 120);
  cfg.sequential = true;
  auto b1 = make_backend(VersioningMode::BlockMultiversioned);
  auto b2 = make_backend(VersioningMode::BlockMultiversioned);
  auto [m1, h1] = run_workload(cfg, factory_for(b1));
  auto [m2, h2] = run_workload(cfg, factory_for(b2));
  CHECK(m1.choice_digest == m2.choice_digest);
  CHECK(m1.committed == m2.committed);
  CHECK(b1->dump() == b2->dump());
  CHECK(check_strict_serializability(h1).valid());
}

TEST_CASE("workload histories pass the checker across modes and policies") {
  for (VersioningMode mode : {VersioningMode::FileVersioned,
                              VersioningMode::BlockVersioned,
                              VersioningMode::BlockMultiversioned}) {
    for (CachePolicy policy : {CachePolicy::UpdateAll, CachePolicy::Stale}) {
      CAPTURE(to_string(mode));
      CAPTURE(to_string(policy));
      auto backend = make_backend(mode);
      WorkloadConfig cfg = small_config(3, 8, 300);
      cfg.mode = mode;
      cfg.policy = policy;
      auto [metrics, history] = run_workload(cfg, factory_for(backend));
      CHECK(metrics.committed + metrics.aborted == 300);
      auto result = check_strict_serializability(history);
      CAPTURE(result.witness);
      CHECK(result.valid());
    }
  }
}

TEST_CASE("history JSON round trip preserves checker verdicts") {
  auto backend = make_backend(VersioningMode::BlockVersioned);
  WorkloadConfig cfg = small_config(5, 4, 100);
  auto [metrics, history] = run_workload(cfg, factory_for(backend));
  History back = History::from_json(history.to_json());
  REQUIRE(back.events.size() == history.events.size());
  CHECK(check_strict_serializability(back).valid());
}

TEST_CASE("checker catches hand-built anomalies") {
  auto backend = make_backend(VersioningMode::BlockVersioned);
  WorkloadConfig cfg = small_config(9, 4, 150);
  auto [metrics, history] = run_workload(cfg, factory_for(backend));
  REQUIRE(check_strict_serializability(history).valid());

  SUBCASE("flipped read byte") {
    History bad = history;
    for (HistoryEvent& e : bad.events) {
      if (e.type == HistoryEvent::Type::Read && e.client >= 0 && !e.bytes.empty()) {
        e.bytes[0] ^= 0xFF;
        break;
      }
    }
    auto r = check_strict_serializability(bad);
    CHECK(r.status == CheckResult::Status::Violation);
    CHECK_FALSE(r.witness.empty());
  }
  SUBCASE("assertion moved off the snapshot") {
    History bad = history;
    bool mutated = false;
    for (HistoryEvent& e : bad.events) {
      if (e.type == HistoryEvent::Type::Assert) {
        e.assert_kind = LengthKind::Exactly;
        e.assert_len += 12345;
        mutated = true;
        break;
      }
    }
    REQUIRE(mutated);
    CHECK(check_strict_serializability(bad).status ==
          CheckResult::Status::Violation);
  }
  SUBCASE("duplicate commit timestamp") {
    History bad = history;
    Timestamp first = 0;
    for (HistoryEvent& e : bad.events) {
      if (e.type == HistoryEvent::Type::Commit && e.client >= 0 && !e.read_only) {
        if (first == 0) {
          first = e.ts;
        } else {
          e.ts = first;
          break;
        }
      }
    }
    CHECK(check_strict_serializability(bad).status ==
          CheckResult::Status::Violation);
  }
  SUBCASE("real-time inversion") {
    History bad = history;
    // Make one begin claim a snapshot from before a commit that returned
    // earlier in wall time.
    Timestamp biggest_commit = 0;
    std::uint64_t commit_wall = 0;
    for (HistoryEvent& e : bad.events) {
      if (e.type == HistoryEvent::Type::Commit && e.ts > biggest_commit) {
        biggest_commit = e.ts;
        commit_wall = e.wall_ns;
      }
    }
    for (HistoryEvent& e : bad.events) {
      if (e.type == HistoryEvent::Type::Begin && e.client >= 0) {
        e.ts = 0;
        e.wall_ns = commit_wall + 1000000;
        break;
      }
    }
    CHECK(check_strict_serializability(bad).status ==
          CheckResult::Status::Violation);
  }
  SUBCASE("dangling transaction is malformed") {
    History bad = history;
    // Drop the last commit/abort event of some client txn.
    for (size_t i = bad.events.size(); i-- > 0;) {
      if (bad.events[i].type == HistoryEvent::Type::Commit) {
        bad.events.erase(bad.events.begin() + static_cast<std::ptrdiff_t>(i));
        break;
      }
    }
    CHECK(check_strict_serializability(bad).status ==
          CheckResult::Status::Malformed);
  }
}

TEST_CASE("unvalidated backend writes are flagged by the checker") {
  // Bypass validation to let a stale read commit, then check the history.
  auto backend = make_backend(VersioningMode::BlockVersioned, 16);
  const FileId f = make_file(*backend, "/f", "0123456789abcdef");
  const Timestamp t0 = backend->current_read_timestamp();

  History history;
  auto add = [&](HistoryEvent e) { history.events.push_back(std::move(e)); };

  // Setup txn mirrors the backing file.
  {
    HistoryEvent b;
    b.type = HistoryEvent::Type::Begin;
    b.client = -1;
    b.txn = 0;
    b.ts = 0;
    b.wall_ns = 1;
    add(b);
    HistoryEvent w;
    w.type = HistoryEvent::Type::Write;
    w.client = -1;
    w.txn = 0;
    w.file = f;
    w.block = 0;
    w.offset = 0;
    w.bytes = bytes_of("0123456789abcdef");
    add(w);
    HistoryEvent cm;
    cm.type = HistoryEvent::Type::Commit;
    cm.client = -1;
    cm.txn = 0;
    cm.ts = t0;
    cm.wall_ns = 2;
    add(cm);
  }

  // Writer commits "XX" at t1.
  CommitRequest wreq;
  wreq.txn_read_ts = t0;
  wreq.write_set.push_back(wr(f, 0, 0, "XX"));
  const Timestamp t1 = backend->validate_and_commit(wreq).commit_ts;
  {
    HistoryEvent b;
    b.type = HistoryEvent::Type::Begin;
    b.client = 0;
    b.txn = 0;
    b.ts = t0;
    b.wall_ns = 10;
    add(b);
    HistoryEvent w;
    w.type = HistoryEvent::Type::Write;
    w.client = 0;
    w.txn = 0;
    w.file = f;
    w.block = 0;
    w.offset = 0;
    w.bytes = bytes_of("XX");
    add(w);
    HistoryEvent cm;
    cm.type = HistoryEvent::Type::Commit;
    cm.client = 0;
    cm.txn = 0;
    cm.ts = t1;
    cm.wall_ns = 20;
    add(cm);
  }

  // A second txn claims snapshot t0 but reads the newer bytes, then commits
  // through the unchecked hook (a correct backend would abort it).
  CommitRequest cheat;
  cheat.txn_read_ts = t0;
  cheat.write_set.push_back(wr(f, 1, 0, "zz"));
  const Timestamp t2 = backend->apply_unchecked_for_test(cheat).commit_ts;
  {
    HistoryEvent b;
    b.type = HistoryEvent::Type::Begin;
    b.client = 1;
    b.txn = 0;
    b.ts = t0;
    b.wall_ns = 30;
    add(b);
    HistoryEvent r;
    r.type = HistoryEvent::Type::Read;
    r.client = 1;
    r.txn = 0;
    r.file = f;
    r.block = 0;
    r.offset = 0;
    r.bytes = bytes_of("XX23456789abcdef");  // newer than snapshot t0
    add(r);
    HistoryEvent w;
    w.type = HistoryEvent::Type::Write;
    w.client = 1;
    w.txn = 0;
    w.file = f;
    w.block = 1;
    w.offset = 0;
    w.bytes = bytes_of("zz");
    add(w);
    HistoryEvent cm;
    cm.type = HistoryEvent::Type::Commit;
    cm.client = 1;
    cm.txn = 0;
    cm.ts = t2;
    cm.wall_ns = 40;
    add(cm);
  }

  auto result = check_strict_serializability(history);
  REQUIRE(result.status == CheckResult::Status::Violation);
  CHECK(result.witness.find("read") != std::string::npos);
}

TEST_CASE("compare_modes basics") {
  SUBCASE("one client: identical committed counts across modes") {
    WorkloadConfig cfg = small_config(21, 1, 60);
    BackendConfig bc;
    bc.undo_window = 1 << 20;
    ModeComparison cmp = compare_modes(cfg, bc);
    REQUIRE(cmp.rows.size() == 3);
    CHECK(cmp.rows[0].second.committed == 60);
    CHECK(cmp.rows[1].second.committed == 60);
    CHECK(cmp.rows[2].second.committed == 60);
    for (const History& h : cmp.histories) {
      CHECK(check_strict_serializability(h).valid());
    }
    const std::string csv = comparison_to_csv(cmp, cfg.clients);
    CHECK(csv.find("mode,clients,committed_per_sec,abort_rate") == 0);
    CHECK(csv.find("file,") != std::string::npos);
    CHECK(csv.find("block,") != std::string::npos);
    CHECK(csv.find("block-mv,") != std::string::npos);
  }
  SUBCASE("read-only clients under block-mv never abort") {
    auto backend = make_backend(VersioningMode::BlockMultiversioned);
    WorkloadConfig cfg = small_config(33, 6, 240);
    cfg.mode = VersioningMode::BlockMultiversioned;
    cfg.read_only_clients = 2;
    auto [metrics, history] = run_workload(cfg, factory_for(backend));
    for (const ClientStats& cs : metrics.per_client) {
      if (cs.read_only) CHECK(cs.aborts == 0);
    }
    CHECK(check_strict_serializability(history).valid());
  }
}

TEST_CASE("workload config round trips through JSON") {
  WorkloadConfig cfg = small_config(42, 9, 77);
  cfg.mode = VersioningMode::FileVersioned;
  cfg.policy = CachePolicy::Frequency;
  cfg.read_only_clients = 3;
  WorkloadConfig back = WorkloadConfig::from_json(cfg.to_json());
  CHECK(back.clients == 9);
  CHECK(back.read_only_clients == 3);
  CHECK(back.total_txns == 77);
  CHECK(back.seed == 42);
  CHECK(back.mode == VersioningMode::FileVersioned);
  CHECK(back.policy == CachePolicy::Frequency);
}
