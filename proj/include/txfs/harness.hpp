#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "txfs/backend.hpp"
#include "txfs/transport.hpp"
#include "txfs/types.hpp"

namespace txfs {

struct WorkloadConfig {
  int clients = 32;
  int read_only_clients = 0;  // this many of the clients never write
  // txn-count bound when > 0, otherwise run for duration_s.
  std::uint64_t total_txns = 0;
  double duration_s = 10.0;
  std::uint64_t file_size = std::uint64_t{1} << 20;  // 1 MiB
  std::uint32_t block_size = 1024;
  int hot_block_count = 20;
  double hot_probability = 0.2;
  double think_time_ms = 10.0;
  VersioningMode mode = VersioningMode::BlockVersioned;
  CachePolicy policy = CachePolicy::UpdateAll;
  std::uint64_t seed = 0;
  // Round-robin client stepping: fully deterministic run (used by the
  // determinism checks; contention runs use real threads).
  bool sequential = false;
  std::string data_path = "/bench/data";

  nlohmann::json to_json() const;
  static WorkloadConfig from_json(const nlohmann::json& j);
};

struct HistoryEvent {
  enum class Type { Begin, Read, Write, Assert, Commit, Abort };
  Type type = Type::Begin;
  int client = 0;           // -1: setup
  std::uint64_t txn = 0;    // unique per client
  Timestamp ts = 0;         // Begin: T_R; Commit: T_W
  std::uint64_t wall_ns = 0;
  bool read_only = false;   // Commit events
  FileId file = 0;
  std::uint64_t block = 0;
  std::uint32_t offset = 0;
  std::vector<std::uint8_t> bytes;
  LengthKind assert_kind = LengthKind::AtLeast;
  std::uint64_t assert_len = 0;
  std::string reason;  // Abort
};

struct History {
  std::vector<HistoryEvent> events;  // events of one txn contiguous per client

  nlohmann::json to_json() const;
  static History from_json(const nlohmann::json& j);
};

struct ClientStats {
  int client = 0;
  bool read_only = false;
  std::uint64_t commits = 0;
  std::uint64_t aborts = 0;
};

struct Metrics {
  std::uint64_t committed = 0;
  std::uint64_t aborted = 0;
  double elapsed_s = 0;
  double committed_per_sec = 0;
  double abort_rate = 0;  // aborts / (aborts + commits)
  std::map<std::string, std::uint64_t> abort_reasons;
  // Percentiles in microseconds, per phase.
  double begin_p50 = 0, begin_p99 = 0;
  double ops_p50 = 0, ops_p99 = 0;
  double commit_p50 = 0, commit_p99 = 0;
  std::uint64_t choice_digest = 0;  // digest of per-client block choices
  std::vector<ClientStats> per_client;

  nlohmann::json to_json() const;
};

using TransportFactory = std::function<std::shared_ptr<Transport>()>;

// Pre-creates the data file (seeded pseudo-random content), then runs the
// hot-block read/write loop across `clients` concurrent clients.
std::pair<Metrics, History> run_workload(const WorkloadConfig& config,
                                         const TransportFactory& transports);

struct ModeComparison {
  std::vector<std::pair<VersioningMode, Metrics>> rows;
  std::vector<History> histories;
};

// Same seed and client count across the three versioning modes, one fresh
// embedded backend per mode.
ModeComparison compare_modes(const WorkloadConfig& base,
                             const BackendConfig& backend_template);

std::string comparison_to_csv(const ModeComparison& cmp, int clients);

// ---------------------------------------------------------------------------
// Strict-serializability checker

struct CheckResult {
  enum class Status { Valid, Violation, Malformed };
  Status status = Status::Valid;
  std::string witness;

  bool valid() const { return status == Status::Valid; }
};

// Replays committed transactions serially in commit order on an independent
// versioned store and verifies: (a) every read equals the snapshot at the
// transaction's T_R merged with its own prior writes, (b) every assertion
// holds at that snapshot, (c) real-time order is respected (a commit that
// returned before a begin started must be visible to it).
CheckResult check_strict_serializability(const History& history);

}  // namespace txfs
