#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include "txfs/types.hpp"

namespace txfs {

struct BackendConfig {
  std::uint32_t block_size = 1024;
  VersioningMode mode = VersioningMode::BlockMultiversioned;
  // Number of most-recent committed timestamps whose snapshots stay readable.
  std::uint64_t undo_window = 1024;
  // Fraction of feed blocks shipped as bytes under the Frequency policy.
  double frequency_fraction = 0.2;
  // Fetch counters are halved every this many commits.
  std::uint64_t frequency_decay_commits = 10000;
  // No principled default exists; bounded only to keep block arithmetic sane.
  std::uint64_t max_file_blocks = std::uint64_t{1} << 31;
};

// One path observation made by a transaction: the path resolved to `file_id`
// (or nothing) when read at `read_ts`.
struct MetaRead {
  std::string path;
  std::optional<FileId> file_id;
  Timestamp read_ts = 0;
};

struct MetaOp {
  enum class Kind { Create, Mkdir, Unlink, Rename, SetLength };
  Kind kind = Kind::Create;
  std::string path;      // Create/Mkdir/Unlink; Rename source
  std::string path2;     // Rename destination
  FileId file_id = 0;    // Create/Mkdir: temp id; SetLength: target id
  std::uint32_t mode = 0;
  std::uint64_t length = 0;  // SetLength
  bool exact = true;         // SetLength: exact (truncate) vs maximum (growth)
};

struct ReadSetEntry {
  BlockRef block;
  Timestamp read_ts = 0;
};

struct CommitRequest {
  std::vector<ReadSetEntry> read_set;
  std::vector<WriteRecord> write_set;  // coalesced, temp ids allowed
  std::vector<MetaRead> meta_reads;
  std::vector<MetaOp> meta_ops;  // ordered
  std::vector<LengthAssertion> assertions;  // normalized, temp ids allowed
  Timestamp txn_read_ts = 0;
};

struct AbortInfo {
  ErrorCode reason = ErrorCode::StaleRead;
  // StaleRead: the offending block. NamespaceConflict: the path.
  // LengthViolation: the file id.
  BlockRef block;
  std::string path;
  FileId file_id = 0;
};

struct CommitResult {
  bool committed = false;
  Timestamp commit_ts = 0;  // T_W; equals txn_read_ts for read-only requests
  AbortInfo abort;          // valid when !committed

  static CommitResult committed_at(Timestamp tw) { return {true, tw, {}}; }
};

struct CacheUpdateItem {
  enum class Kind { BlockData, BlockInvalidate, FileInvalidate, MetaUpdate };
  Kind kind = Kind::BlockInvalidate;
  BlockRef block;                   // BlockData/BlockInvalidate
  std::vector<std::uint8_t> bytes;  // BlockData
  Timestamp write_ts = 0;           // BlockData
  FileId file_id = 0;               // FileInvalidate (kWildcardFileId = drop all)
  FileMeta meta;                    // MetaUpdate
};

struct CacheUpdateBatch {
  Timestamp upto_ts = 0;
  std::vector<CacheUpdateItem> items;
};

struct DirEntry {
  std::string name;
  FileId file_id = 0;
  FileKind kind = FileKind::Regular;
};

struct GetBlockResult {
  bool ok = false;           // false => SnapshotTooOld
  std::vector<std::uint8_t> bytes;  // block_size bytes when ok
  Timestamp write_ts = 0;
};

struct GetMetaResult {
  enum class Status { Ok, Absent, SnapshotTooOld };
  Status status = Status::Absent;
  FileMeta meta;
};

struct ListDirResult {
  enum class Status { Ok, Absent, NotADirectory, SnapshotTooOld };
  Status status = Status::Ok;
  std::vector<DirEntry> entries;  // sorted by name
};

// Test-only capture of an applied commit, used by serial-replay oracles.
struct CommittedTxnRecord {
  Timestamp commit_ts = 0;
  CommitRequest request;  // temp ids rewritten to the allocated real ids
};

// The monolithic in-memory backend: sequencer, versioned block store, undo
// log, versioned namespace, commit validator, and the cache-update feed.
//
// Reads (get_block/get_meta/list_dir/cache_feed/dump) run concurrently;
// validate_and_commit is serialized. Safe to share across threads.
class Backend {
 public:
  explicit Backend(BackendConfig config = {});

  const BackendConfig& config() const { return config_; }

  // Strictly increasing; first value is 1.
  Timestamp seq_next();

  // T_W of the latest committed transaction, 0 if none.
  Timestamp current_read_timestamp() const;

  GetBlockResult get_block(BlockRef ref, Timestamp at_ts) const;
  GetMetaResult get_meta_by_path(const std::string& path, Timestamp at_ts) const;
  GetMetaResult get_meta_by_id(FileId id, Timestamp at_ts) const;
  ListDirResult list_dir(const std::string& path, Timestamp at_ts) const;

  CommitResult validate_and_commit(const CommitRequest& req);

  CacheUpdateBatch cache_feed(Timestamp since_ts, CachePolicy policy) const;

  // Atomically sample a read timestamp and the feed batch that brings a cache
  // up to exactly that timestamp. Under Stale the batch is empty and the cache
  // horizon stays at since_ts.
  std::pair<Timestamp, CacheUpdateBatch> begin_txn(Timestamp since_ts,
                                                   CachePolicy policy) const;

  // Drop undo entries (and feed log) needed only for snapshots < retain_after.
  std::uint64_t gc_undo(Timestamp retain_after);

  // Deterministic full-state snapshot: namespace, per-file content digests,
  // current read timestamp. Stable across backends given identical commits.
  std::string dump() const;

  // Test hooks -------------------------------------------------------------

  // When enabled, every applied commit is recorded for serial-replay checks.
  void enable_commit_capture(bool on) { capture_commits_ = on; }
  std::vector<CommittedTxnRecord> captured_commits() const;

  // Applies a request without validation (still atomically, still sequenced).
  // Exists so tests can construct histories that a correct backend rejects.
  CommitResult apply_unchecked_for_test(const CommitRequest& req);

 private:
  struct StoredBlock {
    std::vector<std::uint8_t> bytes;  // empty vector means all zeros
    Timestamp write_ts = 0;
  };

  struct UndoEntry {
    std::vector<std::uint8_t> pre_bytes;
    Timestamp pre_write_ts = 0;
    Timestamp superseded_by = 0;  // the commit that displaced this image
  };

  struct BlockHistory {
    StoredBlock current;
    std::deque<UndoEntry> undo;  // ascending superseded_by
    Timestamp floor = 0;         // snapshots below this are pruned
    mutable std::atomic<std::uint64_t> fetch_count{0};
  };

  // One version of a namespace binding or file meta cell.
  template <typename T>
  struct Versioned {
    // (ts, value) pairs, ascending; value at time t = last entry with ts <= t.
    std::vector<std::pair<Timestamp, T>> versions;
    Timestamp floor = 0;

    void set(Timestamp ts, T value) { versions.emplace_back(ts, std::move(value)); }
    const T* at(Timestamp ts) const {
      const T* found = nullptr;
      for (const auto& [vts, v] : versions) {
        if (vts <= ts) found = &v;
        else break;
      }
      return found;
    }
    Timestamp last_change() const {
      return versions.empty() ? 0 : versions.back().first;
    }
    void prune(Timestamp retain_after) {
      // Keep the newest version at or before retain_after; drop older ones.
      size_t keep_from = 0;
      for (size_t i = 0; i < versions.size(); ++i) {
        if (versions[i].first <= retain_after) keep_from = i;
      }
      if (keep_from > 0) {
        versions.erase(versions.begin(),
                       versions.begin() + static_cast<std::ptrdiff_t>(keep_from));
        floor = std::max(floor, retain_after);
      }
    }
  };

  struct FileState {
    Versioned<std::optional<FileMeta>> meta;  // nullopt once unlinked
    Timestamp data_ts = 0;                    // file-wide stamp (FileVersioned)
  };

  struct DirState {
    // name -> binding history (nullopt = absent at that time)
    std::map<std::string, Versioned<std::optional<FileId>>> entries;
  };

  struct FeedLogEntry {
    Timestamp commit_ts = 0;
    std::vector<BlockRef> changed_blocks;
    std::vector<FileId> invalidated_files;  // unlink/rename/shrink
    std::vector<FileId> meta_updated_files;
  };

  // All helpers below assume mu_ is held (shared for reads, unique for writes).
  struct ResolveResult {
    enum class Status { Ok, Absent, NotADirectory, SnapshotTooOld };
    Status status = Status::Absent;
    FileId id = 0;
  };
  ResolveResult resolve_locked(const std::string& path, Timestamp at_ts) const;
  const FileState* file_locked(FileId id) const;
  std::optional<FileMeta> meta_at_locked(FileId id, Timestamp at_ts, bool* too_old) const;
  Timestamp block_stamp_locked(const BlockRef& ref) const;
  // MV only: stamp of the version current at at_ts; sets *too_old if pruned.
  Timestamp stamp_at_locked(const BlockRef& ref, Timestamp at_ts, bool* too_old) const;
  std::uint64_t current_length_locked(FileId id) const;
  bool exists_now_locked(FileId id) const;
  void apply_locked(const CommitRequest& req, Timestamp tw,
                    CommitRequest* rewritten);
  std::optional<AbortInfo> check_meta_ops_applicable_locked(
      const CommitRequest& req) const;
  void reject_malformed(const CommitRequest& req) const;
  void note_feed_entry_locked(FeedLogEntry entry);
  std::uint64_t gc_locked(Timestamp retain_after);
  CacheUpdateBatch feed_locked(Timestamp since_ts, CachePolicy policy) const;

  BackendConfig config_;
  mutable std::shared_mutex mu_;
  std::atomic<Timestamp> next_ts_{1};
  std::atomic<Timestamp> last_committed_{0};

  std::map<BlockRef, BlockHistory> blocks_;
  std::map<FileId, FileState> files_;
  std::map<FileId, DirState> dirs_;
  FileId next_file_id_ = kRootId + 1;

  std::deque<FeedLogEntry> feed_log_;
  Timestamp feed_log_floor_ = 0;  // feeds from below this degrade
  std::deque<Timestamp> committed_history_;  // for the undo window
  std::uint64_t commits_since_decay_ = 0;

  bool capture_commits_ = false;
  std::vector<CommittedTxnRecord> captured_;
};

}  // namespace txfs
