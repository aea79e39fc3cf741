#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "txfs/backend.hpp"
#include "txfs/transport.hpp"
#include "txfs/types.hpp"

namespace txfs {

// open() flags. Access mode bits first, behavior bits after.
inline constexpr std::uint32_t kOpenRead = 1;
inline constexpr std::uint32_t kOpenWrite = 2;
inline constexpr std::uint32_t kOpenCreate = 4;
inline constexpr std::uint32_t kOpenTrunc = 8;
inline constexpr std::uint32_t kOpenAppend = 16;

enum class Whence { Set, Cur, End };
enum class LockKind { Shared, Exclusive };
enum class TxnState { Active, Committed, Aborted };

struct MountConfig {
  CachePolicy policy = CachePolicy::UpdateAll;
  int idempotent_retry_limit = 100;
  bool fold_own_writes = true;
};

class Txn;

// A client mount: transport endpoint, cache, and cache policy. Block size and
// versioning mode are learned from the backend on the first begin. The cache
// is refreshed only inside begin; transactions never mutate it mid-flight.
class Mount {
 public:
  Mount(std::shared_ptr<Transport> transport, MountConfig config = {});

  Txn begin();

  const MountConfig& config() const { return config_; }
  Transport& transport() { return *transport_; }
  std::uint32_t block_size() const { return block_size_; }
  VersioningMode mode() const { return mode_; }
  Timestamp cache_upto() const { return cache_upto_; }

  // Deterministic digest of all cached block bytes (test instrumentation).
  std::uint64_t cache_digest() const;

 private:
  friend class Txn;

  struct CacheEntry {
    std::vector<std::uint8_t> bytes;
    Timestamp write_ts = 0;
    Timestamp valid_upto = 0;  // latest ts at which this is known current
  };
  struct MetaEntry {
    FileMeta meta;
    Timestamp valid_upto = 0;
  };
  struct PathEntry {
    FileId id = 0;
    Timestamp valid_upto = 0;
  };

  void apply_batch(const CacheUpdateBatch& batch, CachePolicy policy);
  void drop_file(FileId id);

  // Locked copies for in-flight transactions: another transaction on this
  // mount may fold its results concurrently.
  std::optional<CacheEntry> lookup_block(const BlockRef& ref);
  std::optional<MetaEntry> lookup_meta(FileId id);
  std::optional<PathEntry> lookup_path(const std::string& path);

  std::shared_ptr<Transport> transport_;
  MountConfig config_;
  std::uint32_t block_size_ = 0;
  VersioningMode mode_ = VersioningMode::BlockMultiversioned;
  bool connected_ = false;

  std::map<BlockRef, CacheEntry> cache_;
  std::map<FileId, MetaEntry> meta_cache_;
  std::map<std::string, PathEntry> path_cache_;
  Timestamp cache_upto_ = 0;
  mutable std::mutex mu_;  // guards the caches: begin, folds, and in-flight probes
};

// One transaction: POSIX-like file operations against the snapshot at
// read_ts, with all writes buffered locally until commit. Not thread-safe;
// one transaction is driven by one activity.
class Txn {
 public:
  ~Txn();
  Txn(Txn&&) noexcept;
  Txn& operator=(Txn&&) = delete;
  Txn(const Txn&) = delete;
  Txn& operator=(const Txn&) = delete;

  Timestamp read_ts() const { return read_ts_; }
  TxnState state() const { return state_; }

  int open(const std::string& path, std::uint32_t flags, std::uint32_t mode = 0644);
  void close(int fd);

  std::vector<std::uint8_t> read(int fd, std::uint64_t count);
  std::vector<std::uint8_t> pread(int fd, std::uint64_t count, std::uint64_t offset);
  std::uint64_t write(int fd, const std::vector<std::uint8_t>& bytes);
  std::uint64_t pwrite(int fd, const std::vector<std::uint8_t>& bytes,
                       std::uint64_t offset);
  std::uint64_t seek(int fd, std::int64_t offset, Whence whence);

  void truncate(const std::string& path, std::uint64_t new_len);
  void ftruncate(int fd, std::uint64_t new_len);

  void mkdir(const std::string& path, std::uint32_t mode = 0755);
  void unlink(const std::string& path);
  void rename(const std::string& old_path, const std::string& new_path);

  FileMeta stat(const std::string& path);
  std::vector<DirEntry> read_dir(const std::string& path);

  // Lock elision: always succeeds locally, never touches the backend.
  bool lock(int fd, std::uint64_t offset, std::uint64_t len, LockKind kind);
  bool unlock(int fd, std::uint64_t offset, std::uint64_t len);
  std::uint64_t lock_calls() const { return lock_calls_; }

  // Local no-op; visibility happens at commit.
  void fsync(int fd);

  CommitResult commit();
  void abort();

  // Test instrumentation: assertions recorded so far (pre-normalization).
  const std::vector<LengthAssertion>& raw_assertions() const { return assertions_; }
  CommitRequest build_request_for_test() { return build_request(); }

 private:
  friend class Mount;
  Txn(Mount* mount, Timestamp read_ts);

  struct FileView {
    FileId id = 0;
    FileKind kind = FileKind::Regular;
    std::uint32_t mode = 0644;
    std::uint64_t base_length = 0;  // committed length at the snapshot
    std::uint64_t eff_length = 0;   // local POSIX view
    bool created_here = false;
    bool unlinked_here = false;
    bool exact_break = false;       // an exact SetLength was issued locally
    // Base bytes at positions >= this read as zero (own truncates), on top of
    // the base_length cutoff.
    std::uint64_t base_visible_limit = std::uint64_t(-1);
  };

  struct FdState {
    FileId id = 0;
    std::uint64_t pos = 0;
    std::uint32_t flags = 0;
  };

  struct StagedBlock {
    std::vector<std::uint8_t> bytes;  // raw base as served
    Timestamp write_ts = 0;
    Timestamp horizon = 0;  // certification horizon recorded in the read set
  };

  struct ResolvedNode {
    std::optional<FileId> id;  // nullopt: path absent in this txn's view
    // Path to present to the backend for children (differs after own renames;
    // empty when the node was created in this txn).
    std::string snapshot_path;
  };

  void require_active() const;
  FdState& fd_state(int fd);
  FileView& view(FileId id);

  // Path resolution against snapshot + own namespace ops. Records meta_reads
  // for snapshot observations. Returns the node for `path`.
  ResolvedNode resolve(const std::string& path);
  FileMeta fetch_meta_snapshot(const std::string& path, bool& absent);
  FileView& open_view(const std::string& path, const ResolvedNode& node);

  // Base block for a view, masked for base-visibility; records the read.
  std::vector<std::uint8_t> base_block(FileView& fv, std::uint64_t block_no);
  const std::vector<WriteRecord>* own_writes(FileId id, std::uint64_t block_no) const;
  bool own_covers(FileId id, std::uint64_t block_no, std::uint32_t from,
                  std::uint32_t to) const;

  std::vector<std::uint8_t> do_pread(FdState& fd, std::uint64_t count,
                                     std::uint64_t offset);
  std::uint64_t do_pwrite(FdState& fd, const std::vector<std::uint8_t>& bytes,
                          std::uint64_t offset);
  void do_truncate(FileView& fv, std::uint64_t new_len);
  void record_read(BlockRef ref, Timestamp horizon);
  void record_assertion(FileView& fv, LengthKind kind, std::uint64_t length);
  void assert_for_range_read(FileView& fv, std::uint64_t offset, std::uint64_t end_req,
                             std::uint64_t end_served);
  void local_abort(ErrorCode code, const std::string& what);

  CommitRequest build_request();
  std::vector<LengthAssertion> normalized_assertions() const;
  void fold_into_mount(bool committed, Timestamp tw,
                       const std::vector<WriteRecord>& coalesced);
  wire::Message roundtrip(const wire::Message& req);

  Mount* mount_ = nullptr;
  Timestamp read_ts_ = 0;
  TxnState state_ = TxnState::Active;

  std::map<int, FdState> fds_;
  int next_fd_ = 3;
  std::map<FileId, FileView> views_;
  FileId next_temp_id_ = kTempIdBit | 1;

  // Footprint.
  std::map<BlockRef, Timestamp> read_records_;
  std::map<BlockRef, std::vector<WriteRecord>> writes_;
  std::map<std::string, std::pair<std::optional<FileId>, Timestamp>> meta_records_;
  std::vector<MetaOp> meta_ops_;
  std::vector<LengthAssertion> assertions_;  // program order; own-view ones dropped later
  std::map<FileId, size_t> break_index_;     // assertions at index >= this are post-break

  // Snapshot staging (folded into the mount cache at txn end).
  std::map<BlockRef, StagedBlock> staged_blocks_;
  std::map<std::string, ResolvedNode> resolved_;
  std::map<FileId, FileMeta> staged_meta_;

  // Own namespace overlay: full local path -> node.
  std::map<std::string, ResolvedNode> own_ns_;

  std::uint64_t lock_calls_ = 0;
};

enum class IdempotentOutcome { Executed, Skipped };

// Runs `work` in a transaction guarded by the marker file
// "/.txn_markers/<key>": retries of the same key are skipped once a prior
// attempt committed. Aborts and indeterminate commits retry from begin.
IdempotentOutcome run_idempotent(Mount& mount, const std::string& key,
                                 const std::function<void(Txn&)>& work);

}  // namespace txfs
