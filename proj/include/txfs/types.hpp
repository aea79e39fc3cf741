#pragma once

#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace txfs {

// Logical commit time. 0 is the genesis/empty state; committed transactions
// carry strictly increasing timestamps >= 1.
using Timestamp = std::uint64_t;

// Stable file identity, allocated by the backend. Paths never encode identity,
// so renames keep the id.
using FileId = std::uint64_t;

inline constexpr FileId kRootId = 1;

// Cache feed sentinel: FileInvalidate(0) means "drop everything".
inline constexpr FileId kWildcardFileId = 0;

// Ids with the top bit set are transaction-local placeholders for files
// created in-flight; the backend substitutes real ids at commit.
inline constexpr FileId kTempIdBit = std::uint64_t{1} << 63;

inline bool is_temp_id(FileId id) { return (id & kTempIdBit) != 0; }

enum class VersioningMode {
  FileVersioned,        // one timestamp per file
  BlockVersioned,       // one timestamp per block
  BlockMultiversioned,  // per-block timestamps plus an undo log for old versions
};

enum class CachePolicy {
  UpdateAll,       // ship bytes for every changed block
  InvalidateOnly,  // ship invalidations only
  Frequency,       // bytes for commonly fetched blocks, invalidations otherwise
  Stale,           // do nothing; commit validation catches stale reads
};

enum class FileKind { Regular, Directory };

struct BlockRef {
  FileId file_id = 0;
  std::uint64_t block_no = 0;
  auto operator<=>(const BlockRef&) const = default;
};

// A buffered partial update to one block.
struct WriteRecord {
  BlockRef block;
  std::uint32_t offset = 0;  // byte offset within the block
  std::vector<std::uint8_t> bytes;

  bool operator==(const WriteRecord&) const = default;
};

enum class LengthKind { AtLeast, AtMost, Exactly };

// Predicate on a file's length implied by a read; validated at commit.
struct LengthAssertion {
  FileId file_id = 0;
  LengthKind kind = LengthKind::AtLeast;
  std::uint64_t length = 0;

  bool operator==(const LengthAssertion&) const = default;
};

struct FileMeta {
  FileId file_id = 0;
  std::uint64_t length = 0;  // always 0 for directories
  std::uint32_t mode = 0;    // permission bits; stored and reported, never enforced
  FileKind kind = FileKind::Regular;
  Timestamp meta_version = 0;

  bool operator==(const FileMeta&) const = default;
};

enum class ErrorCode {
  StaleRead,
  LengthViolation,
  NamespaceConflict,
  SnapshotTooOld,
  NotFound,
  NotADirectory,
  IsADirectory,
  AlreadyExists,
  DirectoryNotEmpty,
  BadDescriptor,
  ReadOnlyHandle,
  InvalidOffset,
  InvalidPath,
  TxnNotActive,
  Malformed,
  Transport,
};

const char* to_string(ErrorCode code);
bool error_code_from_string(const std::string& s, ErrorCode& out);

const char* to_string(VersioningMode mode);
bool mode_from_string(const std::string& s, VersioningMode& out);

const char* to_string(CachePolicy policy);
bool policy_from_string(const std::string& s, CachePolicy& out);

const char* to_string(FileKind kind);
bool kind_from_string(const std::string& s, FileKind& out);

class FsError : public std::runtime_error {
 public:
  FsError(ErrorCode code, std::string msg)
      : std::runtime_error(std::move(msg)), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace txfs
