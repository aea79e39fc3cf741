#include "txfs/types.hpp"

namespace txfs {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::StaleRead: return "stale_read";
    case ErrorCode::LengthViolation: return "length_violation";
    case ErrorCode::NamespaceConflict: return "namespace_conflict";
    case ErrorCode::SnapshotTooOld: return "snapshot_too_old";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::NotADirectory: return "not_a_directory";
    case ErrorCode::IsADirectory: return "is_a_directory";
    case ErrorCode::AlreadyExists: return "already_exists";
    case ErrorCode::DirectoryNotEmpty: return "directory_not_empty";
    case ErrorCode::BadDescriptor: return "bad_descriptor";
    case ErrorCode::ReadOnlyHandle: return "read_only_handle";
    case ErrorCode::InvalidOffset: return "invalid_offset";
    case ErrorCode::InvalidPath: return "invalid_path";
    case ErrorCode::TxnNotActive: return "txn_not_active";
    case ErrorCode::Malformed: return "malformed";
    case ErrorCode::Transport: return "transport";
  }
  return "unknown";
}

bool error_code_from_string(const std::string& s, ErrorCode& out) {
  static const ErrorCode all[] = {
      ErrorCode::StaleRead,      ErrorCode::LengthViolation,
      ErrorCode::NamespaceConflict, ErrorCode::SnapshotTooOld,
      ErrorCode::NotFound,       ErrorCode::NotADirectory,
      ErrorCode::IsADirectory,   ErrorCode::AlreadyExists,
      ErrorCode::DirectoryNotEmpty, ErrorCode::BadDescriptor,
      ErrorCode::ReadOnlyHandle, ErrorCode::InvalidOffset,
      ErrorCode::InvalidPath,    ErrorCode::TxnNotActive,
      ErrorCode::Malformed,      ErrorCode::Transport,
  };
  for (ErrorCode c : all) {
    if (s == to_string(c)) {
      out = c;
      return true;
    }
  }
  return false;
}

const char* to_string(VersioningMode mode) {
  switch (mode) {
    case VersioningMode::FileVersioned: return "file";
    case VersioningMode::BlockVersioned: return "block";
    case VersioningMode::BlockMultiversioned: return "block-mv";
  }
  return "unknown";
}

bool mode_from_string(const std::string& s, VersioningMode& out) {
  if (s == "file") {
    out = VersioningMode::FileVersioned;
  } else if (s == "block") {
    out = VersioningMode::BlockVersioned;
  } else if (s == "block-mv") {
    out = VersioningMode::BlockMultiversioned;
  } else {
    return false;
  }
  return true;
}

const char* to_string(CachePolicy policy) {
  switch (policy) {
    case CachePolicy::UpdateAll: return "update_all";
    case CachePolicy::InvalidateOnly: return "invalidate_only";
    case CachePolicy::Frequency: return "frequency";
    case CachePolicy::Stale: return "stale";
  }
  return "unknown";
}

bool policy_from_string(const std::string& s, CachePolicy& out) {
  if (s == "update_all") {
    out = CachePolicy::UpdateAll;
  } else if (s == "invalidate_only") {
    out = CachePolicy::InvalidateOnly;
  } else if (s == "frequency") {
    out = CachePolicy::Frequency;
  } else if (s == "stale") {
    out = CachePolicy::Stale;
  } else {
    return false;
  }
  return true;
}

const char* to_string(FileKind kind) {
  return kind == FileKind::Directory ? "directory" : "regular";
}

bool kind_from_string(const std::string& s, FileKind& out) {
  if (s == "regular") {
    out = FileKind::Regular;
  } else if (s == "directory") {
    out = FileKind::Directory;
  } else {
    return false;
  }
  return true;
}

}  // namespace txfs
