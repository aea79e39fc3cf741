#pragma once

// Shared test helpers: request builders and the keep-all-versions oracle the
// backend tests check snapshot reads against.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "txfs/backend.hpp"
#include "txfs/core.hpp"
#include "txfs/types.hpp"

namespace txfs::test {

inline std::vector<std::uint8_t> bytes_of(const std::string& s) {
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

inline WriteRecord wr(FileId f, std::uint64_t b, std::uint32_t off,
                      const std::string& data) {
  return WriteRecord{BlockRef{f, b}, off, bytes_of(data)};
}

inline MetaOp op_create(const std::string& path, FileId temp_id,
                        std::uint32_t mode = 0644) {
  MetaOp op;
  op.kind = MetaOp::Kind::Create;
  op.path = path;
  op.file_id = temp_id;
  op.mode = mode;
  return op;
}

inline MetaOp op_mkdir(const std::string& path, FileId temp_id,
                       std::uint32_t mode = 0755) {
  MetaOp op;
  op.kind = MetaOp::Kind::Mkdir;
  op.path = path;
  op.file_id = temp_id;
  op.mode = mode;
  return op;
}

inline MetaOp op_unlink(const std::string& path) {
  MetaOp op;
  op.kind = MetaOp::Kind::Unlink;
  op.path = path;
  return op;
}

inline MetaOp op_rename(const std::string& from, const std::string& to) {
  MetaOp op;
  op.kind = MetaOp::Kind::Rename;
  op.path = from;
  op.path2 = to;
  return op;
}

inline MetaOp op_set_length(FileId id, std::uint64_t len, bool exact = true) {
  MetaOp op;
  op.kind = MetaOp::Kind::SetLength;
  op.file_id = id;
  op.length = len;
  op.exact = exact;
  return op;
}

// Creates a file with the given content in one commit; returns its id.
inline FileId make_file(Backend& backend, const std::string& path,
                        const std::string& content) {
  const FileId temp = kTempIdBit | 1;
  CommitRequest create;
  create.txn_read_ts = backend.current_read_timestamp();
  create.meta_ops.push_back(op_create(path, temp));
  if (!content.empty()) {
    const std::uint32_t bs = backend.config().block_size;
    for (const BlockSpan& span : block_span(0, content.size(), bs)) {
      create.write_set.push_back(WriteRecord{
          BlockRef{temp, span.block_no}, span.offset,
          bytes_of(content.substr(span.block_no * bs + span.offset, span.length))});
    }
    create.meta_ops.push_back(op_set_length(temp, content.size(), false));
  }
  CommitResult r = backend.validate_and_commit(create);
  REQUIRE(r.committed);
  auto meta = backend.get_meta_by_path(path, backend.current_read_timestamp());
  REQUIRE(meta.status == GetMetaResult::Status::Ok);
  return meta.meta.file_id;
}

// Keep-all-versions oracle: every committed block image with its commit
// timestamp, independent of the backend's undo machinery.
class VersionOracle {
 public:
  explicit VersionOracle(std::uint32_t block_size) : bs_(block_size) {}

  void note_commit(Timestamp tw, const std::vector<WriteRecord>& writes) {
    for (const WriteRecord& w : writes) {
      std::vector<std::uint8_t> next = at(w.block, tw);  // current image
      std::copy(w.bytes.begin(), w.bytes.end(), next.begin() + w.offset);
      versions_[w.block].emplace_back(tw, std::move(next));
    }
  }

  std::vector<std::uint8_t> at(const BlockRef& ref, Timestamp ts) const {
    auto it = versions_.find(ref);
    std::vector<std::uint8_t> out(bs_, 0);
    if (it == versions_.end()) return out;
    for (const auto& [vts, bytes] : it->second) {
      if (vts <= ts) out = bytes;
      else break;
    }
    return out;
  }

  Timestamp stamp_at(const BlockRef& ref, Timestamp ts) const {
    auto it = versions_.find(ref);
    Timestamp stamp = 0;
    if (it == versions_.end()) return 0;
    for (const auto& [vts, bytes] : it->second) {
      if (vts <= ts) stamp = vts;
      else break;
    }
    return stamp;
  }

  const std::map<BlockRef, std::vector<std::pair<Timestamp, std::vector<std::uint8_t>>>>&
  versions() const {
    return versions_;
  }

 private:
  std::uint32_t bs_;
  std::map<BlockRef, std::vector<std::pair<Timestamp, std::vector<std::uint8_t>>>> versions_;
};

}  // namespace txfs::test
