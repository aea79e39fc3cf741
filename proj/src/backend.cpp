#include "txfs/backend.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <mutex>
#include <set>

#include <json.hpp>

#include "txfs/digest.hpp"
#include "txfs/path.hpp"

namespace txfs {

using json = nlohmann::json;

Backend::Backend(BackendConfig config) : config_(config) {
  FileMeta root;
  root.file_id = kRootId;
  root.kind = FileKind::Directory;
  root.mode = 0755;
  root.meta_version = 0;
  files_[kRootId].meta.set(0, root);
  dirs_[kRootId];
}

Timestamp Backend::seq_next() { return next_ts_.fetch_add(1); }

Timestamp Backend::current_read_timestamp() const {
  return last_committed_.load(std::memory_order_acquire);
}

// ---------------------------------------------------------------------------
// Reads

const Backend::FileState* Backend::file_locked(FileId id) const {
  auto it = files_.find(id);
  return it == files_.end() ? nullptr : &it->second;
}

std::optional<FileMeta> Backend::meta_at_locked(FileId id, Timestamp at_ts,
                                                bool* too_old) const {
  *too_old = false;
  const FileState* fs = file_locked(id);
  if (!fs) return std::nullopt;
  if (config_.mode == VersioningMode::BlockMultiversioned) {
    if (at_ts < fs->meta.floor) {
      *too_old = true;
      return std::nullopt;
    }
    const auto* v = fs->meta.at(at_ts);
    return v ? *v : std::nullopt;
  }
  // Non-multiversioned: only the latest version is servable.
  if (fs->meta.last_change() > at_ts) {
    *too_old = true;
    return std::nullopt;
  }
  const auto* v = fs->meta.at(at_ts);
  return v ? *v : std::nullopt;
}

Backend::ResolveResult Backend::resolve_locked(const std::string& path,
                                               Timestamp at_ts) const {
  using Status = ResolveResult::Status;
  if (path == "/") return {Status::Ok, kRootId};

  FileId dir = kRootId;
  const auto components = split_path(path);
  for (size_t i = 0; i < components.size(); ++i) {
    auto dit = dirs_.find(dir);
    if (dit == dirs_.end()) return {Status::NotADirectory, 0};
    auto eit = dit->second.entries.find(components[i]);
    std::optional<FileId> bound;
    if (eit != dit->second.entries.end()) {
      const auto& cell = eit->second;
      if (config_.mode == VersioningMode::BlockMultiversioned) {
        if (at_ts < cell.floor) return {Status::SnapshotTooOld, 0};
      } else if (cell.last_change() > at_ts) {
        return {Status::SnapshotTooOld, 0};
      }
      const auto* v = cell.at(at_ts);
      if (v) bound = *v;
    }
    if (!bound) return {Status::Absent, 0};
    if (i + 1 == components.size()) return {Status::Ok, *bound};

    bool too_old = false;
    auto meta = meta_at_locked(*bound, at_ts, &too_old);
    if (too_old) return {Status::SnapshotTooOld, 0};
    if (!meta) return {Status::Absent, 0};
    if (meta->kind != FileKind::Directory) return {Status::NotADirectory, 0};
    dir = *bound;
  }
  return {Status::Absent, 0};
}

Timestamp Backend::block_stamp_locked(const BlockRef& ref) const {
  if (config_.mode == VersioningMode::FileVersioned) {
    const FileState* fs = file_locked(ref.file_id);
    return fs ? fs->data_ts : 0;
  }
  auto it = blocks_.find(ref);
  return it == blocks_.end() ? 0 : it->second.current.write_ts;
}

Timestamp Backend::stamp_at_locked(const BlockRef& ref, Timestamp at_ts,
                                   bool* too_old) const {
  *too_old = false;
  auto it = blocks_.find(ref);
  if (it == blocks_.end()) return 0;
  const BlockHistory& h = it->second;
  if (h.current.write_ts <= at_ts) return h.current.write_ts;
  if (at_ts < h.floor) {
    *too_old = true;
    return 0;
  }
  for (const UndoEntry& u : h.undo) {
    if (u.superseded_by > at_ts) {
      if (u.pre_write_ts <= at_ts) return u.pre_write_ts;
      // at_ts predates the oldest retained image; only reachable when the
      // chain bottom was pruned, which the floor check already covers.
      *too_old = true;
      return 0;
    }
  }
  *too_old = true;
  return 0;
}

GetBlockResult Backend::get_block(BlockRef ref, Timestamp at_ts) const {
  std::shared_lock lock(mu_);
  auto it = blocks_.find(ref);
  if (it == blocks_.end()) {
    // Never written: zero-filled at every timestamp, in every mode.
    return {true, std::vector<std::uint8_t>(config_.block_size, 0), 0};
  }
  const BlockHistory& h = it->second;
  h.fetch_count.fetch_add(1, std::memory_order_relaxed);

  auto materialize = [&](const std::vector<std::uint8_t>& b) {
    if (b.empty()) return std::vector<std::uint8_t>(config_.block_size, 0);
    return b;
  };

  if (config_.mode != VersioningMode::BlockMultiversioned) {
    const Timestamp stamp = block_stamp_locked(ref);
    if (stamp > at_ts) return {};  // SnapshotTooOld: early abort for the client
    return {true, materialize(h.current.bytes), stamp};
  }

  if (h.current.write_ts <= at_ts) {
    return {true, materialize(h.current.bytes), h.current.write_ts};
  }
  if (at_ts < h.floor) return {};
  for (const UndoEntry& u : h.undo) {
    if (u.superseded_by > at_ts) {
      if (u.pre_write_ts <= at_ts) {
        return {true, materialize(u.pre_bytes), u.pre_write_ts};
      }
      return {};
    }
  }
  return {};
}

GetMetaResult Backend::get_meta_by_path(const std::string& path,
                                        Timestamp at_ts) const {
  std::shared_lock lock(mu_);
  auto r = resolve_locked(path, at_ts);
  switch (r.status) {
    case ResolveResult::Status::SnapshotTooOld:
      return {GetMetaResult::Status::SnapshotTooOld, {}};
    case ResolveResult::Status::Absent:
    case ResolveResult::Status::NotADirectory:
      return {GetMetaResult::Status::Absent, {}};
    case ResolveResult::Status::Ok:
      break;
  }
  bool too_old = false;
  auto meta = meta_at_locked(r.id, at_ts, &too_old);
  if (too_old) return {GetMetaResult::Status::SnapshotTooOld, {}};
  if (!meta) return {GetMetaResult::Status::Absent, {}};
  return {GetMetaResult::Status::Ok, *meta};
}

GetMetaResult Backend::get_meta_by_id(FileId id, Timestamp at_ts) const {
  std::shared_lock lock(mu_);
  bool too_old = false;
  auto meta = meta_at_locked(id, at_ts, &too_old);
  if (too_old) return {GetMetaResult::Status::SnapshotTooOld, {}};
  if (!meta) return {GetMetaResult::Status::Absent, {}};
  return {GetMetaResult::Status::Ok, *meta};
}

ListDirResult Backend::list_dir(const std::string& path, Timestamp at_ts) const {
  std::shared_lock lock(mu_);
  auto r = resolve_locked(path, at_ts);
  switch (r.status) {
    case ResolveResult::Status::SnapshotTooOld:
      return {ListDirResult::Status::SnapshotTooOld, {}};
    case ResolveResult::Status::Absent:
      return {ListDirResult::Status::Absent, {}};
    case ResolveResult::Status::NotADirectory:
      return {ListDirResult::Status::NotADirectory, {}};
    case ResolveResult::Status::Ok:
      break;
  }
  bool too_old = false;
  auto meta = meta_at_locked(r.id, at_ts, &too_old);
  if (too_old) return {ListDirResult::Status::SnapshotTooOld, {}};
  if (!meta) return {ListDirResult::Status::Absent, {}};
  if (meta->kind != FileKind::Directory) {
    return {ListDirResult::Status::NotADirectory, {}};
  }

  ListDirResult out{ListDirResult::Status::Ok, {}};
  auto dit = dirs_.find(r.id);
  if (dit == dirs_.end()) return out;
  for (const auto& [name, cell] : dit->second.entries) {
    if (config_.mode == VersioningMode::BlockMultiversioned) {
      if (at_ts < cell.floor) return {ListDirResult::Status::SnapshotTooOld, {}};
    } else if (cell.last_change() > at_ts) {
      return {ListDirResult::Status::SnapshotTooOld, {}};
    }
    const auto* v = cell.at(at_ts);
    if (!v || !*v) continue;
    bool child_old = false;
    auto child = meta_at_locked(**v, at_ts, &child_old);
    if (child_old) return {ListDirResult::Status::SnapshotTooOld, {}};
    if (!child) continue;
    out.entries.push_back(DirEntry{name, **v, child->kind});
  }
  return out;
}

std::uint64_t Backend::current_length_locked(FileId id) const {
  const FileState* fs = file_locked(id);
  if (!fs) return 0;
  const auto* v = fs->meta.at(last_committed_.load());
  return (v && *v) ? (*v)->length : 0;
}

bool Backend::exists_now_locked(FileId id) const {
  const FileState* fs = file_locked(id);
  if (!fs) return false;
  const auto* v = fs->meta.at(last_committed_.load());
  return v && v->has_value();
}

// ---------------------------------------------------------------------------
// Commit

namespace {

// Simulates meta_op applicability against current state plus the ops already
// simulated, so a request may create a directory and populate it atomically.
struct OpSim {
  std::map<std::pair<FileId, std::string>, std::optional<FileId>> bindings;
  std::map<FileId, FileKind> created;
  std::set<FileId> removed;
};

}  // namespace

std::optional<AbortInfo> Backend::check_meta_ops_applicable_locked(
    const CommitRequest& req) const {
  const Timestamp now = last_committed_.load();
  OpSim sim;

  auto lookup = [&](FileId dir, const std::string& name) -> std::optional<FileId> {
    auto oit = sim.bindings.find({dir, name});
    if (oit != sim.bindings.end()) return oit->second;
    auto dit = dirs_.find(dir);
    if (dit == dirs_.end()) return std::nullopt;
    auto eit = dit->second.entries.find(name);
    if (eit == dit->second.entries.end()) return std::nullopt;
    const auto* v = eit->second.at(now);
    return v ? *v : std::nullopt;
  };
  auto kind_of = [&](FileId id) -> std::optional<FileKind> {
    auto cit = sim.created.find(id);
    if (cit != sim.created.end()) return cit->second;
    if (sim.removed.count(id)) return std::nullopt;
    const FileState* fs = file_locked(id);
    if (!fs) return std::nullopt;
    const auto* v = fs->meta.at(now);
    if (!v || !*v) return std::nullopt;
    return (*v)->kind;
  };
  auto resolve = [&](const std::string& path) -> std::optional<FileId> {
    if (path == "/") return kRootId;
    FileId dir = kRootId;
    auto components = split_path(path);
    for (size_t i = 0; i < components.size(); ++i) {
      auto bound = lookup(dir, components[i]);
      if (!bound) return std::nullopt;
      if (i + 1 == components.size()) return bound;
      if (kind_of(*bound) != FileKind::Directory) return std::nullopt;
      dir = *bound;
    }
    return std::nullopt;
  };
  auto dir_empty = [&](FileId id) -> bool {
    auto dit = dirs_.find(id);
    if (dit != dirs_.end()) {
      for (const auto& [name, cell] : dit->second.entries) {
        auto oit = sim.bindings.find({id, name});
        if (oit != sim.bindings.end()) {
          if (oit->second) return false;
          continue;
        }
        const auto* v = cell.at(now);
        if (v && *v) return false;
      }
    }
    for (const auto& [key, bound] : sim.bindings) {
      if (key.first == id && bound) {
        auto dit2 = dirs_.find(id);
        if (dit2 == dirs_.end() ||
            dit2->second.entries.find(key.second) == dit2->second.entries.end()) {
          return false;
        }
      }
    }
    return true;
  };
  auto conflict = [](const std::string& path) {
    AbortInfo a;
    a.reason = ErrorCode::NamespaceConflict;
    a.path = path;
    return a;
  };

  for (const MetaOp& op : req.meta_ops) {
    switch (op.kind) {
      case MetaOp::Kind::Create:
      case MetaOp::Kind::Mkdir: {
        auto [parent, name] = split_parent(op.path);
        auto pid = resolve(parent);
        if (!pid || kind_of(*pid) != FileKind::Directory) return conflict(op.path);
        if (lookup(*pid, name)) return conflict(op.path);
        sim.bindings[{*pid, name}] = op.file_id;
        sim.created[op.file_id] = op.kind == MetaOp::Kind::Mkdir
                                      ? FileKind::Directory
                                      : FileKind::Regular;
        break;
      }
      case MetaOp::Kind::Unlink: {
        auto [parent, name] = split_parent(op.path);
        auto pid = resolve(parent);
        if (!pid) return conflict(op.path);
        auto target = lookup(*pid, name);
        if (!target) return conflict(op.path);
        if (kind_of(*target) == FileKind::Directory && !dir_empty(*target)) {
          return conflict(op.path);
        }
        sim.bindings[{*pid, name}] = std::nullopt;
        sim.removed.insert(*target);
        break;
      }
      case MetaOp::Kind::Rename: {
        if (op.path == op.path2) break;
        if (op.path2.rfind(op.path + "/", 0) == 0) return conflict(op.path2);
        auto [old_parent, old_name] = split_parent(op.path);
        auto opid = resolve(old_parent);
        if (!opid) return conflict(op.path);
        auto target = lookup(*opid, old_name);
        if (!target) return conflict(op.path);
        auto [new_parent, new_name] = split_parent(op.path2);
        auto npid = resolve(new_parent);
        if (!npid || kind_of(*npid) != FileKind::Directory) return conflict(op.path2);
        if (lookup(*npid, new_name)) return conflict(op.path2);
        sim.bindings[{*opid, old_name}] = std::nullopt;
        sim.bindings[{*npid, new_name}] = *target;
        break;
      }
      case MetaOp::Kind::SetLength: {
        auto kind = is_temp_id(op.file_id)
                        ? (sim.created.count(op.file_id)
                               ? std::optional<FileKind>(sim.created[op.file_id])
                               : std::nullopt)
                        : kind_of(op.file_id);
        if (!kind || *kind != FileKind::Regular) {
          AbortInfo a;
          a.reason = ErrorCode::LengthViolation;
          a.file_id = op.file_id;
          return a;
        }
        break;
      }
    }
  }
  return std::nullopt;
}

void Backend::reject_malformed(const CommitRequest& req) const {
  for (const WriteRecord& w : req.write_set) {
    if (w.bytes.empty() || w.offset + w.bytes.size() > config_.block_size ||
        w.block.block_no >= config_.max_file_blocks) {
      throw FsError(ErrorCode::Malformed, "bad write record");
    }
  }
  for (const MetaOp& op : req.meta_ops) {
    if (op.kind == MetaOp::Kind::SetLength) {
      if (op.length > config_.max_file_blocks * config_.block_size) {
        throw FsError(ErrorCode::Malformed, "length out of range");
      }
      continue;
    }
    if (!is_valid_path(op.path) || op.path == "/") {
      throw FsError(ErrorCode::Malformed, "bad op path");
    }
    if (op.kind == MetaOp::Kind::Rename &&
        (!is_valid_path(op.path2) || op.path2 == "/")) {
      throw FsError(ErrorCode::Malformed, "bad rename target");
    }
    if ((op.kind == MetaOp::Kind::Create || op.kind == MetaOp::Kind::Mkdir) &&
        !is_temp_id(op.file_id)) {
      throw FsError(ErrorCode::Malformed, "create requires a temp id");
    }
  }
  for (const MetaRead& m : req.meta_reads) {
    if (!is_valid_path(m.path)) throw FsError(ErrorCode::Malformed, "bad read path");
  }
}

CommitResult Backend::validate_and_commit(const CommitRequest& req) {
  std::unique_lock lock(mu_);
  reject_malformed(req);
  const bool read_only = req.write_set.empty() && req.meta_ops.empty();
  const bool mv = config_.mode == VersioningMode::BlockMultiversioned;

  auto abort_with = [](AbortInfo info) {
    CommitResult r;
    r.committed = false;
    r.abort = std::move(info);
    return r;
  };

  if (read_only && mv) {
    // Snapshot validation: the reads must be exactly the state at T_R, which
    // the undo log can still confirm. Later commits never invalidate them.
    for (const ReadSetEntry& e : req.read_set) {
      bool too_old = false;
      const Timestamp stamp = stamp_at_locked(e.block, req.txn_read_ts, &too_old);
      if (too_old) {
        AbortInfo a;
        a.reason = ErrorCode::SnapshotTooOld;
        a.block = e.block;
        return abort_with(a);
      }
      if (stamp > e.read_ts) {
        AbortInfo a;
        a.reason = ErrorCode::StaleRead;
        a.block = e.block;
        return abort_with(a);
      }
    }
    for (const MetaRead& m : req.meta_reads) {
      auto r = resolve_locked(m.path, req.txn_read_ts);
      if (r.status == ResolveResult::Status::SnapshotTooOld) {
        AbortInfo a;
        a.reason = ErrorCode::SnapshotTooOld;
        a.path = m.path;
        return abort_with(a);
      }
      std::optional<FileId> resolved;
      if (r.status == ResolveResult::Status::Ok) resolved = r.id;
      if (resolved != m.file_id) {
        AbortInfo a;
        a.reason = ErrorCode::NamespaceConflict;
        a.path = m.path;
        return abort_with(a);
      }
    }
    for (const LengthAssertion& a : req.assertions) {
      if (is_temp_id(a.file_id)) continue;
      bool too_old = false;
      auto meta = meta_at_locked(a.file_id, req.txn_read_ts, &too_old);
      if (too_old) {
        AbortInfo info;
        info.reason = ErrorCode::SnapshotTooOld;
        info.file_id = a.file_id;
        return abort_with(info);
      }
      const std::uint64_t len = meta ? meta->length : 0;
      const bool holds = !meta ? false
                       : a.kind == LengthKind::AtLeast ? len >= a.length
                       : a.kind == LengthKind::AtMost  ? len <= a.length
                                                       : len == a.length;
      if (!holds) {
        AbortInfo info;
        info.reason = ErrorCode::LengthViolation;
        info.file_id = a.file_id;
        return abort_with(info);
      }
    }
    return CommitResult::committed_at(req.txn_read_ts);
  }

  // Update transactions (all modes) and read-only ones on non-multiversioned
  // backends validate against the current state.
  for (const ReadSetEntry& e : req.read_set) {
    if (block_stamp_locked(e.block) > e.read_ts) {
      AbortInfo a;
      a.reason = ErrorCode::StaleRead;
      a.block = e.block;
      return abort_with(a);
    }
  }
  const Timestamp now = last_committed_.load();
  for (const MetaRead& m : req.meta_reads) {
    auto r = resolve_locked(m.path, now);
    std::optional<FileId> resolved;
    if (r.status == ResolveResult::Status::Ok) resolved = r.id;
    if (resolved != m.file_id) {
      AbortInfo a;
      a.reason = ErrorCode::NamespaceConflict;
      a.path = m.path;
      return abort_with(a);
    }
  }
  if (auto bad = check_meta_ops_applicable_locked(req)) {
    return abort_with(*bad);
  }
  for (const LengthAssertion& a : req.assertions) {
    if (is_temp_id(a.file_id)) continue;  // created in this request
    const bool exists = exists_now_locked(a.file_id);
    const std::uint64_t len = current_length_locked(a.file_id);
    const bool holds = exists &&
                       (a.kind == LengthKind::AtLeast ? len >= a.length
                        : a.kind == LengthKind::AtMost ? len <= a.length
                                                       : len == a.length);
    if (!holds) {
      AbortInfo info;
      info.reason = ErrorCode::LengthViolation;
      info.file_id = a.file_id;
      return abort_with(info);
    }
  }

  if (read_only) return CommitResult::committed_at(req.txn_read_ts);

  const Timestamp tw = seq_next();
  CommitRequest rewritten;
  apply_locked(req, tw, &rewritten);
  last_committed_.store(tw, std::memory_order_release);
  if (capture_commits_) captured_.push_back({tw, std::move(rewritten)});

  committed_history_.push_back(tw);
  if (committed_history_.size() > config_.undo_window) {
    while (committed_history_.size() > config_.undo_window) {
      committed_history_.pop_front();
    }
    // Snapshots older than the oldest retained commit are no longer servable.
    gc_locked(committed_history_.front());
  }
  if (++commits_since_decay_ >= config_.frequency_decay_commits) {
    commits_since_decay_ = 0;
    for (auto& [ref, h] : blocks_) {
      h.fetch_count.store(h.fetch_count.load(std::memory_order_relaxed) / 2,
                          std::memory_order_relaxed);
    }
  }
  return CommitResult::committed_at(tw);
}

CommitResult Backend::apply_unchecked_for_test(const CommitRequest& req) {
  std::unique_lock lock(mu_);
  const Timestamp tw = seq_next();
  CommitRequest rewritten;
  apply_locked(req, tw, &rewritten);
  last_committed_.store(tw, std::memory_order_release);
  if (capture_commits_) captured_.push_back({tw, std::move(rewritten)});
  committed_history_.push_back(tw);
  return CommitResult::committed_at(tw);
}

void Backend::apply_locked(const CommitRequest& req, Timestamp tw,
                           CommitRequest* rewritten) {
  std::map<FileId, FileId> id_map;
  for (const MetaOp& op : req.meta_ops) {
    if ((op.kind == MetaOp::Kind::Create || op.kind == MetaOp::Kind::Mkdir) &&
        is_temp_id(op.file_id)) {
      id_map[op.file_id] = next_file_id_++;
    }
  }
  auto real_id = [&](FileId id) {
    auto it = id_map.find(id);
    return it == id_map.end() ? id : it->second;
  };

  FeedLogEntry feed;
  feed.commit_ts = tw;

  auto push_undo = [&](const BlockRef& ref) {
    BlockHistory& h = blocks_[ref];
    if (!h.undo.empty() && h.undo.back().superseded_by == tw) return;
    h.undo.push_back(UndoEntry{h.current.bytes, h.current.write_ts, tw});
  };
  // Resolve at tw so ops later in this request see the earlier ones.
  auto resolve_applied = [&](const std::string& path) -> std::optional<FileId> {
    auto r = resolve_locked(path, tw);
    if (r.status != ResolveResult::Status::Ok) return std::nullopt;
    return r.id;
  };

  std::vector<MetaOp> ops_out;
  for (MetaOp op : req.meta_ops) {
    switch (op.kind) {
      case MetaOp::Kind::Create:
      case MetaOp::Kind::Mkdir: {
        const FileId id = real_id(op.file_id);
        auto [parent, name] = split_parent(op.path);
        auto pid = resolve_applied(parent);
        assert(pid.has_value());
        dirs_[*pid].entries[name].set(tw, id);
        FileMeta meta;
        meta.file_id = id;
        meta.mode = op.mode;
        meta.kind = op.kind == MetaOp::Kind::Mkdir ? FileKind::Directory
                                                   : FileKind::Regular;
        meta.meta_version = tw;
        files_[id].meta.set(tw, meta);
        files_[id].data_ts = tw;
        if (op.kind == MetaOp::Kind::Mkdir) dirs_[id];
        op.file_id = id;
        break;
      }
      case MetaOp::Kind::Unlink: {
        auto target = resolve_applied(op.path);
        assert(target.has_value());
        auto [parent, name] = split_parent(op.path);
        auto pid = resolve_applied(parent);
        dirs_[*pid].entries[name].set(tw, std::nullopt);
        bool too_old = false;
        auto meta = meta_at_locked(*target, tw, &too_old);
        if (meta && meta->kind == FileKind::Regular) {
          auto it = blocks_.lower_bound(BlockRef{*target, 0});
          for (; it != blocks_.end() && it->first.file_id == *target; ++it) {
            push_undo(it->first);
            it->second.current = StoredBlock{{}, tw};
          }
        }
        files_[*target].meta.set(tw, std::nullopt);
        files_[*target].data_ts = tw;
        feed.invalidated_files.push_back(*target);
        break;
      }
      case MetaOp::Kind::Rename: {
        if (op.path == op.path2) break;
        auto target = resolve_applied(op.path);
        assert(target.has_value());
        auto [old_parent, old_name] = split_parent(op.path);
        auto [new_parent, new_name] = split_parent(op.path2);
        auto opid = resolve_applied(old_parent);
        auto npid = resolve_applied(new_parent);
        dirs_[*opid].entries[old_name].set(tw, std::nullopt);
        dirs_[*npid].entries[new_name].set(tw, *target);
        feed.invalidated_files.push_back(*target);
        break;
      }
      case MetaOp::Kind::SetLength: {
        const FileId id = real_id(op.file_id);
        bool too_old = false;
        auto meta = meta_at_locked(id, tw, &too_old);
        assert(meta.has_value());
        const std::uint64_t cur = meta->length;
        const std::uint64_t next = op.exact ? op.length : std::max(cur, op.length);
        if (op.exact && next < cur) {
          const std::uint64_t bs = config_.block_size;
          const std::uint64_t boundary = next / bs;
          const std::uint32_t cut = static_cast<std::uint32_t>(next % bs);
          std::uint64_t first_dropped = cut > 0 ? boundary + 1 : boundary;
          if (cut > 0) {
            auto it = blocks_.find(BlockRef{id, boundary});
            if (it != blocks_.end() && !it->second.current.bytes.empty()) {
              push_undo(it->first);
              auto& bytes = it->second.current.bytes;
              std::fill(bytes.begin() + cut, bytes.end(), 0);
              it->second.current.write_ts = tw;
            }
          }
          auto it = blocks_.lower_bound(BlockRef{id, first_dropped});
          for (; it != blocks_.end() && it->first.file_id == id; ++it) {
            push_undo(it->first);
            it->second.current = StoredBlock{{}, tw};
          }
          files_[id].data_ts = tw;
          feed.invalidated_files.push_back(id);
        }
        FileMeta updated = *meta;
        updated.length = next;
        updated.meta_version = tw;
        files_[id].meta.set(tw, updated);
        feed.meta_updated_files.push_back(id);
        op.file_id = id;
        break;
      }
    }
    ops_out.push_back(std::move(op));
  }

  std::vector<WriteRecord> writes_out;
  for (WriteRecord w : req.write_set) {
    w.block.file_id = real_id(w.block.file_id);
    push_undo(w.block);
    BlockHistory& h = blocks_[w.block];
    if (h.current.bytes.empty()) h.current.bytes.assign(config_.block_size, 0);
    assert(w.offset + w.bytes.size() <= h.current.bytes.size());
    std::copy(w.bytes.begin(), w.bytes.end(),
              h.current.bytes.begin() + w.offset);
    h.current.write_ts = tw;
    if (config_.mode == VersioningMode::FileVersioned) {
      files_[w.block.file_id].data_ts = tw;
    }
    feed.changed_blocks.push_back(w.block);
    writes_out.push_back(std::move(w));
  }

  note_feed_entry_locked(std::move(feed));

  if (rewritten) {
    rewritten->read_set = req.read_set;
    rewritten->write_set = std::move(writes_out);
    rewritten->meta_reads = req.meta_reads;
    rewritten->meta_ops = std::move(ops_out);
    rewritten->assertions = req.assertions;
    for (LengthAssertion& a : rewritten->assertions) a.file_id = real_id(a.file_id);
    rewritten->txn_read_ts = req.txn_read_ts;
  }
}

void Backend::note_feed_entry_locked(FeedLogEntry entry) {
  std::sort(entry.changed_blocks.begin(), entry.changed_blocks.end());
  entry.changed_blocks.erase(
      std::unique(entry.changed_blocks.begin(), entry.changed_blocks.end()),
      entry.changed_blocks.end());
  feed_log_.push_back(std::move(entry));
}

// ---------------------------------------------------------------------------
// Cache feed

CacheUpdateBatch Backend::feed_locked(Timestamp since_ts,
                                      CachePolicy policy) const {
  CacheUpdateBatch batch;
  if (policy == CachePolicy::Stale) {
    batch.upto_ts = since_ts;
    return batch;
  }
  const Timestamp now = last_committed_.load();
  batch.upto_ts = now;
  if (since_ts >= now) return batch;

  if (since_ts < feed_log_floor_) {
    CacheUpdateItem item;
    item.kind = CacheUpdateItem::Kind::FileInvalidate;
    item.file_id = kWildcardFileId;
    batch.items.push_back(std::move(item));
    return batch;
  }

  std::set<FileId> invalidated;
  std::set<FileId> meta_updated;
  std::set<BlockRef> changed;
  for (const FeedLogEntry& e : feed_log_) {
    if (e.commit_ts <= since_ts || e.commit_ts > now) continue;
    for (FileId id : e.invalidated_files) invalidated.insert(id);
    for (FileId id : e.meta_updated_files) meta_updated.insert(id);
    for (const BlockRef& ref : e.changed_blocks) changed.insert(ref);
  }

  for (FileId id : invalidated) {
    CacheUpdateItem item;
    item.kind = CacheUpdateItem::Kind::FileInvalidate;
    item.file_id = id;
    batch.items.push_back(std::move(item));
  }
  for (FileId id : meta_updated) {
    const FileState* fs = file_locked(id);
    if (!fs) continue;
    const auto* v = fs->meta.at(now);
    if (!v || !*v) continue;  // unlinked since; the invalidation covers it
    CacheUpdateItem item;
    item.kind = CacheUpdateItem::Kind::MetaUpdate;
    item.meta = **v;
    batch.items.push_back(std::move(item));
  }

  std::vector<BlockRef> block_items;
  for (const BlockRef& ref : changed) {
    if (invalidated.count(ref.file_id)) continue;
    block_items.push_back(ref);
  }
  size_t ship_bytes = block_items.size();
  if (policy == CachePolicy::InvalidateOnly) {
    ship_bytes = 0;
  } else if (policy == CachePolicy::Frequency) {
    ship_bytes = static_cast<size_t>(
        std::ceil(config_.frequency_fraction * static_cast<double>(block_items.size())));
    std::stable_sort(block_items.begin(), block_items.end(),
                     [&](const BlockRef& a, const BlockRef& b) {
                       const auto fa = blocks_.count(a)
                            ? blocks_.at(a).fetch_count.load(std::memory_order_relaxed) : 0;
                       const auto fb = blocks_.count(b)
                            ? blocks_.at(b).fetch_count.load(std::memory_order_relaxed) : 0;
                       if (fa != fb) return fa > fb;
                       return a < b;
                     });
  }
  for (size_t i = 0; i < block_items.size(); ++i) {
    const BlockRef& ref = block_items[i];
    CacheUpdateItem item;
    item.block = ref;
    if (i < ship_bytes) {
      item.kind = CacheUpdateItem::Kind::BlockData;
      auto it = blocks_.find(ref);
      if (it != blocks_.end() && !it->second.current.bytes.empty()) {
        item.bytes = it->second.current.bytes;
        item.write_ts = it->second.current.write_ts;
      } else {
        item.bytes.assign(config_.block_size, 0);
        item.write_ts = it == blocks_.end() ? 0 : it->second.current.write_ts;
      }
    } else {
      item.kind = CacheUpdateItem::Kind::BlockInvalidate;
    }
    batch.items.push_back(std::move(item));
  }
  return batch;
}

CacheUpdateBatch Backend::cache_feed(Timestamp since_ts,
                                     CachePolicy policy) const {
  std::shared_lock lock(mu_);
  return feed_locked(since_ts, policy);
}

std::pair<Timestamp, CacheUpdateBatch> Backend::begin_txn(
    Timestamp since_ts, CachePolicy policy) const {
  std::shared_lock lock(mu_);
  CacheUpdateBatch batch = feed_locked(since_ts, policy);
  return {last_committed_.load(), std::move(batch)};
}

// ---------------------------------------------------------------------------
// GC

std::uint64_t Backend::gc_locked(Timestamp retain_after) {
  std::uint64_t pruned = 0;
  for (auto& [ref, h] : blocks_) {
    while (!h.undo.empty() && h.undo.front().superseded_by <= retain_after) {
      h.floor = std::max(h.floor, h.undo.front().superseded_by);
      h.undo.pop_front();
      ++pruned;
    }
  }
  for (auto& [id, fs] : files_) fs.meta.prune(retain_after);
  for (auto& [id, dir] : dirs_) {
    for (auto& [name, cell] : dir.entries) cell.prune(retain_after);
  }
  while (!feed_log_.empty() && feed_log_.front().commit_ts <= retain_after) {
    feed_log_.pop_front();
  }
  feed_log_floor_ = std::max(feed_log_floor_, retain_after);
  return pruned;
}

std::uint64_t Backend::gc_undo(Timestamp retain_after) {
  std::unique_lock lock(mu_);
  return gc_locked(retain_after);
}

// ---------------------------------------------------------------------------
// Dump

std::string Backend::dump() const {
  std::shared_lock lock(mu_);
  const Timestamp now = last_committed_.load();

  json files = json::object();
  // Depth-first over the namespace; std::map keeps children sorted.
  std::vector<std::pair<std::string, FileId>> stack{{"/", kRootId}};
  while (!stack.empty()) {
    auto [path, id] = stack.back();
    stack.pop_back();
    bool too_old = false;
    auto meta = meta_at_locked(id, now, &too_old);
    if (!meta) continue;

    json entry;
    entry["id"] = id;
    entry["kind"] = to_string(meta->kind);
    entry["length"] = meta->length;
    entry["mode"] = meta->mode;
    if (meta->kind == FileKind::Regular) {
      std::uint64_t h = 0xcbf29ce484222325ULL;
      const std::uint64_t bs = config_.block_size;
      const std::uint64_t nblocks = (meta->length + bs - 1) / bs;
      std::vector<std::uint8_t> zeros(config_.block_size, 0);
      for (std::uint64_t b = 0; b < nblocks; ++b) {
        auto it = blocks_.find(BlockRef{id, b});
        const std::vector<std::uint8_t>& bytes =
            (it == blocks_.end() || it->second.current.bytes.empty())
                ? zeros
                : it->second.current.bytes;
        const std::uint64_t take = std::min(bs, meta->length - b * bs);
        h = fnv1a64({bytes.data(), static_cast<size_t>(take)}, h);
      }
      entry["digest"] = to_hex(h);
    }
    files[path] = std::move(entry);

    auto dit = dirs_.find(id);
    if (dit != dirs_.end()) {
      for (auto it = dit->second.entries.rbegin();
           it != dit->second.entries.rend(); ++it) {
        const auto* v = it->second.at(now);
        if (v && *v) {
          std::string child = path == "/" ? "/" + it->first : path + "/" + it->first;
          stack.emplace_back(std::move(child), **v);
        }
      }
    }
  }

  json out;
  out["files"] = std::move(files);
  out["read_ts"] = now;
  return out.dump();
}

std::vector<CommittedTxnRecord> Backend::captured_commits() const {
  std::shared_lock lock(mu_);
  return captured_;
}

}  // namespace txfs
