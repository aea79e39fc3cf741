#include "txfs/client.hpp"

#include <algorithm>
#include <cassert>
#include <set>

#include "txfs/core.hpp"
#include "txfs/digest.hpp"
#include "txfs/path.hpp"

namespace txfs {

using json = nlohmann::json;
using wire::Kind;
using wire::Message;

// ---------------------------------------------------------------------------
// Mount

Mount::Mount(std::shared_ptr<Transport> transport, MountConfig config)
    : transport_(std::move(transport)), config_(config) {}

void Mount::drop_file(FileId id) {
  auto it = cache_.lower_bound(BlockRef{id, 0});
  while (it != cache_.end() && it->first.file_id == id) it = cache_.erase(it);
  meta_cache_.erase(id);
  for (auto pit = path_cache_.begin(); pit != path_cache_.end();) {
    if (pit->second.id == id) pit = path_cache_.erase(pit);
    else ++pit;
  }
}

std::optional<Mount::CacheEntry> Mount::lookup_block(const BlockRef& ref) {
  std::lock_guard<std::mutex> g(mu_);
  auto it = cache_.find(ref);
  if (it == cache_.end()) return std::nullopt;
  return it->second;
}

std::optional<Mount::MetaEntry> Mount::lookup_meta(FileId id) {
  std::lock_guard<std::mutex> g(mu_);
  auto it = meta_cache_.find(id);
  if (it == meta_cache_.end()) return std::nullopt;
  return it->second;
}

std::optional<Mount::PathEntry> Mount::lookup_path(const std::string& path) {
  std::lock_guard<std::mutex> g(mu_);
  auto it = path_cache_.find(path);
  if (it == path_cache_.end()) return std::nullopt;
  return it->second;
}

void Mount::apply_batch(const CacheUpdateBatch& batch, CachePolicy policy) {
  for (const CacheUpdateItem& item : batch.items) {
    switch (item.kind) {
      case CacheUpdateItem::Kind::BlockData:
        cache_[item.block] = CacheEntry{item.bytes, item.write_ts, batch.upto_ts};
        break;
      case CacheUpdateItem::Kind::BlockInvalidate:
        cache_.erase(item.block);
        break;
      case CacheUpdateItem::Kind::FileInvalidate:
        if (item.file_id == kWildcardFileId) {
          cache_.clear();
          meta_cache_.clear();
          path_cache_.clear();
        } else {
          drop_file(item.file_id);
        }
        break;
      case CacheUpdateItem::Kind::MetaUpdate:
        meta_cache_[item.meta.file_id] = MetaEntry{item.meta, batch.upto_ts};
        break;
    }
  }
  if (policy != CachePolicy::Stale) {
    // The batch covers (cache_upto_, upto_ts]: everything it did not touch is
    // still current as of upto_ts.
    for (auto& [ref, e] : cache_) e.valid_upto = std::max(e.valid_upto, batch.upto_ts);
    for (auto& [id, e] : meta_cache_) e.valid_upto = std::max(e.valid_upto, batch.upto_ts);
    for (auto& [p, e] : path_cache_) e.valid_upto = std::max(e.valid_upto, batch.upto_ts);
    cache_upto_ = batch.upto_ts;
  }
}

Txn Mount::begin() {
  std::lock_guard<std::mutex> g(mu_);
  json fields;
  fields["policy"] = to_string(config_.policy);
  fields["since"] = cache_upto_;
  Message resp = transport_->roundtrip(Message{Kind::Begin, std::move(fields)});
  if (resp.kind != Kind::Ok) {
    throw FsError(ErrorCode::Transport, "begin failed: " + resp.fields.dump());
  }
  const Timestamp read_ts = resp.fields.at("read_ts").get<Timestamp>();
  if (!connected_) {
    block_size_ = resp.fields.at("block_size").get<std::uint32_t>();
    if (!mode_from_string(resp.fields.at("mode").get<std::string>(), mode_)) {
      throw FsError(ErrorCode::Transport, "unknown backend mode");
    }
    connected_ = true;
  }
  if (resp.fields.contains("batch")) {
    auto batch = wire::batch_from_json(resp.fields.at("batch"));
    if (!batch) throw FsError(ErrorCode::Transport, "bad feed batch");
    apply_batch(*batch, config_.policy);
  }
  return Txn(this, read_ts);
}

std::uint64_t Mount::cache_digest() const {
  std::lock_guard<std::mutex> g(mu_);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [ref, e] : cache_) {
    h = fnv1a64({reinterpret_cast<const std::uint8_t*>(&ref), sizeof(ref)}, h);
    h = fnv1a64({e.bytes.data(), e.bytes.size()}, h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Txn lifecycle

Txn::Txn(Mount* mount, Timestamp read_ts) : mount_(mount), read_ts_(read_ts) {}

Txn::Txn(Txn&& other) noexcept
    : mount_(other.mount_),
      read_ts_(other.read_ts_),
      state_(other.state_),
      fds_(std::move(other.fds_)),
      next_fd_(other.next_fd_),
      views_(std::move(other.views_)),
      next_temp_id_(other.next_temp_id_),
      read_records_(std::move(other.read_records_)),
      writes_(std::move(other.writes_)),
      meta_records_(std::move(other.meta_records_)),
      meta_ops_(std::move(other.meta_ops_)),
      assertions_(std::move(other.assertions_)),
      break_index_(std::move(other.break_index_)),
      staged_blocks_(std::move(other.staged_blocks_)),
      resolved_(std::move(other.resolved_)),
      staged_meta_(std::move(other.staged_meta_)),
      own_ns_(std::move(other.own_ns_)),
      lock_calls_(other.lock_calls_) {
  other.mount_ = nullptr;
}

Txn::~Txn() {
  if (mount_ && state_ == TxnState::Active) {
    try {
      abort();
    } catch (...) {
    }
  }
}

void Txn::require_active() const {
  if (!mount_ || state_ != TxnState::Active) {
    throw FsError(ErrorCode::TxnNotActive, "transaction is not active");
  }
}

Message Txn::roundtrip(const Message& req) { return mount_->transport_->roundtrip(req); }

void Txn::local_abort(ErrorCode code, const std::string& what) {
  fold_into_mount(false, 0, {});
  state_ = TxnState::Aborted;
  throw FsError(code, what);
}

void Txn::abort() {
  require_active();
  fold_into_mount(false, 0, {});
  state_ = TxnState::Aborted;
}

// ---------------------------------------------------------------------------
// Resolution

FileMeta Txn::fetch_meta_snapshot(const std::string& path, bool& absent) {
  json fields{{"path", path}, {"at", read_ts_}};
  Message resp = roundtrip(Message{Kind::GetMeta, std::move(fields)});
  if (resp.kind == Kind::Err) {
    const std::string reason = resp.fields.value("reason", "");
    if (reason == to_string(ErrorCode::SnapshotTooOld)) {
      local_abort(ErrorCode::SnapshotTooOld, "meta read at " + path);
    }
    throw FsError(ErrorCode::Transport, "get_meta failed: " + reason);
  }
  if (resp.fields.value("absent", false)) {
    absent = true;
    return {};
  }
  auto meta = wire::meta_from_json(resp.fields.at("meta"));
  if (!meta) throw FsError(ErrorCode::Transport, "bad meta payload");
  absent = false;
  return *meta;
}

Txn::ResolvedNode Txn::resolve(const std::string& path) {
  require_active();
  if (path == "/") return ResolvedNode{kRootId, "/"};

  const auto components = split_path(path);
  std::string local = "";
  std::string snap = "";  // backend-visible prefix; empty when off-snapshot
  bool on_snapshot = true;

  ResolvedNode node{kRootId, "/"};
  for (size_t i = 0; i < components.size(); ++i) {
    const bool last = i + 1 == components.size();
    local += "/" + components[i];

    // Own namespace overlay wins.
    auto own = own_ns_.find(local);
    if (own != own_ns_.end()) {
      node = own->second;
      if (!node.id) {
        if (last) return node;
        throw FsError(ErrorCode::NotFound, "no such path: " + local);
      }
      on_snapshot = !node.snapshot_path.empty();
      snap = node.snapshot_path;
    } else if (!on_snapshot) {
      // Parent was created in this transaction; nothing else can live here.
      if (last) return ResolvedNode{std::nullopt, ""};
      throw FsError(ErrorCode::NotFound, "no such path: " + local);
    } else {
      const std::string snap_path =
          (snap.empty() || snap == "/") ? "/" + components[i] : snap + "/" + components[i];
      std::optional<FileId> id;
      auto hit = resolved_.find(snap_path);
      if (hit != resolved_.end()) {
        id = hit->second.id;
      } else {
        auto pe = mount_->lookup_path(snap_path);
        if (pe && (pe->valid_upto >= read_ts_ ||
                   mount_->mode_ != VersioningMode::BlockMultiversioned)) {
          // Certified at T_R, or optimistically served at its stale horizon
          // (non-multiversioned backends; commit validation will catch it).
          const Timestamp horizon = std::min(pe->valid_upto, read_ts_);
          id = pe->id;
          auto rec = meta_records_.find(snap_path);
          if (rec == meta_records_.end()) {
            meta_records_[snap_path] = {id, horizon};
          } else {
            rec->second.second = std::min(rec->second.second, horizon);
          }
          resolved_[snap_path] = ResolvedNode{id, snap_path};
        } else {
          bool is_absent = false;
          FileMeta meta = fetch_meta_snapshot(snap_path, is_absent);
          if (is_absent) {
            id = std::nullopt;
          } else {
            id = meta.file_id;
            staged_meta_[meta.file_id] = meta;
          }
          meta_records_.emplace(snap_path, std::make_pair(id, read_ts_));
          resolved_[snap_path] = ResolvedNode{id, snap_path};
        }
      }
      if (!id) {
        if (last) return ResolvedNode{std::nullopt, snap_path};
        throw FsError(ErrorCode::NotFound, "no such path: " + local);
      }
      node = ResolvedNode{id, snap_path};
      snap = snap_path;
    }

    if (!last) {
      // Intermediate components must be directories.
      FileKind kind;
      auto vit = views_.find(*node.id);
      if (vit != views_.end()) {
        kind = vit->second.kind;
      } else {
        auto sit = staged_meta_.find(*node.id);
        if (sit != staged_meta_.end()) {
          kind = sit->second.kind;
        } else {
          auto me = mount_->lookup_meta(*node.id);
          if (me) {
            kind = me->meta.kind;
          } else {
            // Resolve by id at the snapshot.
            json fields{{"id", *node.id}, {"at", read_ts_}};
            Message resp = roundtrip(Message{Kind::GetMeta, std::move(fields)});
            if (resp.kind == Kind::Err) {
              local_abort(ErrorCode::SnapshotTooOld, "meta read " + local);
            }
            if (resp.fields.value("absent", false)) {
              throw FsError(ErrorCode::NotFound, "no such path: " + local);
            }
            auto meta = wire::meta_from_json(resp.fields.at("meta"));
            if (!meta) throw FsError(ErrorCode::Transport, "bad meta payload");
            staged_meta_[meta->file_id] = *meta;
            kind = meta->kind;
          }
        }
      }
      if (kind != FileKind::Directory) {
        throw FsError(ErrorCode::NotADirectory, "not a directory: " + local);
      }
    }
  }
  return node;
}

Txn::FileView& Txn::view(FileId id) {
  auto it = views_.find(id);
  if (it == views_.end()) {
    throw FsError(ErrorCode::BadDescriptor, "no view for file");
  }
  return it->second;
}

Txn::FileView& Txn::open_view(const std::string&, const ResolvedNode& node) {
  const FileId id = *node.id;
  auto it = views_.find(id);
  if (it != views_.end()) return it->second;

  FileMeta meta;
  auto sit = staged_meta_.find(id);
  if (sit != staged_meta_.end()) {
    meta = sit->second;
  } else {
    auto me = mount_->lookup_meta(id);
    if (me && (me->valid_upto >= read_ts_ ||
               mount_->mode_ != VersioningMode::BlockMultiversioned)) {
      meta = me->meta;
    } else {
      json fields{{"id", id}, {"at", read_ts_}};
      Message resp = roundtrip(Message{Kind::GetMeta, std::move(fields)});
      if (resp.kind == Kind::Err) {
        local_abort(ErrorCode::SnapshotTooOld, "meta fetch by id");
      }
      if (resp.fields.value("absent", false)) {
        throw FsError(ErrorCode::NotFound, "file vanished at snapshot");
      }
      auto m = wire::meta_from_json(resp.fields.at("meta"));
      if (!m) throw FsError(ErrorCode::Transport, "bad meta payload");
      staged_meta_[id] = *m;
      meta = *m;
    }
  }

  FileView fv;
  fv.id = id;
  fv.kind = meta.kind;
  fv.mode = meta.mode;
  fv.base_length = meta.length;
  fv.eff_length = meta.length;
  return views_.emplace(id, std::move(fv)).first->second;
}

// ---------------------------------------------------------------------------
// open/close/seek

int Txn::open(const std::string& raw_path, std::uint32_t flags, std::uint32_t mode) {
  require_active();
  const std::string path = normalize_path(raw_path);
  if (path == "/" && (flags & kOpenWrite)) {
    throw FsError(ErrorCode::IsADirectory, "cannot write to /");
  }
  ResolvedNode node = resolve(path);

  FileId id;
  if (!node.id) {
    if (!(flags & kOpenCreate)) {
      throw FsError(ErrorCode::NotFound, "no such file: " + path);
    }
    id = next_temp_id_++;
    FileView fv;
    fv.id = id;
    fv.kind = FileKind::Regular;
    fv.mode = mode;
    fv.created_here = true;
    fv.exact_break = true;  // length is fully determined locally
    fv.base_visible_limit = 0;
    views_.emplace(id, std::move(fv));
    own_ns_[path] = ResolvedNode{id, ""};

    MetaOp op;
    op.kind = MetaOp::Kind::Create;
    op.path = path;
    op.file_id = id;
    op.mode = mode;
    meta_ops_.push_back(std::move(op));
  } else {
    id = *node.id;
    FileView& fv = open_view(path, node);
    if (fv.kind == FileKind::Directory && (flags & kOpenWrite)) {
      throw FsError(ErrorCode::IsADirectory, "cannot open directory for write: " + path);
    }
    if ((flags & kOpenTrunc) && (flags & kOpenWrite)) {
      do_truncate(fv, 0);
    }
  }

  const int fd = next_fd_++;
  fds_[fd] = FdState{id, 0, flags};
  return fd;
}

void Txn::close(int fd) {
  require_active();
  if (fds_.erase(fd) == 0) {
    throw FsError(ErrorCode::BadDescriptor, "close: bad fd");
  }
}

Txn::FdState& Txn::fd_state(int fd) {
  auto it = fds_.find(fd);
  if (it == fds_.end()) throw FsError(ErrorCode::BadDescriptor, "bad fd");
  return it->second;
}

std::uint64_t Txn::seek(int fd, std::int64_t offset, Whence whence) {
  require_active();
  FdState& st = fd_state(fd);
  std::int64_t base = 0;
  switch (whence) {
    case Whence::Set: base = 0; break;
    case Whence::Cur: base = static_cast<std::int64_t>(st.pos); break;
    case Whence::End: {
      FileView& fv = view(st.id);
      base = static_cast<std::int64_t>(fv.eff_length);
      // The returned position is a length observation.
      if (!fv.created_here && !fv.exact_break) {
        if (fv.eff_length == fv.base_length) {
          record_assertion(fv, LengthKind::Exactly, fv.base_length);
        } else {
          record_assertion(fv, LengthKind::AtMost, fv.eff_length);
        }
      }
      break;
    }
  }
  const std::int64_t target = base + offset;
  if (target < 0) throw FsError(ErrorCode::InvalidOffset, "negative seek");
  st.pos = static_cast<std::uint64_t>(target);
  return st.pos;
}

// ---------------------------------------------------------------------------
// Reads

void Txn::record_read(BlockRef ref, Timestamp horizon) {
  auto it = read_records_.find(ref);
  if (it == read_records_.end()) {
    read_records_[ref] = horizon;
  } else {
    it->second = std::min(it->second, horizon);
  }
}

void Txn::record_assertion(FileView& fv, LengthKind kind, std::uint64_t length) {
  assertions_.push_back(LengthAssertion{fv.id, kind, length});
}

const std::vector<WriteRecord>* Txn::own_writes(FileId id, std::uint64_t block_no) const {
  auto it = writes_.find(BlockRef{id, block_no});
  return it == writes_.end() ? nullptr : &it->second;
}

bool Txn::own_covers(FileId id, std::uint64_t block_no, std::uint32_t from,
                     std::uint32_t to) const {
  if (from >= to) return true;
  const auto* recs = own_writes(id, block_no);
  if (!recs) return false;
  std::vector<bool> covered(to - from, false);
  size_t remaining = to - from;
  for (const WriteRecord& w : *recs) {
    const std::uint32_t lo = std::max(from, w.offset);
    const std::uint32_t hi =
        std::min<std::uint32_t>(to, w.offset + static_cast<std::uint32_t>(w.bytes.size()));
    for (std::uint32_t p = lo; p < hi; ++p) {
      if (!covered[p - from]) {
        covered[p - from] = true;
        if (--remaining == 0) return true;
      }
    }
  }
  return remaining == 0;
}

std::vector<std::uint8_t> Txn::base_block(FileView& fv, std::uint64_t block_no) {
  const std::uint32_t bs = mount_->block_size_;
  const std::uint64_t block_start = block_no * bs;
  const std::uint64_t limit = std::min(fv.base_visible_limit, fv.base_length);

  if (fv.created_here || block_start >= limit) {
    return std::vector<std::uint8_t>(bs, 0);
  }

  const BlockRef ref{fv.id, block_no};
  std::vector<std::uint8_t> bytes;

  auto stage_it = staged_blocks_.find(ref);
  if (stage_it != staged_blocks_.end()) {
    bytes = stage_it->second.bytes;
  } else {
    auto entry = mount_->lookup_block(ref);
    bool from_cache = false;
    if (entry) {
      if (entry->valid_upto >= read_ts_) {
        record_read(ref, read_ts_);
        bytes = std::move(entry->bytes);
        from_cache = true;
      } else if (mount_->mode_ != VersioningMode::BlockMultiversioned) {
        // Optimistic stale serve; commit validation aborts if it changed.
        record_read(ref, entry->valid_upto);
        bytes = std::move(entry->bytes);
        from_cache = true;
      }
      // Multiversioned backends can serve the snapshot: refetch instead.
    }
    if (!from_cache) {
      json fields{{"f", ref.file_id}, {"b", ref.block_no}, {"at", read_ts_}};
      Message resp = roundtrip(Message{Kind::GetBlock, std::move(fields)});
      if (resp.kind == Kind::Err) {
        const std::string reason = resp.fields.value("reason", "");
        if (reason == to_string(ErrorCode::SnapshotTooOld)) {
          local_abort(ErrorCode::SnapshotTooOld,
                      "block fetch could not serve the snapshot");
        }
        throw FsError(ErrorCode::Transport, "get_block failed: " + reason);
      }
      auto decoded = wire::base64_decode(resp.fields.at("bytes").get<std::string>());
      if (!decoded || decoded->size() != bs) {
        throw FsError(ErrorCode::Transport, "bad block payload");
      }
      const Timestamp wts = resp.fields.at("ts").get<Timestamp>();
      staged_blocks_[ref] = StagedBlock{*decoded, wts, read_ts_};
      record_read(ref, read_ts_);
      bytes = std::move(*decoded);
    }
  }

  // Mask bytes past the base visibility limit (own truncates, base length).
  if (block_start + bs > limit) {
    const std::uint64_t cut = limit > block_start ? limit - block_start : 0;
    std::fill(bytes.begin() + static_cast<std::ptrdiff_t>(cut), bytes.end(), 0);
  }
  return bytes;
}

void Txn::assert_for_range_read(FileView& fv, std::uint64_t offset,
                                std::uint64_t end_req, std::uint64_t end_served) {
  if (fv.created_here) return;
  const std::uint64_t L = fv.base_length;
  const std::uint64_t eff = fv.eff_length;

  if (fv.exact_break) {
    // Own truncates determine the length; record the mechanical form for
    // observability, normalization drops it before commit.
    if (end_served == offset) {
      record_assertion(fv, LengthKind::AtMost, offset);
    } else if (end_served < end_req) {
      record_assertion(fv, LengthKind::Exactly, eff);
    } else {
      record_assertion(fv, LengthKind::AtLeast, end_served);
    }
    return;
  }

  auto first_base_zero_exposed = [&](std::uint64_t lo,
                                     std::uint64_t hi) -> std::optional<std::uint64_t> {
    // First position in [lo, hi) at or past the committed length that own
    // writes do not cover: the reader saw a zero that exists only because the
    // file ends before it.
    lo = std::max(lo, L);
    const std::uint32_t bs = mount_->block_size_;
    for (std::uint64_t p = lo; p < hi;) {
      const std::uint64_t bno = p / bs;
      const std::uint32_t from = static_cast<std::uint32_t>(p % bs);
      const std::uint32_t to =
          static_cast<std::uint32_t>(std::min<std::uint64_t>(bs, hi - bno * bs));
      const auto* recs = own_writes(fv.id, bno);
      if (!recs) return p;
      std::vector<bool> covered(to, false);
      for (const WriteRecord& w : *recs) {
        const std::uint32_t wlo = w.offset;
        const std::uint32_t whi =
            std::min<std::uint32_t>(to, w.offset + static_cast<std::uint32_t>(w.bytes.size()));
        for (std::uint32_t q = wlo; q < whi && q < to; ++q) covered[q] = true;
      }
      for (std::uint32_t q = from; q < to; ++q) {
        if (!covered[q]) return bno * bs + q;
      }
      p = (bno + 1) * bs;
    }
    return std::nullopt;
  };

  if (end_served == offset) {
    // Empty read: the length cannot exceed the first byte requested.
    record_assertion(fv, LengthKind::AtMost, offset);
    return;
  }
  if (end_served < end_req) {
    // Truncated by EOF.
    if (eff == L) {
      record_assertion(fv, LengthKind::Exactly, L);
    } else {
      auto q = first_base_zero_exposed(offset, end_served);
      record_assertion(fv, LengthKind::AtMost, q.value_or(eff));
    }
    return;
  }
  // Fully within the file.
  if (end_served <= L) {
    record_assertion(fv, LengthKind::AtLeast, end_served);
    return;
  }
  if (auto q = first_base_zero_exposed(offset, end_served)) {
    record_assertion(fv, LengthKind::AtMost, *q);
  }
}

std::vector<std::uint8_t> Txn::do_pread(FdState& st, std::uint64_t count,
                                        std::uint64_t offset) {
  if (!(st.flags & kOpenRead)) {
    throw FsError(ErrorCode::BadDescriptor, "fd not open for reading");
  }
  FileView& fv = view(st.id);
  if (fv.kind == FileKind::Directory) {
    throw FsError(ErrorCode::IsADirectory, "cannot read a directory");
  }
  if (count == 0) return {};

  const std::uint64_t eff = fv.eff_length;
  if (offset >= eff) {
    assert_for_range_read(fv, offset, offset + count, offset);
    return {};
  }
  const std::uint64_t n = std::min(count, eff - offset);
  const std::uint32_t bs = mount_->block_size_;

  std::vector<std::uint8_t> out;
  out.reserve(n);
  for (const BlockSpan& span : block_span(offset, n, bs)) {
    const auto* recs = own_writes(fv.id, span.block_no);
    std::vector<std::uint8_t> block;
    if (own_covers(fv.id, span.block_no, span.offset, span.offset + span.length)) {
      // Fully covered by own writes: no base needed, no backend traffic.
      block = merge_read_view(std::vector<std::uint8_t>(bs, 0),
                              recs ? std::span<const WriteRecord>(*recs)
                                   : std::span<const WriteRecord>());
    } else {
      std::vector<std::uint8_t> base = base_block(fv, span.block_no);
      block = recs ? merge_read_view(base, *recs) : std::move(base);
    }
    out.insert(out.end(), block.begin() + span.offset,
               block.begin() + span.offset + span.length);
  }
  assert_for_range_read(fv, offset, offset + count, offset + n);
  return out;
}

std::vector<std::uint8_t> Txn::read(int fd, std::uint64_t count) {
  require_active();
  FdState& st = fd_state(fd);
  auto out = do_pread(st, count, st.pos);
  st.pos += out.size();
  return out;
}

std::vector<std::uint8_t> Txn::pread(int fd, std::uint64_t count, std::uint64_t offset) {
  require_active();
  return do_pread(fd_state(fd), count, offset);
}

// ---------------------------------------------------------------------------
// Writes

std::uint64_t Txn::do_pwrite(FdState& st, const std::vector<std::uint8_t>& bytes,
                             std::uint64_t offset) {
  if (!(st.flags & kOpenWrite)) {
    throw FsError(ErrorCode::ReadOnlyHandle, "fd not open for writing");
  }
  FileView& fv = view(st.id);
  if (fv.kind == FileKind::Directory) {
    throw FsError(ErrorCode::IsADirectory, "cannot write a directory");
  }
  if (bytes.empty()) return 0;

  const std::uint32_t bs = mount_->block_size_;
  std::uint64_t pos = 0;
  for (const BlockSpan& span : block_span(offset, bytes.size(), bs)) {
    WriteRecord w;
    w.block = BlockRef{fv.id, span.block_no};
    w.offset = span.offset;
    w.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + span.length));
    writes_[w.block].push_back(std::move(w));
    pos += span.length;
  }
  fv.eff_length = std::max(fv.eff_length, offset + bytes.size());
  return bytes.size();
}

std::uint64_t Txn::write(int fd, const std::vector<std::uint8_t>& bytes) {
  require_active();
  FdState& st = fd_state(fd);
  std::uint64_t offset = st.pos;
  if (st.flags & kOpenAppend) {
    FileView& fv = view(st.id);
    // Appending positions at the current length; when that length is the
    // committed one, this is a length observation.
    if (!fv.created_here && !fv.exact_break && fv.eff_length == fv.base_length) {
      record_assertion(fv, LengthKind::Exactly, fv.base_length);
    }
    offset = fv.eff_length;
  }
  const std::uint64_t n = do_pwrite(st, bytes, offset);
  st.pos = offset + n;
  return n;
}

std::uint64_t Txn::pwrite(int fd, const std::vector<std::uint8_t>& bytes,
                          std::uint64_t offset) {
  require_active();
  return do_pwrite(fd_state(fd), bytes, offset);
}

// ---------------------------------------------------------------------------
// Truncate

void Txn::do_truncate(FileView& fv, std::uint64_t new_len) {
  MetaOp op;
  op.kind = MetaOp::Kind::SetLength;
  op.file_id = fv.id;
  op.length = new_len;
  op.exact = true;
  meta_ops_.push_back(std::move(op));

  if (new_len < fv.eff_length) {
    // Drop buffered writes past the new end.
    const std::uint32_t bs = mount_->block_size_;
    const std::uint64_t cut_block = new_len / bs;
    const std::uint32_t cut_off = static_cast<std::uint32_t>(new_len % bs);
    auto it = writes_.lower_bound(BlockRef{fv.id, cut_block});
    while (it != writes_.end() && it->first.file_id == fv.id) {
      if (it->first.block_no > cut_block || cut_off == 0) {
        it = writes_.erase(it);
        continue;
      }
      std::vector<WriteRecord> kept;
      for (WriteRecord& w : it->second) {
        if (w.offset >= cut_off) continue;
        if (w.offset + w.bytes.size() > cut_off) w.bytes.resize(cut_off - w.offset);
        if (!w.bytes.empty()) kept.push_back(std::move(w));
      }
      if (kept.empty()) {
        it = writes_.erase(it);
      } else {
        it->second = std::move(kept);
        ++it;
      }
    }
  }

  fv.base_visible_limit = std::min(fv.base_visible_limit, new_len);
  fv.eff_length = new_len;
  if (!fv.exact_break) {
    fv.exact_break = true;
    break_index_.emplace(fv.id, assertions_.size());
  }
}

void Txn::truncate(const std::string& raw_path, std::uint64_t new_len) {
  require_active();
  const std::string path = normalize_path(raw_path);
  ResolvedNode node = resolve(path);
  if (!node.id) throw FsError(ErrorCode::NotFound, "no such file: " + path);
  FileView& fv = open_view(path, node);
  if (fv.kind == FileKind::Directory) {
    throw FsError(ErrorCode::IsADirectory, "cannot truncate a directory");
  }
  do_truncate(fv, new_len);
}

void Txn::ftruncate(int fd, std::uint64_t new_len) {
  require_active();
  FdState& st = fd_state(fd);
  if (!(st.flags & kOpenWrite)) {
    throw FsError(ErrorCode::ReadOnlyHandle, "fd not open for writing");
  }
  do_truncate(view(st.id), new_len);
}

// ---------------------------------------------------------------------------
// Namespace mutation

void Txn::mkdir(const std::string& raw_path, std::uint32_t mode) {
  require_active();
  const std::string path = normalize_path(raw_path);
  if (path == "/") throw FsError(ErrorCode::AlreadyExists, "/ exists");
  ResolvedNode node = resolve(path);
  if (node.id) throw FsError(ErrorCode::AlreadyExists, "exists: " + path);

  const FileId id = next_temp_id_++;
  FileView fv;
  fv.id = id;
  fv.kind = FileKind::Directory;
  fv.mode = mode;
  fv.created_here = true;
  fv.exact_break = true;
  fv.base_visible_limit = 0;
  views_.emplace(id, std::move(fv));
  own_ns_[path] = ResolvedNode{id, ""};

  MetaOp op;
  op.kind = MetaOp::Kind::Mkdir;
  op.path = path;
  op.file_id = id;
  op.mode = mode;
  meta_ops_.push_back(std::move(op));
}

void Txn::unlink(const std::string& raw_path) {
  require_active();
  const std::string path = normalize_path(raw_path);
  if (path == "/") throw FsError(ErrorCode::InvalidPath, "cannot unlink /");
  ResolvedNode node = resolve(path);
  if (!node.id) throw FsError(ErrorCode::NotFound, "no such path: " + path);
  FileView& fv = open_view(path, node);
  if (fv.kind == FileKind::Directory) {
    if (!read_dir(path).empty()) {
      throw FsError(ErrorCode::DirectoryNotEmpty, "directory not empty: " + path);
    }
  }

  MetaOp op;
  op.kind = MetaOp::Kind::Unlink;
  op.path = path;
  meta_ops_.push_back(std::move(op));
  own_ns_[path] = ResolvedNode{std::nullopt, ""};
  fv.unlinked_here = true;
}

void Txn::rename(const std::string& raw_old, const std::string& raw_new) {
  require_active();
  const std::string old_path = normalize_path(raw_old);
  const std::string new_path = normalize_path(raw_new);
  if (old_path == "/" || new_path == "/") {
    throw FsError(ErrorCode::InvalidPath, "cannot rename /");
  }
  if (old_path == new_path) return;
  if (new_path.rfind(old_path + "/", 0) == 0) {
    throw FsError(ErrorCode::InvalidPath, "cannot rename under itself");
  }
  ResolvedNode old_node = resolve(old_path);
  if (!old_node.id) throw FsError(ErrorCode::NotFound, "no such path: " + old_path);
  ResolvedNode new_node = resolve(new_path);
  if (new_node.id) throw FsError(ErrorCode::AlreadyExists, "exists: " + new_path);

  MetaOp op;
  op.kind = MetaOp::Kind::Rename;
  op.path = old_path;
  op.path2 = new_path;
  meta_ops_.push_back(std::move(op));

  own_ns_[new_path] = ResolvedNode{old_node.id, old_node.snapshot_path};
  own_ns_[old_path] = ResolvedNode{std::nullopt, ""};

  // Re-key own children under the new prefix.
  const std::string old_prefix = old_path + "/";
  std::vector<std::pair<std::string, ResolvedNode>> moved;
  for (auto it = own_ns_.begin(); it != own_ns_.end();) {
    if (it->first.rfind(old_prefix, 0) == 0) {
      moved.emplace_back(new_path + "/" + it->first.substr(old_prefix.size()),
                         it->second);
      it = own_ns_.erase(it);
    } else {
      ++it;
    }
  }
  for (auto& [p, n] : moved) own_ns_[p] = std::move(n);
}

// ---------------------------------------------------------------------------
// Queries

FileMeta Txn::stat(const std::string& raw_path) {
  require_active();
  const std::string path = normalize_path(raw_path);
  ResolvedNode node = resolve(path);
  if (!node.id) throw FsError(ErrorCode::NotFound, "no such path: " + path);
  FileView& fv = open_view(path, node);

  if (fv.kind == FileKind::Regular && !fv.created_here && !fv.exact_break) {
    if (fv.eff_length == fv.base_length) {
      record_assertion(fv, LengthKind::Exactly, fv.base_length);
    } else {
      record_assertion(fv, LengthKind::AtMost, fv.eff_length);
    }
  }

  FileMeta meta;
  meta.file_id = fv.id;
  meta.length = fv.kind == FileKind::Directory ? 0 : fv.eff_length;
  meta.mode = fv.mode;
  meta.kind = fv.kind;
  meta.meta_version = read_ts_;
  return meta;
}

std::vector<DirEntry> Txn::read_dir(const std::string& raw_path) {
  require_active();
  const std::string path = normalize_path(raw_path);
  ResolvedNode node = resolve(path);
  if (!node.id) throw FsError(ErrorCode::NotFound, "no such path: " + path);
  FileView& fv = open_view(path, node);
  if (fv.kind != FileKind::Directory) {
    throw FsError(ErrorCode::NotADirectory, "not a directory: " + path);
  }

  std::map<std::string, DirEntry> entries;
  if (!fv.created_here && !node.snapshot_path.empty()) {
    json fields{{"path", node.snapshot_path}, {"at", read_ts_}};
    Message resp = roundtrip(Message{Kind::ListDir, std::move(fields)});
    if (resp.kind == Kind::Err) {
      const std::string reason = resp.fields.value("reason", "");
      if (reason == to_string(ErrorCode::SnapshotTooOld)) {
        local_abort(ErrorCode::SnapshotTooOld, "list_dir " + path);
      }
      throw FsError(ErrorCode::Transport, "list_dir failed: " + reason);
    }
    for (const json& e : resp.fields.at("entries")) {
      DirEntry de;
      de.name = e.at("name").get<std::string>();
      de.file_id = e.at("id").get<FileId>();
      kind_from_string(e.at("kind").get<std::string>(), de.kind);
      entries[de.name] = std::move(de);
    }
  }

  // Overlay own namespace ops one level below `path`.
  const std::string prefix = path == "/" ? "/" : path + "/";
  for (const auto& [p, n] : own_ns_) {
    if (p.rfind(prefix, 0) != 0) continue;
    const std::string rest = p.substr(prefix.size());
    if (rest.find('/') != std::string::npos) continue;
    if (!n.id) {
      entries.erase(rest);
      continue;
    }
    DirEntry de;
    de.name = rest;
    de.file_id = *n.id;
    auto vit = views_.find(*n.id);
    de.kind = vit != views_.end() ? vit->second.kind : FileKind::Regular;
    entries[rest] = std::move(de);
  }

  std::vector<DirEntry> out;
  out.reserve(entries.size());
  for (auto& [name, e] : entries) out.push_back(std::move(e));
  return out;
}

// ---------------------------------------------------------------------------
// Locks and sync (elided)

bool Txn::lock(int fd, std::uint64_t, std::uint64_t, LockKind) {
  require_active();
  fd_state(fd);
  ++lock_calls_;
  return true;
}

bool Txn::unlock(int fd, std::uint64_t, std::uint64_t) {
  require_active();
  fd_state(fd);
  ++lock_calls_;
  return true;
}

void Txn::fsync(int fd) {
  require_active();
  fd_state(fd);
}

// ---------------------------------------------------------------------------
// Commit

std::vector<LengthAssertion> Txn::normalized_assertions() const {
  // Drop assertions recorded after the file's length became locally
  // determined and those about files this transaction created or unlinked.
  std::vector<LengthAssertion> live;
  for (size_t i = 0; i < assertions_.size(); ++i) {
    const LengthAssertion& a = assertions_[i];
    auto bit = break_index_.find(a.file_id);
    if (bit != break_index_.end() && i >= bit->second) continue;
    auto vit = views_.find(a.file_id);
    if (vit != views_.end() &&
        (vit->second.created_here || vit->second.unlinked_here)) {
      continue;
    }
    live.push_back(a);
  }

  std::map<FileId, std::optional<std::uint64_t>> exactly;
  std::map<FileId, std::uint64_t> at_least;
  std::map<FileId, std::uint64_t> at_most;
  for (const LengthAssertion& a : live) {
    switch (a.kind) {
      case LengthKind::Exactly:
        exactly[a.file_id] = a.length;  // one snapshot, one exact length
        break;
      case LengthKind::AtLeast: {
        auto [it, fresh] = at_least.emplace(a.file_id, a.length);
        if (!fresh) it->second = std::max(it->second, a.length);
        break;
      }
      case LengthKind::AtMost: {
        auto [it, fresh] = at_most.emplace(a.file_id, a.length);
        if (!fresh) it->second = std::min(it->second, a.length);
        break;
      }
    }
  }

  std::vector<LengthAssertion> out;
  std::set<FileId> files;
  for (const auto& [f, v] : exactly) files.insert(f);
  for (const auto& [f, v] : at_least) files.insert(f);
  for (const auto& [f, v] : at_most) files.insert(f);
  for (FileId f : files) {
    auto e = exactly.find(f);
    if (e != exactly.end() && e->second) {
      out.push_back({f, LengthKind::Exactly, *e->second});
      // Exactly subsumes consistent bounds; keep only contradictions.
      auto lo = at_least.find(f);
      if (lo != at_least.end() && lo->second > *e->second) {
        out.push_back({f, LengthKind::AtLeast, lo->second});
      }
      auto hi = at_most.find(f);
      if (hi != at_most.end() && hi->second < *e->second) {
        out.push_back({f, LengthKind::AtMost, hi->second});
      }
      continue;
    }
    auto lo = at_least.find(f);
    if (lo != at_least.end()) out.push_back({f, LengthKind::AtLeast, lo->second});
    auto hi = at_most.find(f);
    if (hi != at_most.end()) out.push_back({f, LengthKind::AtMost, hi->second});
  }
  return out;
}

CommitRequest Txn::build_request() {
  CommitRequest req;
  req.txn_read_ts = read_ts_;

  for (const auto& [ref, ts] : read_records_) req.read_set.push_back({ref, ts});

  // Coalesce per file, skipping files this transaction unlinked.
  std::map<FileId, std::vector<WriteRecord>> by_file;
  for (const auto& [ref, recs] : writes_) {
    auto vit = views_.find(ref.file_id);
    if (vit != views_.end() && vit->second.unlinked_here) continue;
    auto& dst = by_file[ref.file_id];
    dst.insert(dst.end(), recs.begin(), recs.end());
  }
  for (auto& [id, recs] : by_file) {
    auto coalesced = coalesce_writes(recs);
    req.write_set.insert(req.write_set.end(),
                         std::make_move_iterator(coalesced.begin()),
                         std::make_move_iterator(coalesced.end()));
  }

  for (const auto& [path, rec] : meta_records_) {
    req.meta_reads.push_back(MetaRead{path, rec.first, rec.second});
  }

  req.meta_ops = meta_ops_;
  // Growth consolidates to one trailing maximum-semantics length op per file.
  for (const auto& [id, fv] : views_) {
    if (fv.kind == FileKind::Directory || fv.unlinked_here) continue;
    std::uint64_t shipped = fv.created_here ? 0 : fv.base_length;
    bool have_exact = false;
    for (const MetaOp& op : meta_ops_) {
      if (op.kind == MetaOp::Kind::SetLength && op.file_id == id && op.exact) {
        shipped = op.length;
        have_exact = true;
      }
    }
    (void)have_exact;
    if (fv.eff_length > shipped) {
      MetaOp op;
      op.kind = MetaOp::Kind::SetLength;
      op.file_id = id;
      op.length = fv.eff_length;
      op.exact = false;
      req.meta_ops.push_back(std::move(op));
    }
  }

  req.assertions = normalized_assertions();
  return req;
}

CommitResult Txn::commit() {
  require_active();
  CommitRequest req = build_request();

  Message resp;
  try {
    resp = roundtrip(Message{Kind::Commit, json{{"req", wire::commit_request_to_json(req)}}});
  } catch (const FsError&) {
    // Outcome indeterminate; surface to the caller (run_idempotent retries).
    fold_into_mount(false, 0, {});
    state_ = TxnState::Aborted;
    throw;
  }
  if (resp.kind == Kind::Err) {
    fold_into_mount(false, 0, {});
    state_ = TxnState::Aborted;
    ErrorCode code = ErrorCode::Transport;
    error_code_from_string(resp.fields.value("reason", ""), code);
    throw FsError(code, "commit rejected: " + resp.fields.dump());
  }

  CommitResult result;
  result.committed = resp.fields.at("committed").get<bool>();
  if (result.committed) {
    result.commit_ts = resp.fields.at("tw").get<Timestamp>();
    fold_into_mount(true, result.commit_ts, req.write_set);
    state_ = TxnState::Committed;
  } else {
    error_code_from_string(resp.fields.value("reason", ""), result.abort.reason);
    result.abort.block.file_id = resp.fields.value("f", FileId{0});
    result.abort.block.block_no = resp.fields.value("b", std::uint64_t{0});
    result.abort.path = resp.fields.value("path", "");
    result.abort.file_id = resp.fields.value("file", FileId{0});
    fold_into_mount(false, 0, {});
    // The abort names proven-stale cache state; drop it so a retry refetches.
    {
      std::lock_guard<std::mutex> g(mount_->mu_);
      switch (result.abort.reason) {
        case ErrorCode::StaleRead:
          mount_->cache_.erase(result.abort.block);
          break;
        case ErrorCode::NamespaceConflict:
          mount_->path_cache_.erase(result.abort.path);
          break;
        case ErrorCode::LengthViolation:
          mount_->meta_cache_.erase(result.abort.file_id);
          break;
        default:
          break;
      }
    }
    state_ = TxnState::Aborted;
  }
  return result;
}

void Txn::fold_into_mount(bool committed, Timestamp tw,
                          const std::vector<WriteRecord>& coalesced) {
  if (!mount_) return;
  std::lock_guard<std::mutex> g(mount_->mu_);

  // Snapshot facts hold regardless of the transaction's outcome.
  for (const auto& [ref, staged] : staged_blocks_) {
    mount_->cache_[ref] =
        Mount::CacheEntry{staged.bytes, staged.write_ts, staged.horizon};
  }
  for (const auto& [path, node] : resolved_) {
    if (node.id) {
      mount_->path_cache_[path] = Mount::PathEntry{*node.id, read_ts_};
    }
  }
  for (const auto& [id, meta] : staged_meta_) {
    auto it = mount_->meta_cache_.find(id);
    if (it == mount_->meta_cache_.end() || it->second.valid_upto <= read_ts_) {
      mount_->meta_cache_[id] = Mount::MetaEntry{meta, read_ts_};
    }
  }

  if (!committed) return;

  if (mount_->config_.fold_own_writes) {
    for (const WriteRecord& w : coalesced) {
      if (is_temp_id(w.block.file_id)) continue;
      auto vit = views_.find(w.block.file_id);
      const bool broke = vit != views_.end() && vit->second.exact_break;
      if (!broke && w.offset == 0 && w.bytes.size() == mount_->block_size_) {
        mount_->cache_[w.block] = Mount::CacheEntry{w.bytes, tw, tw};
        continue;
      }
      auto rit = read_records_.find(w.block);
      auto cit = mount_->cache_.find(w.block);
      if (!broke && rit != read_records_.end() && cit != mount_->cache_.end()) {
        // Base validated through commit: overlaying our write reproduces the
        // stored block.
        std::vector<std::uint8_t> bytes = cit->second.bytes;
        std::copy(w.bytes.begin(), w.bytes.end(), bytes.begin() + w.offset);
        mount_->cache_[w.block] = Mount::CacheEntry{std::move(bytes), tw, tw};
      } else if (cit != mount_->cache_.end()) {
        mount_->cache_.erase(cit);
      }
    }
  }

  for (const auto& [id, fv] : views_) {
    if (is_temp_id(id)) continue;
    if (fv.unlinked_here) {
      mount_->drop_file(id);
      continue;
    }
    if (fv.exact_break) {
      // Truncation rewrote tails server-side; cached blocks are stale.
      auto it = mount_->cache_.lower_bound(BlockRef{id, 0});
      while (it != mount_->cache_.end() && it->first.file_id == id) {
        it = mount_->cache_.erase(it);
      }
    }
    auto mit = mount_->meta_cache_.find(id);
    if (mit != mount_->meta_cache_.end() &&
        (fv.eff_length != mit->second.meta.length || fv.exact_break)) {
      mit->second.meta.length = fv.eff_length;
      mit->second.meta.meta_version = tw;
      mit->second.valid_upto = tw;
    }
  }

  for (const MetaOp& op : meta_ops_) {
    if (op.kind == MetaOp::Kind::Unlink) {
      mount_->path_cache_.erase(op.path);
    } else if (op.kind == MetaOp::Kind::Rename) {
      auto it = mount_->path_cache_.find(op.path);
      if (it != mount_->path_cache_.end()) {
        mount_->path_cache_[op.path2] = Mount::PathEntry{it->second.id, tw};
        mount_->path_cache_.erase(it);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Idempotent execution

IdempotentOutcome run_idempotent(Mount& mount, const std::string& key,
                                 const std::function<void(Txn&)>& work) {
  if (key.empty() || key.find('/') != std::string::npos) {
    throw FsError(ErrorCode::InvalidPath, "bad idempotence key");
  }
  const std::string marker_dir = "/.txn_markers";
  const std::string marker = marker_dir + "/" + key;

  for (int attempt = 0; attempt < mount.config().idempotent_retry_limit; ++attempt) {
    std::optional<Txn> txn;
    try {
      txn.emplace(mount.begin());

      bool have_dir = true;
      try {
        txn->stat(marker_dir);
      } catch (const FsError& e) {
        if (e.code() != ErrorCode::NotFound) throw;
        have_dir = false;
      }
      if (!have_dir) txn->mkdir(marker_dir);

      bool done = false;
      if (have_dir) {
        done = true;
        try {
          txn->stat(marker);
        } catch (const FsError& e) {
          if (e.code() != ErrorCode::NotFound) throw;
          done = false;
        }
      }
      if (done) {
        txn->abort();
        return IdempotentOutcome::Skipped;
      }

      work(*txn);
      txn->close(txn->open(marker, kOpenCreate | kOpenWrite));
      CommitResult r = txn->commit();
      if (r.committed) return IdempotentOutcome::Executed;
      // Aborted: conflicting sibling; retry from a fresh snapshot.
    } catch (const FsError& e) {
      if (e.code() == ErrorCode::SnapshotTooOld || e.code() == ErrorCode::Transport ||
          e.code() == ErrorCode::StaleRead) {
        continue;  // retriable
      }
      if (txn && txn->state() == TxnState::Active) txn->abort();
      throw;
    }
  }
  throw FsError(ErrorCode::Transport, "idempotent retry limit exceeded");
}

}  // namespace txfs
