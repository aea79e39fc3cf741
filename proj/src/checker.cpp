#include <algorithm>
#include <map>
#include <optional>
#include <sstream>

#include "txfs/harness.hpp"

namespace txfs {

namespace {

struct TxnTrace {
  int client = 0;
  std::uint64_t id = 0;
  Timestamp read_ts = 0;
  std::uint64_t begin_wall = 0;
  bool committed = false;
  bool read_only = false;
  Timestamp commit_ts = 0;
  std::uint64_t commit_wall = 0;
  std::vector<const HistoryEvent*> ops;  // reads/writes/asserts in order
  bool has_writes = false;
};

// Independent versioned store used only for replay: every committed write is
// kept with its commit timestamp, so any snapshot can be reconstructed.
class ReplayStore {
 public:
  void apply(const TxnTrace& txn) {
    for (const HistoryEvent* e : txn.ops) {
      if (e->type != HistoryEvent::Type::Write) continue;
      const BlockRef ref{e->file, e->block};
      std::vector<std::uint8_t> next = block_at(ref, txn.commit_ts);
      if (next.size() < e->offset + e->bytes.size()) {
        next.resize(e->offset + e->bytes.size(), 0);
      }
      std::copy(e->bytes.begin(), e->bytes.end(),
                next.begin() + static_cast<std::ptrdiff_t>(e->offset));
      blocks_[ref].emplace_back(txn.commit_ts, std::move(next));
      const std::uint64_t end =
          e->block * block_size_hint_ + e->offset + e->bytes.size();
      auto& lens = lengths_[e->file];
      const std::uint64_t cur = lens.empty() ? 0 : lens.back().second;
      lens.emplace_back(txn.commit_ts, std::max(cur, end));
    }
  }

  std::vector<std::uint8_t> block_at(const BlockRef& ref, Timestamp ts) const {
    auto it = blocks_.find(ref);
    if (it == blocks_.end()) return {};
    const std::vector<std::uint8_t>* found = nullptr;
    for (const auto& [vts, bytes] : it->second) {
      if (vts <= ts) found = &bytes;
      else break;
    }
    return found ? *found : std::vector<std::uint8_t>{};
  }

  std::uint64_t length_at(FileId file, Timestamp ts) const {
    auto it = lengths_.find(file);
    if (it == lengths_.end()) return 0;
    std::uint64_t len = 0;
    for (const auto& [vts, l] : it->second) {
      if (vts <= ts) len = l;
      else break;
    }
    return len;
  }

  // Commit timestamp of a write to `ref` strictly inside (after, before).
  std::optional<Timestamp> write_in(const BlockRef& ref, Timestamp after,
                                    Timestamp before) const {
    auto it = blocks_.find(ref);
    if (it == blocks_.end()) return std::nullopt;
    for (const auto& [vts, bytes] : it->second) {
      if (vts > after && vts < before) return vts;
      if (vts >= before) break;
    }
    return std::nullopt;
  }

  void set_block_size_hint(std::uint64_t bs) { block_size_hint_ = bs; }

 private:
  std::map<BlockRef, std::vector<std::pair<Timestamp, std::vector<std::uint8_t>>>> blocks_;
  std::map<FileId, std::vector<std::pair<Timestamp, std::uint64_t>>> lengths_;
  std::uint64_t block_size_hint_ = 1024;
};

std::string describe(const HistoryEvent& e) {
  std::ostringstream out;
  out << "client " << e.client << " txn " << e.txn;
  switch (e.type) {
    case HistoryEvent::Type::Read:
      out << " read file " << e.file << " block " << e.block << " off " << e.offset;
      break;
    case HistoryEvent::Type::Write:
      out << " write file " << e.file << " block " << e.block;
      break;
    case HistoryEvent::Type::Assert:
      out << " assert file " << e.file << " len " << e.assert_len;
      break;
    default:
      break;
  }
  return out.str();
}

}  // namespace

CheckResult check_strict_serializability(const History& history) {
  auto malformed = [](const std::string& why) {
    return CheckResult{CheckResult::Status::Malformed, why};
  };
  auto violation = [](const std::string& witness) {
    return CheckResult{CheckResult::Status::Violation, witness};
  };

  // Group events into transactions; enforce per-client contiguity.
  std::map<std::pair<int, std::uint64_t>, TxnTrace> txns;
  std::map<int, std::optional<std::pair<int, std::uint64_t>>> open_txn;
  std::vector<std::pair<int, std::uint64_t>> order;

  for (const HistoryEvent& e : history.events) {
    const std::pair<int, std::uint64_t> key{e.client, e.txn};
    auto& open = open_txn[e.client];
    if (e.type == HistoryEvent::Type::Begin) {
      if (open) return malformed("begin inside open transaction");
      if (txns.count(key)) return malformed("transaction id reused");
      TxnTrace t;
      t.client = e.client;
      t.id = e.txn;
      t.read_ts = e.ts;
      t.begin_wall = e.wall_ns;
      txns[key] = std::move(t);
      order.push_back(key);
      open = key;
      continue;
    }
    if (!open || *open != key) {
      return malformed("event outside its transaction: " + describe(e));
    }
    TxnTrace& t = txns[key];
    switch (e.type) {
      case HistoryEvent::Type::Read:
      case HistoryEvent::Type::Assert:
        t.ops.push_back(&e);
        break;
      case HistoryEvent::Type::Write:
        t.ops.push_back(&e);
        t.has_writes = true;
        break;
      case HistoryEvent::Type::Commit:
        t.committed = true;
        t.commit_ts = e.ts;
        t.commit_wall = e.wall_ns;
        t.read_only = e.read_only || !t.has_writes;
        open.reset();
        break;
      case HistoryEvent::Type::Abort:
        t.committed = false;
        open.reset();
        break;
      case HistoryEvent::Type::Begin:
        break;
    }
  }
  for (const auto& [client, open] : open_txn) {
    if (open) {
      std::ostringstream out;
      out << "dangling active transaction: client " << client;
      return malformed(out.str());
    }
  }

  // Commit timestamps of update transactions must be unique and > T_R.
  std::map<Timestamp, const TxnTrace*> by_commit;
  std::vector<const TxnTrace*> committed;
  for (const auto& key : order) {
    const TxnTrace& t = txns[key];
    if (!t.committed) continue;
    committed.push_back(&t);
    if (!t.read_only) {
      if (t.commit_ts <= t.read_ts) {
        std::ostringstream out;
        out << "commit ts " << t.commit_ts << " not after read ts " << t.read_ts
            << " (client " << t.client << " txn " << t.id << ")";
        return violation(out.str());
      }
      if (!by_commit.emplace(t.commit_ts, &t).second) {
        std::ostringstream out;
        out << "duplicate commit timestamp " << t.commit_ts;
        return violation(out.str());
      }
    } else if (t.commit_ts != t.read_ts) {
      std::ostringstream out;
      out << "read-only txn committed at " << t.commit_ts << " != its read ts "
          << t.read_ts;
      return violation(out.str());
    }
  }

  // (c) Real time: a commit that returned before a begin started must be
  // visible to it. Sweep begins in wall order against returned commits.
  {
    std::vector<const TxnTrace*> commits = committed;
    std::vector<const TxnTrace*> begins;
    for (const auto& key : order) begins.push_back(&txns[key]);
    std::sort(commits.begin(), commits.end(),
              [](const TxnTrace* a, const TxnTrace* b) {
                return a->commit_wall < b->commit_wall;
              });
    std::sort(begins.begin(), begins.end(),
              [](const TxnTrace* a, const TxnTrace* b) {
                return a->begin_wall < b->begin_wall;
              });
    size_t ci = 0;
    Timestamp max_tw = 0;
    const TxnTrace* max_txn = nullptr;
    for (const TxnTrace* b : begins) {
      while (ci < commits.size() && commits[ci]->commit_wall < b->begin_wall) {
        if (commits[ci]->commit_ts > max_tw) {
          max_tw = commits[ci]->commit_ts;
          max_txn = commits[ci];
        }
        ++ci;
      }
      if (b->read_ts < max_tw) {
        std::ostringstream out;
        out << "real-time violation: client " << b->client << " txn " << b->id
            << " began with read ts " << b->read_ts << " after txn of client "
            << max_txn->client << " committed at " << max_tw << " had returned";
        return violation(out.str());
      }
    }
  }

  // (a)+(b) Serial replay in ascending commit timestamp. The store keeps
  // every version, so snapshots can be queried after the full replay.
  std::vector<const TxnTrace*> update_order;
  for (const auto& [ts, t] : by_commit) update_order.push_back(t);

  ReplayStore store;
  // Infer a block size hint from events (offset arithmetic for lengths).
  std::uint64_t bs_hint = 0;
  for (const HistoryEvent& e : history.events) {
    if (e.type == HistoryEvent::Type::Write || e.type == HistoryEvent::Type::Read) {
      bs_hint = std::max<std::uint64_t>(bs_hint, e.offset + e.bytes.size());
    }
  }
  if (bs_hint) store.set_block_size_hint(bs_hint);
  for (const TxnTrace* t : update_order) store.apply(*t);

  for (const TxnTrace* t : committed) {
    // Update transactions serialize at their commit point: a block they read
    // must not have been overwritten between their snapshot and their commit.
    if (!t->read_only) {
      for (const HistoryEvent* e : t->ops) {
        if (e->type != HistoryEvent::Type::Read) continue;
        const BlockRef ref{e->file, e->block};
        if (auto w = store.write_in(ref, t->read_ts, t->commit_ts)) {
          std::ostringstream out;
          out << "stale read carried to commit: " << describe(*e)
              << " overwritten at " << *w << " between read ts " << t->read_ts
              << " and commit ts " << t->commit_ts;
          return violation(out.str());
        }
      }
    }

    std::map<BlockRef, std::vector<WriteRecord>> own;
    for (const HistoryEvent* e : t->ops) {
      const BlockRef ref{e->file, e->block};
      switch (e->type) {
        case HistoryEvent::Type::Read: {
          std::vector<std::uint8_t> expect = store.block_at(ref, t->read_ts);
          if (expect.size() < e->offset + e->bytes.size()) {
            expect.resize(e->offset + e->bytes.size(), 0);
          }
          auto oit = own.find(ref);
          if (oit != own.end()) {
            for (const WriteRecord& w : oit->second) {
              if (expect.size() < w.offset + w.bytes.size()) {
                expect.resize(w.offset + w.bytes.size(), 0);
              }
              std::copy(w.bytes.begin(), w.bytes.end(),
                        expect.begin() + w.offset);
            }
          }
          for (size_t i = 0; i < e->bytes.size(); ++i) {
            if (e->bytes[i] != expect[e->offset + i]) {
              std::ostringstream out;
              out << "stale read: " << describe(*e) << " byte " << i
                  << " differs from the snapshot at read ts " << t->read_ts;
              return violation(out.str());
            }
          }
          break;
        }
        case HistoryEvent::Type::Write: {
          WriteRecord w;
          w.block = ref;
          w.offset = e->offset;
          w.bytes = e->bytes;
          own[ref].push_back(std::move(w));
          break;
        }
        case HistoryEvent::Type::Assert: {
          const std::uint64_t len = store.length_at(e->file, t->read_ts);
          const bool holds = e->assert_kind == LengthKind::AtLeast
                                 ? len >= e->assert_len
                             : e->assert_kind == LengthKind::AtMost
                                 ? len <= e->assert_len
                                 : len == e->assert_len;
          if (!holds) {
            std::ostringstream out;
            out << "assertion failed at snapshot " << t->read_ts << ": "
                << describe(*e) << " (actual length " << len << ")";
            return violation(out.str());
          }
          break;
        }
        default:
          break;
      }
    }
  }

  return CheckResult{CheckResult::Status::Valid, ""};
}

}  // namespace txfs
