#include <doctest.h>

#include <random>
#include <thread>

#include "support.hpp"
#include "txfs/client.hpp"
#include "txfs/core.hpp"
#include "txfs/server.hpp"

using namespace txfs;
using namespace txfs::test;

namespace {

struct Cluster {
  std::shared_ptr<Backend> backend;

  explicit Cluster(VersioningMode mode = VersioningMode::BlockMultiversioned,
                   std::uint32_t bs = 1024) {
    BackendConfig c;
    c.mode = mode;
    c.block_size = bs;
    backend = std::make_shared<Backend>(c);
  }

  std::pair<std::unique_ptr<Mount>, std::shared_ptr<EmbeddedTransport>> mount(
      CachePolicy policy = CachePolicy::UpdateAll) {
    auto transport = std::make_shared<EmbeddedTransport>(backend);
    MountConfig mc;
    mc.policy = policy;
    return {std::make_unique<Mount>(transport, mc), transport};
  }
};

size_t count_kind(const std::vector<wire::Kind>& log, wire::Kind kind) {
  return static_cast<size_t>(std::count(log.begin(), log.end(), kind));
}

}  // namespace

TEST_CASE("begin fetches the current read timestamp") {
  Cluster c;
  auto [mount, transport] = c.mount();
  {
    Txn txn = mount->begin();
    CHECK(txn.read_ts() == 0);  // genesis
    txn.abort();
  }
  make_file(*c.backend, "/f", "hello");
  const Timestamp tw = c.backend->current_read_timestamp();
  {
    Txn txn = mount->begin();
    CHECK(txn.read_ts() == tw);
    txn.abort();
  }
}

TEST_CASE("stale policy leaves cache bytes unchanged across begins") {
  Cluster c;
  auto [stale, st] = c.mount(CachePolicy::Stale);
  auto [fresh, ft] = c.mount(CachePolicy::UpdateAll);
  const FileId f = make_file(*c.backend, "/f", std::string(2048, 'a'));

  // Warm both caches.
  for (auto* m : {stale.get(), fresh.get()}) {
    Txn txn = m->begin();
    const int fd = txn.open("/f", kOpenRead);
    (void)txn.pread(fd, 1024, 0);
    txn.commit();
  }
  const std::uint64_t stale_digest = stale->cache_digest();
  const std::uint64_t fresh_digest = fresh->cache_digest();

  // Backend advances.
  CommitRequest w;
  w.txn_read_ts = c.backend->current_read_timestamp();
  w.write_set.push_back(wr(f, 0, 0, std::string(1024, 'B')));
  REQUIRE(c.backend->validate_and_commit(w).committed);

  {
    Txn txn = stale->begin();
    txn.abort();
  }
  {
    Txn txn = fresh->begin();
    txn.abort();
  }
  CHECK(stale->cache_digest() == stale_digest);   // untouched
  CHECK(fresh->cache_digest() != fresh_digest);   // update shipped bytes
}

TEST_CASE("open semantics") {
  Cluster c;
  make_file(*c.backend, "/f", "hello");
  auto [mount, transport] = c.mount();

  SUBCASE("existing file read-only") {
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead);
    CHECK(txn.seek(fd, 0, Whence::Cur) == 0);
    auto req = txn.build_request_for_test();
    REQUIRE(req.meta_reads.size() == 1);
    CHECK(req.meta_reads[0].path == "/f");
    txn.abort();
  }
  SUBCASE("missing without create") {
    Txn txn = mount->begin();
    CHECK_THROWS_AS((void)txn.open("/g", kOpenRead), FsError);
    txn.abort();
  }
  SUBCASE("directory opened for write") {
    Txn txn = mount->begin();
    txn.mkdir("/d");
    CommitResult r = txn.commit();
    REQUIRE(r.committed);
    Txn txn2 = mount->begin();
    CHECK_THROWS_AS((void)txn2.open("/d", kOpenWrite), FsError);
    txn2.abort();
  }
}

TEST_CASE("concurrent exclusive create: exactly one commits") {
  Cluster c;
  auto [m1, t1] = c.mount();
  auto [m2, t2] = c.mount();

  Txn a = m1->begin();
  Txn b = m2->begin();
  a.close(a.open("/g", kOpenCreate | kOpenWrite));
  b.close(b.open("/g", kOpenCreate | kOpenWrite));
  CommitResult ra = a.commit();
  CommitResult rb = b.commit();
  REQUIRE(ra.committed);
  REQUIRE_FALSE(rb.committed);
  CHECK(rb.abort.reason == ErrorCode::NamespaceConflict);
  CHECK(rb.abort.path == "/g");
}

TEST_CASE("read records the length assertions") {
  Cluster c;
  make_file(*c.backend, "/f", std::string(100, 'x'));
  auto [mount, transport] = c.mount();

  SUBCASE("EOF-truncated read asserts the exact length") {
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead);
    auto bytes = txn.pread(fd, 50, 80);
    CHECK(bytes.size() == 20);
    REQUIRE(txn.raw_assertions().size() == 1);
    CHECK(txn.raw_assertions()[0].kind == LengthKind::Exactly);
    CHECK(txn.raw_assertions()[0].length == 100);
    txn.abort();
  }
  SUBCASE("read past EOF returns empty and asserts at-most") {
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead);
    auto bytes = txn.pread(fd, 10, 200);
    CHECK(bytes.empty());
    REQUIRE(txn.raw_assertions().size() == 1);
    CHECK(txn.raw_assertions()[0].kind == LengthKind::AtMost);
    CHECK(txn.raw_assertions()[0].length == 200);
    txn.abort();
  }
  SUBCASE("fully-within read asserts at-least") {
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead);
    auto bytes = txn.pread(fd, 40, 10);
    CHECK(bytes.size() == 40);
    REQUIRE(txn.raw_assertions().size() == 1);
    CHECK(txn.raw_assertions()[0].kind == LengthKind::AtLeast);
    CHECK(txn.raw_assertions()[0].length == 50);
    txn.abort();
  }
}

TEST_CASE("read-your-writes without backend fetches") {
  Cluster c;
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  const int fd = txn.open("/new", kOpenCreate | kOpenRead | kOpenWrite);
  txn.pwrite(fd, bytes_of("xy"), 10);

  const size_t fetches_before = count_kind(transport->call_log(), wire::Kind::GetBlock);
  auto bytes = txn.pread(fd, 2, 10);
  CHECK(bytes == bytes_of("xy"));
  CHECK(count_kind(transport->call_log(), wire::Kind::GetBlock) == fetches_before);

  // Gaps created by own sparse writes read as zeros.
  auto gap = txn.pread(fd, 4, 4);
  CHECK(gap == std::vector<std::uint8_t>(4, 0));
  txn.abort();
}

TEST_CASE("writes buffer locally with zero backend traffic") {
  Cluster c;
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  const int fd = txn.open("/big", kOpenCreate | kOpenWrite);

  const size_t calls_before = transport->call_log().size();
  std::vector<std::uint8_t> chunk(1024, 0xAB);
  for (int i = 0; i < 1024; ++i) {  // 1 MiB total
    txn.pwrite(fd, chunk, static_cast<std::uint64_t>(i) * 1024);
  }
  CHECK(transport->call_log().size() == calls_before);  // no round trips
  txn.abort();
  CHECK(transport->call_log().size() == calls_before);  // abort is local too
}

TEST_CASE("zero-fill of gaps is visible after commit") {
  Cluster c;
  auto [m1, t1] = c.mount();
  auto [m2, t2] = c.mount();
  {
    Txn txn = m1->begin();
    const int fd = txn.open("/gap", kOpenCreate | kOpenWrite);
    txn.pwrite(fd, bytes_of("z"), 2048);
    REQUIRE(txn.commit().committed);
  }
  {
    Txn txn = m2->begin();
    const int fd = txn.open("/gap", kOpenRead);
    auto bytes = txn.pread(fd, 2048, 0);
    REQUIRE(bytes.size() == 2048);
    CHECK(std::all_of(bytes.begin(), bytes.end(), [](auto b) { return b == 0; }));
    auto tail = txn.pread(fd, 10, 2048);
    REQUIRE(tail.size() == 1);
    CHECK(tail[0] == 'z');
    txn.commit();
  }
}

TEST_CASE("seek semantics") {
  Cluster c;
  make_file(*c.backend, "/f", std::string(100, 'x'));
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  const int fd = txn.open("/f", kOpenRead);

  CHECK(txn.seek(fd, 10, Whence::Set) == 10);
  CHECK(txn.raw_assertions().empty());  // purely local

  (void)txn.read(fd, 7);
  CHECK(txn.seek(fd, 0, Whence::Cur) == 17);

  CHECK(txn.seek(fd, -10, Whence::End) == 90);
  bool saw_exact_100 = false;
  for (const auto& a : txn.raw_assertions()) {
    if (a.kind == LengthKind::Exactly && a.length == 100) saw_exact_100 = true;
  }
  CHECK(saw_exact_100);

  CHECK_THROWS_AS((void)txn.seek(fd, -200, Whence::End), FsError);
  txn.abort();
}

TEST_CASE("seek-to-end aborts when a concurrent append moved the length") {
  Cluster c;
  const FileId f = make_file(*c.backend, "/f", std::string(100, 'x'));
  auto [mount, transport] = c.mount();

  Txn txn = mount->begin();
  const int fd = txn.open("/f", kOpenRead | kOpenWrite);
  CHECK(txn.seek(fd, -10, Whence::End) == 90);
  txn.pwrite(fd, bytes_of("q"), 0);  // make it an update txn

  CommitRequest grow;
  grow.txn_read_ts = c.backend->current_read_timestamp();
  grow.write_set.push_back(wr(f, 0, 100, std::string(24, 'y')));
  grow.meta_ops.push_back(op_set_length(f, 124, false));
  REQUIRE(c.backend->validate_and_commit(grow).committed);

  CommitResult r = txn.commit();
  REQUIRE_FALSE(r.committed);
  CHECK(r.abort.reason == ErrorCode::LengthViolation);
}

TEST_CASE("truncate local view and zero-fill on regrow") {
  Cluster c;
  make_file(*c.backend, "/f", std::string(100, 'x'));
  auto [mount, transport] = c.mount();

  SUBCASE("shrink hides bytes immediately but still records the observation") {
    Txn txn = mount->begin();
    txn.truncate("/f", 50);
    const int fd = txn.open("/f", kOpenRead);
    auto bytes = txn.pread(fd, 10, 60);
    CHECK(bytes.empty());
    bool saw_at_most_60 = false;
    for (const auto& a : txn.raw_assertions()) {
      if (a.kind == LengthKind::AtMost && a.length == 60) saw_at_most_60 = true;
    }
    CHECK(saw_at_most_60);
    // The own-view observation does not ship: the truncate overrides it.
    auto req = txn.build_request_for_test();
    CHECK(req.assertions.empty());
    REQUIRE(txn.commit().committed);
  }
  SUBCASE("grow zero-fills") {
    Txn txn = mount->begin();
    txn.truncate("/f", 50);
    const int fd = txn.open("/f", kOpenRead | kOpenWrite);
    txn.truncate("/f", 80);
    auto bytes = txn.pread(fd, 40, 45);
    REQUIRE(bytes.size() == 35);  // EOF at 80
    CHECK(bytes[0] == 'x');       // below 50: original data
    CHECK(bytes[4] == 'x');
    CHECK(bytes[5] == 0);         // 50..80 zero-filled
    REQUIRE(txn.commit().committed);

    Txn check = mount->begin();
    const int fd2 = check.open("/f", kOpenRead);
    auto after = check.pread(fd2, 100, 0);
    REQUIRE(after.size() == 80);
    CHECK(after[49] == 'x');
    CHECK(after[50] == 0);
    check.commit();
  }
}

TEST_CASE("mkdir then create inside it commits atomically") {
  Cluster c;
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  txn.mkdir("/d");
  const int fd = txn.open("/d/f", kOpenCreate | kOpenWrite);
  txn.pwrite(fd, bytes_of("data"), 0);
  auto entries = txn.read_dir("/d");
  REQUIRE(entries.size() == 1);
  CHECK(entries[0].name == "f");
  REQUIRE(txn.commit().committed);

  Txn check = mount->begin();
  CHECK(check.stat("/d/f").length == 4);
  check.commit();
}

TEST_CASE("rename is atomic: either the old name or the new") {
  Cluster c;
  make_file(*c.backend, "/a", "data");
  auto [reader, rt] = c.mount();
  auto [writer, wt] = c.mount();

  Txn old_reader = reader->begin();  // snapshot before the rename

  Txn mv = writer->begin();
  mv.rename("/a", "/b");
  REQUIRE(mv.commit().committed);

  // The old snapshot still sees /a and not /b.
  CHECK(old_reader.stat("/a").kind == FileKind::Regular);
  CHECK_THROWS_AS((void)old_reader.stat("/b"), FsError);
  old_reader.commit();

  // A fresh snapshot sees /b and not /a.
  Txn new_reader = reader->begin();
  CHECK(new_reader.stat("/b").kind == FileKind::Regular);
  CHECK_THROWS_AS((void)new_reader.stat("/a"), FsError);
  new_reader.commit();
}

TEST_CASE("two concurrent unlinks: one wins") {
  Cluster c;
  make_file(*c.backend, "/a", "data");
  auto [m1, t1] = c.mount();
  auto [m2, t2] = c.mount();

  Txn a = m1->begin();
  Txn b = m2->begin();
  a.unlink("/a");
  b.unlink("/a");
  CommitResult ra = a.commit();
  CommitResult rb = b.commit();
  REQUIRE(ra.committed);
  REQUIRE_FALSE(rb.committed);
  CHECK(rb.abort.reason == ErrorCode::NamespaceConflict);
}

TEST_CASE("stat answers from the snapshot merged with own ops") {
  Cluster c;
  const FileId f = make_file(*c.backend, "/f", std::string(10, 'x'));
  auto [mount, transport] = c.mount();

  Txn txn = mount->begin();
  CHECK(txn.stat("/f").length == 10);

  // Concurrent append lands after our snapshot.
  CommitRequest grow;
  grow.txn_read_ts = c.backend->current_read_timestamp();
  grow.write_set.push_back(wr(f, 0, 10, "more"));
  grow.meta_ops.push_back(op_set_length(f, 14, false));
  REQUIRE(c.backend->validate_and_commit(grow).committed);

  CHECK(txn.stat("/f").length == 10);  // still the snapshot length
  txn.abort();

  Txn own = mount->begin();
  const int fd = own.open("/own", kOpenCreate | kOpenWrite);
  own.pwrite(fd, bytes_of("12345"), 0);
  CHECK(own.stat("/own").length == 5);  // local length
  own.abort();
}

TEST_CASE("read_dir on a fresh system is empty") {
  Cluster c;
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  CHECK(txn.read_dir("/").empty());
  txn.commit();
}

TEST_CASE("locks succeed locally with no backend traffic") {
  Cluster c;
  make_file(*c.backend, "/f", std::string(2048, 'x'));
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  const int fd = txn.open("/f", kOpenRead | kOpenWrite);

  const size_t calls = transport->call_log().size();
  for (int i = 0; i < 1000; ++i) {
    CHECK(txn.lock(fd, 0, 1024, LockKind::Exclusive));
    CHECK(txn.unlock(fd, 0, 1024));
  }
  CHECK(txn.lock(fd, 0, 1024, LockKind::Shared));
  CHECK(transport->call_log().size() == calls);
  CHECK(txn.lock_calls() == 2001);
  txn.abort();
}

TEST_CASE("fsync is a local no-op") {
  Cluster c;
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  const int fd = txn.open("/f", kOpenCreate | kOpenWrite);
  txn.pwrite(fd, bytes_of("data"), 0);
  const size_t calls = transport->call_log().size();
  txn.fsync(fd);
  CHECK(transport->call_log().size() == calls);
  // Dropping the txn after fsync leaves no committed effects.
  txn.abort();

  Txn check = mount->begin();
  CHECK_THROWS_AS((void)check.stat("/f"), FsError);
  check.commit();
}

TEST_CASE("commit outcomes") {
  SUBCASE("empty txn commits at its read timestamp") {
    Cluster c;
    make_file(*c.backend, "/f", "x");
    auto [mount, transport] = c.mount();
    Txn txn = mount->begin();
    const Timestamp tr = txn.read_ts();
    CommitResult r = txn.commit();
    REQUIRE(r.committed);
    CHECK(r.commit_ts == tr);
  }
  SUBCASE("read-only txn under block-multiversioned always commits") {
    Cluster c(VersioningMode::BlockMultiversioned);
    const FileId f = make_file(*c.backend, "/f", std::string(2048, 'x'));
    auto [mount, transport] = c.mount();
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead);
    (void)txn.pread(fd, 100, 0);

    CommitRequest w;
    w.txn_read_ts = c.backend->current_read_timestamp();
    w.write_set.push_back(wr(f, 0, 0, std::string(1024, 'Y')));
    REQUIRE(c.backend->validate_and_commit(w).committed);

    CommitResult r = txn.commit();
    REQUIRE(r.committed);
    CHECK(r.commit_ts == txn.read_ts());
  }
  SUBCASE("stale-read victim aborts and leaves the backend unchanged") {
    Cluster c(VersioningMode::BlockVersioned);
    const FileId f = make_file(*c.backend, "/f", std::string(2048, 'x'));
    auto [mount, transport] = c.mount();
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead | kOpenWrite);
    (void)txn.pread(fd, 100, 0);
    txn.pwrite(fd, bytes_of("mine"), 1024);

    CommitRequest w;
    w.txn_read_ts = c.backend->current_read_timestamp();
    w.write_set.push_back(wr(f, 0, 0, std::string(1024, 'Y')));
    REQUIRE(c.backend->validate_and_commit(w).committed);

    const std::string before = c.backend->dump();
    CommitResult r = txn.commit();
    REQUIRE_FALSE(r.committed);
    CHECK(r.abort.reason == ErrorCode::StaleRead);
    CHECK(c.backend->dump() == before);
  }
}

TEST_CASE("abort discards buffered state") {
  Cluster c;
  make_file(*c.backend, "/f", std::string(16, 'a'));
  auto [mount, transport] = c.mount();

  {
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead | kOpenWrite);
    txn.pwrite(fd, bytes_of("XXXX"), 0);
    txn.abort();
  }
  {
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead);
    auto bytes = txn.pread(fd, 4, 0);
    CHECK(bytes == bytes_of("aaaa"));  // pre-txn bytes
    txn.commit();
  }
  {
    Txn a = mount->begin();
    const Timestamp tr = a.read_ts();
    a.abort();
    Txn b = mount->begin();
    CHECK(b.read_ts() >= tr);
    b.abort();
  }
}

TEST_CASE("no mutating messages before commit") {
  Cluster c;
  make_file(*c.backend, "/f", std::string(4096, 'x'));
  auto [mount, transport] = c.mount();

  Txn txn = mount->begin();
  const int fd = txn.open("/f", kOpenRead | kOpenWrite);
  (void)txn.pread(fd, 1024, 0);
  txn.pwrite(fd, bytes_of("update"), 2048);
  txn.truncate("/f", 3000);
  (void)txn.stat("/f");

  for (wire::Kind kind : transport->call_log()) {
    const bool fetch_or_begin = kind == wire::Kind::Begin ||
                                kind == wire::Kind::GetBlock ||
                                kind == wire::Kind::GetMeta ||
                                kind == wire::Kind::ListDir;
    CHECK(fetch_or_begin);
  }
  REQUIRE(txn.commit().committed);
  CHECK(count_kind(transport->call_log(), wire::Kind::Commit) == 1);
}

TEST_CASE("snapshot stability: repeated reads ignore foreign commits") {
  for (CachePolicy policy : {CachePolicy::UpdateAll, CachePolicy::InvalidateOnly,
                             CachePolicy::Frequency, CachePolicy::Stale}) {
    CAPTURE(to_string(policy));
    Cluster c;
    const FileId f = make_file(*c.backend, "/f", std::string(2048, 'x'));
    auto [mount, transport] = c.mount(policy);

    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead);
    auto first = txn.pread(fd, 100, 0);

    CommitRequest w;
    w.txn_read_ts = c.backend->current_read_timestamp();
    w.write_set.push_back(wr(f, 0, 0, std::string(1024, 'Z')));
    REQUIRE(c.backend->validate_and_commit(w).committed);

    auto second = txn.pread(fd, 100, 0);
    CHECK(first == second);
    txn.abort();
  }
}

TEST_CASE("read-your-writes matches the apply-in-order oracle") {
  Cluster c(VersioningMode::BlockMultiversioned, 64);
  make_file(*c.backend, "/f", std::string(256, 'b'));
  auto [mount, transport] = c.mount();
  std::mt19937_64 rng(11);

  for (int round = 0; round < 40; ++round) {
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead | kOpenWrite);
    std::vector<std::uint8_t> model(256, 'b');

    for (int step = 0; step < 20; ++step) {
      if (rng() % 2 == 0) {
        const std::uint64_t off = rng() % 200;
        std::vector<std::uint8_t> data(1 + rng() % 50);
        for (auto& d : data) d = static_cast<std::uint8_t>(rng());
        txn.pwrite(fd, data, off);
        std::copy(data.begin(), data.end(),
                  model.begin() + static_cast<std::ptrdiff_t>(off));
      } else {
        const std::uint64_t off = rng() % 200;
        const std::uint64_t len = 1 + rng() % 56;
        auto got = txn.pread(fd, len, off);
        const std::uint64_t n = std::min(len, 256 - off);
        REQUIRE(got.size() == n);
        for (std::uint64_t i = 0; i < n; ++i) {
          REQUIRE(got[i] == model[off + i]);
        }
      }
    }
    txn.abort();
  }
}

TEST_CASE("committed values equal snapshot-plus-own-writes for every policy") {
  for (CachePolicy policy : {CachePolicy::UpdateAll, CachePolicy::InvalidateOnly,
                             CachePolicy::Frequency, CachePolicy::Stale}) {
    for (VersioningMode mode : {VersioningMode::FileVersioned,
                                VersioningMode::BlockVersioned,
                                VersioningMode::BlockMultiversioned}) {
      CAPTURE(to_string(policy));
      CAPTURE(to_string(mode));
      Cluster c(mode, 64);
      const FileId f = make_file(*c.backend, "/f", std::string(512, 'a'));
      VersionOracle oracle(64);
      {
        std::vector<WriteRecord> init;
        for (std::uint64_t b = 0; b < 8; ++b) {
          init.push_back(wr(f, b, 0, std::string(64, 'a')));
        }
        oracle.note_commit(c.backend->current_read_timestamp(), init);
      }

      auto [m1, t1] = c.mount(policy);
      auto [m2, t2] = c.mount(policy);
      std::mt19937_64 rng(31 + static_cast<std::uint64_t>(policy));

      for (int round = 0; round < 60; ++round) {
        Mount& mount = (rng() % 2 == 0) ? *m1 : *m2;
        try {
          Txn txn = mount.begin();
          const Timestamp tr = txn.read_ts();
          const int fd = txn.open("/f", kOpenRead | kOpenWrite);
          const std::uint64_t rb = rng() % 8;
          auto got = txn.pread(fd, 64, rb * 64);
          REQUIRE(got.size() == 64);

          const std::uint64_t wb = rng() % 8;
          std::string data(64, 'A' + static_cast<char>(round % 26));
          txn.pwrite(fd, bytes_of(data), wb * 64);

          CommitResult r = txn.commit();
          if (r.committed) {
            // The read must equal the snapshot at tr (no own writes before it).
            CHECK(got == oracle.at(BlockRef{f, rb}, tr));
            oracle.note_commit(r.commit_ts, {wr(f, wb, 0, data)});
          }
        } catch (const FsError& e) {
          // Early aborts are fine; correctness is only about committed txns.
          REQUIRE((e.code() == ErrorCode::SnapshotTooOld ||
                   e.code() == ErrorCode::StaleRead));
        }
      }
    }
  }
}

TEST_CASE("run_idempotent executes once per key") {
  Cluster c;
  auto [mount, transport] = c.mount();
  int executions = 0;
  auto work = [&](Txn& txn) {
    const int fd = txn.open("/out", kOpenCreate | kOpenWrite);
    txn.pwrite(fd, bytes_of("result"), 0);
    ++executions;
  };

  CHECK(run_idempotent(*mount, "req-1", work) == IdempotentOutcome::Executed);
  CHECK(executions == 1);
  CHECK(run_idempotent(*mount, "req-1", work) == IdempotentOutcome::Skipped);
  CHECK(executions == 1);
  CHECK(run_idempotent(*mount, "req-2", work) == IdempotentOutcome::Executed);
  CHECK(executions == 2);

  // A crash between work and commit leaves no effects; the retry runs once.
  struct Crash {};
  int attempts = 0;
  auto crashy = [&](Txn& txn) {
    const int fd = txn.open("/crash-out", kOpenCreate | kOpenWrite);
    txn.pwrite(fd, bytes_of("x"), 0);
    if (++attempts == 1) throw Crash{};
  };
  CHECK_THROWS_AS(run_idempotent(*mount, "req-3", crashy), Crash);
  {
    Txn probe = mount->begin();
    CHECK_THROWS_AS((void)probe.stat("/crash-out"), FsError);  // nothing committed
    probe.commit();
  }
  CHECK(run_idempotent(*mount, "req-3", crashy) == IdempotentOutcome::Executed);
  CHECK(attempts == 2);
  CHECK(run_idempotent(*mount, "req-3", crashy) == IdempotentOutcome::Skipped);
  CHECK(attempts == 2);
}

TEST_CASE("client over TCP behaves like embedded") {
  BackendConfig bc;
  bc.mode = VersioningMode::BlockMultiversioned;
  bc.block_size = 1024;
  Backend backend(bc);
  TcpServer server(backend);
  server.start("127.0.0.1", 0);
  std::thread serve_thread([&server] { server.serve(); });

  {
    MountConfig mc;
    mc.policy = CachePolicy::UpdateAll;
    Mount mount(std::shared_ptr<Transport>(
                    TcpTransport::connect("127.0.0.1", server.port())),
                mc);

    Txn txn = mount.begin();
    const int fd = txn.open("/remote", kOpenCreate | kOpenRead | kOpenWrite);
    txn.pwrite(fd, bytes_of("over the wire"), 0);
    auto bytes = txn.pread(fd, 13, 0);
    CHECK(bytes == bytes_of("over the wire"));
    REQUIRE(txn.commit().committed);

    Txn check = mount.begin();
    CHECK(check.stat("/remote").length == 13);
    check.commit();
  }

  server.stop();
  serve_thread.join();
}

TEST_CASE("plain begin without a feed request") {
  Cluster c;
  make_file(*c.backend, "/f", "x");
  wire::Message resp =
      dispatch(*c.backend, wire::Message{wire::Kind::Begin, nlohmann::json::object()});
  REQUIRE(resp.kind == wire::Kind::Ok);
  CHECK(resp.fields.at("read_ts").get<Timestamp>() ==
        c.backend->current_read_timestamp());
  CHECK_FALSE(resp.fields.contains("batch"));
}

TEST_CASE("footprint covers every byte returned and every length answer") {
  Cluster c(VersioningMode::BlockMultiversioned, 64);
  make_file(*c.backend, "/f", std::string(300, 'd'));
  auto [mount, transport] = c.mount();
  std::mt19937_64 rng(77);

  for (int round = 0; round < 30; ++round) {
    Txn txn = mount->begin();
    const int fd = txn.open("/f", kOpenRead | kOpenWrite);

    struct ReadDone {
      std::uint64_t offset;
      std::uint64_t returned;
      std::uint64_t requested;
    };
    std::vector<ReadDone> reads;
    for (int step = 0; step < 12; ++step) {
      if (rng() % 3 == 0) {
        std::vector<std::uint8_t> data(1 + rng() % 40);
        for (auto& d : data) d = static_cast<std::uint8_t>(rng());
        txn.pwrite(fd, data, rng() % 350);
      } else {
        const std::uint64_t off = rng() % 400;
        const std::uint64_t len = 1 + rng() % 80;
        auto got = txn.pread(fd, len, off);
        reads.push_back({off, got.size(), len});
      }
    }

    CommitRequest req = txn.build_request_for_test();
    std::set<BlockRef> read_blocks;
    for (const auto& e : req.read_set) read_blocks.insert(e.block);
    const FileId f = req.read_set.empty()
                         ? (req.write_set.empty() ? 0 : req.write_set[0].block.file_id)
                         : req.read_set[0].block.file_id;

    auto write_covers = [&](std::uint64_t pos) {
      for (const WriteRecord& w : req.write_set) {
        const std::uint64_t start = w.block.block_no * 64 + w.offset;
        if (pos >= start && pos < start + w.bytes.size()) return true;
      }
      return false;
    };
    auto bounded_above = [&](std::uint64_t pos) {
      // Zeros past the committed length are protected by an AtMost assertion
      // instead of a block read record.
      for (const LengthAssertion& a : req.assertions) {
        if (a.kind != LengthKind::AtLeast && a.length <= pos) return true;
      }
      return false;
    };

    for (const ReadDone& r : reads) {
      // Every byte returned is covered by the footprint: a read-set block, a
      // write-set range, or a length bound for synthesized zeros.
      for (std::uint64_t pos = r.offset; pos < r.offset + r.returned; ++pos) {
        const BlockRef ref{f, pos / 64};
        const bool covered =
            read_blocks.count(ref) || write_covers(pos) || bounded_above(pos);
        REQUIRE(covered);
      }
      // Length-dependent answers carry an assertion.
      if (r.returned < r.requested) {
        CHECK_FALSE(req.assertions.empty());
      }
    }
    txn.abort();
  }
}

TEST_CASE("rename of a directory carries its children") {
  Cluster c;
  auto [mount, transport] = c.mount();
  {
    Txn setup = mount->begin();
    setup.mkdir("/d");
    const int fd = setup.open("/d/f", kOpenCreate | kOpenWrite);
    setup.pwrite(fd, bytes_of("abc"), 0);
    REQUIRE(setup.commit().committed);
  }
  {
    Txn txn = mount->begin();
    txn.rename("/d", "/e");
    // The renamed directory's children resolve through the new prefix and
    // read their snapshot content.
    const int fd = txn.open("/e/f", kOpenRead);
    CHECK(txn.pread(fd, 3, 0) == bytes_of("abc"));
    auto entries = txn.read_dir("/e");
    REQUIRE(entries.size() == 1);
    CHECK(entries[0].name == "f");
    CHECK_THROWS_AS((void)txn.stat("/d/f"), FsError);
    REQUIRE(txn.commit().committed);
  }
  {
    Txn check = mount->begin();
    CHECK(check.stat("/e/f").length == 3);
    CHECK_THROWS_AS((void)check.stat("/d"), FsError);
    check.commit();
  }
}

TEST_CASE("own-created directory renamed in the same transaction") {
  Cluster c;
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  txn.mkdir("/tmp1");
  txn.close(txn.open("/tmp1/file", kOpenCreate | kOpenWrite));
  txn.rename("/tmp1", "/tmp2");
  CHECK(txn.stat("/tmp2/file").kind == FileKind::Regular);
  CHECK_THROWS_AS((void)txn.stat("/tmp1/file"), FsError);
  REQUIRE(txn.commit().committed);

  Txn check = mount->begin();
  CHECK(check.stat("/tmp2/file").kind == FileKind::Regular);
  check.commit();
}

TEST_CASE("directory unlink rules") {
  Cluster c;
  auto [mount, transport] = c.mount();
  {
    Txn setup = mount->begin();
    setup.mkdir("/full");
    setup.close(setup.open("/full/f", kOpenCreate | kOpenWrite));
    setup.mkdir("/empty");
    REQUIRE(setup.commit().committed);
  }
  {
    Txn txn = mount->begin();
    CHECK_THROWS_AS(txn.unlink("/full"), FsError);
    txn.unlink("/empty");
    txn.unlink("/full/f");
    txn.unlink("/full");  // now empty in the local view
    REQUIRE(txn.commit().committed);
  }
  {
    Txn check = mount->begin();
    CHECK(check.read_dir("/").empty());
    check.commit();
  }
}

TEST_CASE("ftruncate works through the descriptor") {
  Cluster c;
  make_file(*c.backend, "/f", std::string(100, 'x'));
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  const int ro = txn.open("/f", kOpenRead);
  CHECK_THROWS_AS(txn.ftruncate(ro, 10), FsError);
  const int rw = txn.open("/f", kOpenRead | kOpenWrite);
  txn.ftruncate(rw, 10);
  CHECK(txn.stat("/f").length == 10);
  REQUIRE(txn.commit().committed);
}

TEST_CASE("stat of the root directory") {
  Cluster c;
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  FileMeta root = txn.stat("/");
  CHECK(root.kind == FileKind::Directory);
  CHECK(root.file_id == kRootId);
  CHECK(root.length == 0);
  txn.commit();
}

TEST_CASE("append positions at the local end and advances") {
  Cluster c;
  make_file(*c.backend, "/f", "0123456789");
  auto [mount, transport] = c.mount();
  Txn txn = mount->begin();
  const int fd = txn.open("/f", kOpenRead | kOpenWrite | kOpenAppend);
  CHECK(txn.write(fd, bytes_of("AB")) == 2);
  CHECK(txn.seek(fd, 0, Whence::Cur) == 12);
  CHECK(txn.write(fd, bytes_of("C")) == 1);
  auto bytes = txn.pread(fd, 13, 0);
  CHECK(bytes == bytes_of("0123456789ABC"));
  // Appending from the committed length observed it.
  bool saw_exact = false;
  for (const auto& a : txn.raw_assertions()) {
    if (a.kind == LengthKind::Exactly && a.length == 10) saw_exact = true;
  }
  CHECK(saw_exact);
  txn.abort();
}

TEST_CASE("gc message over the wire prunes undo history") {
  Cluster c;
  const FileId f = make_file(*c.backend, "/f", std::string(32, 'x'));
  CommitRequest w1;
  w1.txn_read_ts = c.backend->current_read_timestamp();
  w1.write_set.push_back(wr(f, 0, 0, "v2"));
  const Timestamp t2 = c.backend->validate_and_commit(w1).commit_ts;
  CommitRequest w2;
  w2.txn_read_ts = c.backend->current_read_timestamp();
  w2.write_set.push_back(wr(f, 0, 0, "v3"));
  const Timestamp t3 = c.backend->validate_and_commit(w2).commit_ts;

  wire::Message resp = dispatch(
      *c.backend, wire::Message{wire::Kind::Gc, {{"retain_after", t3}}});
  REQUIRE(resp.kind == wire::Kind::Ok);
  CHECK(resp.fields.at("pruned").get<std::uint64_t>() > 0);
  CHECK_FALSE(c.backend->get_block(BlockRef{f, 0}, t2 - 1).ok);
  CHECK(c.backend->get_block(BlockRef{f, 0}, t3).ok);
}

TEST_CASE("one mount serves many concurrent transactions") {
  Cluster c(VersioningMode::BlockVersioned, 64);
  make_file(*c.backend, "/shared", std::string(8 * 64, 's'));
  auto [mount, transport] = c.mount();

  struct Committed {
    Timestamp tw;
    std::uint64_t block;
    std::vector<std::uint8_t> bytes;
  };
  std::mutex log_mu;
  std::vector<Committed> committed;

  constexpr int kThreads = 8;
  constexpr int kTxns = 60;
  std::vector<std::thread> threads;
  for (int t = 0; t < kThreads; ++t) {
    threads.emplace_back([&, t] {
      std::mt19937_64 rng(static_cast<std::uint64_t>(t) + 99);
      for (int i = 0; i < kTxns; ++i) {
        try {
          Txn txn = mount->begin();
          const int fd = txn.open("/shared", kOpenRead | kOpenWrite);
          (void)txn.pread(fd, 64, (rng() % 8) * 64);
          const std::uint64_t wb = rng() % 8;
          std::vector<std::uint8_t> payload(64);
          for (auto& b : payload) b = static_cast<std::uint8_t>(rng());
          txn.pwrite(fd, payload, wb * 64);
          CommitResult r = txn.commit();
          if (r.committed) {
            std::lock_guard<std::mutex> g(log_mu);
            committed.push_back({r.commit_ts, wb, std::move(payload)});
          }
        } catch (const FsError& e) {
          REQUIRE((e.code() == ErrorCode::SnapshotTooOld ||
                   e.code() == ErrorCode::StaleRead));
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  REQUIRE_FALSE(committed.empty());

  // Every block must hold its last committed writer's payload.
  std::map<std::uint64_t, const Committed*> last;
  for (const Committed& e : committed) {
    auto [it, fresh] = last.emplace(e.block, &e);
    if (!fresh && e.tw > it->second->tw) it->second = &e;
  }
  Txn check = mount->begin();
  const int fd = check.open("/shared", kOpenRead);
  for (const auto& [block, winner] : last) {
    CHECK(check.pread(fd, 64, block * 64) == winner->bytes);
  }
  check.commit();
}
