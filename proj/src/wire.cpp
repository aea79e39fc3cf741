#include "txfs/wire.hpp"

#include <array>
#include <cstring>

namespace txfs::wire {

using json = nlohmann::json;

const char* to_string(Kind kind) {
  switch (kind) {
    case Kind::Begin: return "begin";
    case Kind::GetBlock: return "get_block";
    case Kind::GetMeta: return "get_meta";
    case Kind::ListDir: return "list_dir";
    case Kind::Commit: return "commit";
    case Kind::Feed: return "feed";
    case Kind::Gc: return "gc";
    case Kind::Dump: return "dump";
    case Kind::Ok: return "ok";
    case Kind::Err: return "err";
  }
  return "unknown";
}

bool kind_from_string(const std::string& s, Kind& out) {
  static const Kind all[] = {Kind::Begin, Kind::GetBlock, Kind::GetMeta,
                             Kind::ListDir, Kind::Commit, Kind::Feed,
                             Kind::Gc,     Kind::Dump,    Kind::Ok,
                             Kind::Err};
  for (Kind k : all) {
    if (s == to_string(k)) {
      out = k;
      return true;
    }
  }
  return false;
}

std::vector<std::uint8_t> encode(const Message& msg) {
  json body = msg.fields;
  body["t"] = to_string(msg.kind);
  const std::string text = body.dump();  // std::map keys: lexicographic order

  std::vector<std::uint8_t> out;
  out.reserve(4 + text.size());
  const std::uint32_t n = static_cast<std::uint32_t>(text.size());
  out.push_back(static_cast<std::uint8_t>(n >> 24));
  out.push_back(static_cast<std::uint8_t>(n >> 16));
  out.push_back(static_cast<std::uint8_t>(n >> 8));
  out.push_back(static_cast<std::uint8_t>(n));
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

DecodeResult decode(const std::uint8_t* bytes, size_t len) {
  DecodeResult r;
  if (len < 4) return r;  // Incomplete
  const std::uint32_t n = (std::uint32_t{bytes[0]} << 24) |
                          (std::uint32_t{bytes[1]} << 16) |
                          (std::uint32_t{bytes[2]} << 8) | std::uint32_t{bytes[3]};
  if (len < 4 + static_cast<size_t>(n)) return r;  // Incomplete

  json body = json::parse(bytes + 4, bytes + 4 + n, nullptr,
                          /*allow_exceptions=*/false);
  if (body.is_discarded() || !body.is_object()) {
    r.status = DecodeResult::Status::Malformed;
    r.error = "body is not a JSON object";
    return r;
  }
  auto t = body.find("t");
  if (t == body.end() || !t->is_string()) {
    r.status = DecodeResult::Status::Malformed;
    r.error = "missing message kind";
    return r;
  }
  Kind kind;
  if (!kind_from_string(t->get<std::string>(), kind)) {
    r.status = DecodeResult::Status::Malformed;
    r.error = "unknown kind: " + t->get<std::string>();
    return r;
  }
  body.erase("t");
  r.status = DecodeResult::Status::Ok;
  r.message = Message{kind, std::move(body)};
  r.consumed = 4 + n;
  return r;
}

static const char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const std::vector<std::uint8_t>& data) {
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 3 <= data.size(); i += 3) {
    const std::uint32_t v = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(kB64Alphabet[(v >> 6) & 63]);
    out.push_back(kB64Alphabet[v & 63]);
  }
  if (i + 1 == data.size()) {
    const std::uint32_t v = data[i] << 16;
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (i + 2 == data.size()) {
    const std::uint32_t v = (data[i] << 16) | (data[i + 1] << 8);
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(kB64Alphabet[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::optional<std::vector<std::uint8_t>> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) return std::nullopt;
  std::array<std::int8_t, 256> rev;
  rev.fill(-1);
  for (int i = 0; i < 64; ++i) rev[static_cast<unsigned char>(kB64Alphabet[i])] = static_cast<std::int8_t>(i);

  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    int pad = 0;
    std::uint32_t v = 0;
    for (size_t j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=') {
        if (i + 4 != text.size() || j < 2) return std::nullopt;
        ++pad;
        v <<= 6;
        continue;
      }
      if (pad > 0) return std::nullopt;  // data after padding
      const std::int8_t d = rev[static_cast<unsigned char>(c)];
      if (d < 0) return std::nullopt;
      v = (v << 6) | static_cast<std::uint32_t>(d);
    }
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(v >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structured payloads

json commit_request_to_json(const CommitRequest& req) {
  json j;
  j["read_ts"] = req.txn_read_ts;
  json reads = json::array();
  for (const ReadSetEntry& e : req.read_set) {
    reads.push_back({{"f", e.block.file_id}, {"b", e.block.block_no}, {"ts", e.read_ts}});
  }
  j["reads"] = std::move(reads);
  json writes = json::array();
  for (const WriteRecord& w : req.write_set) {
    writes.push_back({{"f", w.block.file_id},
                      {"b", w.block.block_no},
                      {"off", w.offset},
                      {"data", base64_encode(w.bytes)}});
  }
  j["writes"] = std::move(writes);
  json metas = json::array();
  for (const MetaRead& m : req.meta_reads) {
    json e{{"path", m.path}, {"ts", m.read_ts}};
    if (m.file_id) e["id"] = *m.file_id;
    metas.push_back(std::move(e));
  }
  j["meta_reads"] = std::move(metas);
  json ops = json::array();
  for (const MetaOp& op : req.meta_ops) {
    json e;
    switch (op.kind) {
      case MetaOp::Kind::Create:
        e = {{"op", "create"}, {"path", op.path}, {"id", op.file_id}, {"mode", op.mode}};
        break;
      case MetaOp::Kind::Mkdir:
        e = {{"op", "mkdir"}, {"path", op.path}, {"id", op.file_id}, {"mode", op.mode}};
        break;
      case MetaOp::Kind::Unlink:
        e = {{"op", "unlink"}, {"path", op.path}};
        break;
      case MetaOp::Kind::Rename:
        e = {{"op", "rename"}, {"path", op.path}, {"to", op.path2}};
        break;
      case MetaOp::Kind::SetLength:
        e = {{"op", "set_length"}, {"id", op.file_id}, {"len", op.length}, {"exact", op.exact}};
        break;
    }
    ops.push_back(std::move(e));
  }
  j["meta_ops"] = std::move(ops);
  json asserts = json::array();
  for (const LengthAssertion& a : req.assertions) {
    const char* kind = a.kind == LengthKind::AtLeast ? "at_least"
                     : a.kind == LengthKind::AtMost  ? "at_most"
                                                     : "exactly";
    asserts.push_back({{"f", a.file_id}, {"kind", kind}, {"len", a.length}});
  }
  j["asserts"] = std::move(asserts);
  return j;
}

std::optional<CommitRequest> commit_request_from_json(const json& j) {
  if (!j.is_object()) return std::nullopt;
  CommitRequest req;
  try {
    req.txn_read_ts = j.at("read_ts").get<Timestamp>();
    for (const json& e : j.at("reads")) {
      req.read_set.push_back(
          {BlockRef{e.at("f").get<FileId>(), e.at("b").get<std::uint64_t>()},
           e.at("ts").get<Timestamp>()});
    }
    for (const json& e : j.at("writes")) {
      auto bytes = base64_decode(e.at("data").get<std::string>());
      if (!bytes) return std::nullopt;
      req.write_set.push_back(
          {BlockRef{e.at("f").get<FileId>(), e.at("b").get<std::uint64_t>()},
           e.at("off").get<std::uint32_t>(), std::move(*bytes)});
    }
    for (const json& e : j.at("meta_reads")) {
      MetaRead m;
      m.path = e.at("path").get<std::string>();
      m.read_ts = e.at("ts").get<Timestamp>();
      if (e.contains("id")) m.file_id = e.at("id").get<FileId>();
      req.meta_reads.push_back(std::move(m));
    }
    for (const json& e : j.at("meta_ops")) {
      MetaOp op;
      const std::string name = e.at("op").get<std::string>();
      if (name == "create" || name == "mkdir") {
        op.kind = name == "create" ? MetaOp::Kind::Create : MetaOp::Kind::Mkdir;
        op.path = e.at("path").get<std::string>();
        op.file_id = e.at("id").get<FileId>();
        op.mode = e.at("mode").get<std::uint32_t>();
      } else if (name == "unlink") {
        op.kind = MetaOp::Kind::Unlink;
        op.path = e.at("path").get<std::string>();
      } else if (name == "rename") {
        op.kind = MetaOp::Kind::Rename;
        op.path = e.at("path").get<std::string>();
        op.path2 = e.at("to").get<std::string>();
      } else if (name == "set_length") {
        op.kind = MetaOp::Kind::SetLength;
        op.file_id = e.at("id").get<FileId>();
        op.length = e.at("len").get<std::uint64_t>();
        op.exact = e.at("exact").get<bool>();
      } else {
        return std::nullopt;
      }
      req.meta_ops.push_back(std::move(op));
    }
    for (const json& e : j.at("asserts")) {
      LengthAssertion a;
      a.file_id = e.at("f").get<FileId>();
      const std::string kind = e.at("kind").get<std::string>();
      if (kind == "at_least") a.kind = LengthKind::AtLeast;
      else if (kind == "at_most") a.kind = LengthKind::AtMost;
      else if (kind == "exactly") a.kind = LengthKind::Exactly;
      else return std::nullopt;
      a.length = e.at("len").get<std::uint64_t>();
      req.assertions.push_back(a);
    }
  } catch (const json::exception&) {
    return std::nullopt;
  }
  return req;
}

json batch_to_json(const CacheUpdateBatch& batch) {
  json j;
  j["upto"] = batch.upto_ts;
  json items = json::array();
  for (const CacheUpdateItem& item : batch.items) {
    json e;
    switch (item.kind) {
      case CacheUpdateItem::Kind::BlockData:
        e = {{"k", "data"},
             {"f", item.block.file_id},
             {"b", item.block.block_no},
             {"bytes", base64_encode(item.bytes)},
             {"ts", item.write_ts}};
        break;
      case CacheUpdateItem::Kind::BlockInvalidate:
        e = {{"k", "inv"}, {"f", item.block.file_id}, {"b", item.block.block_no}};
        break;
      case CacheUpdateItem::Kind::FileInvalidate:
        e = {{"k", "finv"}, {"f", item.file_id}};
        break;
      case CacheUpdateItem::Kind::MetaUpdate:
        e = {{"k", "meta"}, {"meta", meta_to_json(item.meta)}};
        break;
    }
    items.push_back(std::move(e));
  }
  j["items"] = std::move(items);
  return j;
}

std::optional<CacheUpdateBatch> batch_from_json(const json& j) {
  if (!j.is_object()) return std::nullopt;
  CacheUpdateBatch batch;
  try {
    batch.upto_ts = j.at("upto").get<Timestamp>();
    for (const json& e : j.at("items")) {
      CacheUpdateItem item;
      const std::string k = e.at("k").get<std::string>();
      if (k == "data") {
        item.kind = CacheUpdateItem::Kind::BlockData;
        item.block = {e.at("f").get<FileId>(), e.at("b").get<std::uint64_t>()};
        auto bytes = base64_decode(e.at("bytes").get<std::string>());
        if (!bytes) return std::nullopt;
        item.bytes = std::move(*bytes);
        item.write_ts = e.at("ts").get<Timestamp>();
      } else if (k == "inv") {
        item.kind = CacheUpdateItem::Kind::BlockInvalidate;
        item.block = {e.at("f").get<FileId>(), e.at("b").get<std::uint64_t>()};
      } else if (k == "finv") {
        item.kind = CacheUpdateItem::Kind::FileInvalidate;
        item.file_id = e.at("f").get<FileId>();
      } else if (k == "meta") {
        item.kind = CacheUpdateItem::Kind::MetaUpdate;
        auto meta = meta_from_json(e.at("meta"));
        if (!meta) return std::nullopt;
        item.meta = *meta;
      } else {
        return std::nullopt;
      }
      batch.items.push_back(std::move(item));
    }
  } catch (const json::exception&) {
    return std::nullopt;
  }
  return batch;
}

json meta_to_json(const FileMeta& meta) {
  return {{"id", meta.file_id},
          {"len", meta.length},
          {"mode", meta.mode},
          {"kind", txfs::to_string(meta.kind)},
          {"ver", meta.meta_version}};
}

std::optional<FileMeta> meta_from_json(const json& j) {
  if (!j.is_object()) return std::nullopt;
  FileMeta meta;
  try {
    meta.file_id = j.at("id").get<FileId>();
    meta.length = j.at("len").get<std::uint64_t>();
    meta.mode = j.at("mode").get<std::uint32_t>();
    if (!kind_from_string(j.at("kind").get<std::string>(), meta.kind)) {
      return std::nullopt;
    }
    meta.meta_version = j.at("ver").get<Timestamp>();
  } catch (const json::exception&) {
    return std::nullopt;
  }
  return meta;
}

Message ok_response(json fields) { return Message{Kind::Ok, std::move(fields)}; }

Message err_response(ErrorCode code, const std::string& detail) {
  json fields{{"reason", txfs::to_string(code)}};
  if (!detail.empty()) fields["detail"] = detail;
  return Message{Kind::Err, std::move(fields)};
}

}  // namespace txfs::wire
