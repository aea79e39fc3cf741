#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "txfs/backend.hpp"
#include "txfs/types.hpp"

namespace txfs::wire {

// Message kinds. Requests mirror the backend operations; "ok"/"err" are the
// response kinds. One request gets exactly one response, in order.
enum class Kind {
  Begin,
  GetBlock,
  GetMeta,
  ListDir,
  Commit,
  Feed,
  Gc,
  Dump,
  Ok,
  Err,
};

const char* to_string(Kind kind);
bool kind_from_string(const std::string& s, Kind& out);

struct Message {
  Kind kind = Kind::Begin;
  nlohmann::json fields = nlohmann::json::object();  // everything except "t"

  bool operator==(const Message& other) const {
    return kind == other.kind && fields == other.fields;
  }
};

// A frame is a 4-byte big-endian length followed by that many bytes of UTF-8
// JSON. Keys serialize in lexicographic order, so encodings are byte-stable.
std::vector<std::uint8_t> encode(const Message& msg);

struct DecodeResult {
  enum class Status { Ok, Incomplete, Malformed };
  Status status = Status::Incomplete;
  Message message;
  size_t consumed = 0;  // bytes of the input the frame used (Ok only)
  std::string error;
};

// Decodes one frame from the front of `bytes`. Trailing bytes belong to the
// next frame. Malformed means the connection must be closed.
DecodeResult decode(const std::uint8_t* bytes, size_t len);

std::string base64_encode(const std::vector<std::uint8_t>& data);
std::optional<std::vector<std::uint8_t>> base64_decode(const std::string& text);

// JSON helpers for the structured payloads carried inside messages.
nlohmann::json commit_request_to_json(const CommitRequest& req);
std::optional<CommitRequest> commit_request_from_json(const nlohmann::json& j);
nlohmann::json batch_to_json(const CacheUpdateBatch& batch);
std::optional<CacheUpdateBatch> batch_from_json(const nlohmann::json& j);
nlohmann::json meta_to_json(const FileMeta& meta);
std::optional<FileMeta> meta_from_json(const nlohmann::json& j);

Message ok_response(nlohmann::json fields = nlohmann::json::object());
Message err_response(ErrorCode code, const std::string& detail = "");

}  // namespace txfs::wire
