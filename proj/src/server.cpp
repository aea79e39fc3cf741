#include "txfs/server.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "txfs/path.hpp"

namespace txfs {

using json = nlohmann::json;
using wire::Kind;
using wire::Message;

namespace {

Message handle_begin(Backend& backend, const json& f) {
  json out;
  out["mode"] = to_string(backend.config().mode);
  out["block_size"] = backend.config().block_size;
  if (f.contains("policy")) {
    CachePolicy policy;
    if (!policy_from_string(f.at("policy").get<std::string>(), policy)) {
      return wire::err_response(ErrorCode::Malformed, "bad policy");
    }
    const Timestamp since = f.value("since", Timestamp{0});
    auto [read_ts, batch] = backend.begin_txn(since, policy);
    out["read_ts"] = read_ts;
    out["batch"] = wire::batch_to_json(batch);
  } else {
    out["read_ts"] = backend.current_read_timestamp();
  }
  return wire::ok_response(std::move(out));
}

Message handle_get_block(Backend& backend, const json& f) {
  const BlockRef ref{f.at("f").get<FileId>(), f.at("b").get<std::uint64_t>()};
  const Timestamp at = f.at("at").get<Timestamp>();
  GetBlockResult r = backend.get_block(ref, at);
  if (!r.ok) return wire::err_response(ErrorCode::SnapshotTooOld);
  json out;
  out["bytes"] = wire::base64_encode(r.bytes);
  out["ts"] = r.write_ts;
  return wire::ok_response(std::move(out));
}

Message handle_get_meta(Backend& backend, const json& f) {
  const Timestamp at = f.at("at").get<Timestamp>();
  GetMetaResult r;
  if (f.contains("path")) {
    const std::string path = f.at("path").get<std::string>();
    if (!is_valid_path(path)) return wire::err_response(ErrorCode::InvalidPath);
    r = backend.get_meta_by_path(path, at);
  } else {
    r = backend.get_meta_by_id(f.at("id").get<FileId>(), at);
  }
  switch (r.status) {
    case GetMetaResult::Status::SnapshotTooOld:
      return wire::err_response(ErrorCode::SnapshotTooOld);
    case GetMetaResult::Status::Absent:
      return wire::ok_response({{"absent", true}});
    case GetMetaResult::Status::Ok:
      break;
  }
  return wire::ok_response({{"meta", wire::meta_to_json(r.meta)}});
}

Message handle_list_dir(Backend& backend, const json& f) {
  const std::string path = f.at("path").get<std::string>();
  if (!is_valid_path(path)) return wire::err_response(ErrorCode::InvalidPath);
  const Timestamp at = f.at("at").get<Timestamp>();
  ListDirResult r = backend.list_dir(path, at);
  switch (r.status) {
    case ListDirResult::Status::SnapshotTooOld:
      return wire::err_response(ErrorCode::SnapshotTooOld);
    case ListDirResult::Status::Absent:
      return wire::err_response(ErrorCode::NotFound);
    case ListDirResult::Status::NotADirectory:
      return wire::err_response(ErrorCode::NotADirectory);
    case ListDirResult::Status::Ok:
      break;
  }
  json entries = json::array();
  for (const DirEntry& e : r.entries) {
    entries.push_back({{"name", e.name}, {"id", e.file_id}, {"kind", to_string(e.kind)}});
  }
  return wire::ok_response({{"entries", std::move(entries)}});
}

Message handle_commit(Backend& backend, const json& f) {
  auto req = wire::commit_request_from_json(f.at("req"));
  if (!req) return wire::err_response(ErrorCode::Malformed, "bad commit request");
  CommitResult r = backend.validate_and_commit(*req);
  json out;
  out["committed"] = r.committed;
  if (r.committed) {
    out["tw"] = r.commit_ts;
  } else {
    out["reason"] = to_string(r.abort.reason);
    switch (r.abort.reason) {
      case ErrorCode::StaleRead:
      case ErrorCode::SnapshotTooOld:
        out["f"] = r.abort.block.file_id;
        out["b"] = r.abort.block.block_no;
        if (!r.abort.path.empty()) out["path"] = r.abort.path;
        break;
      case ErrorCode::NamespaceConflict:
        out["path"] = r.abort.path;
        break;
      case ErrorCode::LengthViolation:
        out["file"] = r.abort.file_id;
        break;
      default:
        break;
    }
  }
  return wire::ok_response(std::move(out));
}

Message handle_feed(Backend& backend, const json& f) {
  CachePolicy policy;
  if (!policy_from_string(f.at("policy").get<std::string>(), policy)) {
    return wire::err_response(ErrorCode::Malformed, "bad policy");
  }
  const Timestamp since = f.at("since").get<Timestamp>();
  return wire::ok_response(
      {{"batch", wire::batch_to_json(backend.cache_feed(since, policy))}});
}

}  // namespace

Message dispatch(Backend& backend, const Message& req) {
  try {
    switch (req.kind) {
      case Kind::Begin:
        return handle_begin(backend, req.fields);
      case Kind::GetBlock:
        return handle_get_block(backend, req.fields);
      case Kind::GetMeta:
        return handle_get_meta(backend, req.fields);
      case Kind::ListDir:
        return handle_list_dir(backend, req.fields);
      case Kind::Commit:
        return handle_commit(backend, req.fields);
      case Kind::Feed:
        return handle_feed(backend, req.fields);
      case Kind::Gc: {
        const Timestamp retain = req.fields.at("retain_after").get<Timestamp>();
        return wire::ok_response({{"pruned", backend.gc_undo(retain)}});
      }
      case Kind::Dump:
        return wire::ok_response({{"snapshot", json::parse(backend.dump())}});
      case Kind::Ok:
      case Kind::Err:
        return wire::err_response(ErrorCode::Malformed, "response kind as request");
    }
  } catch (const json::exception& e) {
    return wire::err_response(ErrorCode::Malformed, e.what());
  } catch (const FsError& e) {
    return wire::err_response(e.code(), e.what());
  }
  return wire::err_response(ErrorCode::Malformed, "unhandled message");
}

// ---------------------------------------------------------------------------

TcpServer::~TcpServer() { stop(); }

void TcpServer::start(const std::string& host, std::uint16_t port) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) {
    throw FsError(ErrorCode::Transport, "socket: " + std::string(strerror(errno)));
  }
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw FsError(ErrorCode::Transport, "bad listen address: " + host);
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    const std::string err = strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw FsError(ErrorCode::Transport, "bind " + host + ": " + err);
  }
  if (::listen(listen_fd_, 128) != 0) {
    const std::string err = strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw FsError(ErrorCode::Transport, "listen: " + err);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

void TcpServer::serve() {
  std::vector<std::thread> workers;
  while (!stopping_.load()) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (stopping_.load()) break;
      if (errno == EINTR) continue;
      break;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    {
      std::lock_guard<std::mutex> g(mu_);
      conn_fds_.insert(fd);
    }
    workers.emplace_back([this, fd] { handle_connection(fd); });
  }
  for (auto& t : workers) {
    if (t.joinable()) t.join();
  }
}

void TcpServer::stop() {
  if (stopping_.exchange(true)) return;
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  std::lock_guard<std::mutex> g(mu_);
  for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
}

void TcpServer::handle_connection(int fd) {
  std::vector<std::uint8_t> buf;
  std::uint8_t chunk[16 * 1024];
  bool open = true;
  while (open) {
    const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
    if (n <= 0) break;
    buf.insert(buf.end(), chunk, chunk + n);

    size_t off = 0;
    while (open) {
      auto d = wire::decode(buf.data() + off, buf.size() - off);
      if (d.status == wire::DecodeResult::Status::Incomplete) break;
      if (d.status == wire::DecodeResult::Status::Malformed) {
        auto resp = wire::encode(wire::err_response(ErrorCode::Malformed, d.error));
        ::send(fd, resp.data(), resp.size(), MSG_NOSIGNAL);
        open = false;  // protocol broken: close
        break;
      }
      off += d.consumed;
      Message resp = dispatch(backend_, d.message);
      auto encoded = wire::encode(resp);
      size_t sent = 0;
      while (sent < encoded.size()) {
        const ssize_t m =
            ::send(fd, encoded.data() + sent, encoded.size() - sent, MSG_NOSIGNAL);
        if (m <= 0) {
          open = false;
          break;
        }
        sent += static_cast<size_t>(m);
      }
      if (resp.kind == Kind::Err &&
          resp.fields.value("reason", "") == to_string(ErrorCode::Malformed)) {
        open = false;
      }
    }
    if (off > 0) buf.erase(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(off));
  }
  // Leave the set before closing: stop() must never shut down a reused fd.
  {
    std::lock_guard<std::mutex> g(mu_);
    conn_fds_.erase(fd);
  }
  ::close(fd);
}

}  // namespace txfs
