#include "txfs/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "txfs/server.hpp"

namespace txfs {

wire::Message EmbeddedTransport::do_roundtrip(const wire::Message& req) {
  return dispatch(*backend_, req);
}

std::unique_ptr<TcpTransport> TcpTransport::connect(const std::string& host,
                                                    std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string service = std::to_string(port);
  if (::getaddrinfo(host.c_str(), service.c_str(), &hints, &res) != 0 || !res) {
    throw FsError(ErrorCode::Transport, "cannot resolve " + host);
  }
  int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(res);
    throw FsError(ErrorCode::Transport, "socket: " + std::string(strerror(errno)));
  }
  if (::connect(fd, res->ai_addr, res->ai_addrlen) != 0) {
    const std::string err = strerror(errno);
    ::freeaddrinfo(res);
    ::close(fd);
    throw FsError(ErrorCode::Transport, "connect " + host + ":" + service + ": " + err);
  }
  ::freeaddrinfo(res);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return std::unique_ptr<TcpTransport>(new TcpTransport(fd));
}

TcpTransport::~TcpTransport() {
  if (fd_ >= 0) ::close(fd_);
}

wire::Message TcpTransport::do_roundtrip(const wire::Message& req) {
  const auto encoded = wire::encode(req);
  size_t sent = 0;
  while (sent < encoded.size()) {
    const ssize_t n =
        ::send(fd_, encoded.data() + sent, encoded.size() - sent, MSG_NOSIGNAL);
    if (n <= 0) throw FsError(ErrorCode::Transport, "send failed");
    sent += static_cast<size_t>(n);
  }
  std::uint8_t chunk[16 * 1024];
  while (true) {
    auto d = wire::decode(rxbuf_.data(), rxbuf_.size());
    if (d.status == wire::DecodeResult::Status::Ok) {
      rxbuf_.erase(rxbuf_.begin(), rxbuf_.begin() + static_cast<std::ptrdiff_t>(d.consumed));
      return d.message;
    }
    if (d.status == wire::DecodeResult::Status::Malformed) {
      throw FsError(ErrorCode::Transport, "malformed response frame");
    }
    const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
    if (n <= 0) throw FsError(ErrorCode::Transport, "connection closed");
    rxbuf_.insert(rxbuf_.end(), chunk, chunk + n);
  }
}

}  // namespace txfs
