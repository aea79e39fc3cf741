#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "txfs/backend.hpp"
#include "txfs/wire.hpp"

namespace txfs {

// One request, one response, strictly ordered per connection: round trips are
// serialized, so concurrent transactions on one mount share safely. The call
// log exists so tests can assert which message kinds a transaction produced
// (e.g. no mutations before commit, no lock traffic ever).
class Transport {
 public:
  virtual ~Transport() = default;

  wire::Message roundtrip(const wire::Message& req) {
    std::lock_guard<std::mutex> g(mu_);
    log_.push_back(req.kind);
    return do_roundtrip(req);
  }

  std::vector<wire::Kind> call_log() const {
    std::lock_guard<std::mutex> g(mu_);
    return log_;
  }
  void reset_call_log() {
    std::lock_guard<std::mutex> g(mu_);
    log_.clear();
  }

 protected:
  virtual wire::Message do_roundtrip(const wire::Message& req) = 0;

 private:
  mutable std::mutex mu_;
  std::vector<wire::Kind> log_;
};

// In-process transport: dispatches directly against a shared backend.
class EmbeddedTransport : public Transport {
 public:
  explicit EmbeddedTransport(std::shared_ptr<Backend> backend)
      : backend_(std::move(backend)) {}

  Backend& backend() { return *backend_; }

 protected:
  wire::Message do_roundtrip(const wire::Message& req) override;

 private:
  std::shared_ptr<Backend> backend_;
};

// Framed messages over a TCP connection.
class TcpTransport : public Transport {
 public:
  // Throws FsError(Transport) if the connection cannot be established.
  static std::unique_ptr<TcpTransport> connect(const std::string& host,
                                               std::uint16_t port);
  ~TcpTransport() override;

  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

 protected:
  wire::Message do_roundtrip(const wire::Message& req) override;

 private:
  explicit TcpTransport(int fd) : fd_(fd) {}
  int fd_ = -1;
  std::vector<std::uint8_t> rxbuf_;
};

}  // namespace txfs
