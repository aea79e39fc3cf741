#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "txfs/backend.hpp"
#include "txfs/wire.hpp"

namespace txfs {

// Handles one request message against the backend. Shared by the TCP server
// and the embedded transport.
wire::Message dispatch(Backend& backend, const wire::Message& req);

class TcpServer {
 public:
  explicit TcpServer(Backend& backend) : backend_(backend) {}
  ~TcpServer();

  // Binds and listens; throws FsError(Transport) on failure. Pass port 0 to
  // pick a free port.
  void start(const std::string& host, std::uint16_t port);
  std::uint16_t port() const { return port_; }

  // Accepts connections until stop() is called, one thread per connection,
  // and joins its workers before returning. stop() may be called from any
  // thread; the caller must let serve() return before destroying the server.
  void serve();
  void stop();

 private:
  void handle_connection(int fd);

  Backend& backend_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::set<int> conn_fds_;  // connections not yet closed by their handler
};

}  // namespace txfs
