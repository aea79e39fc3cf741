// txfs command line: run a backend, run benchmarks, check histories, dump
// backend state. Exit codes: 0 success, 1 operational error, 2 correctness
// violation.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "txfs/backend.hpp"
#include "txfs/client.hpp"
#include "txfs/harness.hpp"
#include "txfs/server.hpp"
#include "txfs/transport.hpp"
#include "txfs/wire.hpp"

namespace {

using json = nlohmann::json;
using namespace txfs;

TcpServer* g_server = nullptr;

bool parse_endpoint(const std::string& s, std::string& host, std::uint16_t& port) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) return false;
  host = s.substr(0, colon);
  try {
    const int p = std::stoi(s.substr(colon + 1));
    if (p < 0 || p > 65535) return false;
    port = static_cast<std::uint16_t>(p);
  } catch (...) {
    return false;
  }
  return !host.empty();
}

int cmd_serve(const std::string& listen, const std::string& mode_name,
              std::uint32_t block_size, std::uint64_t undo_window,
              double freq_fraction) {
  std::string host;
  std::uint16_t port = 0;
  if (!parse_endpoint(listen, host, port)) {
    std::cerr << "bad --listen address: " << listen << "\n";
    return 1;
  }
  BackendConfig config;
  if (!mode_from_string(mode_name, config.mode)) {
    std::cerr << "unknown mode: " << mode_name << " (file|block|block-mv)\n";
    return 1;
  }
  config.block_size = block_size;
  config.undo_window = undo_window;
  config.frequency_fraction = freq_fraction;

  Backend backend(config);
  TcpServer server(backend);
  try {
    server.start(host, port);
  } catch (const FsError& e) {
    std::cerr << "serve: " << e.what() << "\n";
    return 1;
  }
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::cout << "listening on " << host << ":" << server.port() << " mode="
            << to_string(config.mode) << " block_size=" << config.block_size
            << std::endl;
  server.serve();
  return 0;
}

int write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) {
    std::cerr << "cannot write " << path << "\n";
    return 1;
  }
  out << content;
  return 0;
}

int cmd_bench(const WorkloadConfig& base, bool embedded, const std::string& connect,
              bool do_compare, std::uint64_t undo_window, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);

  BackendConfig bc;
  bc.block_size = base.block_size;
  bc.undo_window = undo_window;
  bc.mode = base.mode;

  auto make_transports = [&](std::shared_ptr<Backend> backend) -> TransportFactory {
    if (embedded) {
      return [backend] { return std::make_shared<EmbeddedTransport>(backend); };
    }
    std::string host;
    std::uint16_t port = 0;
    if (!parse_endpoint(connect, host, port)) {
      throw FsError(ErrorCode::Transport, "bad --connect address: " + connect);
    }
    return [host, port] {
      return std::shared_ptr<Transport>(TcpTransport::connect(host, port));
    };
  };

  try {
    if (do_compare) {
      if (!embedded) {
        std::cerr << "--compare-modes requires --embedded (fresh backend per mode)\n";
        return 1;
      }
      ModeComparison cmp = compare_modes(base, bc);
      json rows = json::array();
      bool all_valid = true;
      std::string witness;
      for (size_t i = 0; i < cmp.rows.size(); ++i) {
        rows.push_back({{"mode", to_string(cmp.rows[i].first)},
                        {"metrics", cmp.rows[i].second.to_json()}});
        CheckResult r = check_strict_serializability(cmp.histories[i]);
        if (!r.valid()) {
          all_valid = false;
          witness = r.witness;
        }
      }
      json metrics{{"config", base.to_json()}, {"modes", std::move(rows)}};
      if (write_file(out / "metrics.json", metrics.dump(2))) return 1;
      json hist = json::array();
      for (const History& h : cmp.histories) hist.push_back(h.to_json());
      if (write_file(out / "history.json", json{{"histories", hist}}.dump())) return 1;
      if (write_file(out / "plot.csv", comparison_to_csv(cmp, base.clients))) return 1;
      if (!all_valid) {
        std::cerr << "serializability violation: " << witness << "\n";
        return 2;
      }
      return 0;
    }

    auto backend = std::make_shared<Backend>(bc);
    auto [metrics, history] = run_workload(base, make_transports(backend));
    json m{{"config", base.to_json()}, {"metrics", metrics.to_json()}};
    if (write_file(out / "metrics.json", m.dump(2))) return 1;
    if (write_file(out / "history.json", history.to_json().dump())) return 1;
    std::string csv = "mode,clients,committed_per_sec,abort_rate\n";
    csv += std::string(to_string(base.mode)) + "," + std::to_string(base.clients) +
           "," + std::to_string(metrics.committed_per_sec) + "," +
           std::to_string(metrics.abort_rate) + "\n";
    if (write_file(out / "plot.csv", csv)) return 1;

    CheckResult r = check_strict_serializability(history);
    if (!r.valid()) {
      std::cerr << "serializability violation: " << r.witness << "\n";
      return 2;
    }
    return 0;
  } catch (const FsError& e) {
    std::cerr << "bench: " << e.what() << "\n";
    return 1;
  }
}

int cmd_check(const std::string& history_path) {
  json doc;
  try {
    std::ifstream in(history_path);
    if (!in) {
      std::cerr << "cannot read " << history_path << "\n";
      return 1;
    }
    in >> doc;
  } catch (const std::exception& e) {
    std::cerr << "malformed history file: " << e.what() << "\n";
    return 1;
  }
  try {
    History history = History::from_json(doc);
    CheckResult r = check_strict_serializability(history);
    switch (r.status) {
      case CheckResult::Status::Valid:
        std::cout << "valid\n";
        return 0;
      case CheckResult::Status::Violation:
        std::cerr << "violation: " << r.witness << "\n";
        return 2;
      case CheckResult::Status::Malformed:
        std::cerr << "malformed history: " << r.witness << "\n";
        return 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "malformed history: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int cmd_dump(const std::string& connect) {
  std::string host;
  std::uint16_t port = 0;
  if (!parse_endpoint(connect, host, port)) {
    std::cerr << "bad --connect address: " << connect << "\n";
    return 1;
  }
  try {
    auto transport = TcpTransport::connect(host, port);
    wire::Message resp = transport->roundtrip(wire::Message{wire::Kind::Dump});
    if (resp.kind != wire::Kind::Ok) {
      std::cerr << "dump failed: " << resp.fields.dump() << "\n";
      return 1;
    }
    std::cout << resp.fields.at("snapshot").dump() << "\n";
    return 0;
  } catch (const FsError& e) {
    std::cerr << "dump: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transactional shared file system"};
  app.require_subcommand(1);

  // serve
  auto* serve = app.add_subcommand("serve", "run a backend server");
  std::string listen = "127.0.0.1:7070";
  std::string mode_name = "block-mv";
  std::uint32_t block_size = 1024;
  std::uint64_t undo_window = 1024;
  double freq_fraction = 0.2;
  serve->add_option("--listen", listen, "host:port to bind");
  serve->add_option("--mode", mode_name, "file|block|block-mv");
  serve->add_option("--block-size", block_size, "block size in bytes");
  serve->add_option("--undo-window", undo_window, "committed snapshots retained");
  serve->add_option("--freq-fraction", freq_fraction, "frequency policy fraction");

  // bench
  auto* bench = app.add_subcommand("bench", "run the contention workload");
  bool embedded = false;
  bool compare = false;
  bool sequential = false;
  std::string connect = "127.0.0.1:7070";
  std::string out_dir = "./bench-out";
  std::string config_file;
  WorkloadConfig wl;
  std::string bench_mode = "block";
  std::string bench_policy = "update_all";
  bench->add_flag("--embedded", embedded, "in-process backend");
  bench->add_option("--connect", connect, "backend host:port");
  bench->add_flag("--compare-modes", compare, "run all three versioning modes");
  bench->add_option("--clients", wl.clients, "concurrent clients");
  bench->add_option("--read-only-clients", wl.read_only_clients,
                    "clients that never write");
  bench->add_option("--txns", wl.total_txns, "total transaction budget");
  bench->add_option("--duration", wl.duration_s, "seconds (when --txns absent)");
  bench->add_option("--file-size", wl.file_size, "data file size in bytes");
  bench->add_option("--block-size", wl.block_size, "block size in bytes");
  bench->add_option("--hot-blocks", wl.hot_block_count, "hot set size");
  bench->add_option("--hot-prob", wl.hot_probability, "hot set probability");
  bench->add_option("--think-ms", wl.think_time_ms, "sleep between txns");
  bench->add_option("--mode", bench_mode, "file|block|block-mv");
  bench->add_option("--policy", bench_policy,
                    "update_all|invalidate_only|frequency|stale");
  bench->add_option("--seed", wl.seed, "workload seed");
  bench->add_flag("--sequential", sequential, "deterministic round-robin clients");
  bench->add_option("--undo-window", undo_window, "committed snapshots retained");
  bench->add_option("--out", out_dir, "artifact directory");
  bench->add_option("--config", config_file, "workload config JSON file");

  // check
  auto* check = app.add_subcommand("check", "check a history for strict serializability");
  std::string history_path = "history.json";
  check->add_option("history", history_path, "history.json path");

  // dump
  auto* dump = app.add_subcommand("dump", "print a deterministic state snapshot");
  std::string dump_connect = "127.0.0.1:7070";
  dump->add_option("--connect", dump_connect, "backend host:port");

  CLI11_PARSE(app, argc, argv);

  if (serve->parsed()) {
    return cmd_serve(listen, mode_name, block_size, undo_window, freq_fraction);
  }
  if (bench->parsed()) {
    if (!config_file.empty()) {
      try {
        std::ifstream in(config_file);
        json doc;
        in >> doc;
        wl = WorkloadConfig::from_json(doc);
      } catch (const std::exception& e) {
        std::cerr << "bad config file: " << e.what() << "\n";
        return 1;
      }
    }
    if (!mode_from_string(bench_mode, wl.mode)) {
      std::cerr << "unknown mode: " << bench_mode << "\n";
      return 1;
    }
    if (!policy_from_string(bench_policy, wl.policy)) {
      std::cerr << "unknown policy: " << bench_policy << "\n";
      return 1;
    }
    wl.sequential = sequential;
    return cmd_bench(wl, embedded, connect, compare, undo_window, out_dir);
  }
  if (check->parsed()) return cmd_check(history_path);
  if (dump->parsed()) return cmd_dump(dump_connect);
  return 1;
}
