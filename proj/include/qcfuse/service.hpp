#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "qcfuse/bench.hpp"
#include "qcfuse/config.hpp"
#include "qcfuse/json_io.hpp"
#include "qcfuse/kv_store.hpp"

namespace httplib {
class Server;
}

namespace qcfuse {

inline constexpr int kDefaultPort = 8642;

struct ServiceOptions {
  std::filesystem::path static_dir;  // served under / when non-empty
  double replay_stage_ms = 200.0;    // wall time per average pipeline stage in SSE replay
  size_t run_log_capacity = 100;
};

struct ApiResponse {
  int status = 200;
  Json body;
};

// HTTP-independent handlers; bind() wires them to an httplib server.
class Service {
 public:
  Service(std::shared_ptr<ChunkStore> store, Settings settings, ServiceOptions options = {});

  ApiResponse list_chunks() const;
  ApiResponse post_chunks(const std::string& body);
  ApiResponse post_query(const std::string& body);
  ApiResponse get_run(uint64_t run_id) const;
  ApiResponse get_events(uint64_t run_id) const;
  ApiResponse get_metrics() const;

  // Run record lookup for streaming; nullptr when unknown or evicted.
  std::shared_ptr<const Json> run_record(uint64_t run_id) const;

  void bind(httplib::Server& server);

  const ChunkStore& store() const { return *store_; }
  const Settings& settings() const { return settings_; }
  const ServiceOptions& options() const { return options_; }

 private:
  Json chunk_summary(const ChunkInfo& info, std::optional<bool> cache_hit) const;

  std::shared_ptr<ChunkStore> store_;
  Settings settings_;
  ServiceOptions options_;

  mutable std::mutex runs_mutex_;
  std::deque<std::pair<uint64_t, std::shared_ptr<const Json>>> runs_;
  std::atomic<uint64_t> next_run_id_{1};
  std::atomic<uint64_t> runs_served_{0};
};

Json error_body(const std::string& message);

// Blocks serving on host:port until the server is stopped.
void serve(Service& service, const std::string& host, int port);

}  // namespace qcfuse
