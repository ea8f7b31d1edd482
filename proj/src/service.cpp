#include "qcfuse/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <set>
#include <stdexcept>
#include <thread>

#include "qcfuse/metrics.hpp"

namespace qcfuse {

namespace {

constexpr size_t kPreviewTokens = 80;

ApiResponse fail(int status, const std::string& message) { return {status, error_body(message)}; }

std::optional<Json> parse_body(const std::string& body) {
  Json j = Json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

// Index of the chunk that holds absolute position p.
int chunk_index(const std::vector<int>& offsets, int position) {
  const auto it = std::upper_bound(offsets.begin(), offsets.end(), position);
  return static_cast<int>(it - offsets.begin()) - 1;
}

Json layer_events(const RunResult& r) {
  Json events = Json::array();
  for (size_t l = 0; l < r.schedule.layers.size(); ++l) {
    const auto& st = r.schedule.layers[l];
    events.push_back({{"layer", static_cast<int>(l) + 1},
                      {"updated", r.recompute.updated.at(l)},
                      {"timestamp", st.compute_end},
                      {"fetch_start", st.fetch_start},
                      {"fetch_end", st.fetch_end},
                      {"compute_start", st.compute_start},
                      {"compute_end", st.compute_end}});
  }
  return events;
}

Json token_payload(const RunResult& r) {
  std::vector<bool> selected(r.context_tokens.size() + 1, false);
  for (int i : r.selection.indices) selected.at(static_cast<size_t>(i)) = true;
  Json tokens = Json::array();
  for (size_t k = 0; k < r.context_tokens.size(); ++k) {
    const int position = static_cast<int>(k) + 1;
    tokens.push_back({{"position", position},
                      {"chunk_id", r.chunk_ids.at(static_cast<size_t>(chunk_index(r.offsets, position)))},
                      {"text", render_token(r.context_tokens[k])},
                      {"selected", static_cast<bool>(selected[static_cast<size_t>(position)])},
                      {"score", r.selection.scores.empty() ? 0.0f : r.selection.scores[k]}});
  }
  return tokens;
}

}  // namespace

Json error_body(const std::string& message) { return Json{{"error", message}}; }

Service::Service(std::shared_ptr<ChunkStore> store, Settings settings, ServiceOptions options)
    : store_(std::move(store)), settings_(std::move(settings)), options_(std::move(options)) {
  if (!store_) throw std::invalid_argument("Service: null store");
  if (options_.run_log_capacity == 0) throw std::invalid_argument("Service: run log capacity must be >= 1");
}

Json Service::chunk_summary(const ChunkInfo& info, std::optional<bool> cache_hit) const {
  const auto rec = store_->record(info.chunk_id);
  Json j{{"chunk_id", info.chunk_id},
         {"source_name", info.source_name},
         {"n_tokens", info.n_tokens},
         {"preview", render_tokens(rec->token_ids, kPreviewTokens)},
         {"anchor_count", info.anchor_count}};
  if (cache_hit) j["cache_hit"] = *cache_hit;
  return j;
}

ApiResponse Service::list_chunks() const {
  Json out = Json::array();
  for (const auto& info : store_->chunk_infos()) out.push_back(chunk_summary(info, std::nullopt));
  return {200, std::move(out)};
}

ApiResponse Service::post_chunks(const std::string& body) {
  const auto req = parse_body(body);
  if (!req) return fail(400, "body must be a JSON object");
  if (!req->contains("text") || !(*req)["text"].is_string()) return fail(400, "text must be a string");
  const std::string text = (*req)["text"].get<std::string>();
  if (text.empty()) return fail(400, "text is empty");
  std::string name = "upload";
  if (req->contains("name")) {
    if (!(*req)["name"].is_string()) return fail(400, "name must be a string");
    name = (*req)["name"].get<std::string>();
  }
  if (req->contains("config_fingerprint")) {
    const auto& fp = (*req)["config_fingerprint"];
    if (!fp.is_string()) return fail(400, "config_fingerprint must be a string");
    if (fp.get<std::string>() != store_->fingerprint()) {
      return fail(409, "config fingerprint mismatch: server runs " + store_->fingerprint());
    }
  }
  Json chunks = Json::array();
  try {
    for (const auto& piece : split_chunks(tokenize_body(text), settings_.chunk_tokens)) {
      const auto outcome = store_->precompute_chunk(piece, name);
      const auto& rec = *outcome.record;
      ChunkInfo info{outcome.chunk_id, rec.source_name, rec.n_tokens, static_cast<int>(rec.anchor_indices.size())};
      chunks.push_back(chunk_summary(info, outcome.cache_hit));
    }
  } catch (const FingerprintMismatch& e) {
    return fail(409, e.what());
  }
  return {201, Json{{"chunks", std::move(chunks)}}};
}

ApiResponse Service::post_query(const std::string& body) {
  const auto req = parse_body(body);
  if (!req) return fail(400, "body must be a JSON object");
  if (!req->contains("query") || !(*req)["query"].is_string()) return fail(400, "query must be a string");
  const std::string query = (*req)["query"].get<std::string>();
  if (query.empty()) return fail(400, "query is empty");

  if (!req->contains("policy") || !(*req)["policy"].is_string()) return fail(400, "policy must be a string");
  Policy policy;
  try {
    policy = policy_from_string((*req)["policy"].get<std::string>());
  } catch (const std::invalid_argument& e) {
    return fail(400, e.what());
  }
  if (!req->contains("ratio") || !(*req)["ratio"].is_number()) return fail(400, "ratio must be a number");
  const double ratio = (*req)["ratio"].get<double>();
  if (!(ratio >= 0.0 && ratio <= 1.0)) return fail(400, "ratio must be in [0, 1]");
  if (policy == Policy::FullReuse && ratio != 0.0) return fail(400, "FullReuse requires ratio 0");

  int top_k = settings_.top_k;
  if (req->contains("top_k")) {
    const auto& v = (*req)["top_k"];
    if (!v.is_number_integer() || v.get<int64_t>() < 1) return fail(400, "top_k must be a positive integer");
    top_k = static_cast<int>(std::min<int64_t>(v.get<int64_t>(), 1 << 20));
  }
  bool compare_full = false;
  if (req->contains("compare_full")) {
    if (!(*req)["compare_full"].is_boolean()) return fail(400, "compare_full must be a boolean");
    compare_full = (*req)["compare_full"].get<bool>();
  }

  std::vector<std::string> ids;
  Json retrieval = Json::array();
  Json requested_ids = nullptr;
  if (req->contains("chunk_ids") && !(*req)["chunk_ids"].is_null()) {
    const auto& arr = (*req)["chunk_ids"];
    if (!arr.is_array() || arr.empty()) return fail(400, "chunk_ids must be a non-empty array");
    for (const auto& v : arr) {
      if (!v.is_string()) return fail(400, "chunk_ids must hold strings");
      const std::string id = v.get<std::string>();
      if (!store_->contains(id)) return fail(404, "unknown chunk_id " + id);
      ids.push_back(id);
    }
    requested_ids = arr;
  } else {
    for (const auto& r : retrieve(*store_, query, top_k)) {
      ids.push_back(r.chunk_id);
      retrieval.push_back({{"chunk_id", r.chunk_id}, {"score", r.score}});
    }
    if (ids.empty()) return fail(404, "store holds no chunks");
  }

  const FusionOptions& fusion = settings_.fusion;
  RunResult result;
  std::optional<RunResult> full;
  try {
    result = run(policy, ratio, ids, query, *store_, fusion);
    if (compare_full) full = run(Policy::FullCompute, 1.0, ids, query, *store_, fusion);
  } catch (const NotFound& e) {
    return fail(404, e.what());
  } catch (const FingerprintMismatch& e) {
    return fail(409, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(400, e.what());
  }

  const uint64_t run_id = next_run_id_++;
  Json record{{"run_id", run_id},
              {"request",
               {{"query", query},
                {"policy", to_string(policy)},
                {"ratio", ratio},
                {"top_k", top_k},
                {"chunk_ids", requested_ids},
                {"compare_full", compare_full}}},
              {"retrieval", std::move(retrieval)},
              {"result", to_json(result)},
              {"tokens", token_payload(result)},
              {"events", layer_events(result)}};
  if (full) {
    record["comparison"] = {{"ttft_sim", full->ttft},
                            {"n_computed", full->selection.n},
                            {"policy_ttft_sim", result.ttft},
                            {"policy_n_computed", result.selection.n},
                            {"token_match", token_match_rate(full->answer, result.answer, fusion.max_new_tokens)},
                            {"logit_div", logit_divergence(full->first_logits, result.first_logits)}};
  } else {
    record["comparison"] = nullptr;
  }
  {
    std::lock_guard lock(runs_mutex_);
    runs_.emplace_back(run_id, std::make_shared<const Json>(std::move(record)));
    while (runs_.size() > options_.run_log_capacity) runs_.pop_front();
  }
  ++runs_served_;
  return {200, Json{{"run_id", run_id}}};
}

std::shared_ptr<const Json> Service::run_record(uint64_t run_id) const {
  std::lock_guard lock(runs_mutex_);
  for (const auto& [id, rec] : runs_) {
    if (id == run_id) return rec;
  }
  return nullptr;
}

ApiResponse Service::get_run(uint64_t run_id) const {
  const auto rec = run_record(run_id);
  if (!rec) return fail(404, "unknown run_id " + std::to_string(run_id));
  return {200, *rec};
}

ApiResponse Service::get_events(uint64_t run_id) const {
  const auto rec = run_record(run_id);
  if (!rec) return fail(404, "unknown run_id " + std::to_string(run_id));
  return {200, (*rec)["events"]};
}

ApiResponse Service::get_metrics() const {
  const StoreCounters c = store_->counters();
  const auto& m = settings_.model;
  const std::string label = "toy-decoder L=" + std::to_string(m.n_layers) + " H=" + std::to_string(m.n_heads) +
                            " d_model=" + std::to_string(m.d_model) + " seed=" + std::to_string(m.seed);
  return {200, Json{{"cache_hits", c.cache_hits},
                    {"cache_misses", c.cache_misses},
                    {"layers_fetched", c.layers_fetched},
                    {"bytes_fetched", c.bytes_fetched},
                    {"runs_served", runs_served_.load()},
                    {"store_bytes", store_->store_bytes()},
                    {"n_chunks", store_->size()},
                    {"model", label},
                    {"config_fingerprint", store_->fingerprint()}}};
}

namespace {

void send(httplib::Response& res, const ApiResponse& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

std::optional<uint64_t> parse_run_id(const std::string& s) {
  try {
    size_t used = 0;
    const uint64_t v = std::stoull(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

void Service::bind(httplib::Server& server) {
  server.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(error_body(what).dump(), "application/json");
  });

  server.Get("/api/chunks", [this](const httplib::Request&, httplib::Response& res) { send(res, list_chunks()); });
  server.Post("/api/chunks",
              [this](const httplib::Request& req, httplib::Response& res) { send(res, post_chunks(req.body)); });
  server.Post("/api/query",
              [this](const httplib::Request& req, httplib::Response& res) { send(res, post_query(req.body)); });
  server.Get(R"(/api/runs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto id = parse_run_id(req.matches[1]);
    send(res, id ? get_run(*id) : fail(404, "unknown run_id"));
  });
  server.Get(R"(/api/runs/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto id = parse_run_id(req.matches[1]);
    const auto rec = id ? run_record(*id) : nullptr;
    if (!rec) return send(res, fail(404, "unknown run_id"));

    const bool sse = req.get_param_value("format") == "sse";
    double stage_ms = sse ? options_.replay_stage_ms : 0.0;
    if (req.has_param("replay_ms")) {
      try {
        stage_ms = std::stod(req.get_param_value("replay_ms"));
      } catch (const std::exception&) {
        return send(res, fail(400, "replay_ms must be a number"));
      }
      if (!(stage_ms >= 0.0 && stage_ms <= 60000.0)) return send(res, fail(400, "replay_ms out of range"));
    }
    const Json events = (*rec)["events"];
    const double ttft_core = (*rec)["result"]["schedule"]["ttft_core"].get<double>();
    const double stage = events.empty() ? 0.0 : ttft_core / static_cast<double>(events.size());

    if (stage_ms == 0.0) {
      std::string out;
      for (const auto& e : events) {
        out += sse ? "event: layer\ndata: " + e.dump() + "\n\n" : e.dump() + "\n";
      }
      if (sse) out += "event: done\ndata: {}\n\n";
      res.set_content(out, sse ? "text/event-stream" : "application/x-ndjson");
      return;
    }
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        sse ? "text/event-stream" : "application/x-ndjson",
        [events, stage, stage_ms, sse](size_t, httplib::DataSink& sink) {
          const auto start = std::chrono::steady_clock::now();
          for (const auto& e : events) {
            const double at_ms = stage > 0.0 ? stage_ms * e["timestamp"].get<double>() / stage : 0.0;
            std::this_thread::sleep_until(start + std::chrono::microseconds(static_cast<int64_t>(at_ms * 1000.0)));
            const std::string line = sse ? "event: layer\ndata: " + e.dump() + "\n\n" : e.dump() + "\n";
            if (!sink.write(line.data(), line.size())) return false;
          }
          if (sse) {
            const std::string done = "event: done\ndata: {}\n\n";
            sink.write(done.data(), done.size());
          }
          sink.done();
          return true;
        });
  });
  server.Get("/api/metrics", [this](const httplib::Request&, httplib::Response& res) { send(res, get_metrics()); });

  if (!options_.static_dir.empty() && std::filesystem::is_directory(options_.static_dir)) {
    server.set_mount_point("/", options_.static_dir.string());
  }
}

void serve(Service& service, const std::string& host, int port) {
  httplib::Server server;
  service.bind(server);
  if (!server.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace qcfuse
