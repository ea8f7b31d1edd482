#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <memory>
#include <sstream>

#include "qcfuse/bench.hpp"
#include "qcfuse/config.hpp"
#include "qcfuse/service.hpp"

using namespace qcfuse;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::shared_ptr<ChunkStore> open_store(const Settings& settings, const std::string& dir) {
  auto weights = std::make_shared<const ModelWeights>(init_weights(settings.model));
  return std::make_shared<ChunkStore>(std::move(weights), dir, settings.store);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qcfuse: query-centric KV cache fusion on a toy decoder"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "Key-value config file (default: $QCFUSE_CONFIG)");

  std::string store_dir;
  int chunk_tokens = 0;
  double anchor_ratio = 0.0;
  std::vector<std::string> inputs;
  auto* pre = app.add_subcommand("precompute", "Split inputs into chunks and precompute their KV");
  pre->add_option("--store", store_dir, "Store directory")->required();
  pre->add_option("--input", inputs, "Input text files")->required()->expected(1, -1);
  pre->add_option("--chunk-tokens", chunk_tokens, "Tokens per chunk")->check(CLI::PositiveNumber);
  pre->add_option("--anchor-ratio", anchor_ratio, "Anchor ratio in (0, 1]")->check(CLI::Range(0.0, 1.0));

  std::string query_text, policy_name = "QCFuse";
  double ratio = 0.2;
  int top_k = 0;
  bool with_oracle = false, with_logits = false;
  auto* query = app.add_subcommand("query", "Answer one query over retrieved chunks");
  query->add_option("--store", store_dir, "Store directory")->required();
  query->add_option("--query", query_text, "Query text")->required();
  query->add_option("--policy", policy_name, "Selection policy");
  query->add_option("--ratio", ratio, "Recomputation ratio")->check(CLI::Range(0.0, 1.0));
  query->add_option("--top-k", top_k, "Chunks to retrieve")->check(CLI::PositiveNumber);
  query->add_flag("--oracle", with_oracle, "Attach full-computation comparison metrics");
  query->add_flag("--logits", with_logits, "Include first-token logits");

  std::string cases_path, out_path, policies_list, ratios_list, timestamp_arg;
  int threads = 1;
  auto* bench = app.add_subcommand("bench", "Run a policy x ratio grid with oracle comparison");
  bench->add_option("--store", store_dir, "Store directory")->required();
  bench->add_option("--cases", cases_path, "Case file")->required();
  bench->add_option("--policies", policies_list, "Comma-separated policies (default: all)");
  bench->add_option("--ratios", ratios_list, "Comma-separated ratios (default: 0.1,...,0.5)");
  bench->add_option("--out", out_path, "Output path; writes .json and .csv")->required();
  bench->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  bench->add_option("--timestamp", timestamp_arg, "Metadata timestamp: seconds or 'now' (default: SOURCE_DATE_EPOCH or 0)");

  double calib_ratio = 0.2;
  auto* calib = app.add_subcommand("calibrate", "Recommend a critical layer");
  calib->add_option("--store", store_dir, "Store directory")->required();
  calib->add_option("--cases", cases_path, "Case file")->required();
  calib->add_option("--ratio", calib_ratio, "Selection ratio")->check(CLI::Range(0.0, 1.0));
  calib->add_option("--top-k", top_k, "Chunks to retrieve for cases without documents")->check(CLI::PositiveNumber);

  int port = kDefaultPort;
  std::string host = "127.0.0.1", static_dir;
  double replay_ms = 200.0;
  auto* serve_cmd = app.add_subcommand("serve", "Serve the HTTP API");
  serve_cmd->add_option("--store", store_dir, "Store directory")->required();
  serve_cmd->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--static", static_dir, "Directory served under /");
  serve_cmd->add_option("--replay-ms", replay_ms, "Wall milliseconds per pipeline stage in event replay");

  std::string gen_out;
  int gen_n = 50;
  uint64_t gen_seed = 2024;
  auto* gen = app.add_subcommand("gen-cases", "Write a seeded synthetic case suite");
  gen->add_option("--out", gen_out, "Output directory (docs/ and cases.txt)")->required();
  gen->add_option("--n", gen_n, "Number of cases")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed, "Generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    Settings settings = config_path.empty() ? settings_from_env() : load_settings(config_path);
    if (anchor_ratio > 0.0) settings.store.anchor_ratio = anchor_ratio;
    if (chunk_tokens > 0) settings.chunk_tokens = chunk_tokens;
    if (top_k > 0) settings.top_k = top_k;

    if (*pre) {
      auto store = open_store(settings, store_dir);
      std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
      const auto s = cmd_precompute(*store, paths, settings.chunk_tokens);
      for (const auto& w : s.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "files " << s.files << " chunks " << s.chunks << " new " << s.new_chunks << " cached "
                << s.cache_hits << " forward_passes " << s.forward_passes << " store_size " << store->size()
                << "\n";
    } else if (*query) {
      auto store = open_store(settings, store_dir);
      const Policy policy = policy_from_string(policy_name);
      const auto out = cmd_query(*store, query_text, policy, ratio, settings.top_k, settings.fusion, with_oracle);
      Json j = to_json(out);
      if (with_logits) j["first_logits"] = out.result.first_logits;
      std::cout << j.dump(2) << "\n";
    } else if (*bench) {
      auto store = open_store(settings, store_dir);
      std::vector<Policy> policies;
      if (policies_list.empty()) {
        policies.assign(kAllPolicies.begin(), kAllPolicies.end());
      } else {
        for (const auto& name : split_list(policies_list)) policies.push_back(policy_from_string(name));
      }
      std::vector<double> ratios = kDefaultRatios;
      if (!ratios_list.empty()) {
        ratios.clear();
        for (const auto& r : split_list(ratios_list)) ratios.push_back(std::stod(r));
      }
      int64_t timestamp = default_timestamp();
      if (timestamp_arg == "now") {
        timestamp = std::chrono::duration_cast<std::chrono::seconds>(
                        std::chrono::system_clock::now().time_since_epoch())
                        .count();
      } else if (!timestamp_arg.empty()) {
        timestamp = std::stoll(timestamp_arg);
      }
      const auto cases = read_cases(cases_path);
      const auto report = cmd_bench(*store, cases, policies, ratios, settings, timestamp, threads);
      write_bench(report, out_path);
      std::cout << bench_csv(report);
    } else if (*calib) {
      auto store = open_store(settings, store_dir);
      const auto result = cmd_calibrate_layer(*store, read_cases(cases_path), calib_ratio, settings.top_k);
      std::cout << to_json(result).dump(2) << "\n";
    } else if (*serve_cmd) {
      auto store = open_store(settings, store_dir);
      ServiceOptions options;
      options.static_dir = static_dir;
      options.replay_stage_ms = replay_ms;
      Service service(store, settings, options);
      std::cerr << "serving on http://" << host << ":" << port << "\n";
      serve(service, host, port);
    } else if (*gen) {
      const auto suite = generate_cases(gen_seed, gen_n);
      write_suite(suite, gen_out);
      std::cout << "cases " << suite.cases.size() << " documents " << suite.documents.size() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
