#include "qcfuse/bench.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "qcfuse/metrics.hpp"
#include "qcfuse/splitmix.hpp"

namespace qcfuse {

namespace fs = std::filesystem;

std::vector<Tokens> split_chunks(std::span<const TokenId> tokens, int chunk_tokens) {
  if (chunk_tokens < 1) throw std::invalid_argument("split_chunks: chunk_tokens must be >= 1");
  std::vector<Tokens> out;
  for (size_t i = 0; i < tokens.size(); i += static_cast<size_t>(chunk_tokens)) {
    const size_t end = std::min(tokens.size(), i + static_cast<size_t>(chunk_tokens));
    out.emplace_back(tokens.begin() + static_cast<long>(i), tokens.begin() + static_cast<long>(end));
  }
  return out;
}

PrecomputeSummary precompute_text(ChunkStore& store, const std::string& source_name, std::string_view text,
                                  int chunk_tokens) {
  PrecomputeSummary s;
  s.files = 1;
  const Tokens tokens = tokenize_body(text);
  if (tokens.empty()) {
    s.warnings.push_back("empty input: " + source_name);
    return s;
  }
  const uint64_t before = store.counters().forward_passes;
  for (const auto& piece : split_chunks(tokens, chunk_tokens)) {
    auto outcome = store.precompute_chunk(piece, source_name);
    ++s.chunks;
    if (outcome.cache_hit) ++s.cache_hits;
    else ++s.new_chunks;
    s.chunk_ids.push_back(outcome.chunk_id);
  }
  s.forward_passes = store.counters().forward_passes - before;
  return s;
}

namespace {

void merge(PrecomputeSummary& into, PrecomputeSummary&& part) {
  into.files += part.files;
  into.chunks += part.chunks;
  into.new_chunks += part.new_chunks;
  into.cache_hits += part.cache_hits;
  into.forward_passes += part.forward_passes;
  for (auto& id : part.chunk_ids) into.chunk_ids.push_back(std::move(id));
  for (auto& w : part.warnings) into.warnings.push_back(std::move(w));
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

PrecomputeSummary cmd_precompute(ChunkStore& store, const std::vector<fs::path>& inputs, int chunk_tokens) {
  PrecomputeSummary total;
  for (const auto& path : inputs) {
    merge(total, precompute_text(store, path.stem().string(), read_file(path), chunk_tokens));
  }
  return total;
}

namespace {

using GramCounts = std::unordered_map<uint32_t, double>;

GramCounts byte_4grams(std::string_view s) {
  GramCounts g;
  for (size_t i = 0; i + 4 <= s.size(); ++i) {
    uint32_t key = 0;
    for (size_t k = 0; k < 4; ++k) key = (key << 8) | static_cast<unsigned char>(s[i + k]);
    g[key] += 1.0;
  }
  return g;
}

double cosine(const GramCounts& a, const GramCounts& b) {
  if (a.empty() || b.empty()) return 0.0;
  const GramCounts& small = a.size() <= b.size() ? a : b;
  const GramCounts& large = a.size() <= b.size() ? b : a;
  double dot = 0.0;
  for (const auto& [k, v] : small) {
    if (auto it = large.find(k); it != large.end()) dot += v * it->second;
  }
  double na = 0.0, nb = 0.0;
  for (const auto& [k, v] : a) na += v * v;
  for (const auto& [k, v] : b) nb += v * v;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

double ngram_cosine(std::string_view a, std::string_view b) { return cosine(byte_4grams(a), byte_4grams(b)); }

std::vector<Retrieved> retrieve(const ChunkStore& store, std::string_view query, int top_k) {
  if (top_k < 1) throw std::invalid_argument("retrieve: top_k must be >= 1");
  const GramCounts q = byte_4grams(query);
  std::vector<Retrieved> all;
  for (const auto& id : store.chunk_ids()) {
    const auto rec = store.record(id);
    all.push_back({id, cosine(q, byte_4grams(detokenize(rec->token_ids)))});
  }
  std::sort(all.begin(), all.end(), [](const Retrieved& a, const Retrieved& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.chunk_id < b.chunk_id;
  });
  if (all.size() > static_cast<size_t>(top_k)) all.resize(static_cast<size_t>(top_k));
  return all;
}

namespace {

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {
      "the",   "a",     "of",    "and",   "in",     "on",    "with",  "for",   "river", "stone",
      "moon",  "field", "north", "quiet", "cotton", "light", "train", "cloud", "smoke", "glass",
      "tower", "bread", "storm", "wheel", "silver", "lamp",  "road",  "wind",  "song",  "iron"};
  return words;
}

const std::vector<std::string>& key_words() {
  static const std::vector<std::string> words = {"alpha", "bravo", "delta", "echo",  "kilo",  "lima",
                                                 "oscar", "romeo", "tango", "zulu",  "maple", "cedar",
                                                 "birch", "aspen", "otter", "heron", "falcon", "lynx"};
  return words;
}

const std::vector<std::string>& value_words() {
  static const std::vector<std::string> words = {"red",   "green", "blue",  "amber", "ivory", "black",
                                                 "coral", "olive", "teal",  "ruby",  "jade",  "onyx",
                                                 "gold",  "plum",  "rose",  "slate"};
  return words;
}

std::string filler(SplitMix64& rng, size_t length) {
  std::string s;
  const auto& words = filler_words();
  while (s.size() < length) {
    if (!s.empty()) s += ' ';
    s += words[rng.below(words.size())];
  }
  s.resize(length);
  return s;
}

}  // namespace

CaseSuite generate_cases(uint64_t seed, int n_cases) {
  if (n_cases < 0) throw std::invalid_argument("generate_cases: negative case count");
  SplitMix64 rng(seed);
  CaseSuite suite;
  std::set<std::string> texts;
  static const std::pair<const char*, const char*> templates[] = {
      {"where is ", ""}, {"", " is"}, {"find ", ""}, {"what is ", ""}};
  for (int c = 0; c < n_cases; ++c) {
    const std::string key = key_words()[rng.below(key_words().size())];
    const std::string value = value_words()[rng.below(value_words().size())];
    const std::string span = key + " is " + value;
    const int n_docs = 2 + static_cast<int>(rng.below(3));
    const int planted = static_cast<int>(rng.below(static_cast<uint64_t>(n_docs)));
    BenchCase bc;
    for (int d = 0; d < n_docs; ++d) {
      std::string text;
      do {
        const size_t length = 16 + rng.below(49);
        if (d == planted) {
          const size_t room = length - span.size();
          const size_t before = rng.below(room + 1);
          std::string head = filler(rng, before);
          std::string tail = filler(rng, room - before);
          if (!head.empty()) head.back() = ' ';
          if (!tail.empty()) tail.front() = ' ';
          text = head + span + tail;
        } else {
          text = filler(rng, length);
        }
      } while (!texts.insert(text).second);
      char name[32];
      std::snprintf(name, sizeof name, "case%03d_doc%d", c, d);
      suite.documents.push_back({name, text});
      bc.documents.push_back(name);
    }
    const auto& [prefix, suffix] = templates[rng.below(4)];
    bc.query = prefix + key + suffix;
    suite.cases.push_back(std::move(bc));
  }
  return suite;
}

std::vector<BenchCase> parse_cases(const std::string& text) {
  std::vector<BenchCase> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    BenchCase c;
    const auto tab = line.find('\t');
    c.query = line.substr(0, tab);
    if (tab != std::string::npos) {
      std::istringstream docs(line.substr(tab + 1));
      std::string name;
      while (std::getline(docs, name, ',')) {
        if (!name.empty()) c.documents.push_back(name);
      }
    }
    if (c.query.empty()) throw std::invalid_argument("case file: empty query");
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<BenchCase> read_cases(const fs::path& path) { return parse_cases(read_file(path)); }

std::string render_cases(const std::vector<BenchCase>& cases) {
  std::string out;
  for (const auto& c : cases) {
    out += c.query;
    for (size_t i = 0; i < c.documents.size(); ++i) out += (i == 0 ? "\t" : ",") + c.documents[i];
    out += '\n';
  }
  return out;
}

void write_suite(const CaseSuite& suite, const fs::path& dir) {
  fs::create_directories(dir / "docs");
  for (const auto& d : suite.documents) {
    std::ofstream(dir / "docs" / (d.name + ".txt"), std::ios::binary) << d.text;
  }
  std::ofstream(dir / "cases.txt", std::ios::binary) << render_cases(suite.cases);
}

PrecomputeSummary precompute_suite(ChunkStore& store, const CaseSuite& suite, int chunk_tokens) {
  PrecomputeSummary total;
  for (const auto& d : suite.documents) merge(total, precompute_text(store, d.name, d.text, chunk_tokens));
  return total;
}

std::vector<std::string> case_context(const ChunkStore& store, const BenchCase& c, int top_k) {
  std::vector<std::string> ids;
  if (c.documents.empty()) {
    for (const auto& r : retrieve(store, c.query, top_k)) ids.push_back(r.chunk_id);
    if (ids.empty()) throw NotFound("store is empty");
    return ids;
  }
  const auto infos = store.chunk_infos();
  for (const auto& doc : c.documents) {
    bool found = false;
    for (const auto& info : infos) {
      if (info.source_name == doc) {
        ids.push_back(info.chunk_id);
        found = true;
      }
    }
    if (!found) throw NotFound("no chunks for document " + doc);
  }
  return ids;
}

QueryOutput cmd_query(ChunkStore& store, const std::string& query, Policy policy, double ratio, int top_k,
                      const FusionOptions& options, bool with_oracle) {
  QueryOutput out;
  out.retrieval = retrieve(store, query, top_k);
  if (out.retrieval.empty()) throw NotFound("store is empty");
  std::vector<std::string> ids;
  for (const auto& r : out.retrieval) ids.push_back(r.chunk_id);
  out.result = run(policy, ratio, ids, query, store, options, with_oracle);
  return out;
}

Json to_json(const QueryOutput& q) {
  Json retrieval = Json::array();
  for (const auto& r : q.retrieval) retrieval.push_back({{"chunk_id", r.chunk_id}, {"score", r.score}});
  Json j = to_json(q.result);
  j["retrieval"] = std::move(retrieval);
  return j;
}

namespace {

Tokens context_tokens(const ChunkStore& store, const std::vector<std::string>& ids) {
  Tokens out;
  for (const auto& id : ids) {
    const auto rec = store.record(id);
    out.insert(out.end(), rec->token_ids.begin(), rec->token_ids.end());
  }
  return out;
}

}  // namespace

std::vector<BenchCell> bench_grid(ChunkStore& store, const std::vector<BenchCase>& cases,
                                  const std::vector<Policy>& policies, const std::vector<double>& ratios,
                                  const Settings& settings, int threads) {
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("bench: ratio out of [0, 1]");
  }
  const size_t n_cells = policies.size() * ratios.size();
  std::vector<BenchCell> cells(n_cells);
  for (size_t p = 0; p < policies.size(); ++p) {
    for (size_t r = 0; r < ratios.size(); ++r) {
      auto& cell = cells[p * ratios.size() + r];
      cell.policy = policies[p];
      cell.ratio = ratios[r];
      cell.runs.resize(cases.size());
    }
  }
  // Resolve contexts up front so worker errors cannot leave holes.
  std::vector<std::vector<std::string>> contexts;
  for (const auto& c : cases) contexts.push_back(case_context(store, c, settings.top_k));

  const ModelWeights& weights = store.weights();
  std::atomic<size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (size_t i = next++; i < cases.size(); i = next++) {
      try {
        FusionOptions options = settings.fusion;
        options.random_seed = splitmix64_at(settings.fusion.random_seed, i);
        const OracleRun oracle = compute_oracle(weights, context_tokens(store, contexts[i]),
                                                tokenize_body(cases[i].query), options.max_new_tokens,
                                                options.aggregation);
        for (auto& cell : cells) {
          cell.runs[i] = run(cell.policy, cell.ratio, contexts[i], cases[i].query, store, options, true, &oracle);
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(cases.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return cells;
}

BenchRow aggregate(const BenchCell& cell) {
  BenchRow row;
  row.policy = cell.policy;
  row.ratio = cell.ratio;
  row.n_cases = static_cast<int>(cell.runs.size());
  if (cell.runs.empty()) return row;
  for (const auto& r : cell.runs) {
    row.ttft_sim += r.ttft;
    row.logit_div_max += r.metrics->logit_div_max;
    row.logit_kl += r.metrics->logit_kl;
    row.token_match += r.metrics->token_match;
    row.overlap += r.metrics->overlap;
    row.n_ctx += static_cast<double>(r.context_tokens.size());
    row.n_sel += r.selection.n;
  }
  const double n = static_cast<double>(cell.runs.size());
  row.ttft_sim /= n;
  row.logit_div_max /= n;
  row.logit_kl /= n;
  row.token_match /= n;
  row.overlap /= n;
  row.n_ctx /= n;
  row.n_sel /= n;
  return row;
}

BenchReport cmd_bench(ChunkStore& store, const std::vector<BenchCase>& cases, const std::vector<Policy>& policies,
                      const std::vector<double>& ratios, const Settings& settings, int64_t timestamp,
                      int threads) {
  BenchReport report;
  auto& m = report.metadata;
  m.fingerprint = store.fingerprint();
  m.seed = settings.model.seed;
  m.timestamp = timestamp;
  m.n_cases = static_cast<int>(cases.size());
  for (Policy p : policies) m.policies.push_back(to_string(p));
  m.ratios = ratios;
  m.config = settings.render();
  for (const auto& cell : bench_grid(store, cases, policies, ratios, settings, threads)) {
    report.rows.push_back(aggregate(cell));
  }
  return report;
}

Json to_json(const BenchRow& row) {
  return Json{{"policy", to_string(row.policy)}, {"ratio", row.ratio},
              {"ttft_sim", row.ttft_sim},        {"logit_div_max", row.logit_div_max},
              {"logit_kl", row.logit_kl},        {"token_match", row.token_match},
              {"overlap", row.overlap},          {"n_ctx", row.n_ctx},
              {"n_sel", row.n_sel},              {"n_cases", row.n_cases}};
}

Json to_json(const BenchReport& report) {
  const auto& m = report.metadata;
  Json rows = Json::array();
  for (const auto& r : report.rows) rows.push_back(to_json(r));
  return Json{{"metadata",
               {{"config_fingerprint", m.fingerprint},
                {"seed", m.seed},
                {"timestamp", m.timestamp},
                {"n_cases", m.n_cases},
                {"policies", m.policies},
                {"ratios", m.ratios},
                {"config", m.config}}},
              {"rows", std::move(rows)}};
}

namespace {

std::string shortest(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf, ptr);
}

}  // namespace

std::string bench_csv(const BenchReport& report) {
  std::string out = "policy,ratio,ttft_sim,logit_div_max,logit_kl,token_match,overlap,n_ctx,n_sel,n_cases\n";
  for (const auto& r : report.rows) {
    out += std::string(to_string(r.policy)) + "," + shortest(r.ratio) + "," + shortest(r.ttft_sim) + "," +
           shortest(r.logit_div_max) + "," + shortest(r.logit_kl) + "," + shortest(r.token_match) + "," +
           shortest(r.overlap) + "," + shortest(r.n_ctx) + "," + shortest(r.n_sel) + "," +
           std::to_string(r.n_cases) + "\n";
  }
  return out;
}

void write_bench(const BenchReport& report, const fs::path& out) {
  fs::path base = out;
  if (base.extension() == ".json" || base.extension() == ".csv") base.replace_extension();
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  const fs::path json_path = fs::path(base.string() + ".json");
  const fs::path csv_path = fs::path(base.string() + ".csv");
  std::ofstream(json_path, std::ios::binary) << to_json(report).dump(2) << "\n";
  std::ofstream(csv_path, std::ios::binary) << bench_csv(report);
}

int64_t default_timestamp() {
  const char* epoch = std::getenv("SOURCE_DATE_EPOCH");
  if (epoch == nullptr || *epoch == '\0') return 0;
  int64_t v = 0;
  const std::string_view s(epoch);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw std::invalid_argument("bad SOURCE_DATE_EPOCH");
  return v;
}

CalibrationResult cmd_calibrate_layer(ChunkStore& store, const std::vector<BenchCase>& cases, double ratio,
                                      int top_k) {
  const ModelWeights& weights = store.weights();
  const auto& cfg = weights.config;
  CalibrationResult result;
  for (int c = 2; c <= cfg.n_layers - 1; ++c) result.layers.push_back(c);
  result.mean_overlap.assign(result.layers.size(), 0.0);
  for (const auto& bc : cases) {
    const auto ids = case_context(store, bc, top_k);
    const FusedContext fused = assemble_context(ids, store);
    const Tokens query = tokenize_body(bc.query);
    const QueryProbe anchored = probe_query(weights, query, fused, store);
    Tokens all{kBos};
    all.insert(all.end(), fused.token_ids.begin(), fused.token_ids.end());
    all.insert(all.end(), query.begin(), query.end());
    const ForwardTrace oracle = forward_full(weights, all, 0, {.attention = true});
    const int n = ceil_count(ratio, fused.n_ctx);
    const int nq = static_cast<int>(query.size());
    for (size_t i = 0; i < result.layers.size(); ++i) {
      const int l = result.layers[i] - 1;
      const auto sa = score_layer(anchored.queries[l], nq, fused.layers[l], fused.n_ctx);
      std::vector<float> importance(fused.n_ctx, 0.0f);
      for (int i_ctx = 0; i_ctx < fused.n_ctx; ++i_ctx) {
        double acc = 0.0;
        for (int q = 0; q < nq; ++q) {
          for (int h = 0; h < cfg.n_heads; ++h) acc += oracle.attention_at(l, h, fused.n_ctx + 1 + q, i_ctx + 1);
        }
        importance[i_ctx] = static_cast<float>(acc / (static_cast<double>(nq) * cfg.n_heads));
      }
      result.mean_overlap[i] += selection_overlap(top_positions(sa, n), top_positions(importance, n));
    }
  }
  if (!cases.empty()) {
    for (auto& v : result.mean_overlap) v /= static_cast<double>(cases.size());
  }
  const int middle = (cfg.n_layers + 1) / 2;
  int best = -1;
  for (size_t i = 0; i < result.layers.size(); ++i) {
    if (best < 0) {
      best = static_cast<int>(i);
      continue;
    }
    const double a = result.mean_overlap[i], b = result.mean_overlap[best];
    const int da = std::abs(result.layers[i] - middle), db = std::abs(result.layers[best] - middle);
    if (a > b || (a == b && da < db)) best = static_cast<int>(i);
  }
  result.recommended = best < 0 ? middle : result.layers[best];
  return result;
}

Json to_json(const CalibrationResult& c) {
  Json layers = Json::array();
  for (size_t i = 0; i < c.layers.size(); ++i) {
    layers.push_back({{"layer", c.layers[i]}, {"mean_overlap", c.mean_overlap[i]}});
  }
  return Json{{"layers", std::move(layers)}, {"recommended", c.recommended}};
}

}  // namespace qcfuse
