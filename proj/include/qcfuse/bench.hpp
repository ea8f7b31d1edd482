#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qcfuse/config.hpp"
#include "qcfuse/fusion.hpp"
#include "qcfuse/json_io.hpp"
#include "qcfuse/kv_store.hpp"

namespace qcfuse {

// Ceiling split into pieces of `chunk_tokens`; the last piece may be short.
std::vector<Tokens> split_chunks(std::span<const TokenId> tokens, int chunk_tokens);

struct PrecomputeSummary {
  int files = 0;
  int chunks = 0;
  int new_chunks = 0;
  int cache_hits = 0;
  uint64_t forward_passes = 0;
  std::vector<std::string> chunk_ids;
  std::vector<std::string> warnings;
};

// Precomputes one document; the source name is recorded with every chunk.
PrecomputeSummary precompute_text(ChunkStore& store, const std::string& source_name, std::string_view text,
                                  int chunk_tokens);
PrecomputeSummary cmd_precompute(ChunkStore& store, const std::vector<std::filesystem::path>& inputs,
                                 int chunk_tokens);

// Cosine similarity of byte-4-gram term-frequency vectors; 0 when either
// side has no 4-gram.
double ngram_cosine(std::string_view a, std::string_view b);

struct Retrieved {
  std::string chunk_id;
  double score = 0.0;
};

// Top-k store chunks by ngram_cosine against the query, descending score,
// ties toward the lexicographically lower chunk_id.
std::vector<Retrieved> retrieve(const ChunkStore& store, std::string_view query, int top_k);

// A benchmark case: a query plus, optionally, the source documents whose
// chunks form its context. With no documents the context is retrieved.
struct BenchCase {
  std::string query;
  std::vector<std::string> documents;
};

struct Document {
  std::string name;
  std::string text;
};

struct CaseSuite {
  std::vector<Document> documents;
  std::vector<BenchCase> cases;
};

// Seeded synthetic suite. Each case owns 2..4 documents of 16..64 bytes of
// filler words; one of them carries a planted `<key> is <value>` span and
// the 4..16 byte query asks for that key.
CaseSuite generate_cases(uint64_t seed, int n_cases);

// Case file: one case per line, `query` or `query<TAB>doc,doc,...`;
// blank lines and lines starting with '#' are skipped.
std::vector<BenchCase> parse_cases(const std::string& text);
std::vector<BenchCase> read_cases(const std::filesystem::path& path);
std::string render_cases(const std::vector<BenchCase>& cases);
// Writes <dir>/docs/<name>.txt and <dir>/cases.txt.
void write_suite(const CaseSuite& suite, const std::filesystem::path& dir);
// Precomputes every document of a suite into the store.
PrecomputeSummary precompute_suite(ChunkStore& store, const CaseSuite& suite, int chunk_tokens);

// Chunk ids of a case in context order: the named documents' chunks in
// store insertion order, or the retrieval result.
std::vector<std::string> case_context(const ChunkStore& store, const BenchCase& c, int top_k);

struct QueryOutput {
  std::vector<Retrieved> retrieval;
  RunResult result;
};

QueryOutput cmd_query(ChunkStore& store, const std::string& query, Policy policy, double ratio, int top_k,
                      const FusionOptions& options, bool with_oracle);
Json to_json(const QueryOutput& q);

struct BenchRow {
  Policy policy = Policy::QCFuse;
  double ratio = 0.0;
  double ttft_sim = 0.0;
  double logit_div_max = 0.0;
  double logit_kl = 0.0;
  double token_match = 0.0;
  double overlap = 0.0;
  double n_ctx = 0.0;
  double n_sel = 0.0;
  int n_cases = 0;
};

struct BenchMetadata {
  std::string fingerprint;
  uint64_t seed = 0;
  int64_t timestamp = 0;
  int n_cases = 0;
  std::vector<std::string> policies;
  std::vector<double> ratios;
  std::string config;  // rendered Settings
};

struct BenchReport {
  BenchMetadata metadata;
  std::vector<BenchRow> rows;  // policy-major, ratios in the given order
};

inline const std::vector<double> kDefaultRatios = {0.1, 0.2, 0.3, 0.4, 0.5};

// Per-case results for one (policy, ratio) cell, before averaging.
struct BenchCell {
  Policy policy = Policy::QCFuse;
  double ratio = 0.0;
  std::vector<RunResult> runs;  // one per case
};

// Runs every (case, policy, ratio) with oracle comparison. Cases run on up
// to `threads` workers; results are aggregated in case order.
std::vector<BenchCell> bench_grid(ChunkStore& store, const std::vector<BenchCase>& cases,
                                  const std::vector<Policy>& policies, const std::vector<double>& ratios,
                                  const Settings& settings, int threads = 1);
BenchRow aggregate(const BenchCell& cell);

BenchReport cmd_bench(ChunkStore& store, const std::vector<BenchCase>& cases, const std::vector<Policy>& policies,
                      const std::vector<double>& ratios, const Settings& settings, int64_t timestamp,
                      int threads = 1);

Json to_json(const BenchRow& row);
Json to_json(const BenchReport& report);
std::string bench_csv(const BenchReport& report);
// Writes <out>.json and <out>.csv (an existing .json/.csv extension on
// `out` is replaced).
void write_bench(const BenchReport& report, const std::filesystem::path& out);

// SOURCE_DATE_EPOCH when set, otherwise 0.
int64_t default_timestamp();

struct CalibrationResult {
  std::vector<int> layers;
  std::vector<double> mean_overlap;
  int recommended = 0;
};

// For each candidate layer 2..L-1: mean overlap between the anchor-probe
// Top-N at that layer and the Top-N of full-computation attention from the
// query onto the context at the same layer. Ties go toward ceil(L/2).
CalibrationResult cmd_calibrate_layer(ChunkStore& store, const std::vector<BenchCase>& cases, double ratio,
                                      int top_k);
Json to_json(const CalibrationResult& c);

}  // namespace qcfuse
