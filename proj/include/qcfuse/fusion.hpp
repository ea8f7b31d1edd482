#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qcfuse/kv_store.hpp"
#include "qcfuse/model.hpp"
#include "qcfuse/pipeline.hpp"
#include "qcfuse/policy.hpp"

namespace qcfuse {

// Position-shifted concatenation of chunk KVs.
//
// Row p of every layer holds the token at absolute position p: row 0 is the
// shared BOS, rows 1..n_ctx are context tokens. Chunk c starts at offsets[c]
// (offsets[0] == 1) and its keys are re-rotated from position 0 to there.
struct FusedContext {
  std::vector<std::string> chunk_ids;
  Tokens token_ids;  // context only, no BOS
  std::vector<int> offsets;
  std::vector<int> lengths;
  int n_ctx = 0;
  std::vector<LayerKV> layers;

  PastKV as_past() const;
  // Index into chunk_ids of the chunk holding absolute position p (1-based).
  int chunk_of(int position) const;
};

enum class ScoreAggregation { AllQueryTokens, LastQueryToken };
enum class EpicMode { PerSequence, PerChunk };

const char* to_string(ScoreAggregation a);
const char* to_string(EpicMode m);

// Which anchors prefix the query probe. nullopt uses the anchors stored with
// each chunk; a ratio re-extracts them from the stored key norms (0 keeps
// only BOS in the probe past).
struct AnchorSource {
  std::optional<double> ratio;
};

struct QueryProbe {
  Tokens query_tokens;
  std::vector<int> positions;       // 1 + n_ctx onwards
  std::vector<int> past_positions;  // BOS then anchor positions, ascending
  int n_anchor_rows = 0;
  std::vector<std::vector<float>> queries;  // per layer [n_query × head × dim]
  std::vector<float> critical_attention;    // [head × n_query × (past + query)]
};

struct SelectionResult {
  Policy policy = Policy::QCFuse;
  double ratio = 0.0;
  int n = 0;
  std::vector<int> indices;  // ascending absolute positions in [1, n_ctx]
  std::vector<float> scores;  // [n_ctx]; zeros for score-free policies
};

struct RecomputeEvent {
  enum class Kind { Fetch, Compute };
  Kind kind = Kind::Compute;
  int layer = 0;  // 1-based
  double start = 0.0;
  double end = 0.0;
};

struct RecomputeTrace {
  std::vector<std::vector<int>> updated;  // per layer
  std::vector<double> compute_seconds;
  std::vector<double> fetch_seconds;
  std::vector<RecomputeEvent> events;
};

struct FusionOptions {
  // Overrides the stored anchors for the QCFuse probe when set.
  std::optional<double> probe_anchor_ratio;
  ScoreAggregation aggregation = ScoreAggregation::AllQueryTokens;
  EpicMode epic_mode = EpicMode::PerSequence;
  uint64_t random_seed = 0;
  int max_new_tokens = 32;
  bool pipelined = true;
  CostModel cost;
};

struct OracleMetrics {
  double logit_div_max = 0.0;
  double logit_kl = 0.0;
  double token_match = 0.0;
  double overlap = 0.0;
};

// Full computation over [BOS | context | query]: first-token logits, greedy
// answer and critical-layer query-over-context importance.
struct OracleRun {
  std::vector<float> first_logits;
  Tokens answer;
  std::vector<float> importance;
};

struct RunResult {
  Policy policy = Policy::QCFuse;
  double ratio = 0.0;
  std::vector<std::string> chunk_ids;
  std::vector<int> offsets;
  Tokens context_tokens;
  Tokens query_tokens;
  Tokens answer;
  std::string answer_text;
  std::vector<float> first_logits;
  SelectionResult selection;
  RecomputeTrace recompute;
  ScheduleTrace schedule;
  double ttft = 0.0;
  std::optional<OracleMetrics> metrics;
};

FusedContext assemble_context(std::span<const std::string> chunk_ids, ChunkStore& store, SimClock* clock = nullptr);

// Fused layout whose KV comes from one exact forward pass over
// [BOS | chunks...]; what a context looks like with nothing left to repair.
FusedContext exact_context(const ModelWeights& weights, const std::vector<Tokens>& chunks);

QueryProbe probe_query(const ModelWeights& weights, std::span<const TokenId> query_tokens, const FusedContext& fused,
                       ChunkStore& store, const AnchorSource& anchors = {});

// Mean over heads (and query rows) of the softmax over the n_ctx context keys
// of one layer. queries: [n_query × head × dim].
std::vector<float> score_layer(std::span<const float> queries, int n_query, const LayerKV& fused_layer, int n_ctx,
                               ScoreAggregation aggregation = ScoreAggregation::AllQueryTokens);

std::vector<float> score_critical(const QueryProbe& probe, const FusedContext& fused, const ModelConfig& config,
                                  ScoreAggregation aggregation = ScoreAggregation::AllQueryTokens);

// Top ceil(ratio × n_ctx) by score, ties to the lower index, ascending.
SelectionResult select_topN(std::span<const float> scores, double ratio, Policy policy = Policy::QCFuse);
// Positions (1-based, ascending) of the n highest scores under the same tie rule.
std::vector<int> top_positions(std::span<const float> scores, int n);

SelectionResult qcfuse_select(const ModelWeights& weights, std::span<const TokenId> query_tokens,
                              const FusedContext& fused, ChunkStore& store, double ratio,
                              const AnchorSource& anchors = {},
                              ScoreAggregation aggregation = ScoreAggregation::AllQueryTokens);
SelectionResult qclast_select(const ModelWeights& weights, std::span<const TokenId> query_tokens,
                              const FusedContext& fused, double ratio,
                              ScoreAggregation aggregation = ScoreAggregation::AllQueryTokens);
SelectionResult qcall_select(const ModelWeights& weights, std::span<const TokenId> query_tokens,
                             const FusedContext& fused, double ratio,
                             ScoreAggregation aggregation = ScoreAggregation::AllQueryTokens);

// Deviation of the KV that the recomputed first layer feeds into the second
// layer, against the reused KV of that layer.
std::vector<float> kv_deviation(const ModelWeights& weights, const FusedContext& fused,
                                std::vector<float>* attention_received = nullptr);
SelectionResult cacheblend_select(const ModelWeights& weights, const FusedContext& fused, double ratio);
SelectionResult kvshare_select(const ModelWeights& weights, const FusedContext& fused, double ratio);
SelectionResult epic_select(int n_ctx, double ratio, EpicMode mode = EpicMode::PerSequence,
                            std::span<const int> chunk_lengths = {});
SelectionResult random_select(uint64_t seed, int n_ctx, double ratio);

SelectionResult full_selection(Policy policy, int n_ctx, double ratio);

// Recomputes the selected rows layer by layer; unselected rows keep their
// reused KV. Durations in the trace come from `cost`.
std::pair<FusedContext, RecomputeTrace> recompute_selected(const ModelWeights& weights, const FusedContext& fused,
                                                           const SelectionResult& selection,
                                                           const CostModel& cost = {});

std::vector<float> oracle_importance(const ModelWeights& weights, std::span<const TokenId> context_tokens,
                                     std::span<const TokenId> query_tokens,
                                     ScoreAggregation aggregation = ScoreAggregation::AllQueryTokens);

OracleRun compute_oracle(const ModelWeights& weights, std::span<const TokenId> context_tokens,
                         std::span<const TokenId> query_tokens, int max_new_tokens,
                         ScoreAggregation aggregation = ScoreAggregation::AllQueryTokens);

SelectionResult select_tokens(Policy policy, double ratio, const ModelWeights& weights,
                              std::span<const TokenId> query_tokens, const FusedContext& fused, ChunkStore& store,
                              const FusionOptions& options);

// End to end: assemble, select, recompute, forward the query, decode. When
// `with_oracle` is set the result carries comparison metrics; a precomputed
// oracle may be passed to avoid recomputing it.
RunResult run(Policy policy, double ratio, std::span<const std::string> chunk_ids, const std::string& query_text,
              ChunkStore& store, const FusionOptions& options = {}, bool with_oracle = false,
              const OracleRun* oracle = nullptr);

}  // namespace qcfuse
