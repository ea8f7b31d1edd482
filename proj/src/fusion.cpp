#include "qcfuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "qcfuse/common.hpp"
#include "qcfuse/layer_ops.hpp"
#include "qcfuse/metrics.hpp"
#include "qcfuse/splitmix.hpp"

namespace qcfuse {

const char* to_string(ScoreAggregation a) {
  return a == ScoreAggregation::AllQueryTokens ? "all_query_tokens" : "last_query_token";
}

const char* to_string(EpicMode m) { return m == EpicMode::PerSequence ? "per_sequence" : "per_chunk"; }

PastKV FusedContext::as_past() const {
  PastKV past;
  past.layers = layers;
  past.positions.resize(n_ctx + 1);
  std::iota(past.positions.begin(), past.positions.end(), 0);
  return past;
}

int FusedContext::chunk_of(int position) const {
  if (position < 1 || position > n_ctx) throw std::out_of_range("chunk_of: position outside the context");
  auto it = std::upper_bound(offsets.begin(), offsets.end(), position);
  return static_cast<int>(it - offsets.begin()) - 1;
}

namespace {

std::vector<int> iota_positions(int first, int count) {
  std::vector<int> v(count);
  std::iota(v.begin(), v.end(), first);
  return v;
}

void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("ratio must lie in [0, 1]");
}

std::vector<int> query_positions(const FusedContext& fused, size_t n_query) {
  return iota_positions(fused.n_ctx + 1, static_cast<int>(n_query));
}

}  // namespace

FusedContext assemble_context(std::span<const std::string> chunk_ids, ChunkStore& store, SimClock* clock) {
  if (chunk_ids.empty()) throw std::invalid_argument("assemble_context: empty chunk list");
  const auto& cfg = store.weights().config;
  FusedContext fused;
  fused.layers.reserve(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerKV layer(0, cfg.n_heads, cfg.d_head, 0);
    layer.append(store.bos_kv()[l]);
    fused.layers.push_back(std::move(layer));
  }
  int offset = 1;
  for (const auto& id : chunk_ids) {
    auto rec = store.record(id);
    for (int l = 0; l < cfg.n_layers; ++l) {
      FetchResult fr = store.fetch_layer(id, l, clock);
      rope_rotate(fr.kv.keys, cfg.d_head, offset, cfg.rope_theta);
      fused.layers[l].append(fr.kv);
    }
    fused.chunk_ids.push_back(id);
    fused.token_ids.insert(fused.token_ids.end(), rec->token_ids.begin(), rec->token_ids.end());
    fused.offsets.push_back(offset);
    fused.lengths.push_back(rec->n_tokens);
    offset += rec->n_tokens;
  }
  fused.n_ctx = offset - 1;
  return fused;
}

FusedContext exact_context(const ModelWeights& weights, const std::vector<Tokens>& chunks) {
  if (chunks.empty()) throw std::invalid_argument("exact_context: empty chunk list");
  FusedContext fused;
  Tokens all{kBos};
  int offset = 1;
  for (const auto& c : chunks) {
    if (c.empty()) throw std::invalid_argument("exact_context: empty chunk");
    fused.chunk_ids.push_back(chunk_hash(c));
    fused.offsets.push_back(offset);
    fused.lengths.push_back(static_cast<int>(c.size()));
    fused.token_ids.insert(fused.token_ids.end(), c.begin(), c.end());
    all.insert(all.end(), c.begin(), c.end());
    offset += static_cast<int>(c.size());
  }
  fused.n_ctx = offset - 1;
  fused.layers = forward_full(weights, all, 0).kv;
  return fused;
}

QueryProbe probe_query(const ModelWeights& weights, std::span<const TokenId> query_tokens, const FusedContext& fused,
                       ChunkStore& store, const AnchorSource& anchors) {
  const auto& cfg = weights.config;
  if (query_tokens.empty()) throw std::invalid_argument("probe_query: empty query");
  if (anchors.ratio && !(*anchors.ratio >= 0.0 && *anchors.ratio <= 1.0)) {
    throw std::invalid_argument("probe_query: anchor ratio must lie in [0, 1]");
  }

  PastKV past = PastKV::empty(cfg);
  for (int l = 0; l < cfg.n_layers; ++l) past.layers[l].append_row(fused.layers[l], 0);
  past.positions.push_back(0);

  int n_anchor_rows = 0;
  for (size_t c = 0; c < fused.chunk_ids.size(); ++c) {
    if (anchors.ratio && *anchors.ratio == 0.0) break;
    const std::string& id = fused.chunk_ids[c];
    auto rec = store.record(id);
    std::vector<LayerKV> rows;
    std::vector<int> idx;
    if (anchors.ratio) {
      idx = extract_anchors(rec->key_norms, *anchors.ratio);
      for (int l = 0; l < cfg.n_layers; ++l) {
        LayerKV layer(0, cfg.n_heads, cfg.d_head, 0);
        for (int a : idx) layer.append_row(rec->layers[l], a);
        rows.push_back(std::move(layer));
      }
    } else {
      idx = rec->anchor_indices;
      if (idx.empty()) throw std::runtime_error("probe_query: chunk " + id + " has no anchors");
      for (int l = 0; l < cfg.n_layers; ++l) rows.push_back(store.fetch_anchors(id, l).kv);
    }
    const int offset = fused.offsets[c];
    for (auto& layer : rows) rope_rotate(layer.keys, cfg.d_head, offset, cfg.rope_theta);
    std::vector<int> pos(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) pos[i] = offset + idx[i];
    past.append(rows, pos);
    n_anchor_rows += static_cast<int>(idx.size());
  }

  QueryProbe probe;
  probe.query_tokens.assign(query_tokens.begin(), query_tokens.end());
  probe.positions = query_positions(fused, query_tokens.size());
  probe.past_positions = past.positions;
  probe.n_anchor_rows = n_anchor_rows;
  ForwardTrace t = forward_with_past(weights, query_tokens, past, probe.positions, {.attention = true, .queries = true});
  probe.queries = std::move(t.queries);
  probe.critical_attention = std::move(t.attention[cfg.critical_layer - 1]);
  return probe;
}

std::vector<float> score_layer(std::span<const float> queries, int n_query, const LayerKV& fused_layer, int n_ctx,
                               ScoreAggregation aggregation) {
  const int heads = fused_layer.n_heads;
  const int dim = fused_layer.d_head;
  const size_t width = static_cast<size_t>(heads) * dim;
  if (n_query < 1 || queries.size() != static_cast<size_t>(n_query) * width) {
    throw std::invalid_argument("score_layer: query tensor shape mismatch");
  }
  if (fused_layer.n_tokens != n_ctx + 1) throw std::invalid_argument("score_layer: key rows must be n_ctx + 1");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<double> acc(n_ctx, 0.0);
  std::vector<double> logits(n_ctx);
  const int first_row = aggregation == ScoreAggregation::LastQueryToken ? n_query - 1 : 0;
  int rows = 0;
  for (int t = first_row; t < n_query; ++t) {
    for (int h = 0; h < heads; ++h) {
      const float* q = queries.data() + t * width + static_cast<size_t>(h) * dim;
      double mx = -INFINITY;
      for (int i = 0; i < n_ctx; ++i) {
        const float* k = fused_layer.key_row(i + 1).data() + static_cast<size_t>(h) * dim;
        double dot = 0.0;
        for (int d = 0; d < dim; ++d) dot += static_cast<double>(q[d]) * k[d];
        logits[i] = dot * scale;
        mx = std::max(mx, logits[i]);
      }
      double sum = 0.0;
      for (int i = 0; i < n_ctx; ++i) {
        logits[i] = std::exp(logits[i] - mx);
        sum += logits[i];
      }
      for (int i = 0; i < n_ctx; ++i) acc[i] += logits[i] / sum;
      ++rows;
    }
  }
  std::vector<float> scores(n_ctx);
  for (int i = 0; i < n_ctx; ++i) scores[i] = static_cast<float>(acc[i] / rows);
  return scores;
}

std::vector<float> score_critical(const QueryProbe& probe, const FusedContext& fused, const ModelConfig& config,
                                  ScoreAggregation aggregation) {
  const int layer = config.critical_layer - 1;
  return score_layer(probe.queries.at(layer), static_cast<int>(probe.query_tokens.size()), fused.layers.at(layer),
                     fused.n_ctx, aggregation);
}

SelectionResult select_topN(std::span<const float> scores, double ratio, Policy policy) {
  check_ratio(ratio);
  const int n_ctx = static_cast<int>(scores.size());
  SelectionResult r;
  r.policy = policy;
  r.ratio = ratio;
  r.n = ceil_count(ratio, n_ctx);
  r.scores.assign(scores.begin(), scores.end());
  r.indices = top_positions(scores, r.n);
  return r;
}

std::vector<int> top_positions(std::span<const float> scores, int n) {
  const int n_ctx = static_cast<int>(scores.size());
  n = std::clamp(n, 0, n_ctx);
  std::vector<int> order(n_ctx);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) out[i] = order[i] + 1;
  std::sort(out.begin(), out.end());
  return out;
}

SelectionResult qcfuse_select(const ModelWeights& weights, std::span<const TokenId> query_tokens,
                              const FusedContext& fused, ChunkStore& store, double ratio, const AnchorSource& anchors,
                              ScoreAggregation aggregation) {
  QueryProbe probe = probe_query(weights, query_tokens, fused, store, anchors);
  return select_topN(score_critical(probe, fused, weights.config, aggregation), ratio, Policy::QCFuse);
}

SelectionResult qclast_select(const ModelWeights& weights, std::span<const TokenId> query_tokens,
                              const FusedContext& fused, double ratio, ScoreAggregation aggregation) {
  const auto& cfg = weights.config;
  if (query_tokens.empty()) throw std::invalid_argument("qclast_select: empty query");
  PastKV past = PastKV::empty(cfg);
  for (int l = 0; l < cfg.n_layers; ++l) past.layers[l].append_row(fused.layers[l], 0);
  past.positions.push_back(0);
  const auto qpos = query_positions(fused, query_tokens.size());
  ForwardTrace t = forward_with_past(weights, query_tokens, past, qpos, {.queries = true});
  const int last = cfg.n_layers - 1;
  auto scores = score_layer(t.queries[last], static_cast<int>(query_tokens.size()), fused.layers[last], fused.n_ctx,
                            aggregation);
  return select_topN(scores, ratio, Policy::QCLast);
}

SelectionResult qcall_select(const ModelWeights& weights, std::span<const TokenId> query_tokens,
                             const FusedContext& fused, double ratio, ScoreAggregation aggregation) {
  const auto& cfg = weights.config;
  if (query_tokens.empty()) throw std::invalid_argument("qcall_select: empty query");
  const auto qpos = query_positions(fused, query_tokens.size());
  ForwardTrace t = forward_with_past(weights, query_tokens, fused.as_past(), qpos, {.queries = true});
  std::vector<double> acc(fused.n_ctx, 0.0);
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto s = score_layer(t.queries[l], static_cast<int>(query_tokens.size()), fused.layers[l], fused.n_ctx,
                         aggregation);
    for (int i = 0; i < fused.n_ctx; ++i) acc[i] += s[i];
  }
  std::vector<float> scores(fused.n_ctx);
  for (int i = 0; i < fused.n_ctx; ++i) scores[i] = static_cast<float>(acc[i] / cfg.n_layers);
  return select_topN(scores, ratio, Policy::QCAll);
}

std::vector<float> kv_deviation(const ModelWeights& weights, const FusedContext& fused,
                                std::vector<float>* attention_received) {
  const auto& cfg = weights.config;
  const int n = fused.n_ctx;
  RowBatch rows = embed_rows(weights, fused.token_ids, iota_positions(1, n), iota_positions(1, n));
  LayerKV window = fused.layers[0];
  const auto window_positions = iota_positions(0, n + 1);
  std::vector<float> attn;
  if (attention_received) attn.resize(static_cast<size_t>(cfg.n_heads) * n * (n + 1));
  run_layer(weights, 0, window, window_positions, rows, attn);

  LayerKV next;
  project_kv(weights, 1, rows, next);
  const LayerKV& reused = fused.layers[1];
  std::vector<float> dev(n);
  for (int i = 0; i < n; ++i) {
    double total = 0.0;
    for (int h = 0; h < cfg.n_heads; ++h) {
      double dk = 0.0;
      double dv = 0.0;
      for (int d = 0; d < cfg.d_head; ++d) {
        const size_t at = static_cast<size_t>(h) * cfg.d_head + d;
        const double ek = static_cast<double>(next.key_row(i)[at]) - reused.key_row(i + 1)[at];
        const double ev = static_cast<double>(next.value_row(i)[at]) - reused.value_row(i + 1)[at];
        dk += ek * ek;
        dv += ev * ev;
      }
      total += std::sqrt(dk) + std::sqrt(dv);
    }
    dev[i] = static_cast<float>(total);
  }

  if (attention_received) {
    attention_received->assign(n, 0.0f);
    const size_t cols = static_cast<size_t>(n) + 1;
    for (int i = 0; i < n; ++i) {
      double sum = 0.0;
      for (int h = 0; h < cfg.n_heads; ++h) {
        for (int r = 0; r < n; ++r) sum += attn[(static_cast<size_t>(h) * n + r) * cols + (i + 1)];
      }
      (*attention_received)[i] = static_cast<float>(sum / (static_cast<double>(cfg.n_heads) * n));
    }
  }
  return dev;
}

SelectionResult cacheblend_select(const ModelWeights& weights, const FusedContext& fused, double ratio) {
  return select_topN(kv_deviation(weights, fused), ratio, Policy::CacheBlend);
}

SelectionResult kvshare_select(const ModelWeights& weights, const FusedContext& fused, double ratio) {
  std::vector<float> received;
  auto dev = kv_deviation(weights, fused, &received);
  for (size_t i = 0; i < dev.size(); ++i) dev[i] *= received[i];
  return select_topN(dev, ratio, Policy::KVShare);
}

SelectionResult epic_select(int n_ctx, double ratio, EpicMode mode, std::span<const int> chunk_lengths) {
  check_ratio(ratio);
  SelectionResult r;
  r.policy = Policy::EPIC;
  r.ratio = ratio;
  r.n = ceil_count(ratio, n_ctx);
  r.scores.assign(n_ctx, 0.0f);
  if (mode == EpicMode::PerSequence || chunk_lengths.empty()) {
    r.indices = iota_positions(1, r.n);
    return r;
  }
  if (std::accumulate(chunk_lengths.begin(), chunk_lengths.end(), 0) != n_ctx) {
    throw std::invalid_argument("epic_select: chunk lengths do not sum to n_ctx");
  }
  // Chunk starts first, then second tokens of every chunk, and so on.
  std::vector<int> starts;
  int offset = 1;
  for (int len : chunk_lengths) {
    starts.push_back(offset);
    offset += len;
  }
  for (int depth = 0; static_cast<int>(r.indices.size()) < r.n; ++depth) {
    for (size_t c = 0; c < starts.size() && static_cast<int>(r.indices.size()) < r.n; ++c) {
      if (depth < chunk_lengths[c]) r.indices.push_back(starts[c] + depth);
    }
  }
  std::sort(r.indices.begin(), r.indices.end());
  return r;
}

SelectionResult random_select(uint64_t seed, int n_ctx, double ratio) {
  check_ratio(ratio);
  SelectionResult r;
  r.policy = Policy::Random;
  r.ratio = ratio;
  r.n = ceil_count(ratio, n_ctx);
  r.scores.assign(n_ctx, 0.0f);
  std::vector<int> pool = iota_positions(1, n_ctx);
  SplitMix64 rng(seed);
  for (int i = 0; i < r.n; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(n_ctx - i)));
    std::swap(pool[i], pool[j]);
  }
  r.indices.assign(pool.begin(), pool.begin() + r.n);
  std::sort(r.indices.begin(), r.indices.end());
  return r;
}

SelectionResult full_selection(Policy policy, int n_ctx, double ratio) {
  SelectionResult r;
  r.policy = policy;
  r.scores.assign(n_ctx, 0.0f);
  if (policy == Policy::FullCompute) {
    r.ratio = 1.0;
    r.n = n_ctx;
    r.indices = iota_positions(1, n_ctx);
  } else if (policy == Policy::FullReuse) {
    r.ratio = 0.0;
    r.n = 0;
  } else {
    throw std::invalid_argument("full_selection: only FullCompute and FullReuse are fixed selections");
  }
  (void)ratio;
  return r;
}

std::pair<FusedContext, RecomputeTrace> recompute_selected(const ModelWeights& weights, const FusedContext& fused,
                                                           const SelectionResult& selection, const CostModel& cost) {
  const auto& cfg = weights.config;
  for (size_t i = 0; i < selection.indices.size(); ++i) {
    const int p = selection.indices[i];
    if (p < 1 || p > fused.n_ctx || (i > 0 && p <= selection.indices[i - 1])) {
      throw std::invalid_argument("recompute_selected: selection must be ascending positions in [1, n_ctx]");
    }
  }
  FusedContext updated = fused;
  RecomputeTrace trace;
  const int n_sel = static_cast<int>(selection.indices.size());
  const LayerTimes t = layer_times(n_sel, fused.n_ctx, cfg, cost);
  trace.updated.assign(cfg.n_layers, selection.indices);
  trace.compute_seconds.assign(cfg.n_layers, t.compute);
  trace.fetch_seconds.assign(cfg.n_layers, t.fetch);

  if (n_sel > 0) {
    Tokens tokens(n_sel);
    for (int i = 0; i < n_sel; ++i) tokens[i] = fused.token_ids[selection.indices[i] - 1];
    RowBatch rows = embed_rows(weights, tokens, selection.indices, selection.indices);
    const auto window_positions = iota_positions(0, fused.n_ctx + 1);
    for (int l = 0; l < cfg.n_layers; ++l) run_layer(weights, l, updated.layers[l], window_positions, rows);
  }

  const ScheduleTrace s = schedule_pipelined(trace.fetch_seconds, trace.compute_seconds, 0.0);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& st = s.layers[l];
    trace.events.push_back({RecomputeEvent::Kind::Fetch, l + 1, st.fetch_start, st.fetch_end});
    trace.events.push_back({RecomputeEvent::Kind::Compute, l + 1, st.compute_start, st.compute_end});
  }
  std::stable_sort(trace.events.begin(), trace.events.end(),
                   [](const RecomputeEvent& a, const RecomputeEvent& b) { return a.start < b.start; });
  return {std::move(updated), std::move(trace)};
}

namespace {

Tokens full_sequence(std::span<const TokenId> context_tokens, std::span<const TokenId> query_tokens) {
  Tokens all{kBos};
  all.insert(all.end(), context_tokens.begin(), context_tokens.end());
  all.insert(all.end(), query_tokens.begin(), query_tokens.end());
  return all;
}

std::vector<float> importance_from_trace(const ForwardTrace& t, int critical_layer, int n_ctx, int n_query,
                                         int n_heads, ScoreAggregation aggregation) {
  std::vector<double> acc(n_ctx, 0.0);
  const int first = aggregation == ScoreAggregation::LastQueryToken ? n_query - 1 : 0;
  int rows = 0;
  for (int q = first; q < n_query; ++q) {
    const int row = n_ctx + 1 + q;
    for (int h = 0; h < n_heads; ++h) {
      for (int i = 0; i < n_ctx; ++i) acc[i] += t.attention_at(critical_layer - 1, h, row, i + 1);
      ++rows;
    }
  }
  std::vector<float> out(n_ctx);
  for (int i = 0; i < n_ctx; ++i) out[i] = static_cast<float>(acc[i] / rows);
  return out;
}

}  // namespace

std::vector<float> oracle_importance(const ModelWeights& weights, std::span<const TokenId> context_tokens,
                                     std::span<const TokenId> query_tokens, ScoreAggregation aggregation) {
  if (query_tokens.empty()) throw std::invalid_argument("oracle_importance: empty query");
  const Tokens all = full_sequence(context_tokens, query_tokens);
  ForwardTrace t = forward_full(weights, all, 0, {.attention = true});
  return importance_from_trace(t, weights.config.critical_layer, static_cast<int>(context_tokens.size()),
                               static_cast<int>(query_tokens.size()), weights.config.n_heads, aggregation);
}

OracleRun compute_oracle(const ModelWeights& weights, std::span<const TokenId> context_tokens,
                         std::span<const TokenId> query_tokens, int max_new_tokens, ScoreAggregation aggregation) {
  if (query_tokens.empty()) throw std::invalid_argument("compute_oracle: empty query");
  const Tokens all = full_sequence(context_tokens, query_tokens);
  ForwardTrace t = forward_full(weights, all, 0, {.attention = true});
  OracleRun o;
  const auto last = t.logits_row(t.n_tokens - 1);
  o.first_logits.assign(last.begin(), last.end());
  o.importance = importance_from_trace(t, weights.config.critical_layer, static_cast<int>(context_tokens.size()),
                                       static_cast<int>(query_tokens.size()), weights.config.n_heads, aggregation);
  PastKV state;
  state.layers = std::move(t.kv);
  state.positions = iota_positions(0, static_cast<int>(all.size()));
  o.answer = decode_greedy(weights, state, o.first_logits, max_new_tokens);
  return o;
}

SelectionResult select_tokens(Policy policy, double ratio, const ModelWeights& weights,
                              std::span<const TokenId> query_tokens, const FusedContext& fused, ChunkStore& store,
                              const FusionOptions& options) {
  check_ratio(ratio);
  switch (policy) {
    case Policy::FullCompute:
    case Policy::FullReuse:
      return full_selection(policy, fused.n_ctx, ratio);
    case Policy::Random:
      return random_select(options.random_seed, fused.n_ctx, ratio);
    case Policy::EPIC:
      return epic_select(fused.n_ctx, ratio, options.epic_mode, fused.lengths);
    case Policy::CacheBlend:
      return cacheblend_select(weights, fused, ratio);
    case Policy::KVShare:
      return kvshare_select(weights, fused, ratio);
    case Policy::QCLast:
      return qclast_select(weights, query_tokens, fused, ratio, options.aggregation);
    case Policy::QCAll:
      return qcall_select(weights, query_tokens, fused, ratio, options.aggregation);
    case Policy::QCFuse:
      return qcfuse_select(weights, query_tokens, fused, store, ratio, AnchorSource{options.probe_anchor_ratio},
                           options.aggregation);
  }
  throw std::logic_error("select_tokens: unhandled policy");
}

RunResult run(Policy policy, double ratio, std::span<const std::string> chunk_ids, const std::string& query_text,
              ChunkStore& store, const FusionOptions& options, bool with_oracle, const OracleRun* oracle) {
  check_ratio(ratio);
  const ModelWeights& weights = store.weights();
  const auto& cfg = weights.config;
  const Tokens query = tokenize_body(query_text);
  if (query.empty()) throw std::invalid_argument("run: empty query");

  SimClock clock;
  FusedContext fused = assemble_context(chunk_ids, store, &clock);
  SelectionResult selection = select_tokens(policy, ratio, weights, query, fused, store, options);
  auto [updated, trace] = recompute_selected(weights, fused, selection, options.cost);

  const auto qpos = query_positions(updated, query.size());
  PastKV state = updated.as_past();
  ForwardTrace fwd = forward_with_past(weights, query, state, qpos);
  state.append(fwd.kv, qpos);

  RunResult r;
  r.policy = policy;
  r.ratio = ratio;
  r.chunk_ids = fused.chunk_ids;
  r.offsets = fused.offsets;
  r.context_tokens = fused.token_ids;
  r.query_tokens = query;
  const auto last = fwd.logits_row(fwd.n_tokens - 1);
  r.first_logits.assign(last.begin(), last.end());
  r.answer = decode_greedy(weights, state, r.first_logits, options.max_new_tokens);
  r.answer_text = detokenize(r.answer);

  PrephaseInputs in;
  in.n_ctx = fused.n_ctx;
  in.n_query = static_cast<int>(query.size());
  in.n_probe_past = 1;
  if (policy == Policy::QCFuse) {
    for (const auto& id : fused.chunk_ids) {
      const auto rec = store.record(id);
      if (options.probe_anchor_ratio) {
        if (*options.probe_anchor_ratio > 0.0) in.n_probe_past += std::max(1, ceil_count(*options.probe_anchor_ratio, rec->n_tokens));
      } else {
        in.n_probe_past += static_cast<int>(rec->anchor_indices.size());
      }
    }
  }
  const PolicyPlan plan = plan_policy(policy, selection.n, cfg, options.cost, in);
  r.schedule = options.pipelined ? schedule_pipelined(plan.fetch, plan.compute, plan.pre_phase)
                                 : schedule_sequential(plan.fetch, plan.compute, plan.pre_phase);
  r.schedule.ttft = r.schedule.ttft_core + options.cost.decode_gamma;
  r.ttft = r.schedule.ttft;

  trace.fetch_seconds = plan.fetch;
  trace.compute_seconds = plan.compute;
  trace.events.clear();
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& st = r.schedule.layers[l];
    if (st.fetch_end > st.fetch_start) {
      trace.events.push_back({RecomputeEvent::Kind::Fetch, l + 1, st.fetch_start, st.fetch_end});
    }
    trace.events.push_back({RecomputeEvent::Kind::Compute, l + 1, st.compute_start, st.compute_end});
  }
  std::stable_sort(trace.events.begin(), trace.events.end(),
                   [](const RecomputeEvent& a, const RecomputeEvent& b) { return a.start < b.start; });
  r.recompute = std::move(trace);
  r.selection = std::move(selection);

  if (with_oracle) {
    OracleRun local;
    if (!oracle) {
      local = compute_oracle(weights, fused.token_ids, query, options.max_new_tokens, options.aggregation);
      oracle = &local;
    }
    OracleMetrics m;
    m.logit_div_max = logit_divergence(oracle->first_logits, r.first_logits);
    m.logit_kl = logit_kl(oracle->first_logits, r.first_logits);
    m.token_match = token_match_rate(oracle->answer, r.answer, options.max_new_tokens);
    m.overlap = selection_overlap(r.selection.indices, top_positions(oracle->importance, r.selection.n));
    r.metrics = m;
  }
  return r;
}

}  // namespace qcfuse
