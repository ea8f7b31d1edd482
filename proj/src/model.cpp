#include "qcfuse/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "qcfuse/attention.hpp"
#include "qcfuse/layer_ops.hpp"
#include "qcfuse/splitmix.hpp"

namespace qcfuse {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid model config: " + what); };
  if (n_layers < 4) fail("n_layers must be >= 4");
  if (n_heads < 1 || d_head < 1 || d_ff < 1) fail("dimensions must be positive");
  if (d_model != n_heads * d_head) fail("d_model must equal n_heads * d_head");
  if (d_head % 2 != 0) fail("d_head must be even for rotary positions");
  if (vocab_size != kVocabSize) fail("vocab_size must be 259");
  if (!(rope_theta > 0.0)) fail("rope_theta must be positive");
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
  if (critical_layer <= 1 || critical_layer >= n_layers) fail("critical_layer must satisfy 1 < c < n_layers");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "n_layers=" << n_layers << ";n_heads=" << n_heads << ";d_model=" << d_model << ";d_head=" << d_head
     << ";d_ff=" << d_ff << ";vocab_size=" << vocab_size << ";rope_theta=" << rope_theta << ";ln_eps=" << ln_eps
     << ";seed=" << seed << ";critical_layer=" << critical_layer << ";";
  return os.str();
}

ModelConfig make_config(int n_layers, int n_heads, int d_model, uint64_t seed) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_model = d_model;
  c.d_head = n_heads > 0 ? d_model / n_heads : 0;
  c.d_ff = 4 * d_model;
  c.seed = seed;
  c.critical_layer = (n_layers + 1) / 2;
  return c;
}

LayerKV::LayerKV(int n_tokens_, int n_heads_, int d_head_, int base_position_)
    : n_tokens(n_tokens_),
      n_heads(n_heads_),
      d_head(d_head_),
      base_position(base_position_),
      keys(static_cast<size_t>(n_tokens_) * n_heads_ * d_head_, 0.0f),
      values(static_cast<size_t>(n_tokens_) * n_heads_ * d_head_, 0.0f) {}

void LayerKV::append_row(const LayerKV& src, int row) {
  auto k = src.key_row(row);
  auto v = src.value_row(row);
  keys.insert(keys.end(), k.begin(), k.end());
  values.insert(values.end(), v.begin(), v.end());
  ++n_tokens;
}

void LayerKV::append(const LayerKV& src) {
  keys.insert(keys.end(), src.keys.begin(), src.keys.end());
  values.insert(values.end(), src.values.begin(), src.values.end());
  n_tokens += src.n_tokens;
}

PastKV PastKV::empty(const ModelConfig& config) {
  PastKV p;
  p.layers.assign(config.n_layers, LayerKV(0, config.n_heads, config.d_head));
  return p;
}

void PastKV::append(const std::vector<LayerKV>& layer_rows, std::span<const int> row_positions) {
  if (layer_rows.size() != layers.size()) throw std::invalid_argument("PastKV::append: layer count mismatch");
  for (size_t l = 0; l < layers.size(); ++l) layers[l].append(layer_rows[l]);
  positions.insert(positions.end(), row_positions.begin(), row_positions.end());
}

Tokens tokenize(std::string_view text) {
  Tokens out;
  out.reserve(text.size() + 1);
  out.push_back(kBos);
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

Tokens tokenize_body(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

std::string detokenize(std::span<const TokenId> tokens) {
  std::string s;
  for (TokenId t : tokens) {
    if (t >= 0 && t < 256) s.push_back(static_cast<char>(t));
  }
  return s;
}

ModelWeights init_weights(const ModelConfig& config) {
  config.validate();
  ModelWeights w;
  w.config = config;
  uint64_t step = 0;
  auto random_block = [&](size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) {
      x = static_cast<float>(-0.05 + 0.1 * to_unit_double(splitmix64_at(config.seed, step++)));
    }
    return v;
  };
  // Layer-norm parameters still occupy their flat indices.
  auto constant_block = [&](size_t n, float value) {
    step += n;
    return std::vector<float>(n, value);
  };

  const size_t dm = config.d_model;
  const size_t ff = config.d_ff;
  w.token_embedding = random_block(static_cast<size_t>(config.vocab_size) * dm);
  w.layers.resize(config.n_layers);
  for (auto& layer : w.layers) {
    layer.wq = random_block(dm * dm);
    layer.wk = random_block(dm * dm);
    layer.wv = random_block(dm * dm);
    layer.wo = random_block(dm * dm);
    layer.ln1_gain = constant_block(dm, 1.0f);
    layer.ln1_bias = constant_block(dm, 0.0f);
    layer.ln2_gain = constant_block(dm, 1.0f);
    layer.ln2_bias = constant_block(dm, 0.0f);
    layer.w1 = random_block(dm * ff);
    layer.w2 = random_block(ff * dm);
  }
  w.final_gain = constant_block(dm, 1.0f);
  w.final_bias = constant_block(dm, 0.0f);
  return w;
}

namespace {

void layer_norm(std::span<const float> x, const std::vector<float>& gain, const std::vector<float>& bias, float eps,
                std::span<float> out) {
  const size_t n = x.size();
  float mean = 0.0f;
  for (float v : x) mean += v;
  mean /= static_cast<float>(n);
  float var = 0.0f;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<float>(n);
  const float inv = 1.0f / std::sqrt(var + eps);
  for (size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
}

// y = x · W with W stored [in × out].
void matvec(std::span<const float> x, const std::vector<float>& w, size_t out_dim, std::span<float> y) {
  for (size_t j = 0; j < out_dim; ++j) y[j] = 0.0f;
  for (size_t i = 0; i < x.size(); ++i) {
    const float xi = x[i];
    const float* row = w.data() + i * out_dim;
    for (size_t j = 0; j < out_dim; ++j) y[j] += xi * row[j];
  }
}

void check_positions(std::span<const int> positions) {
  for (size_t i = 1; i < positions.size(); ++i) {
    if (positions[i] <= positions[i - 1]) throw std::invalid_argument("token positions must be strictly increasing");
  }
}

}  // namespace

void rope_rotate(std::span<float> vec, int d_head, long delta, double theta) {
  if (d_head % 2 != 0 || vec.size() % static_cast<size_t>(d_head) != 0) {
    throw std::invalid_argument("rope_rotate: d_head must be even and divide the vector");
  }
  const int half = d_head / 2;
  for (size_t base = 0; base < vec.size(); base += d_head) {
    for (int j = 0; j < half; ++j) {
      const double freq = std::pow(theta, -2.0 * j / d_head);
      const double angle = static_cast<double>(delta) * freq;
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      const double x = vec[base + 2 * j];
      const double y = vec[base + 2 * j + 1];
      vec[base + 2 * j] = static_cast<float>(x * c - y * s);
      vec[base + 2 * j + 1] = static_cast<float>(x * s + y * c);
    }
  }
}

std::vector<float> rope_rotate_key(std::span<const float> key, long delta, double theta) {
  std::vector<float> out(key.begin(), key.end());
  rope_rotate(out, static_cast<int>(out.size()), delta, theta);
  return out;
}

RowBatch embed_rows(const ModelWeights& weights, std::span<const TokenId> tokens, std::vector<int> slots,
                    std::vector<int> positions) {
  if (slots.size() != tokens.size() || positions.size() != tokens.size()) {
    throw std::invalid_argument("embed_rows: length mismatch");
  }
  RowBatch rows;
  rows.slots = std::move(slots);
  rows.positions = std::move(positions);
  const size_t dm = weights.config.d_model;
  rows.hidden.resize(tokens.size() * dm);
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= weights.config.vocab_size) throw std::invalid_argument("token id out of range");
    auto e = weights.embedding_row(tokens[i]);
    std::copy(e.begin(), e.end(), rows.hidden.begin() + static_cast<std::ptrdiff_t>(i * dm));
  }
  return rows;
}

void project_kv(const ModelWeights& weights, int layer, const RowBatch& rows, LayerKV& out) {
  const auto& cfg = weights.config;
  const auto& lw = weights.layers.at(layer);
  const size_t dm = cfg.d_model;
  out = LayerKV(rows.size(), cfg.n_heads, cfg.d_head, rows.size() ? rows.positions[0] : 0);
  std::vector<float> h(dm);
  for (int r = 0; r < rows.size(); ++r) {
    std::span<const float> x(rows.hidden.data() + r * dm, dm);
    layer_norm(x, lw.ln1_gain, lw.ln1_bias, static_cast<float>(cfg.ln_eps), h);
    matvec(h, lw.wk, dm, out.key_row(r));
    matvec(h, lw.wv, dm, out.value_row(r));
    rope_rotate(out.key_row(r), cfg.d_head, rows.positions[r], cfg.rope_theta);
  }
}

void run_layer(const ModelWeights& weights, int layer, LayerKV& window, std::span<const int> window_positions,
               RowBatch& rows, std::span<float> attention_out, std::span<float> queries_out) {
  const auto& cfg = weights.config;
  const auto& lw = weights.layers.at(layer);
  const size_t dm = cfg.d_model;
  const size_t ff = cfg.d_ff;
  const int n = rows.size();
  if (static_cast<int>(window_positions.size()) != window.n_tokens) {
    throw std::invalid_argument("run_layer: window positions mismatch");
  }

  std::vector<float> h(dm);
  std::vector<float> q(static_cast<size_t>(n) * dm);
  for (int r = 0; r < n; ++r) {
    std::span<const float> x(rows.hidden.data() + r * dm, dm);
    layer_norm(x, lw.ln1_gain, lw.ln1_bias, static_cast<float>(cfg.ln_eps), h);
    std::span<float> qr(q.data() + r * dm, dm);
    matvec(h, lw.wq, dm, qr);
    rope_rotate(qr, cfg.d_head, rows.positions[r], cfg.rope_theta);
    auto k = window.key_row(rows.slots[r]);
    matvec(h, lw.wk, dm, k);
    rope_rotate(k, cfg.d_head, rows.positions[r], cfg.rope_theta);
    matvec(h, lw.wv, dm, window.value_row(rows.slots[r]));
  }
  if (!queries_out.empty()) std::copy(q.begin(), q.end(), queries_out.begin());

  std::vector<float> attn(static_cast<size_t>(n) * dm);
  sparse_attention(q, rows.positions, window.keys, window.values, window_positions, cfg.n_heads, cfg.d_head, attn,
                   attention_out);

  std::vector<float> proj(dm);
  std::vector<float> inner(ff);
  for (int r = 0; r < n; ++r) {
    std::span<float> x(rows.hidden.data() + r * dm, dm);
    matvec(std::span<const float>(attn.data() + r * dm, dm), lw.wo, dm, proj);
    for (size_t i = 0; i < dm; ++i) x[i] += proj[i];
    layer_norm(x, lw.ln2_gain, lw.ln2_bias, static_cast<float>(cfg.ln_eps), h);
    matvec(h, lw.w1, ff, inner);
    for (auto& v : inner) v = v > 0.0f ? v : 0.0f;
    matvec(inner, lw.w2, dm, proj);
    for (size_t i = 0; i < dm; ++i) x[i] += proj[i];
  }
}

std::vector<float> output_logits(const ModelWeights& weights, const RowBatch& rows) {
  const auto& cfg = weights.config;
  const size_t dm = cfg.d_model;
  std::vector<float> logits(static_cast<size_t>(rows.size()) * cfg.vocab_size);
  std::vector<float> h(dm);
  for (int r = 0; r < rows.size(); ++r) {
    layer_norm(std::span<const float>(rows.hidden.data() + r * dm, dm), weights.final_gain, weights.final_bias,
               static_cast<float>(cfg.ln_eps), h);
    for (int v = 0; v < cfg.vocab_size; ++v) {
      auto e = weights.embedding_row(v);
      float dot = 0.0f;
      for (size_t i = 0; i < dm; ++i) dot += h[i] * e[i];
      logits[static_cast<size_t>(r) * cfg.vocab_size + v] = dot;
    }
  }
  return logits;
}

ForwardTrace forward_with_past(const ModelWeights& weights, std::span<const TokenId> tokens, const PastKV& past,
                               std::span<const int> positions, ForwardOptions options) {
  const auto& cfg = weights.config;
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (positions.size() != tokens.size()) throw std::invalid_argument("forward: positions/tokens length mismatch");
  if (static_cast<int>(past.layers.size()) != cfg.n_layers) throw std::invalid_argument("forward: past layer count");
  check_positions(positions);
  for (int p : past.positions) {
    if (p >= positions.front()) {
      throw std::invalid_argument("forward: new token position " + std::to_string(positions.front()) +
                                  " overlaps past position " + std::to_string(p));
    }
  }
  if (positions.front() < 0) throw std::invalid_argument("forward: negative position");

  const int n_past = past.size();
  const int n = static_cast<int>(tokens.size());
  std::vector<int> slots(n);
  for (int i = 0; i < n; ++i) slots[i] = n_past + i;
  RowBatch rows = embed_rows(weights, tokens, slots, std::vector<int>(positions.begin(), positions.end()));

  std::vector<int> window_positions(past.positions);
  window_positions.insert(window_positions.end(), positions.begin(), positions.end());

  ForwardTrace trace;
  trace.n_tokens = n;
  trace.n_keys = n_past + n;
  trace.kv.reserve(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerKV& pl = past.layers[l];
    if (pl.n_tokens != n_past) throw std::invalid_argument("forward: past rows disagree with past positions");
    LayerKV window(n_past + n, cfg.n_heads, cfg.d_head, 0);
    std::copy(pl.keys.begin(), pl.keys.end(), window.keys.begin());
    std::copy(pl.values.begin(), pl.values.end(), window.values.begin());

    std::vector<float> attn;
    std::vector<float> q;
    if (options.attention) attn.resize(static_cast<size_t>(cfg.n_heads) * n * (n_past + n));
    if (options.queries) q.resize(static_cast<size_t>(n) * cfg.d_model);
    run_layer(weights, l, window, window_positions, rows, attn, q);

    LayerKV fresh(n, cfg.n_heads, cfg.d_head, positions.front());
    const size_t off = static_cast<size_t>(n_past) * window.width();
    std::copy(window.keys.begin() + off, window.keys.end(), fresh.keys.begin());
    std::copy(window.values.begin() + off, window.values.end(), fresh.values.begin());
    trace.kv.push_back(std::move(fresh));
    if (options.attention) trace.attention.push_back(std::move(attn));
    if (options.queries) trace.queries.push_back(std::move(q));
  }
  trace.logits = output_logits(weights, rows);
  return trace;
}

ForwardTrace forward_full(const ModelWeights& weights, std::span<const TokenId> tokens, int start_position,
                          ForwardOptions options) {
  if (start_position < 0) throw std::invalid_argument("forward_full: negative start position");
  std::vector<int> positions(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) positions[i] = start_position + static_cast<int>(i);
  return forward_with_past(weights, tokens, PastKV::empty(weights.config), positions, options);
}

TokenId argmax_token(std::span<const float> logits) {
  size_t best = 0;
  for (size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

Tokens decode_greedy(const ModelWeights& weights, PastKV& state, std::span<const float> first_logits, int max_new) {
  if (max_new < 1) throw std::invalid_argument("decode_greedy: max_new must be >= 1");
  Tokens out;
  TokenId tok = argmax_token(first_logits);
  out.push_back(tok);
  while (tok != kEos && static_cast<int>(out.size()) < max_new) {
    const int pos = state.positions.empty() ? 0 : state.positions.back() + 1;
    const TokenId step[1] = {tok};
    const int step_pos[1] = {pos};
    ForwardTrace t = forward_with_past(weights, step, state, step_pos);
    state.append(t.kv, step_pos);
    tok = argmax_token(t.logits_row(0));
    out.push_back(tok);
  }
  return out;
}

}  // namespace qcfuse
