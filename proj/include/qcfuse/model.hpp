#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qcfuse {

using TokenId = int32_t;
using Tokens = std::vector<TokenId>;

inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr int kVocabSize = 259;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 2;
  int d_model = 32;
  int d_head = 16;
  int d_ff = 128;
  int vocab_size = kVocabSize;
  double rope_theta = 10000.0;
  double ln_eps = 1e-5;
  uint64_t seed = 7;
  // 1-based, strictly between the first and the last layer.
  int critical_layer = 2;

  // Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  // Canonical `key=value;` rendering; input to the store fingerprint.
  std::string canonical() const;

  int kv_width() const { return n_heads * d_head; }
};

// Config with the requested shape and critical_layer = ceil(n_layers / 2).
ModelConfig make_config(int n_layers, int n_heads, int d_model, uint64_t seed);

struct LayerWeights {
  // Projections are stored [in × out]; a row vector x maps to x · W.
  std::vector<float> wq, wk, wv, wo;
  std::vector<float> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  std::vector<float> w1, w2;
};

struct ModelWeights {
  ModelConfig config;
  std::vector<float> token_embedding;  // [vocab × d_model], tied output projection
  std::vector<LayerWeights> layers;
  std::vector<float> final_gain, final_bias;

  std::span<const float> embedding_row(TokenId t) const {
    return {token_embedding.data() + static_cast<size_t>(t) * config.d_model,
            static_cast<size_t>(config.d_model)};
  }
};

// Post-rotary keys and values of consecutive tokens, row-major [token][head][dim].
struct LayerKV {
  int n_tokens = 0;
  int n_heads = 0;
  int d_head = 0;
  int base_position = 0;
  std::vector<float> keys;
  std::vector<float> values;

  LayerKV() = default;
  LayerKV(int n_tokens, int n_heads, int d_head, int base_position = 0);

  int width() const { return n_heads * d_head; }
  std::span<float> key_row(int i) { return {keys.data() + static_cast<size_t>(i) * width(), static_cast<size_t>(width())}; }
  std::span<const float> key_row(int i) const { return {keys.data() + static_cast<size_t>(i) * width(), static_cast<size_t>(width())}; }
  std::span<float> value_row(int i) { return {values.data() + static_cast<size_t>(i) * width(), static_cast<size_t>(width())}; }
  std::span<const float> value_row(int i) const { return {values.data() + static_cast<size_t>(i) * width(), static_cast<size_t>(width())}; }

  void append_row(const LayerKV& src, int row);
  void append(const LayerKV& src);
  size_t bytes() const { return (keys.size() + values.size()) * sizeof(float); }
};

// KV visible to a forward pass. Rows may sit at arbitrary (strictly
// increasing) absolute positions; all layers share the same rows.
struct PastKV {
  std::vector<LayerKV> layers;
  std::vector<int> positions;

  int size() const { return static_cast<int>(positions.size()); }
  static PastKV empty(const ModelConfig& config);
  void append(const std::vector<LayerKV>& layer_rows, std::span<const int> row_positions);
};

struct ForwardOptions {
  bool attention = false;
  bool queries = false;
};

struct ForwardTrace {
  int n_tokens = 0;
  int n_keys = 0;  // width of each attention row (past + new)
  std::vector<float> logits;                  // [n_tokens × vocab]
  std::vector<LayerKV> kv;                    // new tokens only
  std::vector<std::vector<float>> attention;  // per layer [head × n_tokens × n_keys]
  std::vector<std::vector<float>> queries;    // per layer [n_tokens × head × dim], post-rotary

  std::span<const float> logits_row(int t) const {
    return {logits.data() + static_cast<size_t>(t) * kVocabSize, static_cast<size_t>(kVocabSize)};
  }
  float attention_at(int layer, int head, int row, int key) const {
    return attention[layer][(static_cast<size_t>(head) * n_tokens + row) * n_keys + key];
  }
};

// [BOS] followed by one token per byte.
Tokens tokenize(std::string_view text);
// Bytes only, no BOS.
Tokens tokenize_body(std::string_view text);
std::string detokenize(std::span<const TokenId> tokens);

ModelWeights init_weights(const ModelConfig& config);

ForwardTrace forward_full(const ModelWeights& weights, std::span<const TokenId> tokens, int start_position,
                          ForwardOptions options = {});

// Throws std::invalid_argument when a new position does not exceed every past position.
ForwardTrace forward_with_past(const ModelWeights& weights, std::span<const TokenId> tokens, const PastKV& past,
                               std::span<const int> positions, ForwardOptions options = {});

// Rotates each (x[2j], x[2j+1]) pair by delta * theta^(-2j/d). Works on one
// head or on a [head][dim] row when `d_head` divides the span.
void rope_rotate(std::span<float> vec, int d_head, long delta, double theta);
std::vector<float> rope_rotate_key(std::span<const float> key, long delta, double theta);

// Greedy decoding from `state` (which must already contain every prompt
// token). Appends to `state`. Output includes the terminating EOS if hit.
Tokens decode_greedy(const ModelWeights& weights, PastKV& state, std::span<const float> first_logits, int max_new);

// Lowest index among the maximal logits.
TokenId argmax_token(std::span<const float> logits);

}  // namespace qcfuse
