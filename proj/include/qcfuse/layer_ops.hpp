#pragma once

#include <span>
#include <vector>

#include "qcfuse/model.hpp"

namespace qcfuse {

// Rows being pushed through the network together. `slots` index rows of the
// attention window that receive this batch's fresh K/V; `positions` are the
// rows' absolute positions; `hidden` is the residual stream [n × d_model].
struct RowBatch {
  std::vector<int> slots;
  std::vector<int> positions;
  std::vector<float> hidden;

  int size() const { return static_cast<int>(positions.size()); }
};

RowBatch embed_rows(const ModelWeights& weights, std::span<const TokenId> tokens, std::vector<int> slots,
                    std::vector<int> positions);

// One pre-norm block. Fresh K/V of every row are written into `window` at
// their slots before any row attends, so the batch sees itself under the
// causal mask. attention_out: [head × n_rows × window rows]; queries_out:
// [n_rows × head × dim]. Both optional.
void run_layer(const ModelWeights& weights, int layer, LayerKV& window, std::span<const int> window_positions,
               RowBatch& rows, std::span<float> attention_out = {}, std::span<float> queries_out = {});

// Projects each row of the residual stream to K/V for `layer` (no attention).
void project_kv(const ModelWeights& weights, int layer, const RowBatch& rows, LayerKV& out);

// Final norm and tied output projection: [n × vocab].
std::vector<float> output_logits(const ModelWeights& weights, const RowBatch& rows);

}  // namespace qcfuse
