#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "qcfuse/fusion.hpp"
#include "qcfuse/kv_store.hpp"
#include "qcfuse/model.hpp"
#include "qcfuse/pipeline.hpp"

namespace qcfuse {

// Everything a store, a benchmark or a server needs to agree on.
//
// Config file format: one `key = value` per line, `#` starts a comment,
// blank lines are ignored, unknown keys are an error. Keys:
//
//   model.n_layers model.n_heads model.d_model model.d_head model.d_ff
//   model.rope_theta model.ln_eps model.seed model.critical_layer
//   store.anchor_ratio store.key_norm_mode (critical_layer | mean_all_layers)
//   tier.ssd_base_latency tier.ssd_bandwidth tier.anchors_resident tier.real_sleep
//   cost.compute_alpha cost.compute_beta cost.decode_gamma
//   fusion.aggregation (all_query_tokens | last_query_token)
//   fusion.epic_mode (per_sequence | per_chunk)
//   fusion.random_seed fusion.max_new_tokens fusion.pipelined
//   bench.chunk_tokens bench.top_k
//
// Setting model.d_model without model.d_head / model.d_ff / model.critical_layer
// derives them as d_model / n_heads, 4 * d_model and ceil(n_layers / 2).
struct Settings {
  ModelConfig model;
  StoreOptions store;
  FusionOptions fusion;  // fusion.cost.tier mirrors store.tier
  int chunk_tokens = 64;
  int top_k = 4;

  void validate() const;
  // Flattened `key = value` lines in the file format above.
  std::string render() const;
};

Settings parse_settings(const std::string& text);
Settings load_settings(const std::filesystem::path& path);
// File named by QCFUSE_CONFIG when set, defaults otherwise.
Settings settings_from_env();

}  // namespace qcfuse
