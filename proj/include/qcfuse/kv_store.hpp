#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "qcfuse/common.hpp"
#include "qcfuse/model.hpp"

namespace qcfuse {

struct TierConfig {
  double ssd_base_latency = 1e-4;  // simulated seconds per fetch
  double ssd_bandwidth = 1e9;      // simulated bytes per second
  bool anchors_resident = true;
  bool real_sleep = false;  // live demos only; tests stay on the virtual clock

  void validate() const;
  double fetch_seconds(uint64_t bytes) const { return ssd_base_latency + static_cast<double>(bytes) / ssd_bandwidth; }
};

enum class KeyNormMode { CriticalLayer, MeanAllLayers };

const char* to_string(KeyNormMode mode);
KeyNormMode key_norm_mode_from_string(const std::string& name);

struct ChunkRecord {
  std::string chunk_id;
  Tokens token_ids;
  int n_tokens = 0;
  std::vector<LayerKV> layers;  // computed at base position 0; empty for metadata-only loads
  std::vector<float> key_norms;
  std::vector<int> anchor_indices;
  std::string source_name;
};

struct StoreCounters {
  uint64_t cache_hits = 0;
  uint64_t cache_misses = 0;
  uint64_t layers_fetched = 0;
  uint64_t bytes_fetched = 0;
  uint64_t forward_passes = 0;
};

// Virtual clock advanced by simulated fetches.
struct SimClock {
  double now = 0.0;
};

struct FetchResult {
  LayerKV kv;
  double duration = 0.0;
};

// Lowercase hex SHA-256 of the token ids encoded as little-endian u32.
std::string chunk_hash(std::span<const TokenId> token_ids);

// SHA-256 over the canonical model config and the key-norm statistic.
std::string config_fingerprint(const ModelConfig& config, KeyNormMode mode);

// Per-token key L2 norm averaged over heads, at the critical layer or
// averaged over every layer.
std::vector<float> compute_key_norms(const std::vector<LayerKV>& layers, const ModelConfig& config,
                                     KeyNormMode mode);

// Indices of the ceil(ratio * n) largest norms (ties to the lower index),
// ascending. Requires 0 < ratio <= 1 and a non-empty input.
std::vector<int> extract_anchors(std::span<const float> key_norms, double anchor_ratio);

ChunkRecord build_chunk_record(const ModelWeights& weights, std::span<const TokenId> token_ids, double anchor_ratio,
                               KeyNormMode mode, std::string source_name);

// Chunk file codec. Layout (little-endian): "QCFK", u16 version, 32-byte
// fingerprint, u32 n_tokens/n_layers/n_heads/d_head, per layer the K block
// then the V block as f32 [token][head][dim], f32 key_norms, u32 anchor
// count + u32 anchor indices, then u32 token ids and a u32-length-prefixed
// source name.
inline constexpr uint16_t kChunkFormatVersion = 1;
inline constexpr size_t kChunkHeaderBytes = 4 + 2 + 32 + 4 * 4;

uint64_t chunk_file_size(const ChunkRecord& record, int n_layers, int n_heads, int d_head);
void write_chunk_file(const ChunkRecord& record, const std::string& fingerprint_hex, int n_layers, int n_heads,
                      int d_head, const std::filesystem::path& path);
// Throws FormatError on bad magic/version/truncation and FingerprintMismatch
// when `expected_fingerprint` is non-empty and differs.
ChunkRecord read_chunk_file(const std::filesystem::path& path, bool with_tensors,
                            const std::string& expected_fingerprint = {});

struct ChunkInfo {
  std::string chunk_id;
  std::string source_name;
  int n_tokens = 0;
  int anchor_count = 0;
};

struct StoreOptions {
  double anchor_ratio = 0.05;
  KeyNormMode key_norm_mode = KeyNormMode::CriticalLayer;
  TierConfig tier;
};

// Content-addressed chunk KV store. With an empty directory it lives in
// memory only. Reads may run concurrently; precompute calls are serialized.
class ChunkStore {
 public:
  ChunkStore(std::shared_ptr<const ModelWeights> weights, std::filesystem::path dir, StoreOptions options = {});
  ~ChunkStore();

  ChunkStore(const ChunkStore&) = delete;
  ChunkStore& operator=(const ChunkStore&) = delete;

  struct PrecomputeOutcome {
    std::string chunk_id;
    bool cache_hit = false;
    std::shared_ptr<const ChunkRecord> record;
  };

  PrecomputeOutcome precompute_chunk(std::span<const TokenId> token_ids, const std::string& source_name = {});

  std::filesystem::path persist_chunk(const ChunkRecord& record);
  ChunkRecord load_chunk_meta(const std::string& chunk_id) const;
  // Full record including tensors; loads from disk on first use.
  std::shared_ptr<const ChunkRecord> record(const std::string& chunk_id) const;

  // `layer` is 0-based here, unlike the 1-based critical_layer.
  FetchResult fetch_layer(const std::string& chunk_id, int layer, SimClock* clock = nullptr);
  // Anchor rows of one layer (in anchor order). Free when anchors are resident.
  FetchResult fetch_anchors(const std::string& chunk_id, int layer, SimClock* clock = nullptr);

  bool contains(const std::string& chunk_id) const;
  // Insertion order.
  std::vector<std::string> chunk_ids() const;
  std::vector<ChunkInfo> chunk_infos() const;
  size_t size() const;

  // One-token KV of BOS at position 0, shared by every fused context.
  const std::vector<LayerKV>& bos_kv() const { return bos_kv_; }

  StoreCounters counters() const;
  // Chunk file bytes on disk; a memory store reports the size its files would have.
  uint64_t store_bytes() const;
  const std::string& fingerprint() const { return fingerprint_; }
  const ModelWeights& weights() const { return *weights_; }
  std::shared_ptr<const ModelWeights> weights_ptr() const { return weights_; }
  const StoreOptions& options() const { return options_; }
  const std::filesystem::path& dir() const { return dir_; }
  bool persistent() const { return !dir_.empty(); }
  std::filesystem::path chunk_path(const std::string& chunk_id) const;
  std::filesystem::path manifest_path() const { return dir_ / "manifest.txt"; }

  void save_manifest() const;

 private:
  struct Entry {
    std::string relpath;
    int n_tokens = 0;
    int anchor_count = 0;
    std::string source_name;
  };

  void load_manifest();
  void save_manifest_locked() const;
  uint64_t layer_bytes(int n_tokens) const;

  std::shared_ptr<const ModelWeights> weights_;
  std::filesystem::path dir_;
  StoreOptions options_;
  std::string fingerprint_;
  std::vector<LayerKV> bos_kv_;

  mutable std::shared_mutex mutex_;
  std::mutex write_mutex_;
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
  mutable std::map<std::string, std::shared_ptr<const ChunkRecord>> loaded_;

  StoreCounters persisted_;  // totals from earlier sessions
  std::atomic<uint64_t> cache_hits_{0};
  std::atomic<uint64_t> cache_misses_{0};
  std::atomic<uint64_t> layers_fetched_{0};
  std::atomic<uint64_t> bytes_fetched_{0};
  std::atomic<uint64_t> forward_passes_{0};
};

}  // namespace qcfuse
