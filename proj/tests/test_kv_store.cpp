#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>
#include <cstring>
#include <unistd.h>

#include "qcfuse/kv_store.hpp"
#include "qcfuse/splitmix.hpp"

using namespace qcfuse;
namespace fs = std::filesystem;

namespace {

// Plain FIPS 180-4 SHA-256, kept separate from the library's OpenSSL path.
std::string sha256_hex(const std::vector<uint8_t>& msg) {
  static const uint32_t k[64] = {
      0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5,
      0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174,
      0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
      0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967,
      0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
      0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
      0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
      0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};
  uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
  auto rotr = [](uint32_t x, int n) { return (x >> n) | (x << (32 - n)); };
  std::vector<uint8_t> m = msg;
  const uint64_t bit_len = static_cast<uint64_t>(msg.size()) * 8;
  m.push_back(0x80);
  while (m.size() % 64 != 56) m.push_back(0);
  for (int i = 7; i >= 0; --i) m.push_back(static_cast<uint8_t>(bit_len >> (8 * i)));
  for (size_t off = 0; off < m.size(); off += 64) {
    uint32_t w[64];
    for (int i = 0; i < 16; ++i) {
      w[i] = (uint32_t(m[off + 4 * i]) << 24) | (uint32_t(m[off + 4 * i + 1]) << 16) |
             (uint32_t(m[off + 4 * i + 2]) << 8) | uint32_t(m[off + 4 * i + 3]);
    }
    for (int i = 16; i < 64; ++i) {
      const uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      const uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7];
    for (int i = 0; i < 64; ++i) {
      const uint32_t t1 = hh + (rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25)) + ((e & f) ^ (~e & g)) + k[i] + w[i];
      const uint32_t t2 = (rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22)) + ((a & b) ^ (a & c) ^ (b & c));
      hh = g;
      g = f;
      f = e;
      e = d + t1;
      d = c;
      c = b;
      b = a;
      a = t1 + t2;
    }
    h[0] += a, h[1] += b, h[2] += c, h[3] += d, h[4] += e, h[5] += f, h[6] += g, h[7] += hh;
  }
  char out[65];
  for (int i = 0; i < 8; ++i) std::snprintf(out + 8 * i, 9, "%08x", h[i]);
  return std::string(out, 64);
}

std::vector<uint8_t> le_bytes(const Tokens& t) {
  std::vector<uint8_t> out;
  for (TokenId id : t) {
    const uint32_t u = static_cast<uint32_t>(id);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<uint8_t>(u >> (8 * b)));
  }
  return out;
}

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("qcfuse_kv_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::shared_ptr<const ModelWeights> weights_for(uint64_t seed, int d_model = 16) {
  return std::make_shared<const ModelWeights>(init_weights(make_config(4, 2, d_model, seed)));
}

Tokens random_tokens(SplitMix64& rng, int n) {
  Tokens t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(256));
  return t;
}

std::vector<int> sort_oracle(const std::vector<float>& norms, double ratio) {
  std::vector<int> idx(norms.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return norms[a] != norms[b] ? norms[a] > norms[b] : a < b; });
  idx.resize(static_cast<size_t>(std::ceil(ratio * norms.size() - 1e-9)));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

TEST(Sha256Oracle, KnownVectors) {
  EXPECT_EQ(sha256_hex({}), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex({'a', 'b', 'c'}), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(ChunkHash, EmptyAndDistinct) {
  EXPECT_EQ(chunk_hash(Tokens{}), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(chunk_hash(Tokens{65}), chunk_hash(Tokens{65}));
  EXPECT_NE(chunk_hash(Tokens{65}), chunk_hash(Tokens{66}));
}

TEST(ChunkHash, MatchesIndependentSha256) {
  SplitMix64 rng(123);
  for (int i = 0; i < 50; ++i) {
    Tokens t(rng.below(100));
    for (auto& x : t) x = static_cast<TokenId>(rng.below(kVocabSize));
    const std::string id = chunk_hash(t);
    EXPECT_EQ(id, sha256_hex(le_bytes(t)));
    EXPECT_EQ(id.size(), 64u);
  }
}

TEST(ConfigFingerprint, SensitiveToConfigAndNormMode) {
  const auto a = make_config(4, 2, 16, 7);
  auto b = a;
  b.seed = 8;
  auto c = a;
  c.critical_layer = 3;
  EXPECT_EQ(config_fingerprint(a, KeyNormMode::CriticalLayer), config_fingerprint(a, KeyNormMode::CriticalLayer));
  EXPECT_NE(config_fingerprint(a, KeyNormMode::CriticalLayer), config_fingerprint(b, KeyNormMode::CriticalLayer));
  EXPECT_NE(config_fingerprint(a, KeyNormMode::CriticalLayer), config_fingerprint(c, KeyNormMode::CriticalLayer));
  EXPECT_NE(config_fingerprint(a, KeyNormMode::CriticalLayer), config_fingerprint(a, KeyNormMode::MeanAllLayers));
}

TEST(ExtractAnchors, Examples) {
  EXPECT_EQ(extract_anchors(std::vector<float>{3.0f, 1.0f, 2.0f}, 1.0 / 3.0), (std::vector<int>{0}));
  EXPECT_EQ(extract_anchors(std::vector<float>{1.0f, 1.0f}, 0.5), (std::vector<int>{0}));
  EXPECT_EQ(extract_anchors(std::vector<float>{0.5f, 2.0f, 1.0f}, 1.0), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(extract_anchors(std::vector<float>{0.5f, 2.0f, 1.0f, 3.0f}, 0.5), (std::vector<int>{1, 3}));
}

TEST(ExtractAnchors, Errors) {
  EXPECT_THROW(extract_anchors(std::vector<float>{}, 0.5), std::invalid_argument);
  EXPECT_THROW(extract_anchors(std::vector<float>{1.0f}, 0.0), std::invalid_argument);
  EXPECT_THROW(extract_anchors(std::vector<float>{1.0f}, 1.5), std::invalid_argument);
}

TEST(ExtractAnchors, MatchesSortOracle) {
  SplitMix64 rng(77);
  for (int i = 0; i < 200; ++i) {
    std::vector<float> norms(1 + rng.below(80));
    for (auto& x : norms) x = static_cast<float>(rng.below(6));  // plenty of ties
    const double ratio = 0.01 + 0.99 * rng.uniform();
    const auto got = extract_anchors(norms, ratio);
    EXPECT_EQ(got, sort_oracle(norms, ratio));
    EXPECT_EQ(got.size(), static_cast<size_t>(ceil_count(ratio, static_cast<int>(norms.size()))));
  }
}

TEST(KeyNorms, CriticalAndMeanModes) {
  const auto w = weights_for(3);
  const Tokens t = tokenize_body("abcdef");
  const auto trace = forward_full(*w, t, 0);
  const auto crit = compute_key_norms(trace.kv, w->config, KeyNormMode::CriticalLayer);
  const auto mean = compute_key_norms(trace.kv, w->config, KeyNormMode::MeanAllLayers);
  ASSERT_EQ(crit.size(), t.size());
  auto norm_at = [&](int layer, int tok) {
    const auto row = trace.kv[layer].key_row(tok);
    double total = 0.0;
    for (int h = 0; h < 2; ++h) {
      double s = 0.0;
      for (int d = 0; d < 8; ++d) s += double(row[h * 8 + d]) * row[h * 8 + d];
      total += std::sqrt(s);
    }
    return total / 2.0;
  };
  for (size_t i = 0; i < t.size(); ++i) {
    EXPECT_NEAR(crit[i], norm_at(w->config.critical_layer - 1, static_cast<int>(i)), 1e-5);
    double m = 0.0;
    for (int l = 0; l < 4; ++l) m += norm_at(l, static_cast<int>(i));
    EXPECT_NEAR(mean[i], m / 4.0, 1e-5);
    EXPECT_GE(crit[i], 0.0f);
  }
}

TEST(ChunkRecord, SmallChunkAllAnchors) {
  const auto w = weights_for(3);
  const auto rec = build_chunk_record(*w, Tokens{1, 2, 3}, 1.0, KeyNormMode::CriticalLayer, "x");
  EXPECT_EQ(rec.anchor_indices, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(rec.chunk_id, chunk_hash(Tokens{1, 2, 3}));
  EXPECT_EQ(rec.layers.size(), 4u);
  EXPECT_EQ(rec.layers[0].base_position, 0);
}

TEST(ChunkFile, RoundTripBitExactAndSize) {
  TempDir dir;
  const auto w = weights_for(5);
  SplitMix64 rng(1);
  const auto rec = build_chunk_record(*w, random_tokens(rng, 37), 0.1, KeyNormMode::CriticalLayer, "doc one");
  const std::string fp = config_fingerprint(w->config, KeyNormMode::CriticalLayer);
  const fs::path p = dir.path / "a.qcfk";
  write_chunk_file(rec, fp, 4, 2, 8, p);
  // Header + tensors + norms + anchors + token ids + name, per the documented layout.
  const uint64_t expected = kChunkHeaderBytes + 4ULL * 2 * 37 * 2 * 8 * 4 + 37 * 4 + 4 + rec.anchor_indices.size() * 4 +
                            37 * 4 + 4 + rec.source_name.size();
  EXPECT_EQ(fs::file_size(p), expected);
  EXPECT_EQ(chunk_file_size(rec, 4, 2, 8), expected);

  const auto back = read_chunk_file(p, true, fp);
  EXPECT_EQ(back.chunk_id, rec.chunk_id);
  EXPECT_EQ(back.token_ids, rec.token_ids);
  EXPECT_EQ(back.key_norms, rec.key_norms);
  EXPECT_EQ(back.anchor_indices, rec.anchor_indices);
  EXPECT_EQ(back.source_name, "doc one");
  ASSERT_EQ(back.layers.size(), 4u);
  for (int l = 0; l < 4; ++l) {
    EXPECT_EQ(0, std::memcmp(back.layers[l].keys.data(), rec.layers[l].keys.data(), rec.layers[l].keys.size() * 4));
    EXPECT_EQ(0, std::memcmp(back.layers[l].values.data(), rec.layers[l].values.data(), rec.layers[l].values.size() * 4));
  }
  const auto meta = read_chunk_file(p, false, fp);
  EXPECT_TRUE(meta.layers.empty());
  EXPECT_EQ(meta.anchor_indices, rec.anchor_indices);
}

TEST(ChunkFile, RejectsCorruption) {
  TempDir dir;
  const auto w = weights_for(5);
  const auto rec = build_chunk_record(*w, tokenize_body("hello world"), 0.2, KeyNormMode::CriticalLayer, "");
  const std::string fp = config_fingerprint(w->config, KeyNormMode::CriticalLayer);
  const fs::path p = dir.path / "a.qcfk";
  write_chunk_file(rec, fp, 4, 2, 8, p);
  std::string bytes;
  {
    std::ifstream in(p, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write_variant = [&](const std::string& content) {
    const fs::path q = dir.path / "b.qcfk";
    std::ofstream(q, std::ios::binary) << content;
    return q;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(read_chunk_file(write_variant(bad_magic), true), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(read_chunk_file(write_variant(bad_version), true), FormatError);
  EXPECT_THROW(read_chunk_file(write_variant(bytes.substr(0, bytes.size() / 2)), true), FormatError);
  EXPECT_THROW(read_chunk_file(write_variant(bytes.substr(0, 10)), false), FormatError);
  EXPECT_THROW(read_chunk_file(write_variant(bytes + "zz"), true), FormatError);
  EXPECT_THROW(read_chunk_file(p, true, std::string(64, '0')), FingerprintMismatch);
  EXPECT_THROW(read_chunk_file(dir.path / "missing.qcfk", true), std::exception);
}

TEST(ChunkStore, PrecomputeIsIdempotent) {
  TempDir dir;
  ChunkStore store(weights_for(7), dir.path);
  const Tokens t = tokenize_body("the same chunk twice");
  const auto first = store.precompute_chunk(t, "a");
  const auto second = store.precompute_chunk(t, "a");
  EXPECT_FALSE(first.cache_hit);
  EXPECT_TRUE(second.cache_hit);
  EXPECT_EQ(first.chunk_id, second.chunk_id);
  const auto c = store.counters();
  EXPECT_EQ(c.forward_passes, 1u);
  EXPECT_EQ(c.cache_hits, 1u);
  EXPECT_EQ(c.cache_misses, 1u);
  EXPECT_EQ(store.size(), 1u);
  EXPECT_THROW(store.precompute_chunk(Tokens{}, "x"), std::invalid_argument);
}

TEST(ChunkStore, ConcurrentPrecomputeRunsOnce) {
  ChunkStore store(weights_for(7), "");
  const Tokens t = tokenize_body("shared content");
  std::vector<std::thread> pool;
  for (int i = 0; i < 8; ++i) pool.emplace_back([&] { store.precompute_chunk(t, "p"); });
  for (auto& th : pool) th.join();
  EXPECT_EQ(store.counters().forward_passes, 1u);
  EXPECT_EQ(store.counters().cache_hits, 7u);
}

TEST(ChunkStore, PersistReloadBitExact) {
  TempDir dir;
  SplitMix64 rng(9);
  std::vector<std::string> ids;
  std::vector<std::shared_ptr<const ChunkRecord>> mem;
  {
    ChunkStore store(weights_for(7), dir.path);
    for (int i = 0; i < 3; ++i) {
      auto o = store.precompute_chunk(random_tokens(rng, 10 + i * 7), "doc" + std::to_string(i));
      ids.push_back(o.chunk_id);
      mem.push_back(o.record);
      EXPECT_TRUE(fs::exists(store.chunk_path(o.chunk_id)));
      EXPECT_EQ(store.chunk_path(o.chunk_id),
                dir.path / "store" / o.chunk_id.substr(0, 2) / (o.chunk_id + ".qcfk"));
    }
    EXPECT_TRUE(fs::exists(store.manifest_path()));
  }
  ChunkStore reopened(weights_for(7), dir.path);
  EXPECT_EQ(reopened.chunk_ids(), ids);
  EXPECT_EQ(reopened.counters().forward_passes, 0u);
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto rec = reopened.record(ids[i]);
    for (int l = 0; l < 4; ++l) {
      EXPECT_EQ(rec->layers[l].keys, mem[i]->layers[l].keys);
      EXPECT_EQ(rec->layers[l].values, mem[i]->layers[l].values);
    }
    const auto meta = reopened.load_chunk_meta(ids[i]);
    EXPECT_EQ(meta.source_name, "doc" + std::to_string(i));
    EXPECT_TRUE(meta.layers.empty());
  }
  const auto infos = reopened.chunk_infos();
  ASSERT_EQ(infos.size(), 3u);
  EXPECT_EQ(infos[2].source_name, "doc2");
  EXPECT_EQ(infos[2].n_tokens, 24);
  // Re-precompute after reopening is a cache hit.
  EXPECT_TRUE(reopened.precompute_chunk(mem[0]->token_ids, "doc0").cache_hit);
  EXPECT_EQ(reopened.counters().forward_passes, 0u);
}

TEST(ChunkStore, RejectsOtherConfig) {
  TempDir dir;
  { ChunkStore store(weights_for(7), dir.path); store.precompute_chunk(tokenize_body("abc"), "x"); }
  EXPECT_THROW(ChunkStore(weights_for(8), dir.path), FingerprintMismatch);
  StoreOptions mean;
  mean.key_norm_mode = KeyNormMode::MeanAllLayers;
  EXPECT_THROW(ChunkStore(weights_for(7), dir.path, mean), FingerprintMismatch);
  EXPECT_NO_THROW(ChunkStore(weights_for(7), dir.path));
}

TEST(ChunkStore, ManifestIsReadableKeyValue) {
  TempDir dir;
  std::string id;
  {
    ChunkStore store(weights_for(7), dir.path);
    id = store.precompute_chunk(tokenize_body("manifest text"), "m").chunk_id;
  }
  std::ifstream in(dir.path / "manifest.txt");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_NE(text.find("fingerprint = " + config_fingerprint(make_config(4, 2, 16, 7), KeyNormMode::CriticalLayer)),
            std::string::npos);
  EXPECT_NE(text.find("chunk = " + id), std::string::npos);
  EXPECT_NE(text.find("cache_misses = 1"), std::string::npos);
}

TEST(ChunkStore, StoreBytesEqualsFileSizes) {
  TempDir dir;
  ChunkStore store(weights_for(7), dir.path);
  SplitMix64 rng(4);
  for (int i = 0; i < 4; ++i) store.precompute_chunk(random_tokens(rng, 5 + 3 * i), "s");
  uint64_t sum = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir.path / "store")) {
    if (e.is_regular_file()) sum += e.file_size();
  }
  EXPECT_EQ(store.store_bytes(), sum);
}

TEST(ChunkStore, FetchLayerCostAndCounters) {
  StoreOptions opts;
  opts.tier.ssd_base_latency = 0.001;
  opts.tier.ssd_bandwidth = 1e6;
  ChunkStore store(weights_for(7), "", opts);  // n_heads 2, d_head 8
  const auto id = store.precompute_chunk(tokenize_body("12345678"), "f").chunk_id;
  SimClock clock;
  const auto a = store.fetch_layer(id, 2, &clock);
  EXPECT_DOUBLE_EQ(a.duration, 0.002024);
  EXPECT_DOUBLE_EQ(clock.now, 0.002024);
  const auto b = store.fetch_layer(id, 2, &clock);
  EXPECT_EQ(a.kv.keys, b.kv.keys);
  EXPECT_EQ(a.kv.values, b.kv.values);
  EXPECT_EQ(store.counters().layers_fetched, 2u);
  EXPECT_EQ(store.counters().bytes_fetched, 2048u);
  const auto anchors = store.fetch_anchors(id, 2, &clock);
  EXPECT_EQ(anchors.duration, 0.0);
  EXPECT_EQ(anchors.kv.n_tokens, 1);
  EXPECT_THROW(store.fetch_layer(id, -1), std::out_of_range);
  EXPECT_THROW(store.fetch_layer(id, 4), std::out_of_range);
  EXPECT_THROW(store.fetch_layer("nope", 1), NotFound);
  EXPECT_THROW(store.persist_chunk(*store.record(id)), std::logic_error);
}

TEST(ChunkStore, NonResidentAnchorsCost) {
  StoreOptions opts;
  opts.anchor_ratio = 0.5;
  opts.tier.anchors_resident = false;
  opts.tier.ssd_base_latency = 0.5;
  opts.tier.ssd_bandwidth = 1e3;
  ChunkStore store(weights_for(7), "", opts);
  const auto id = store.precompute_chunk(tokenize_body("abcd"), "n").chunk_id;
  const auto anchors = store.fetch_anchors(id, 1);
  EXPECT_EQ(anchors.kv.n_tokens, 2);
  EXPECT_DOUBLE_EQ(anchors.duration, 0.5 + 2.0 * 2 * 2 * 8 * 4 / 1e3);
}

TEST(TierConfig, FetchCostIsAffine) {
  TierConfig t;
  t.ssd_base_latency = 0.25;
  t.ssd_bandwidth = 400.0;
  EXPECT_DOUBLE_EQ(t.fetch_seconds(0), 0.25);
  EXPECT_DOUBLE_EQ(t.fetch_seconds(800) - t.fetch_seconds(400), 1.0);
  t.ssd_bandwidth = 0.0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  t.ssd_bandwidth = 1.0;
  t.ssd_base_latency = -1.0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
}
