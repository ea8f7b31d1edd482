#include "qcfuse/kv_store.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace qcfuse {

namespace fs = std::filesystem;

void TierConfig::validate() const {
  if (!(ssd_base_latency >= 0.0)) throw std::invalid_argument("tier: ssd_base_latency must be >= 0");
  if (!(ssd_bandwidth > 0.0)) throw std::invalid_argument("tier: ssd_bandwidth must be > 0");
}

const char* to_string(KeyNormMode mode) {
  return mode == KeyNormMode::CriticalLayer ? "critical_layer" : "mean_all_layers";
}

KeyNormMode key_norm_mode_from_string(const std::string& name) {
  if (name == "critical_layer") return KeyNormMode::CriticalLayer;
  if (name == "mean_all_layers") return KeyNormMode::MeanAllLayers;
  throw std::invalid_argument("unknown key norm mode: " + name);
}

namespace {

std::array<unsigned char, 32> sha256(const void* data, size_t len) {
  std::array<unsigned char, 32> digest{};
  unsigned int out_len = 0;
  if (EVP_Digest(data, len, digest.data(), &out_len, EVP_sha256(), nullptr) != 1 || out_len != 32) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  return digest;
}

std::string to_hex(std::span<const unsigned char> bytes) {
  static const char* kDigits = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (unsigned char b : bytes) {
    s.push_back(kDigits[b >> 4]);
    s.push_back(kDigits[b & 0xF]);
  }
  return s;
}

std::array<unsigned char, 32> from_hex32(const std::string& hex) {
  std::array<unsigned char, 32> out{};
  if (hex.size() != 64) throw std::invalid_argument("fingerprint must be 64 hex characters");
  for (size_t i = 0; i < 32; ++i) out[i] = static_cast<unsigned char>(std::stoul(hex.substr(2 * i, 2), nullptr, 16));
  return out;
}

class ByteWriter {
 public:
  void u16(uint16_t v) {
    buf_.push_back(static_cast<char>(v & 0xFF));
    buf_.push_back(static_cast<char>(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    u32(bits);
  }
  void bytes(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string what) : data_(data), what_(std::move(what)) {}
  void need(size_t n) const {
    if (pos_ + n > data_.size()) throw FormatError(what_ + ": truncated chunk file");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint8_t>(data_[pos_]) | (static_cast<uint16_t>(static_cast<uint8_t>(data_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void skip(size_t n) {
    need(n);
    pos_ += n;
  }
  size_t remaining() const { return data_.size() - pos_; }

 private:
  const std::string& data_;
  std::string what_;
  size_t pos_ = 0;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string chunk_hash(std::span<const TokenId> token_ids) {
  ByteWriter w;
  for (TokenId t : token_ids) w.u32(static_cast<uint32_t>(t));
  auto digest = sha256(w.data().data(), w.data().size());
  return to_hex(digest);
}

std::string config_fingerprint(const ModelConfig& config, KeyNormMode mode) {
  const std::string material = config.canonical() + "key_norm_mode=" + to_string(mode) + ";";
  auto digest = sha256(material.data(), material.size());
  return to_hex(digest);
}

std::vector<float> compute_key_norms(const std::vector<LayerKV>& layers, const ModelConfig& config,
                                     KeyNormMode mode) {
  if (layers.empty()) return {};
  const int n = layers.front().n_tokens;
  auto norms_of = [&](const LayerKV& kv, std::vector<double>& acc) {
    for (int i = 0; i < n; ++i) {
      auto row = kv.key_row(i);
      double total = 0.0;
      for (int h = 0; h < kv.n_heads; ++h) {
        double sq = 0.0;
        for (int d = 0; d < kv.d_head; ++d) {
          const double v = row[static_cast<size_t>(h) * kv.d_head + d];
          sq += v * v;
        }
        total += std::sqrt(sq);
      }
      acc[i] += total / kv.n_heads;
    }
  };
  std::vector<double> acc(n, 0.0);
  if (mode == KeyNormMode::CriticalLayer) {
    norms_of(layers.at(config.critical_layer - 1), acc);
  } else {
    for (const auto& kv : layers) norms_of(kv, acc);
    for (auto& a : acc) a /= static_cast<double>(layers.size());
  }
  return std::vector<float>(acc.begin(), acc.end());
}

std::vector<int> extract_anchors(std::span<const float> key_norms, double anchor_ratio) {
  if (key_norms.empty()) throw std::invalid_argument("extract_anchors: empty key norms");
  if (!(anchor_ratio > 0.0 && anchor_ratio <= 1.0)) {
    throw std::invalid_argument("extract_anchors: anchor_ratio must be in (0, 1]");
  }
  const int n = static_cast<int>(key_norms.size());
  const int k = std::max(1, ceil_count(anchor_ratio, n));
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return key_norms[a] > key_norms[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ChunkRecord build_chunk_record(const ModelWeights& weights, std::span<const TokenId> token_ids, double anchor_ratio,
                               KeyNormMode mode, std::string source_name) {
  if (token_ids.empty()) throw std::invalid_argument("precompute_chunk: empty chunk");
  ChunkRecord rec;
  rec.chunk_id = chunk_hash(token_ids);
  rec.token_ids.assign(token_ids.begin(), token_ids.end());
  rec.n_tokens = static_cast<int>(token_ids.size());
  ForwardTrace trace = forward_full(weights, token_ids, 0);
  rec.layers = std::move(trace.kv);
  rec.key_norms = compute_key_norms(rec.layers, weights.config, mode);
  rec.anchor_indices = extract_anchors(rec.key_norms, anchor_ratio);
  rec.source_name = std::move(source_name);
  return rec;
}

uint64_t chunk_file_size(const ChunkRecord& record, int n_layers, int n_heads, int d_head) {
  const uint64_t n = record.n_tokens;
  return kChunkHeaderBytes + static_cast<uint64_t>(n_layers) * 2 * n * n_heads * d_head * 4 + n * 4 + 4 +
         record.anchor_indices.size() * 4 + n * 4 + 4 + record.source_name.size();
}

void write_chunk_file(const ChunkRecord& record, const std::string& fingerprint_hex, int n_layers, int n_heads,
                      int d_head, const fs::path& path) {
  if (static_cast<int>(record.layers.size()) != n_layers) {
    throw std::invalid_argument("write_chunk_file: record has no tensors for every layer");
  }
  ByteWriter w;
  w.bytes("QCFK", 4);
  w.u16(kChunkFormatVersion);
  auto fp = from_hex32(fingerprint_hex);
  w.bytes(fp.data(), fp.size());
  w.u32(record.n_tokens);
  w.u32(n_layers);
  w.u32(n_heads);
  w.u32(d_head);
  for (const auto& kv : record.layers) {
    for (float f : kv.keys) w.f32(f);
    for (float f : kv.values) w.f32(f);
  }
  for (float f : record.key_norms) w.f32(f);
  w.u32(static_cast<uint32_t>(record.anchor_indices.size()));
  for (int a : record.anchor_indices) w.u32(static_cast<uint32_t>(a));
  for (TokenId t : record.token_ids) w.u32(static_cast<uint32_t>(t));
  w.u32(static_cast<uint32_t>(record.source_name.size()));
  w.bytes(record.source_name.data(), record.source_name.size());

  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

ChunkRecord read_chunk_file(const fs::path& path, bool with_tensors, const std::string& expected_fingerprint) {
  const std::string data = read_file(path);
  ByteReader r(data, path.string());
  if (r.bytes(4) != "QCFK") throw FormatError(path.string() + ": bad magic");
  const uint16_t version = r.u16();
  if (version != kChunkFormatVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  }
  const std::string fp_raw = r.bytes(32);
  const std::string fp = to_hex(std::span(reinterpret_cast<const unsigned char*>(fp_raw.data()), 32));
  if (!expected_fingerprint.empty() && fp != expected_fingerprint) {
    throw FingerprintMismatch(path.string() + ": chunk was produced under a different model config");
  }
  ChunkRecord rec;
  rec.n_tokens = static_cast<int>(r.u32());
  const int n_layers = static_cast<int>(r.u32());
  const int n_heads = static_cast<int>(r.u32());
  const int d_head = static_cast<int>(r.u32());
  const size_t block = static_cast<size_t>(rec.n_tokens) * n_heads * d_head;
  if (n_layers <= 0 || n_heads <= 0 || d_head <= 0 || rec.n_tokens <= 0) throw FormatError(path.string() + ": bad header");
  if (with_tensors) {
    r.need(static_cast<size_t>(n_layers) * 2 * block * 4);
    rec.layers.reserve(n_layers);
    for (int l = 0; l < n_layers; ++l) {
      LayerKV kv(rec.n_tokens, n_heads, d_head, 0);
      for (auto& f : kv.keys) f = r.f32();
      for (auto& f : kv.values) f = r.f32();
      rec.layers.push_back(std::move(kv));
    }
  } else {
    r.skip(static_cast<size_t>(n_layers) * 2 * block * 4);
  }
  rec.key_norms.resize(rec.n_tokens);
  for (auto& f : rec.key_norms) f = r.f32();
  const uint32_t n_anchors = r.u32();
  if (n_anchors > static_cast<uint32_t>(rec.n_tokens)) throw FormatError(path.string() + ": bad anchor count");
  rec.anchor_indices.resize(n_anchors);
  for (auto& a : rec.anchor_indices) a = static_cast<int>(r.u32());
  rec.token_ids.resize(rec.n_tokens);
  for (auto& t : rec.token_ids) t = static_cast<TokenId>(r.u32());
  const uint32_t name_len = r.u32();
  rec.source_name = r.bytes(name_len);
  if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes");
  rec.chunk_id = chunk_hash(rec.token_ids);
  return rec;
}

ChunkStore::ChunkStore(std::shared_ptr<const ModelWeights> weights, fs::path dir, StoreOptions options)
    : weights_(std::move(weights)), dir_(std::move(dir)), options_(options) {
  if (!weights_) throw std::invalid_argument("ChunkStore: null weights");
  weights_->config.validate();
  options_.tier.validate();
  if (!(options_.anchor_ratio > 0.0 && options_.anchor_ratio <= 1.0)) {
    throw std::invalid_argument("ChunkStore: anchor_ratio must be in (0, 1]");
  }
  fingerprint_ = config_fingerprint(weights_->config, options_.key_norm_mode);
  const TokenId bos[1] = {kBos};
  bos_kv_ = forward_full(*weights_, bos, 0).kv;
  if (persistent()) {
    fs::create_directories(dir_);
    if (fs::exists(manifest_path())) {
      load_manifest();
    } else {
      save_manifest();
    }
  }
}

ChunkStore::~ChunkStore() {
  if (!persistent()) return;
  try {
    save_manifest();
  } catch (...) {
  }
}

fs::path ChunkStore::chunk_path(const std::string& chunk_id) const {
  return dir_ / "store" / chunk_id.substr(0, 2) / (chunk_id + ".qcfk");
}

uint64_t ChunkStore::layer_bytes(int n_tokens) const {
  const auto& c = weights_->config;
  return 2ULL * n_tokens * c.n_heads * c.d_head * 4;
}

void ChunkStore::load_manifest() {
  std::istringstream in(read_file(manifest_path()));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw FormatError("manifest: malformed line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    if (key == "fingerprint") {
      if (value != fingerprint_) {
        throw FingerprintMismatch("store at " + dir_.string() + " was built under fingerprint " + value +
                                  ", current config is " + fingerprint_);
      }
    } else if (key == "cache_hits") {
      persisted_.cache_hits = std::stoull(value);
    } else if (key == "cache_misses") {
      persisted_.cache_misses = std::stoull(value);
    } else if (key == "layers_fetched") {
      persisted_.layers_fetched = std::stoull(value);
    } else if (key == "bytes_fetched") {
      persisted_.bytes_fetched = std::stoull(value);
    } else if (key == "chunk") {
      std::istringstream fields(value);
      std::string id;
      Entry e;
      fields >> id >> e.relpath >> e.n_tokens >> e.anchor_count;
      std::getline(fields, e.source_name);
      if (!e.source_name.empty() && e.source_name[0] == ' ') e.source_name.erase(0, 1);
      if (id.size() != 64 || !fields.eof()) throw FormatError("manifest: malformed chunk line: " + line);
      if (!entries_.count(id)) order_.push_back(id);
      entries_[id] = e;
    }
  }
}

void ChunkStore::save_manifest() const {
  std::shared_lock lock(mutex_);
  save_manifest_locked();
}

void ChunkStore::save_manifest_locked() const {
  if (!persistent()) return;
  const StoreCounters c = counters();
  std::ostringstream os;
  os << "# chunk store manifest\n";
  os << "version = 1\n";
  os << "fingerprint = " << fingerprint_ << "\n";
  os << "model = " << weights_->config.canonical() << "\n";
  os << "cache_hits = " << persisted_.cache_hits + c.cache_hits << "\n";
  os << "cache_misses = " << persisted_.cache_misses + c.cache_misses << "\n";
  os << "layers_fetched = " << persisted_.layers_fetched + c.layers_fetched << "\n";
  os << "bytes_fetched = " << persisted_.bytes_fetched + c.bytes_fetched << "\n";
  for (const auto& id : order_) {
    const Entry& e = entries_.at(id);
    os << "chunk = " << id << " " << e.relpath << " " << e.n_tokens << " " << e.anchor_count << " " << e.source_name
       << "\n";
  }
  const fs::path tmp = manifest_path().string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << os.str();
  }
  fs::rename(tmp, manifest_path());
}

ChunkStore::PrecomputeOutcome ChunkStore::precompute_chunk(std::span<const TokenId> token_ids,
                                                            const std::string& source_name) {
  if (token_ids.empty()) throw std::invalid_argument("precompute_chunk: empty chunk");
  std::lock_guard write_lock(write_mutex_);
  const std::string id = chunk_hash(token_ids);
  {
    std::shared_lock lock(mutex_);
    if (entries_.count(id)) {
      ++cache_hits_;
      lock.unlock();
      return {id, true, record(id)};
    }
  }
  ++cache_misses_;
  ++forward_passes_;
  // Keep newlines out of the line-oriented manifest.
  std::string name = source_name;
  std::replace(name.begin(), name.end(), '\n', ' ');
  auto rec = std::make_shared<ChunkRecord>(
      build_chunk_record(*weights_, token_ids, options_.anchor_ratio, options_.key_norm_mode, name));
  if (persistent()) persist_chunk(*rec);
  {
    std::unique_lock lock(mutex_);
    Entry e;
    e.relpath = "store/" + id.substr(0, 2) + "/" + id + ".qcfk";
    e.n_tokens = rec->n_tokens;
    e.anchor_count = static_cast<int>(rec->anchor_indices.size());
    e.source_name = name;
    entries_[id] = e;
    order_.push_back(id);
    loaded_[id] = rec;
    save_manifest_locked();
  }
  return {id, false, rec};
}

fs::path ChunkStore::persist_chunk(const ChunkRecord& record) {
  if (!persistent()) throw std::logic_error("persist_chunk: memory-only store");
  const auto& c = weights_->config;
  const fs::path path = chunk_path(record.chunk_id);
  write_chunk_file(record, fingerprint_, c.n_layers, c.n_heads, c.d_head, path);
  return path;
}

ChunkRecord ChunkStore::load_chunk_meta(const std::string& chunk_id) const {
  std::shared_lock lock(mutex_);
  if (!entries_.count(chunk_id)) throw NotFound("unknown chunk_id " + chunk_id);
  if (!persistent()) {
    ChunkRecord meta = *loaded_.at(chunk_id);
    meta.layers.clear();
    return meta;
  }
  return read_chunk_file(chunk_path(chunk_id), false, fingerprint_);
}

std::shared_ptr<const ChunkRecord> ChunkStore::record(const std::string& chunk_id) const {
  {
    std::shared_lock lock(mutex_);
    if (!entries_.count(chunk_id)) throw NotFound("unknown chunk_id " + chunk_id);
    auto it = loaded_.find(chunk_id);
    if (it != loaded_.end()) return it->second;
  }
  auto rec = std::make_shared<const ChunkRecord>(read_chunk_file(chunk_path(chunk_id), true, fingerprint_));
  if (rec->chunk_id != chunk_id) throw FormatError("chunk file content does not match its id " + chunk_id);
  std::unique_lock lock(mutex_);
  auto [it, inserted] = loaded_.emplace(chunk_id, rec);
  return it->second;
}

FetchResult ChunkStore::fetch_layer(const std::string& chunk_id, int layer, SimClock* clock) {
  auto rec = record(chunk_id);
  if (layer < 0 || layer >= static_cast<int>(rec->layers.size())) {
    throw std::out_of_range("fetch_layer: layer " + std::to_string(layer) + " out of range");
  }
  FetchResult out;
  out.kv = rec->layers[layer];
  const uint64_t bytes = layer_bytes(rec->n_tokens);
  out.duration = options_.tier.fetch_seconds(bytes);
  ++layers_fetched_;
  bytes_fetched_ += bytes;
  if (clock) clock->now += out.duration;
  if (options_.tier.real_sleep) std::this_thread::sleep_for(std::chrono::duration<double>(out.duration));
  return out;
}

FetchResult ChunkStore::fetch_anchors(const std::string& chunk_id, int layer, SimClock* clock) {
  auto rec = record(chunk_id);
  if (layer < 0 || layer >= static_cast<int>(rec->layers.size())) {
    throw std::out_of_range("fetch_anchors: layer " + std::to_string(layer) + " out of range");
  }
  const auto& src = rec->layers[layer];
  FetchResult out;
  out.kv = LayerKV(0, src.n_heads, src.d_head, 0);
  for (int a : rec->anchor_indices) out.kv.append_row(src, a);
  if (!options_.tier.anchors_resident) {
    const uint64_t bytes = out.kv.bytes();
    out.duration = options_.tier.fetch_seconds(bytes);
    ++layers_fetched_;
    bytes_fetched_ += bytes;
    if (clock) clock->now += out.duration;
    if (options_.tier.real_sleep) std::this_thread::sleep_for(std::chrono::duration<double>(out.duration));
  }
  return out;
}

bool ChunkStore::contains(const std::string& chunk_id) const {
  std::shared_lock lock(mutex_);
  return entries_.count(chunk_id) > 0;
}

std::vector<std::string> ChunkStore::chunk_ids() const {
  std::shared_lock lock(mutex_);
  return order_;
}

std::vector<ChunkInfo> ChunkStore::chunk_infos() const {
  std::shared_lock lock(mutex_);
  std::vector<ChunkInfo> out;
  out.reserve(order_.size());
  for (const auto& id : order_) {
    const Entry& e = entries_.at(id);
    out.push_back({id, e.source_name, e.n_tokens, e.anchor_count});
  }
  return out;
}

size_t ChunkStore::size() const {
  std::shared_lock lock(mutex_);
  return order_.size();
}

StoreCounters ChunkStore::counters() const {
  StoreCounters c;
  c.cache_hits = cache_hits_.load();
  c.cache_misses = cache_misses_.load();
  c.layers_fetched = layers_fetched_.load();
  c.bytes_fetched = bytes_fetched_.load();
  c.forward_passes = forward_passes_.load();
  return c;
}

uint64_t ChunkStore::store_bytes() const {
  std::shared_lock lock(mutex_);
  uint64_t total = 0;
  const auto& c = weights_->config;
  for (const auto& id : order_) {
    if (persistent()) {
      std::error_code ec;
      const auto size = fs::file_size(chunk_path(id), ec);
      if (!ec) total += size;
    } else {
      total += chunk_file_size(*loaded_.at(id), c.n_layers, c.n_heads, c.d_head);
    }
  }
  return total;
}

}  // namespace qcfuse
