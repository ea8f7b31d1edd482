#include "qcfuse/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace qcfuse {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw std::invalid_argument("config: bad value for " + key + ": '" + value + "'");
}

template <typename T>
T parse_int(const std::string& key, const std::string& value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value);
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const double out = std::stod(value, &used);
    if (used != value.size()) bad_value(key, value);
    return out;
  } catch (const std::logic_error&) {
    bad_value(key, value);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value);
}

}  // namespace

void Settings::validate() const {
  model.validate();
  if (!(store.anchor_ratio > 0.0 && store.anchor_ratio <= 1.0)) {
    throw std::invalid_argument("config: store.anchor_ratio must be in (0, 1]");
  }
  store.tier.validate();
  fusion.cost.validate();
  if (fusion.max_new_tokens < 1) throw std::invalid_argument("config: fusion.max_new_tokens must be >= 1");
  if (chunk_tokens < 1) throw std::invalid_argument("config: bench.chunk_tokens must be >= 1");
  if (top_k < 1) throw std::invalid_argument("config: bench.top_k must be >= 1");
}

std::string Settings::render() const {
  std::ostringstream os;
  os.precision(17);
  os << "model.n_layers = " << model.n_layers << "\n"
     << "model.n_heads = " << model.n_heads << "\n"
     << "model.d_model = " << model.d_model << "\n"
     << "model.d_head = " << model.d_head << "\n"
     << "model.d_ff = " << model.d_ff << "\n"
     << "model.rope_theta = " << model.rope_theta << "\n"
     << "model.ln_eps = " << model.ln_eps << "\n"
     << "model.seed = " << model.seed << "\n"
     << "model.critical_layer = " << model.critical_layer << "\n"
     << "store.anchor_ratio = " << store.anchor_ratio << "\n"
     << "store.key_norm_mode = " << to_string(store.key_norm_mode) << "\n"
     << "tier.ssd_base_latency = " << store.tier.ssd_base_latency << "\n"
     << "tier.ssd_bandwidth = " << store.tier.ssd_bandwidth << "\n"
     << "tier.anchors_resident = " << (store.tier.anchors_resident ? "true" : "false") << "\n"
     << "tier.real_sleep = " << (store.tier.real_sleep ? "true" : "false") << "\n"
     << "cost.compute_alpha = " << fusion.cost.compute_alpha << "\n"
     << "cost.compute_beta = " << fusion.cost.compute_beta << "\n"
     << "cost.decode_gamma = " << fusion.cost.decode_gamma << "\n"
     << "fusion.aggregation = " << to_string(fusion.aggregation) << "\n"
     << "fusion.epic_mode = " << to_string(fusion.epic_mode) << "\n"
     << "fusion.random_seed = " << fusion.random_seed << "\n"
     << "fusion.max_new_tokens = " << fusion.max_new_tokens << "\n"
     << "fusion.pipelined = " << (fusion.pipelined ? "true" : "false") << "\n"
     << "bench.chunk_tokens = " << chunk_tokens << "\n"
     << "bench.top_k = " << top_k << "\n";
  return os.str();
}

Settings parse_settings(const std::string& text) {
  Settings s;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw std::invalid_argument("config: duplicate key " + key);

    if (key == "model.n_layers") s.model.n_layers = parse_int<int>(key, value);
    else if (key == "model.n_heads") s.model.n_heads = parse_int<int>(key, value);
    else if (key == "model.d_model") s.model.d_model = parse_int<int>(key, value);
    else if (key == "model.d_head") s.model.d_head = parse_int<int>(key, value);
    else if (key == "model.d_ff") s.model.d_ff = parse_int<int>(key, value);
    else if (key == "model.rope_theta") s.model.rope_theta = parse_double(key, value);
    else if (key == "model.ln_eps") s.model.ln_eps = parse_double(key, value);
    else if (key == "model.seed") s.model.seed = parse_int<uint64_t>(key, value);
    else if (key == "model.critical_layer") s.model.critical_layer = parse_int<int>(key, value);
    else if (key == "store.anchor_ratio") s.store.anchor_ratio = parse_double(key, value);
    else if (key == "store.key_norm_mode") s.store.key_norm_mode = key_norm_mode_from_string(value);
    else if (key == "tier.ssd_base_latency") s.store.tier.ssd_base_latency = parse_double(key, value);
    else if (key == "tier.ssd_bandwidth") s.store.tier.ssd_bandwidth = parse_double(key, value);
    else if (key == "tier.anchors_resident") s.store.tier.anchors_resident = parse_bool(key, value);
    else if (key == "tier.real_sleep") s.store.tier.real_sleep = parse_bool(key, value);
    else if (key == "cost.compute_alpha") s.fusion.cost.compute_alpha = parse_double(key, value);
    else if (key == "cost.compute_beta") s.fusion.cost.compute_beta = parse_double(key, value);
    else if (key == "cost.decode_gamma") s.fusion.cost.decode_gamma = parse_double(key, value);
    else if (key == "fusion.aggregation") {
      if (value == "all_query_tokens") s.fusion.aggregation = ScoreAggregation::AllQueryTokens;
      else if (value == "last_query_token") s.fusion.aggregation = ScoreAggregation::LastQueryToken;
      else bad_value(key, value);
    } else if (key == "fusion.epic_mode") {
      if (value == "per_sequence") s.fusion.epic_mode = EpicMode::PerSequence;
      else if (value == "per_chunk") s.fusion.epic_mode = EpicMode::PerChunk;
      else bad_value(key, value);
    } else if (key == "fusion.random_seed") s.fusion.random_seed = parse_int<uint64_t>(key, value);
    else if (key == "fusion.max_new_tokens") s.fusion.max_new_tokens = parse_int<int>(key, value);
    else if (key == "fusion.pipelined") s.fusion.pipelined = parse_bool(key, value);
    else if (key == "bench.chunk_tokens") s.chunk_tokens = parse_int<int>(key, value);
    else if (key == "bench.top_k") s.top_k = parse_int<int>(key, value);
    else throw std::invalid_argument("config: unknown key " + key);
  }

  if (seen.count("model.d_model") || seen.count("model.n_heads")) {
    if (!seen.count("model.d_head") && s.model.n_heads > 0) s.model.d_head = s.model.d_model / s.model.n_heads;
    if (!seen.count("model.d_ff")) s.model.d_ff = 4 * s.model.d_model;
  }
  if (seen.count("model.n_layers") && !seen.count("model.critical_layer")) {
    s.model.critical_layer = (s.model.n_layers + 1) / 2;
  }
  s.fusion.cost.tier = s.store.tier;
  s.validate();
  return s;
}

Settings load_settings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_settings(buf.str());
}

Settings settings_from_env() {
  const char* path = std::getenv("QCFUSE_CONFIG");
  if (path == nullptr || *path == '\0') return Settings{};
  return load_settings(path);
}

}  // namespace qcfuse
