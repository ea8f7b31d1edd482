#include "qcfuse/json_io.hpp"

#include <cstdio>

namespace qcfuse {

Json to_json(const SelectionResult& s) {
  return Json{{"policy", to_string(s.policy)},
              {"ratio", s.ratio},
              {"n", s.n},
              {"indices", s.indices},
              {"scores", s.scores}};
}

Json to_json(const ScheduleTrace& s) {
  Json layers = Json::array();
  for (size_t i = 0; i < s.layers.size(); ++i) {
    const auto& l = s.layers[i];
    layers.push_back({{"layer", static_cast<int>(i) + 1},
                      {"fetch_start", l.fetch_start},
                      {"fetch_end", l.fetch_end},
                      {"compute_start", l.compute_start},
                      {"compute_end", l.compute_end}});
  }
  return Json{{"pipelined", s.pipelined},
              {"pre_phase", s.pre_phase},
              {"ttft_core", s.ttft_core},
              {"ttft", s.ttft},
              {"layers", std::move(layers)}};
}

Json to_json(const RecomputeTrace& t) {
  Json events = Json::array();
  for (const auto& e : t.events) {
    events.push_back({{"kind", e.kind == RecomputeEvent::Kind::Fetch ? "fetch" : "compute"},
                      {"layer", e.layer},
                      {"start", e.start},
                      {"end", e.end}});
  }
  return Json{{"updated", t.updated},
              {"fetch_seconds", t.fetch_seconds},
              {"compute_seconds", t.compute_seconds},
              {"events", std::move(events)}};
}

Json to_json(const OracleMetrics& m) {
  return Json{{"logit_div_max", m.logit_div_max},
              {"logit_kl", m.logit_kl},
              {"token_match", m.token_match},
              {"overlap", m.overlap}};
}

Json to_json(const RunResult& r, bool with_logits) {
  Json j{{"policy", to_string(r.policy)},
         {"ratio", r.ratio},
         {"chunk_ids", r.chunk_ids},
         {"offsets", r.offsets},
         {"n_ctx", static_cast<int>(r.context_tokens.size())},
         {"query_tokens", r.query_tokens},
         {"answer", r.answer},
         {"answer_text", render_tokens(r.answer)},
         {"selection", to_json(r.selection)},
         {"recompute", to_json(r.recompute)},
         {"schedule", to_json(r.schedule)},
         {"ttft_sim", r.ttft}};
  if (with_logits) j["first_logits"] = r.first_logits;
  j["metrics"] = r.metrics ? to_json(*r.metrics) : Json(nullptr);
  return j;
}

Json to_json(const StoreCounters& c) {
  return Json{{"cache_hits", c.cache_hits},
              {"cache_misses", c.cache_misses},
              {"layers_fetched", c.layers_fetched},
              {"bytes_fetched", c.bytes_fetched},
              {"forward_passes", c.forward_passes}};
}

std::string render_token(TokenId t) {
  if (t == kBos) return "<bos>";
  if (t == kEos) return "<eos>";
  if (t == kPad) return "<pad>";
  if (t >= 0x20 && t < 0x7f && t != '\\') return std::string(1, static_cast<char>(t));
  if (t == '\\') return "\\\\";
  char buf[8];
  std::snprintf(buf, sizeof buf, "\\x%02x", static_cast<unsigned>(t) & 0xffu);
  return buf;
}

std::string render_tokens(std::span<const TokenId> tokens, size_t max_tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size() && i < max_tokens; ++i) out += render_token(tokens[i]);
  return out;
}

}  // namespace qcfuse
