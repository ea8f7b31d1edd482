#pragma once

#include <json.hpp>

#include "qcfuse/fusion.hpp"
#include "qcfuse/kv_store.hpp"
#include "qcfuse/pipeline.hpp"

namespace qcfuse {

using Json = nlohmann::ordered_json;

Json to_json(const SelectionResult& s);
Json to_json(const ScheduleTrace& s);
Json to_json(const RecomputeTrace& t);
Json to_json(const OracleMetrics& m);
// Logits are included only when `with_logits` is set; they dominate the size.
Json to_json(const RunResult& r, bool with_logits = false);
Json to_json(const StoreCounters& c);

// Printable ASCII passes through; everything else becomes \xHH (BOS/EOS/PAD
// render as <bos>/<eos>/<pad>).
std::string render_token(TokenId t);
std::string render_tokens(std::span<const TokenId> tokens, size_t max_tokens = SIZE_MAX);

}  // namespace qcfuse
