#pragma once

#include <span>

namespace qcfuse {

// Location-aware sparse attention.
//
// Each query row carries its absolute position and sees exactly the keys
// whose position is <= its own; keys may come in any order and need not be
// contiguous. Softmax is max-subtracted and accumulates in key order, so two
// callers presenting the same visible keys in the same order get bit-identical
// outputs regardless of how many invisible keys surround them.
//
// queries/out: [n_rows × n_heads × d_head]; keys/values: [n_keys × n_heads × d_head].
// weights (optional, may be empty): [n_heads × n_rows × n_keys], zero where masked.
// Throws std::invalid_argument if a row sees no key.
void sparse_attention(std::span<const float> queries, std::span<const int> query_positions,
                      std::span<const float> keys, std::span<const float> values,
                      std::span<const int> key_positions, int n_heads, int d_head, std::span<float> out,
                      std::span<float> weights = {});

}  // namespace qcfuse
