#include "qcfuse/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace qcfuse {

void sparse_attention(std::span<const float> queries, std::span<const int> query_positions,
                      std::span<const float> keys, std::span<const float> values,
                      std::span<const int> key_positions, int n_heads, int d_head, std::span<float> out,
                      std::span<float> weights) {
  const size_t width = static_cast<size_t>(n_heads) * d_head;
  const size_t n_rows = query_positions.size();
  const size_t n_keys = key_positions.size();
  if (queries.size() != n_rows * width || out.size() != n_rows * width || keys.size() != n_keys * width ||
      values.size() != n_keys * width) {
    throw std::invalid_argument("sparse_attention: tensor shape mismatch");
  }
  const bool want_weights = !weights.empty();
  if (want_weights && weights.size() != static_cast<size_t>(n_heads) * n_rows * n_keys) {
    throw std::invalid_argument("sparse_attention: weight buffer shape mismatch");
  }

  const float scale = 1.0f / std::sqrt(static_cast<float>(d_head));
  std::vector<int> visible;
  visible.reserve(n_keys);
  std::vector<float> probs(n_keys);

  for (size_t r = 0; r < n_rows; ++r) {
    visible.clear();
    for (size_t j = 0; j < n_keys; ++j) {
      if (key_positions[j] <= query_positions[r]) visible.push_back(static_cast<int>(j));
    }
    if (visible.empty()) {
      throw std::invalid_argument("sparse_attention: query row at position " + std::to_string(query_positions[r]) +
                                  " sees no key");
    }
    for (int h = 0; h < n_heads; ++h) {
      const float* q = queries.data() + r * width + static_cast<size_t>(h) * d_head;
      float max_score = -std::numeric_limits<float>::infinity();
      for (size_t v = 0; v < visible.size(); ++v) {
        const float* k = keys.data() + static_cast<size_t>(visible[v]) * width + static_cast<size_t>(h) * d_head;
        float dot = 0.0f;
        for (int d = 0; d < d_head; ++d) dot += q[d] * k[d];
        probs[v] = dot * scale;
        if (probs[v] > max_score) max_score = probs[v];
      }
      float sum = 0.0f;
      for (size_t v = 0; v < visible.size(); ++v) {
        probs[v] = std::exp(probs[v] - max_score);
        sum += probs[v];
      }
      float* o = out.data() + r * width + static_cast<size_t>(h) * d_head;
      for (int d = 0; d < d_head; ++d) o[d] = 0.0f;
      for (size_t v = 0; v < visible.size(); ++v) {
        probs[v] /= sum;
        const float* val = values.data() + static_cast<size_t>(visible[v]) * width + static_cast<size_t>(h) * d_head;
        for (int d = 0; d < d_head; ++d) o[d] += probs[v] * val[d];
      }
      if (want_weights) {
        float* w = weights.data() + (static_cast<size_t>(h) * n_rows + r) * n_keys;
        for (size_t j = 0; j < n_keys; ++j) w[j] = 0.0f;
        for (size_t v = 0; v < visible.size(); ++v) w[visible[v]] = probs[v];
      }
    }
  }
}

}  // namespace qcfuse
