#include "qcfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <vector>

namespace qcfuse {

double logit_divergence(std::span<const float> reference, std::span<const float> candidate) {
  if (reference.size() != candidate.size()) throw std::invalid_argument("logit_divergence: size mismatch");
  double worst = 0.0;
  for (size_t i = 0; i < reference.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(reference[i]) - candidate[i]));
  }
  return worst;
}

namespace {

std::vector<double> softmax(std::span<const float> logits) {
  double mx = -INFINITY;
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace

double logit_kl(std::span<const float> reference, std::span<const float> candidate) {
  if (reference.size() != candidate.size()) throw std::invalid_argument("logit_kl: size mismatch");
  constexpr double kFloor = 1e-12;
  const auto p = softmax(reference);
  const auto q = softmax(candidate);
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double pi = std::max(p[i], kFloor);
    const double qi = std::max(q[i], kFloor);
    kl += pi * std::log(pi / qi);
  }
  return std::max(kl, 0.0);
}

double token_match_rate(std::span<const TokenId> reference, std::span<const TokenId> candidate, int window) {
  const size_t limit = static_cast<size_t>(window);
  const size_t denom = std::min(std::max(reference.size(), candidate.size()), limit);
  if (denom == 0) return 1.0;
  size_t same = 0;
  for (size_t i = 0; i < denom && i < reference.size() && i < candidate.size(); ++i) {
    if (reference[i] == candidate[i]) ++same;
  }
  return static_cast<double>(same) / static_cast<double>(denom);
}

double selection_overlap(std::span<const int> selection, std::span<const int> oracle) {
  if (oracle.empty()) return 1.0;
  std::unordered_set<int> want(oracle.begin(), oracle.end());
  size_t hit = 0;
  for (int i : selection) hit += want.count(i);
  return static_cast<double>(hit) / static_cast<double>(oracle.size());
}

}  // namespace qcfuse
