#pragma once

#include <span>

#include "qcfuse/model.hpp"

namespace qcfuse {

// Max absolute elementwise difference.
double logit_divergence(std::span<const float> reference, std::span<const float> candidate);

// KL(softmax(reference) || softmax(candidate)), probabilities floored at 1e-12.
double logit_kl(std::span<const float> reference, std::span<const float> candidate);

// Fraction of the first `window` positions where both sequences agree. The
// denominator is the longer sequence clipped to `window`; two empty
// sequences match fully.
double token_match_rate(std::span<const TokenId> reference, std::span<const TokenId> candidate, int window = 32);

// |selection ∩ oracle| / |oracle|, or 1 when the oracle set is empty.
double selection_overlap(std::span<const int> selection, std::span<const int> oracle);

}  // namespace qcfuse
