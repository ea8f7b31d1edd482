#pragma once

#include <array>
#include <string>
#include <string_view>

namespace qcfuse {

enum class Policy { FullCompute, FullReuse, Random, EPIC, CacheBlend, KVShare, QCLast, QCAll, QCFuse };

inline constexpr std::array<Policy, 9> kAllPolicies = {Policy::FullCompute, Policy::FullReuse, Policy::Random,
                                                       Policy::EPIC,        Policy::CacheBlend, Policy::KVShare,
                                                       Policy::QCLast,      Policy::QCAll,      Policy::QCFuse};

const char* to_string(Policy policy);
// Exact, case-sensitive names as printed by to_string. Throws std::invalid_argument.
Policy policy_from_string(std::string_view name);

}  // namespace qcfuse
