#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qcfuse {

// ceil(ratio * n) clamped to [0, n]. The 1e-9 slack keeps products such as
// 0.3 * 10 from rounding up to 4.
inline int ceil_count(double ratio, int n) {
  const double raw = std::ceil(ratio * static_cast<double>(n) - 1e-9);
  return std::clamp(static_cast<int>(raw), 0, n);
}

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FingerprintMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace qcfuse
