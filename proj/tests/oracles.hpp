#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "metabdc/array.hpp"

namespace metabdc::testing {

/// Explicit-loop double centering of channel distances; fm is [d, m].
inline std::vector<double> bdc_oracle(const ArrayD& fm) {
  const std::size_t d = fm.dim(0), m = fm.dim(1);
  std::vector<double> a(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double diff = fm.at(i, k) - fm.at(j, k);
        s += diff * diff;
      }
      a[i * d + j] = std::sqrt(s);
    }
  }
  std::vector<double> row(d, 0.0), col(d, 0.0);
  double all = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      row[i] += a[i * d + j] / static_cast<double>(d);
      col[j] += a[i * d + j] / static_cast<double>(d);
      all += a[i * d + j] / static_cast<double>(d * d);
    }
  }
  std::vector<double> out(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a[i * d + j] - row[i] - col[j] + all;
  }
  return out;
}

/// O(n^2) pair counting with half credit for ties.
inline double auroc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      if (s[i] > s[j]) num += 1.0;
      else if (s[i] == s[j]) num += 0.5;
    }
  }
  return num / pairs;
}

}  // namespace metabdc::testing
