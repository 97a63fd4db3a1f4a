#pragma once

#include <cstddef>
#include <vector>

#include <cmath>

#include "metabdc/array.hpp"
#include "metabdc/encoder.hpp"
#include "metabdc/rng.hpp"

namespace metabdc::testing {

inline ArrayD random_array(Shape shape, SeededRng& rng, double scale = 1.0) {
  ArrayD a(std::move(shape));
  for (auto& v : a.vec()) v = rng.normal(0.0, scale);
  return a;
}

inline ArrayD random_unit_rows(std::size_t n, std::size_t p, SeededRng& rng) {
  ArrayD a = random_array({n, p}, rng);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) s += a.at(i, j) * a.at(i, j);
    s = std::sqrt(s);
    for (std::size_t j = 0; j < p; ++j) a.at(i, j) /= s;
  }
  return a;
}

/// Small encoder used wherever a real network is needed but speed matters.
inline EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.height = e.width = 8;
  e.channels = 1;
  e.stages = {{3, 3, 2}, {4, 3, 1}};
  e.projection_hidden = 5;
  e.projection_dim = 3;
  return e;
}

}  // namespace metabdc::testing
