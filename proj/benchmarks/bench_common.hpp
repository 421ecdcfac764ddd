#pragma once

#include <random>

#include "promptct/geometry.hpp"
#include "promptct/tensor.hpp"

namespace promptct::bench {

inline Tensor gaussian(Dims dims, std::uint64_t seed) {
  Tensor t(std::move(dims));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// Same geometry as configs/desk.cfg.
inline GeometrySpec desk_geometry() { return GeometrySpec{}; }

}  // namespace promptct::bench
