#pragma once

#include <cmath>
#include <vector>

#include "lvqa/image.hpp"
#include "lvqa/localized_attention.hpp"
#include "lvqa/rng.hpp"
#include "lvqa/tensor.hpp"

namespace lvqa::test {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline LocalizedAttentionParams random_params(Rng& rng, std::size_t C, std::size_t Q, std::size_t P, std::size_t G,
                                              double dropout = 0.0) {
  LocalizedAttentionParams p;
  p.w_image = random_tensor(rng, {P, C});
  p.b_image = random_tensor(rng, {P}, -0.2, 0.2);
  p.w_question = random_tensor(rng, {Q, P});
  p.b_question = random_tensor(rng, {P}, -0.2, 0.2);
  p.w_glimpse = random_tensor(rng, {G, P});
  p.b_glimpse = random_tensor(rng, {G}, -0.2, 0.2);
  p.dropout = dropout;
  return p;
}

inline Mask random_mask(Rng& rng, std::size_t size, double density) {
  Mask m(size);
  for (auto& b : m.bits) b = rng.bernoulli(density) ? 1 : 0;
  return m;
}

inline Tensor binary_cells(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace lvqa::test
