#pragma once

#include <cstddef>
#include <functional>
#include <optional>

#include "lvqa/autodiff.hpp"

namespace lvqa {

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
  std::size_t coordinates_checked = 0;
  bool passed = false;
};

using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

/// Compares tape gradients of a scalar-valued f against central differences,
/// perturbing x in place (and restoring it). Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-3). When max_coordinates is set, a seeded subset
/// of coordinates is checked.
GradCheckReport grad_check(const ScalarFn& f, Tensor x, double h, double tol,
                           std::optional<std::size_t> max_coordinates = std::nullopt, std::uint64_t seed = 0);

}  // namespace lvqa
