#include "lvqa/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lvqa/rng.hpp"

namespace lvqa {

GradCheckReport grad_check(const ScalarFn& f, Tensor x, double h, double tol,
                           std::optional<std::size_t> max_coordinates, std::uint64_t seed) {
  const bool had_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();

  std::vector<double> analytic(x.size(), 0.0);
  {
    Tape tape;
    Tensor y = f(tape, x);
    if (y.requires_grad() && !tape.empty()) {
      tape.backward(y);
      if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    }
    x.zero_grad();
  }

  auto evaluate = [&] {
    Tape tape;
    tape.set_recording(false);
    return f(tape, x).item();
  };

  std::vector<std::size_t> coords(x.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coordinates && *max_coordinates < coords.size()) {
    Rng rng(seed);
    shuffle(coords, rng);
    coords.resize(*max_coordinates);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  auto values = x.mutable_data();
  for (std::size_t i : coords) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = evaluate();
    values[i] = saved - h;
    const double down = evaluate();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i];
    const double abs_err = std::abs(a - numeric);
    const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-3});
    report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
    report.max_relative_error = std::max(report.max_relative_error, rel_err);
    report.max_abs_analytic = std::max(report.max_abs_analytic, std::abs(a));
    report.max_abs_numeric = std::max(report.max_abs_numeric, std::abs(numeric));
  }
  report.coordinates_checked = coords.size();
  report.passed = report.max_relative_error < tol;
  x.set_requires_grad(had_flag);
  return report;
}

}  // namespace lvqa
