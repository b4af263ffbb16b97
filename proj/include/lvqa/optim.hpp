#pragma once

#include <string>
#include <vector>

#include "lvqa/tensor.hpp"

namespace lvqa {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

/// Per-parameter moments for Adam, matched to a ParamList by position.
struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One Adam update with bias correction; zeroes the gradients afterwards.
/// Throws if any parameter lacks a gradient.
void adam_step(ParamList& params, AdamState& state);

void zero_grads(ParamList& params);

}  // namespace lvqa
