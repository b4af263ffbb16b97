#pragma once

#include <filesystem>
#include <stdexcept>

#include "lvqa/optim.hpp"

namespace lvqa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes `index.json` (name -> shape, dtype, byte offset) and `weights.bin`
/// (little-endian float64, concatenated in list order) under dir.
void save_checkpoint(const std::filesystem::path& dir, const ParamList& params);

/// Reads every tensor listed in the index, in offset order.
ParamList load_checkpoint(const std::filesystem::path& dir);

/// Copies checkpoint values into existing parameters; names and shapes must
/// match exactly.
void restore_checkpoint(const std::filesystem::path& dir, ParamList& params);

}  // namespace lvqa
