#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvqa/data_gen.hpp"
#include "lvqa/evaluation.hpp"
#include "lvqa/training.hpp"
#include "lvqa/vqa_model.hpp"

namespace lvqa {

/// Data, model and training settings as one JSON document with the
/// sections "data", "model" and "train".
struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;

  nlohmann::ordered_json to_json() const;
  /// Missing sections or keys keep their defaults; unknown keys are errors.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// Every overridable key as "section.key" with its default value.
std::vector<std::pair<std::string, std::string>> config_keys();

/// Applies "section.key=value" (or "key=value" when the key is unique across
/// sections). Values parse as JSON, falling back to a plain string.
void apply_override(nlohmann::json& config, const std::string& assignment);

std::filesystem::path run_directory(const std::filesystem::path& root, const std::string& name, std::uint64_t seed);

struct SplitData {
  Dataset train, val, test;
};
SplitData load_splits(const std::filesystem::path& data_dir);

/// Frozen-encoder feature caches for one dataset, shared by variants that see
/// the same encoder input.
class FeatureStore {
 public:
  FeatureCache& cache(const std::string& split, Variant variant);

 private:
  std::map<std::string, std::unique_ptr<FeatureCache>> caches_;
};

struct RunResult {
  History history;
  EvalReport test_report;
};

/// Trains one (variant, seed) model in memory and evaluates it on test.
/// When out_dir is non-empty the run is persisted: config.json, history.jsonl,
/// checkpoint/ (best epoch) and report.json.
RunResult train_and_evaluate(const SplitData& data, const RunConfig& config, std::uint64_t seed,
                             const std::filesystem::path& out_dir, FeatureStore* store = nullptr,
                             bool verbose = false);

/// Test-split report for a saved run directory.
EvalReport evaluate_checkpoint(const std::filesystem::path& run_dir, const Dataset& test, std::uint64_t seed);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace lvqa
