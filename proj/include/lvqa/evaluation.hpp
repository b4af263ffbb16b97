#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvqa/image.hpp"
#include "lvqa/tensor.hpp"

namespace lvqa {

struct Dataset;
struct Predictions;

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

double accuracy(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels);

/// Mann-Whitney form: P(score_pos > score_neg) + 0.5 P(tie). Labels are 0/1.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Step sum over the descending-score sweep; equal scores keep input order.
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

struct StratumMetrics {
  std::string name;
  std::size_t count = 0;
  std::size_t positives = 0;
  double accuracy = 0.0;
  double auc = 0.0;  // NaN when the stratum lacks one of the classes
  double ap = 0.0;   // NaN without positives
};

struct EvalReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::vector<StratumMetrics> strata;  // "overall", "object:<name>", "context"

  const StratumMetrics& stratum(const std::string& name) const;
  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Metrics over the whole split, per queried object, and on the
/// context-ambiguous questions.
EvalReport make_report(const Dataset& data, const Predictions& pred, std::size_t yes_index, const std::string& variant,
                       std::uint64_t seed);

struct AggregateCell {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t n = 0;

  /// "0.850 ± 0.050", or "n/a" when undefined.
  std::string format() const;
};

struct AggregateRow {
  std::string stratum;
  std::size_t count = 0;
  AggregateCell accuracy, auc, ap;
};

struct AggregateReport {
  std::string variant;
  std::vector<std::uint64_t> seeds;
  std::vector<AggregateRow> rows;

  const AggregateRow& row(const std::string& stratum) const;
  nlohmann::ordered_json to_json() const;
};

AggregateCell aggregate_values(const std::vector<double>& values);
AggregateReport aggregate_seeds(const std::vector<EvalReport>& reports);

/// Rows in the given order; columns accuracy, AUC, AP for the overall and
/// context strata.
std::string comparison_markdown(const std::vector<AggregateReport>& rows);
/// Per-object AUC table.
std::string per_object_markdown(const std::vector<AggregateReport>& rows);
std::string strata_csv(const std::vector<AggregateReport>& rows);

/// Min-max normalizes one [H, W] map to bytes and upsamples (nearest) to
/// size x size. Constant maps become 0.
std::vector<std::uint8_t> attention_heatmap(const std::vector<double>& map, std::size_t h, std::size_t w,
                                            std::size_t size);

/// For every glimpse of attention [G, H, W]: <stem>_g<k>.pgm (heatmap) and
/// <stem>_g<k>.ppm (image blended 50/50 with a red heat layer, region
/// boundary outlined in green). Returns the written paths.
std::vector<std::filesystem::path> export_attention(const Tensor& attention, const Image& image, const Mask& mask,
                                                    const std::filesystem::path& dir, const std::string& stem);

}  // namespace lvqa
