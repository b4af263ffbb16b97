#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lvqa/data_gen.hpp"
#include "lvqa/vqa_model.hpp"

namespace lvqa {

/// Non-finite loss or parameter during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  double plateau_factor = 0.1;
  std::size_t plateau_patience = 5;
  std::size_t early_stop_patience = 20;
  double min_delta = 1e-4;
  double min_learning_rate = 1e-7;
  bool augment = true;
  std::string selection_metric = "auc";  // "auc" | "accuracy"
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;
  double val_accuracy = 0.0;
  double learning_rate = 0.0;

  nlohmann::ordered_json to_json() const;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  bool stopped_early = false;

  std::vector<double> val_losses() const;
  std::vector<double> val_metrics() const;
};

/// Reduce-on-plateau over validation loss (lower is better): the rate drops
/// once `patience` epochs in a row fail to improve on the best by min_delta.
/// The bad-epoch counter resets after every reduction.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience, double min_delta = 1e-4, double floor = 1e-7);
  /// Feeds one epoch's validation loss; returns the learning rate to use next.
  double step(double val_loss);
  double learning_rate() const { return lr_; }

 private:
  double lr_, factor_, min_delta_, floor_;
  std::size_t patience_;
  double best_;
  std::size_t bad_ = 0;
  bool started_ = false;
};

/// Replays the scheduler over a validation-loss history.
double lr_on_plateau(const std::vector<double>& val_losses, double initial_lr, double factor, std::size_t patience,
                     double min_delta = 1e-4, double floor = 1e-7);

/// True iff at least `patience` epochs have passed since the best metric
/// (higher is better) and the latest epoch is not the best.
bool early_stop(const std::vector<double>& val_metrics, std::size_t patience = 20);

/// Image-encoder outputs keyed by input, filled lazily. Only valid while the
/// encoder is frozen.
class FeatureCache {
 public:
  std::shared_ptr<const std::vector<double>> get(std::uint64_t key,
                                                 const std::function<std::vector<double>()>& make);
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::unordered_map<std::uint64_t, std::shared_ptr<const std::vector<double>>> entries_;
};

/// Horizontal flip of image and mask together.
Sample flip_sample(const Sample& sample);

/// Vocabulary over the variant-transformed training questions, including
/// flipped region text when augmenting.
Vocabulary build_vocabulary(const Dataset& train, Variant variant, std::size_t grid_n, bool augment);

struct PreparedBatch {
  Tensor inputs;  // features [B, C, H, W] when `features` else images [B, 3, S, S]
  bool features = false;
  std::vector<std::vector<std::size_t>> ids;
  Tensor masks;
  std::vector<std::size_t> labels;
};

PreparedBatch prepare_batch(const VqaModel& model, const Dataset& data, const std::vector<std::size_t>& indices,
                            const std::vector<bool>& flips, FeatureCache* cache);

Tensor batch_logits(Tape& tape, const VqaModel& model, const PreparedBatch& batch, Mode mode, Rng& rng,
                    Tensor* attention_out = nullptr);

struct Predictions {
  std::vector<double> yes_scores;  // P(yes)
  std::vector<std::size_t> predicted;
  std::vector<std::size_t> labels;
  double loss = 0.0;
};

/// Eval-mode predictions over every sample, in dataset order.
Predictions predict_dataset(const VqaModel& model, const Dataset& data, FeatureCache* cache,
                            std::size_t batch_size = 64);

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const VqaModel&, const EpochRecord&)> on_best;
};

/// Trains in place and leaves the best-epoch parameters in the model.
History train_model(VqaModel& model, const Dataset& train, const Dataset& val, const TrainConfig& config,
                    std::uint64_t seed, const TrainHooks& hooks = {}, FeatureCache* train_cache = nullptr,
                    FeatureCache* val_cache = nullptr);

/// Mean cross-entropy of one batch.
double batch_loss(const VqaModel& model, const PreparedBatch& batch);

}  // namespace lvqa
