#include "lvqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "lvqa/evaluation.hpp"

namespace lvqa {

// ---------------------------------------------------------------------------
// Config and history

void TrainConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("train config: " + why); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail("plateau_factor must lie in (0, 1)");
  if (early_stop_patience >= epochs) fail("early_stop_patience must be smaller than epochs");
  if (min_delta < 0.0) fail("min_delta must be non-negative");
  if (selection_metric != "auc" && selection_metric != "accuracy") fail("selection_metric must be auc or accuracy");
  if (seeds.empty()) fail("seeds must not be empty");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"plateau_factor", plateau_factor},
          {"plateau_patience", plateau_patience},
          {"early_stop_patience", early_stop_patience},
          {"min_delta", min_delta},
          {"min_learning_rate", min_learning_rate},
          {"augment", augment},
          {"selection_metric", selection_metric},
          {"seeds", seeds}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.min_delta = j.value("min_delta", c.min_delta);
  c.min_learning_rate = j.value("min_learning_rate", c.min_learning_rate);
  c.augment = j.value("augment", c.augment);
  c.selection_metric = j.value("selection_metric", c.selection_metric);
  c.seeds = j.value("seeds", c.seeds);
  c.validate();
  return c;
}

nlohmann::ordered_json EpochRecord::to_json() const {
  return {{"epoch", epoch},         {"train_loss", train_loss},     {"val_loss", val_loss},
          {"val_metric", val_metric}, {"val_accuracy", val_accuracy}, {"learning_rate", learning_rate}};
}

std::vector<double> History::val_losses() const {
  std::vector<double> out;
  for (const auto& e : epochs) out.push_back(e.val_loss);
  return out;
}

std::vector<double> History::val_metrics() const {
  std::vector<double> out;
  for (const auto& e : epochs) out.push_back(e.val_metric);
  return out;
}

// ---------------------------------------------------------------------------
// Schedules

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience, double min_delta, double floor)
    : lr_(lr), factor_(factor), min_delta_(min_delta), floor_(floor), patience_(patience),
      best_(std::numeric_limits<double>::infinity()) {}

double PlateauScheduler::step(double val_loss) {
  if (!started_ || val_loss < best_ - min_delta_) {
    best_ = val_loss;
    bad_ = 0;
    started_ = true;
    return lr_;
  }
  if (++bad_ >= patience_) {
    lr_ = std::max(lr_ * factor_, floor_);
    bad_ = 0;
  }
  return lr_;
}

double lr_on_plateau(const std::vector<double>& val_losses, double initial_lr, double factor, std::size_t patience,
                     double min_delta, double floor) {
  if (val_losses.empty()) throw std::invalid_argument("lr_on_plateau: empty history");
  PlateauScheduler s(initial_lr, factor, patience, min_delta, floor);
  for (double v : val_losses) s.step(v);
  return s.learning_rate();
}

bool early_stop(const std::vector<double>& val_metrics, std::size_t patience) {
  if (val_metrics.empty()) return false;
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_metrics.size(); ++i) {
    if (val_metrics[i] > val_metrics[best]) best = i;
  }
  const std::size_t current = val_metrics.size() - 1;
  return current != best && current - best >= patience;
}

// ---------------------------------------------------------------------------
// Batches

std::shared_ptr<const std::vector<double>> FeatureCache::get(std::uint64_t key,
                                                             const std::function<std::vector<double>()>& make) {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = entries_.find(key);
    if (it != entries_.end()) return it->second;
  }
  auto value = std::make_shared<const std::vector<double>>(make());
  std::lock_guard<std::mutex> lock(mutex_);
  return entries_.emplace(key, std::move(value)).first->second;
}

std::size_t FeatureCache::size() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return entries_.size();
}

Sample flip_sample(const Sample& sample) {
  Sample out = sample;
  out.image = std::make_shared<const Image>(flip_horizontal(*sample.image));
  out.mask = flip_horizontal(sample.mask);
  return out;
}

Vocabulary build_vocabulary(const Dataset& train, Variant variant, std::size_t grid_n, bool augment) {
  if (train.samples.empty()) throw std::invalid_argument("build_vocabulary: empty training split");
  std::vector<std::string> questions;
  std::vector<std::string> answers;
  for (const auto& s : train.samples) {
    std::string q = s.question;
    if (variant == Variant::RegionInText) q += " " + region_text(s.mask, grid_n);
    questions.push_back(q);
    if (augment && variant == Variant::RegionInText) {
      questions.push_back(s.question + " " + region_text(flip_horizontal(s.mask), grid_n));
    }
    answers.push_back(s.answer);
  }
  std::sort(answers.begin(), answers.end());
  answers.erase(std::unique(answers.begin(), answers.end()), answers.end());
  return Vocabulary::build(questions, answers);
}

namespace {

bool variant_changes_image(Variant v) { return v == Variant::CropRegion || v == Variant::DrawRegion; }

}  // namespace

PreparedBatch prepare_batch(const VqaModel& model, const Dataset& data, const std::vector<std::size_t>& indices,
                            const std::vector<bool>& flips, FeatureCache* cache) {
  if (indices.empty()) throw std::invalid_argument("prepare_batch: empty batch");
  if (flips.size() != indices.size()) throw std::invalid_argument("prepare_batch: flips and indices differ in length");
  const ModelConfig& cfg = model.config();
  const bool use_cache = cfg.freeze_image_encoder && cache != nullptr;

  PreparedBatch batch;
  batch.features = use_cache;
  std::vector<VariantInput> inputs;
  inputs.reserve(indices.size());
  std::vector<const Mask*> masks;
  std::vector<double> features;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& raw = data.samples.at(indices[k]);
    const Sample s = flips[k] ? flip_sample(raw) : raw;
    inputs.push_back(build_variant_input(cfg.variant, *s.image, s.question, s.mask, cfg.grid_n));
    const VariantInput& in = inputs.back();
    batch.ids.push_back(model.question_ids(in.question));
    batch.labels.push_back(model.vocab().answer_index(s.answer));
    if (use_cache) {
      const std::uint64_t base = variant_changes_image(cfg.variant) ? indices[k] : s.image_index;
      auto feat = cache->get(base * 2 + (flips[k] ? 1 : 0), [&] {
        Tape tape;
        tape.set_recording(false);
        return model.encode_images(tape, images_to_tensor({&in.image})).values();
      });
      features.insert(features.end(), feat->begin(), feat->end());
    }
  }
  for (const auto& in : inputs) masks.push_back(&in.mask);
  const std::size_t h = cfg.feature_size();
  batch.masks = downsample_masks(masks, h, h);
  if (use_cache) {
    batch.inputs = Tensor({indices.size(), cfg.channels, h, h}, std::move(features));
  } else {
    std::vector<const Image*> images;
    for (const auto& in : inputs) images.push_back(&in.image);
    batch.inputs = images_to_tensor(images);
  }
  return batch;
}

Tensor batch_logits(Tape& tape, const VqaModel& model, const PreparedBatch& batch, Mode mode, Rng& rng,
                    Tensor* attention_out) {
  const Tensor features = batch.features ? batch.inputs : model.encode_images(tape, batch.inputs);
  return model.forward_features(tape, features, batch.ids, batch.masks, mode, rng, attention_out);
}

double batch_loss(const VqaModel& model, const PreparedBatch& batch) {
  Tape tape;
  tape.set_recording(false);
  Rng rng(0);
  return cross_entropy(tape, batch_logits(tape, model, batch, Mode::Eval, rng), batch.labels).item();
}

Predictions predict_dataset(const VqaModel& model, const Dataset& data, FeatureCache* cache, std::size_t batch_size) {
  if (data.samples.empty()) throw std::invalid_argument("predict_dataset: empty dataset");
  const std::size_t yes = model.vocab().answer_index("yes");
  Predictions out;
  double loss_sum = 0.0;
  Rng rng(0);
  for (std::size_t start = 0; start < data.samples.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, data.samples.size());
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const PreparedBatch batch = prepare_batch(model, data, idx, std::vector<bool>(idx.size(), false), cache);
    Tape tape;
    tape.set_recording(false);
    const Tensor logits = batch_logits(tape, model, batch, Mode::Eval, rng);
    loss_sum += cross_entropy(tape, logits, batch.labels).item() * static_cast<double>(idx.size());
    const Tensor probs = softmax(tape, logits, 1);
    const std::size_t a = probs.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < a; ++k)
        if (probs[i * a + k] > probs[i * a + best]) best = k;
      out.predicted.push_back(best);
      out.yes_scores.push_back(probs[i * a + yes]);
    }
    out.labels.insert(out.labels.end(), batch.labels.begin(), batch.labels.end());
  }
  out.loss = loss_sum / static_cast<double>(data.samples.size());
  return out;
}

// ---------------------------------------------------------------------------
// Loop

History train_model(VqaModel& model, const Dataset& train, const Dataset& val, const TrainConfig& config,
                    std::uint64_t seed, const TrainHooks& hooks, FeatureCache* train_cache, FeatureCache* val_cache) {
  config.validate();
  if (train.samples.empty()) throw std::invalid_argument("train: empty training split");
  if (val.samples.empty()) throw std::invalid_argument("train: empty validation split");

  FeatureCache own_train, own_val;
  if (!train_cache) train_cache = &own_train;
  if (!val_cache) val_cache = &own_val;

  ParamList params = model.trainable_parameters();
  AdamState adam;
  adam.learning_rate = config.learning_rate;
  PlateauScheduler plateau(config.learning_rate, config.plateau_factor, config.plateau_patience, config.min_delta,
                           config.min_learning_rate);

  Rng root(seed ^ 0x7F4A7C159E3779B9ULL);
  Rng order_rng = root.split();
  Rng flip_rng = root.split();
  Rng dropout_rng = root.split();

  const std::size_t yes = model.vocab().answer_index("yes");
  History history;
  std::vector<std::vector<double>> best_params = model.snapshot();
  std::vector<std::size_t> order(train.samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(order, order_rng);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(start + config.batch_size, order.size());
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
      std::vector<bool> flips(idx.size(), false);
      if (config.augment) {
        for (std::size_t k = 0; k < idx.size(); ++k) flips[k] = flip_rng.bernoulli(0.5);
      }
      const PreparedBatch batch = prepare_batch(model, train, idx, flips, train_cache);
      Tape tape;
      const Tensor loss = cross_entropy(tape, batch_logits(tape, model, batch, Mode::Train, dropout_rng), batch.labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite training loss (lr " << adam.learning_rate << ", epoch " << epoch << ", batch " << batch_index
           << ")";
        throw NumericError(os.str());
      }
      loss_sum += value * static_cast<double>(idx.size());
      tape.backward(loss);
      adam_step(params, adam);
    }

    const Predictions pred = predict_dataset(model, val, val_cache, std::max<std::size_t>(config.batch_size, 64));
    std::vector<int> binary;
    for (std::size_t l : pred.labels) binary.push_back(l == yes ? 1 : 0);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_loss = pred.loss;
    rec.val_accuracy = accuracy(pred.predicted, pred.labels);
    const bool both = std::count(binary.begin(), binary.end(), 1) > 0 && std::count(binary.begin(), binary.end(), 0) > 0;
    rec.val_metric = config.selection_metric == "accuracy" || !both ? rec.val_accuracy : roc_auc(pred.yes_scores, binary);
    rec.learning_rate = adam.learning_rate;
    if (!std::isfinite(rec.val_loss)) {
      std::ostringstream os;
      os << "non-finite validation loss (lr " << adam.learning_rate << ", epoch " << epoch << ")";
      throw NumericError(os.str());
    }
    history.epochs.push_back(rec);

    if (history.epochs.size() == 1 || rec.val_metric > history.best_metric) {
      history.best_metric = rec.val_metric;
      history.best_epoch = epoch;
      best_params = model.snapshot();
      if (hooks.on_best) hooks.on_best(model, rec);
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);

    adam.learning_rate = plateau.step(rec.val_loss);
    if (early_stop(history.val_metrics(), config.early_stop_patience)) {
      history.stopped_early = true;
      break;
    }
  }
  model.assign(best_params);
  return history;
}

}  // namespace lvqa
