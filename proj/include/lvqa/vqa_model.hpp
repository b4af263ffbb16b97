#pragma once

#include <cstdint>
#include <filesystem>
#include "json.hpp"
#include <optional>
#include <string>
#include <vector>

#include "lvqa/encoders.hpp"
#include "lvqa/image.hpp"
#include "lvqa/localized_attention.hpp"
#include "lvqa/optim.hpp"

namespace lvqa {

/// How region information reaches the model.
enum class Variant { Ours, NoMask, RegionInText, CropRegion, DrawRegion };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);
/// Row order used by comparison tables.
const std::vector<Variant>& all_variants();

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t encoder_depth = 3;
  std::vector<std::size_t> encoder_widths{16, 32};  // depth - 1 intermediate widths
  std::size_t channels = 32;                         // C
  std::size_t projection = 64;                       // C'
  std::size_t question_size = 64;                    // Q
  std::size_t embedding_size = 32;                   // E
  std::size_t glimpses = 2;                          // G
  std::size_t hidden = 128;
  std::size_t max_question_len = 16;
  std::size_t grid_n = 8;
  double dropout = 0.25;
  Variant variant = Variant::Ours;
  SoftmaxAxis softmax_axis = SoftmaxAxis::Spatial;
  bool freeze_image_encoder = true;
  std::uint64_t encoder_seed = 1234;

  std::size_t feature_size() const { return image_size >> encoder_depth; }
  std::size_t classifier_input() const { return channels * glimpses + question_size; }
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct ModelParams {
  ImageEncoderParams image;
  QuestionEncoderParams question;
  LocalizedAttentionParams attention;
  Tensor w_hidden, b_hidden;  // [G*C + Q, hidden], [hidden]
  Tensor w_out, b_out;        // [hidden, |A|], [|A|]

  ParamList named() const;
  ParamList image_encoder() const;
};

/// Kaiming-style uniform weights (bound sqrt(6 / fan_in)), zero biases and
/// uniform(-0.1, 0.1) embeddings. The image encoder draws from
/// config.encoder_seed when frozen so every run shares one fixed backbone.
ModelParams init_params(const ModelConfig& config, std::size_t vocab_size, std::size_t answers, std::uint64_t seed);

/// The model-facing form of one localized question after the variant's
/// transformation.
struct VariantInput {
  Image image;
  std::string question;
  Mask mask;
};

/// Region corners snapped outward to a grid_n x grid_n grid, as text:
/// "in (r0,c0) to (r1,c1)" with exclusive r1, c1.
std::string region_text(const Mask& mask, std::size_t grid_n);

/// Pixels of the mask within Chebyshev distance `thickness` of a pixel outside
/// it, so the band is `thickness` pixels wide (the image border counts as outside).
Mask region_boundary(const Mask& mask, std::size_t thickness);

VariantInput build_variant_input(Variant variant, const Image& image, const std::string& question, const Mask& mask,
                                 std::size_t grid_n);

struct AnswerDistribution {
  std::vector<double> probabilities;
  std::size_t predicted = 0;
  std::string label;
};

struct Batch {
  Tensor images;  // [B, 3, S, S]; may be undefined when features are supplied
  std::vector<std::vector<std::size_t>> ids;
  Tensor masks;  // [B, H, W]
};

class VqaModel {
 public:
  VqaModel(ModelConfig config, Vocabulary vocab, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const ModelParams& params() const { return params_; }

  ParamList parameters() const { return params_.named(); }
  /// Everything optimized by training; excludes the image encoder when frozen.
  ParamList trainable_parameters() const;

  std::vector<std::size_t> question_ids(const std::string& question) const;

  Tensor encode_images(Tape& tape, const Tensor& images) const;
  /// Logits [B, |A|] from precomputed features [B, C, H, W]. When
  /// attention_out is given it receives the attention map.
  Tensor forward_features(Tape& tape, const Tensor& features, const std::vector<std::vector<std::size_t>>& ids,
                          const Tensor& masks, Mode mode, Rng& rng, Tensor* attention_out = nullptr) const;
  Tensor forward(Tape& tape, const Batch& batch, Mode mode, Rng& rng, Tensor* attention_out = nullptr) const;

  /// Builds a batch of model inputs from already-transformed samples.
  Batch make_batch(const std::vector<const VariantInput*>& inputs) const;

  /// Eval-mode answer distribution for a raw localized question; the
  /// configured variant's input transformation is applied first.
  AnswerDistribution predict(const Image& image, const std::string& question, const Mask& mask,
                             Tensor* attention_out = nullptr) const;

  /// Throws if `other` differs from the model's vocabulary or answer set.
  void check_vocabulary(const Vocabulary& other) const;

  void save(const std::filesystem::path& dir) const;
  static VqaModel load(const std::filesystem::path& dir);

  /// Replaces parameter values (e.g. with a best-epoch snapshot).
  void assign(const std::vector<std::vector<double>>& values);
  std::vector<std::vector<double>> snapshot() const;

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  ModelParams params_;
};

Tensor images_to_tensor(const std::vector<const Image*>& images);

}  // namespace lvqa
