#include "lvqa/vqa_model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "lvqa/checkpoint.hpp"

namespace lvqa {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Variants and config

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Ours: return "ours";
    case Variant::NoMask: return "no_mask";
    case Variant::RegionInText: return "region_in_text";
    case Variant::CropRegion: return "crop_region";
    case Variant::DrawRegion: return "draw_region";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown variant '" + name + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> order{Variant::NoMask, Variant::RegionInText, Variant::CropRegion,
                                          Variant::DrawRegion, Variant::Ours};
  return order;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("model config: " + why); };
  if (encoder_depth == 0) fail("encoder_depth must be positive");
  if (encoder_widths.size() + 1 != encoder_depth) fail("encoder_widths must list encoder_depth - 1 widths");
  if (image_size == 0 || image_size % (std::size_t{1} << encoder_depth) != 0) {
    fail("image_size must be divisible by 2^encoder_depth");
  }
  if (!channels || !projection || !question_size || !embedding_size || !glimpses || !hidden) {
    fail("all layer sizes must be positive");
  }
  if (max_question_len == 0) fail("max_question_len must be positive");
  if (grid_n == 0 || image_size % grid_n != 0) fail("grid_n must divide image_size");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"image_size", image_size},
          {"encoder_depth", encoder_depth},
          {"encoder_widths", encoder_widths},
          {"channels", channels},
          {"projection", projection},
          {"question_size", question_size},
          {"embedding_size", embedding_size},
          {"glimpses", glimpses},
          {"hidden", hidden},
          {"max_question_len", max_question_len},
          {"grid_n", grid_n},
          {"dropout", dropout},
          {"variant", to_string(variant)},
          {"softmax_axis", softmax_axis == SoftmaxAxis::Spatial ? "spatial" : "glimpse"},
          {"freeze_image_encoder", freeze_image_encoder},
          {"encoder_seed", encoder_seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.encoder_depth = j.value("encoder_depth", c.encoder_depth);
  c.encoder_widths = j.value("encoder_widths", c.encoder_widths);
  c.channels = j.value("channels", c.channels);
  c.projection = j.value("projection", c.projection);
  c.question_size = j.value("question_size", c.question_size);
  c.embedding_size = j.value("embedding_size", c.embedding_size);
  c.glimpses = j.value("glimpses", c.glimpses);
  c.hidden = j.value("hidden", c.hidden);
  c.max_question_len = j.value("max_question_len", c.max_question_len);
  c.grid_n = j.value("grid_n", c.grid_n);
  c.dropout = j.value("dropout", c.dropout);
  c.variant = parse_variant(j.value("variant", to_string(c.variant)));
  const std::string axis = j.value("softmax_axis", std::string("spatial"));
  if (axis != "spatial" && axis != "glimpse") throw std::invalid_argument("model config: unknown softmax_axis " + axis);
  c.softmax_axis = axis == "spatial" ? SoftmaxAxis::Spatial : SoftmaxAxis::Glimpse;
  c.freeze_image_encoder = j.value("freeze_image_encoder", c.freeze_image_encoder);
  c.encoder_seed = j.value("encoder_seed", c.encoder_seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

ParamList ModelParams::named() const {
  ParamList out = image_encoder();
  out.push_back({"question.embedding", question.embedding});
  out.push_back({"question.w_input", question.w_input});
  out.push_back({"question.w_hidden", question.w_hidden});
  out.push_back({"question.bias", question.bias});
  out.push_back({"attention.w_image", attention.w_image});
  out.push_back({"attention.b_image", attention.b_image});
  out.push_back({"attention.w_question", attention.w_question});
  out.push_back({"attention.b_question", attention.b_question});
  out.push_back({"attention.w_glimpse", attention.w_glimpse});
  out.push_back({"attention.b_glimpse", attention.b_glimpse});
  out.push_back({"classifier.w_hidden", w_hidden});
  out.push_back({"classifier.b_hidden", b_hidden});
  out.push_back({"classifier.w_out", w_out});
  out.push_back({"classifier.b_out", b_out});
  return out;
}

ParamList ModelParams::image_encoder() const {
  ParamList out;
  for (std::size_t i = 0; i < image.blocks.size(); ++i) {
    out.push_back({"image.block" + std::to_string(i) + ".weight", image.blocks[i].weight});
    out.push_back({"image.block" + std::to_string(i) + ".bias", image.blocks[i].bias});
  }
  return out;
}

namespace {

Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng, bool trainable) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> w(numel(shape));
  for (auto& v : w) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(w), trainable);
}

Tensor zeros(std::size_t n, bool trainable) { return Tensor::zeros({n}, trainable); }

}  // namespace

ModelParams init_params(const ModelConfig& config, std::size_t vocab_size, std::size_t answers, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  const bool train_image = !config.freeze_image_encoder;
  Rng image_rng(config.freeze_image_encoder ? config.encoder_seed : seed ^ 0x5bd1e995ULL);
  std::size_t in = 3;
  for (std::size_t i = 0; i < config.encoder_depth; ++i) {
    const std::size_t out = i + 1 == config.encoder_depth ? config.channels : config.encoder_widths[i];
    p.image.blocks.push_back({kaiming({out, in, 3, 3}, in * 9, image_rng, train_image), zeros(out, train_image)});
    in = out;
  }

  Rng rng(seed);
  const std::size_t e = config.embedding_size, q = config.question_size;
  std::vector<double> table(vocab_size * e);
  for (auto& v : table) v = rng.uniform(-0.1, 0.1);
  p.question.embedding = Tensor({vocab_size, e}, std::move(table), true);
  p.question.w_input = kaiming({e, 4 * q}, e, rng, true);
  p.question.w_hidden = kaiming({q, 4 * q}, q, rng, true);
  p.question.bias = zeros(4 * q, true);

  const std::size_t c = config.channels, cp = config.projection, g = config.glimpses;
  p.attention.w_image = kaiming({cp, c}, c, rng, true);
  p.attention.b_image = zeros(cp, true);
  p.attention.w_question = kaiming({q, cp}, q, rng, true);
  p.attention.b_question = zeros(cp, true);
  p.attention.w_glimpse = kaiming({g, cp}, cp, rng, true);
  p.attention.b_glimpse = zeros(g, true);
  p.attention.dropout = config.dropout;

  p.w_hidden = kaiming({config.classifier_input(), config.hidden}, config.classifier_input(), rng, true);
  p.b_hidden = zeros(config.hidden, true);
  p.w_out = kaiming({config.hidden, answers}, config.hidden, rng, true);
  p.b_out = zeros(answers, true);
  return p;
}

// ---------------------------------------------------------------------------
// Variant inputs

std::string region_text(const Mask& mask, std::size_t grid_n) {
  const Box box = bounding_box(mask);
  const std::size_t cell = mask.size / grid_n;
  const std::size_t r0 = box.row0 / cell * cell;
  const std::size_t c0 = box.col0 / cell * cell;
  const std::size_t r1 = (box.row1 + 1 + cell - 1) / cell * cell;
  const std::size_t c1 = (box.col1 + 1 + cell - 1) / cell * cell;
  std::ostringstream os;
  os << "in (" << r0 << ',' << c0 << ") to (" << r1 << ',' << c1 << ')';
  return os.str();
}

Mask region_boundary(const Mask& mask, std::size_t thickness) {
  Mask edge(mask.size);
  const long s = static_cast<long>(mask.size);
  const long reach = static_cast<long>(thickness);
  for (long y = 0; y < s; ++y) {
    for (long x = 0; x < s; ++x) {
      if (!mask.at(y, x)) continue;
      bool near_outside = false;
      for (long dy = -reach; dy <= reach && !near_outside; ++dy) {
        for (long dx = -reach; dx <= reach && !near_outside; ++dx) {
          const long ny = y + dy, nx = x + dx;
          near_outside = ny < 0 || nx < 0 || ny >= s || nx >= s || !mask.at(ny, nx);
        }
      }
      if (near_outside) edge.at(y, x) = 1;
    }
  }
  return edge;
}

VariantInput build_variant_input(Variant variant, const Image& image, const std::string& question, const Mask& mask,
                                 std::size_t grid_n) {
  if (mask.size != image.size) throw std::invalid_argument("build_variant_input: mask and image sizes differ");
  if (mask.empty()) throw std::invalid_argument("build_variant_input: empty region mask");
  const Mask everything(image.size, 1);
  switch (variant) {
    case Variant::Ours:
      return {image, question, mask};
    case Variant::NoMask:
      return {image, question, everything};
    case Variant::RegionInText:
      return {image, question + " " + region_text(mask, grid_n), everything};
    case Variant::CropRegion: {
      Image cropped = image;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < image.size; ++y)
          for (std::size_t x = 0; x < image.size; ++x)
            if (!mask.at(y, x)) cropped.at(c, y, x) = 0.0;
      return {std::move(cropped), question, everything};
    }
    case Variant::DrawRegion: {
      Image drawn = image;
      const Mask edge = region_boundary(mask, 2);
      for (std::size_t y = 0; y < image.size; ++y) {
        for (std::size_t x = 0; x < image.size; ++x) {
          if (!edge.at(y, x)) continue;
          drawn.at(0, y, x) = 1.0;
          drawn.at(1, y, x) = 0.0;
          drawn.at(2, y, x) = 0.0;
        }
      }
      return {std::move(drawn), question, everything};
    }
  }
  throw std::invalid_argument("build_variant_input: unknown variant");
}

// ---------------------------------------------------------------------------
// Model

Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const std::size_t s = images.front()->size;
  std::vector<double> all;
  all.reserve(images.size() * 3 * s * s);
  for (const Image* im : images) {
    if (im->size != s) throw std::invalid_argument("images_to_tensor: mixed image sizes");
    all.insert(all.end(), im->pixels.begin(), im->pixels.end());
  }
  return Tensor({images.size(), 3, s, s}, std::move(all));
}

VqaModel::VqaModel(ModelConfig config, Vocabulary vocab, std::uint64_t seed)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  params_ = init_params(config_, vocab_.size(), vocab_.answers().size(), seed);
}

ParamList VqaModel::trainable_parameters() const {
  ParamList all = params_.named();
  if (!config_.freeze_image_encoder) return all;
  ParamList out;
  for (auto& p : all) {
    if (p.name.rfind("image.", 0) != 0) out.push_back(p);
  }
  return out;
}

std::vector<std::size_t> VqaModel::question_ids(const std::string& question) const {
  return pad_ids(tokenize(question, vocab_), config_.max_question_len);
}

Tensor VqaModel::encode_images(Tape& tape, const Tensor& images) const {
  return encode_image(tape, params_.image, images);
}

Tensor VqaModel::forward_features(Tape& tape, const Tensor& features, const std::vector<std::vector<std::size_t>>& ids,
                                  const Tensor& masks, Mode mode, Rng& rng, Tensor* attention_out) const {
  Tensor question = encode_question(tape, params_.question, ids);
  Tensor attention = attention_map(tape, features, question, params_.attention, config_.softmax_axis, mode, rng);
  if (attention_out) *attention_out = attention;
  Tensor pooled = masked_pool(tape, attention, features, masks);
  Tensor joint = concat(tape, {pooled, question}, 1);
  if (joint.dim(1) != config_.classifier_input()) {
    throw TensorError("classifier input " + shape_str(joint.shape()) + " does not match C*G+Q");
  }
  Tensor hidden =
      relu(tape, linear(tape, dropout(tape, joint, config_.dropout, mode, rng), params_.w_hidden, params_.b_hidden));
  return linear(tape, dropout(tape, hidden, config_.dropout, mode, rng), params_.w_out, params_.b_out);
}

Tensor VqaModel::forward(Tape& tape, const Batch& batch, Mode mode, Rng& rng, Tensor* attention_out) const {
  Tensor features = encode_images(tape, batch.images);
  return forward_features(tape, features, batch.ids, batch.masks, mode, rng, attention_out);
}

Batch VqaModel::make_batch(const std::vector<const VariantInput*>& inputs) const {
  Batch batch;
  std::vector<const Image*> images;
  std::vector<const Mask*> masks;
  for (const auto* in : inputs) {
    if (in->image.size != config_.image_size) {
      throw std::invalid_argument("make_batch: image size " + std::to_string(in->image.size) + " does not match model " +
                                  std::to_string(config_.image_size));
    }
    images.push_back(&in->image);
    masks.push_back(&in->mask);
    batch.ids.push_back(question_ids(in->question));
  }
  batch.images = images_to_tensor(images);
  batch.masks = downsample_masks(masks, config_.feature_size(), config_.feature_size());
  return batch;
}

AnswerDistribution VqaModel::predict(const Image& image, const std::string& question, const Mask& mask,
                                     Tensor* attention_out) const {
  const VariantInput input = build_variant_input(config_.variant, image, question, mask, config_.grid_n);
  Tape tape;
  tape.set_recording(false);
  Rng rng(0);
  Tensor logits = forward(tape, make_batch({&input}), Mode::Eval, rng, attention_out);
  Tensor probs = softmax(tape, logits, 1);
  AnswerDistribution out;
  out.probabilities.assign(probs.data().begin(), probs.data().end());
  for (std::size_t k = 1; k < out.probabilities.size(); ++k) {
    if (out.probabilities[k] > out.probabilities[out.predicted]) out.predicted = k;
  }
  out.label = vocab_.answers()[out.predicted];
  return out;
}

void VqaModel::check_vocabulary(const Vocabulary& other) const {
  if (other.answers() != vocab_.answers()) throw std::invalid_argument("answer set does not match the checkpoint");
  if (!(other == vocab_)) throw std::invalid_argument("vocabulary does not match the checkpoint");
}

void VqaModel::save(const fs::path& dir) const {
  save_checkpoint(dir, parameters());
  std::ostringstream hash;
  hash << std::hex << vocab_.hash();
  nlohmann::json meta = {{"model", config_.to_json()}, {"vocabulary", vocab_.to_json()}, {"vocabulary_hash", hash.str()}};
  std::ofstream out(dir / "config.json", std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + (dir / "config.json").string());
  out << meta.dump(2) << '\n';
}

VqaModel VqaModel::load(const fs::path& dir) {
  std::ifstream in(dir / "config.json");
  if (!in) throw CheckpointError("missing " + (dir / "config.json").string());
  const auto meta = nlohmann::json::parse(in);
  ModelConfig config = ModelConfig::from_json(meta.at("model"));
  Vocabulary vocab = Vocabulary::from_json(meta.at("vocabulary"));
  std::ostringstream hash;
  hash << std::hex << vocab.hash();
  if (meta.value("vocabulary_hash", "") != hash.str()) {
    throw CheckpointError("vocabulary hash mismatch in " + (dir / "config.json").string());
  }
  VqaModel model(config, vocab, 0);
  ParamList params = model.parameters();
  restore_checkpoint(dir, params);
  return model;
}

void VqaModel::assign(const std::vector<std::vector<double>>& values) {
  ParamList params = parameters();
  if (values.size() != params.size()) throw std::invalid_argument("assign: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    if (values[i].size() != dst.size()) throw std::invalid_argument("assign: size mismatch for " + params[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

std::vector<std::vector<double>> VqaModel::snapshot() const {
  std::vector<std::vector<double>> out;
  for (const auto& p : parameters()) out.push_back(p.tensor.values());
  return out;
}

}  // namespace lvqa
