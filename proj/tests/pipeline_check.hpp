#pragma once

// Finite-difference check of the whole model: encoders, localized attention,
// classifier and cross-entropy on a toy batch of two questions.

#include <algorithm>

#include "lvqa/grad_check.hpp"
#include "lvqa/vqa_model.hpp"

namespace lvqa::test {

inline ModelConfig toy_config(Variant variant) {
  ModelConfig c;
  c.image_size = 8;
  c.encoder_depth = 2;
  c.encoder_widths = {3};
  c.channels = 3;
  c.projection = 4;
  c.question_size = 3;
  c.embedding_size = 2;
  c.glimpses = 2;
  c.hidden = 5;
  c.max_question_len = 12;
  c.grid_n = 4;
  c.dropout = 0.25;
  c.variant = variant;
  c.freeze_image_encoder = false;
  return c;
}

inline Vocabulary toy_vocabulary() {
  return Vocabulary::build({"is there circle in this region in (0,2) to (4,6)", "is there square in this region"},
                           {"no", "yes"});
}

/// Largest relative error over every parameter tensor and the input image.
/// Train mode with a fixed dropout stream, so the masks are identical across
/// every perturbed evaluation.
inline double pipeline_grad_error(Variant variant, std::uint64_t seed, std::size_t coords_per_tensor = 12) {
  Rng rng(seed);
  const ModelConfig config = toy_config(variant);
  VqaModel model(config, toy_vocabulary(), seed);
  const std::size_t s = config.image_size;
  // Zero biases put ReLU inputs exactly on the kink wherever a feature column
  // is all zero; jitter every parameter off it.
  for (auto& p : model.parameters())
    for (double& v : p.tensor.mutable_data()) v += rng.uniform(-0.1, 0.1);

  std::vector<Image> images(2, Image(s));
  std::vector<Mask> masks(2, Mask(s));
  for (std::size_t b = 0; b < 2; ++b) {
    for (double& v : images[b].pixels) v = rng.uniform();
    const std::size_t r0 = rng.index(s / 2), c0 = rng.index(s / 2);
    const std::size_t r1 = r0 + 1 + rng.index(s / 2), c1 = c0 + 1 + rng.index(s / 2);
    for (std::size_t y = r0; y <= r1; ++y)
      for (std::size_t x = c0; x <= c1; ++x) masks[b].at(y, x) = 1;
  }
  const std::vector<std::string> questions{"is there circle in this region?", "is there square in this region?"};
  std::vector<VariantInput> inputs;
  for (std::size_t b = 0; b < 2; ++b)
    inputs.push_back(build_variant_input(variant, images[b], questions[b], masks[b], config.grid_n));
  // Cropped and outlined areas are constant, which ties the max-pool windows.
  for (auto& in : inputs)
    for (double& v : in.image.pixels) v += rng.uniform(-1e-2, 1e-2);
  const Batch batch = model.make_batch({&inputs[0], &inputs[1]});
  const std::vector<std::size_t> labels{rng.index(2), rng.index(2)};
  const std::uint64_t dropout_seed = rng.next_u64();

  auto loss_with_images = [&](Tape& tape, const Tensor& image_tensor) {
    Rng drop(dropout_seed);
    Batch b = batch;
    b.images = image_tensor;
    return cross_entropy(tape, model.forward(tape, b, Mode::Train, drop), labels);
  };

  double worst = 0.0;
  const GradCheckReport input_report =
      grad_check(loss_with_images, batch.images.clone(), 1e-5, 1e-4, coords_per_tensor, rng.next_u64());
  worst = std::max(worst, input_report.max_relative_error);

  for (auto& p : model.parameters()) {
    auto f = [&](Tape& tape, const Tensor&) { return loss_with_images(tape, batch.images); };
    const GradCheckReport r = grad_check(f, p.tensor, 1e-5, 1e-4, coords_per_tensor, rng.next_u64());
    worst = std::max(worst, r.max_relative_error);
  }
  return worst;
}

}  // namespace lvqa::test
