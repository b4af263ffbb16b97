#include "lvqa/localized_attention.hpp"

namespace lvqa {

Tensor attention_map(Tape& tape, const Tensor& features, const Tensor& question, const LocalizedAttentionParams& params,
                     SoftmaxAxis axis, Mode mode, Rng& rng) {
  if (features.rank() != 4 || question.rank() != 2 || features.dim(0) != question.dim(0)) {
    throw TensorError("attention_map: shape mismatch " + shape_str(features.shape()) + " vs " +
                      shape_str(question.shape()));
  }
  const std::size_t batch = features.dim(0), height = features.dim(2), width = features.dim(3);
  const std::size_t proj = params.projection(), glimpses = params.glimpses();

  Tensor image_proj = conv1x1(tape, dropout(tape, features, params.dropout, mode, rng), params.w_image, params.b_image);
  Tensor question_proj =
      linear(tape, dropout(tape, question, params.dropout, mode, rng), params.w_question, params.b_question);
  if (question_proj.dim(1) != proj) {
    throw TensorError("attention_map: shape mismatch " + shape_str(question_proj.shape()) + " vs " +
                      shape_str(image_proj.shape()));
  }
  Tensor joint = relu(tape, mul_broadcast(tape, image_proj, reshape(tape, question_proj, {batch, proj, 1, 1})));
  Tensor logits = conv1x1(tape, dropout(tape, joint, params.dropout, mode, rng), params.w_glimpse, params.b_glimpse);

  if (axis == SoftmaxAxis::Glimpse) return softmax(tape, logits, 1);
  Tensor flat = reshape(tape, logits, {batch, glimpses, height * width});
  return reshape(tape, softmax(tape, flat, 2), {batch, glimpses, height, width});
}

Tensor downsample_mask(const Mask& mask, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || mask.size % height != 0 || mask.size % width != 0) {
    throw TensorError("downsample_mask: mask of size " + std::to_string(mask.size) + " not divisible into " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t cell_h = mask.size / height, cell_w = mask.size / width;
  std::vector<double> cells(height * width, 0.0);
  for (std::size_t y = 0; y < mask.size; ++y) {
    for (std::size_t x = 0; x < mask.size; ++x) {
      if (mask.at(y, x)) cells[(y / cell_h) * width + x / cell_w] = 1.0;
    }
  }
  return Tensor({height, width}, std::move(cells));
}

Tensor downsample_masks(const std::vector<const Mask*>& masks, std::size_t height, std::size_t width) {
  std::vector<double> all;
  all.reserve(masks.size() * height * width);
  for (const Mask* m : masks) {
    auto cells = downsample_mask(*m, height, width);
    all.insert(all.end(), cells.data().begin(), cells.data().end());
  }
  return Tensor({masks.size(), height, width}, std::move(all));
}

Tensor masked_pool(Tape& tape, const Tensor& attention, const Tensor& features, const Tensor& mask) {
  if (attention.rank() != 4 || features.rank() != 4 || mask.rank() != 3) {
    throw TensorError("masked_pool: shape mismatch " + shape_str(attention.shape()) + " vs " +
                      shape_str(features.shape()));
  }
  const std::size_t batch = attention.dim(0), glimpses = attention.dim(1);
  const std::size_t channels = features.dim(1), height = attention.dim(2), width = attention.dim(3);
  if (features.dim(0) != batch || features.dim(2) != height || features.dim(3) != width) {
    throw TensorError("masked_pool: shape mismatch " + shape_str(attention.shape()) + " vs " +
                      shape_str(features.shape()));
  }
  if (mask.dim(0) != batch || mask.dim(1) != height || mask.dim(2) != width) {
    throw TensorError("masked_pool: shape mismatch " + shape_str(attention.shape()) + " vs " + shape_str(mask.shape()));
  }
  for (double v : mask.data()) {
    if (v != 0.0 && v != 1.0) throw TensorError("masked_pool: mask is not binary");
  }
  const std::size_t spatial = height * width;
  Tensor weights = mul_broadcast(tape, reshape(tape, attention, {batch, glimpses, spatial}),
                                 reshape(tape, mask, {batch, 1, spatial}));
  Tensor pooled = bmm_nt(tape, weights, reshape(tape, features, {batch, channels, spatial}));
  return reshape(tape, pooled, {batch, glimpses * channels});
}

}  // namespace lvqa
