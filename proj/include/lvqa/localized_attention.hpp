#pragma once

#include "lvqa/autodiff.hpp"
#include "lvqa/image.hpp"

namespace lvqa {

/// Which axis the glimpse logits are normalized over. Spatial normalizes each
/// glimpse over the H x W positions; Glimpse normalizes the G-vector at each
/// position.
enum class SoftmaxAxis { Spatial, Glimpse };

/// Projections of the localized attention block. Linear weights are stored
/// input-major for `linear`; the 1x1 convolutions use [out, in].
struct LocalizedAttentionParams {
  Tensor w_image;     // [C', C]   1x1 conv
  Tensor b_image;     // [C']
  Tensor w_question;  // [Q, C']
  Tensor b_question;  // [C']
  Tensor w_glimpse;   // [G, C']   1x1 conv
  Tensor b_glimpse;   // [G]
  double dropout = 0.0;

  std::size_t glimpses() const { return w_glimpse.dim(0); }
  std::size_t projection() const { return w_image.dim(0); }
};

/// Glimpse attention over the full feature map:
///   logits[g,h,w] = (W_g . relu(W_x x[:,h,w] * W_q q))_g
/// followed by a softmax over the chosen axis. Dropout is applied to the input
/// of each of the three projections in train mode. Never sees the region mask.
/// features [B, C, H, W], question [B, Q] -> [B, G, H, W].
Tensor attention_map(Tape& tape, const Tensor& features, const Tensor& question, const LocalizedAttentionParams& params,
                     SoftmaxAxis axis, Mode mode, Rng& rng);

/// Binary downsampling by the any-pixel rule: cell (h, w) is 1 iff some
/// covered full-resolution pixel is set. Returns [H, W].
Tensor downsample_mask(const Mask& mask, std::size_t height, std::size_t width);

/// Stacks downsampled masks into [B, H, W].
Tensor downsample_masks(const std::vector<const Mask*>& masks, std::size_t height, std::size_t width);

/// v[b, g*C + c] = sum_{h,w} attention[b,g,h,w] * features[b,c,h,w] * mask[b,h,w].
/// attention [B, G, H, W], features [B, C, H, W], mask [B, H, W] (binary).
Tensor masked_pool(Tape& tape, const Tensor& attention, const Tensor& features, const Tensor& mask);

}  // namespace lvqa
