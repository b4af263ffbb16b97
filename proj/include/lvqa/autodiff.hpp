#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lvqa/rng.hpp"
#include "lvqa/tensor.hpp"

namespace lvqa {

enum class Mode { Train, Eval };

/// Ordered record of differentiable operations. An op is recorded only when
/// recording is enabled and at least one of its inputs requires a gradient.
/// A tape belongs to one training step on one thread.
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output = 0;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;
  void record(std::string op, std::vector<std::uint64_t> inputs, std::uint64_t output, std::function<void()> backward);

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Seeds d(loss)/d(loss) = 1, runs every recorded rule in reverse and
  /// clears the tape. Leaf gradients accumulate until zeroed.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
  bool recording_ = true;
};

// Linear algebra.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);  // [M,K] x [K,N]
Tensor bmm_nt(Tape& tape, const Tensor& a, const Tensor& b);  // [B,M,K] x [B,N,K]^T -> [B,M,N]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);  // [B,I] x [I,O] + [O]

// Convolutions over [B,C,H,W]; weight [Co,Ci,k,k] (conv2d) or [Co,Ci] (conv1x1).
// bias may be an undefined Tensor.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t pad);
Tensor conv1x1(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

// Element-wise. The *_broadcast forms accept b with the same rank as a and
// every extent either equal to a's or 1.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor add_broadcast(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul_broadcast(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);

// Shape manipulation.
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(Tape& tape, const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// Reductions.
Tensor sum(Tape& tape, const Tensor& x);   // -> [1]
Tensor mean(Tape& tape, const Tensor& x);  // -> [1]
Tensor sum_axis(Tape& tape, const Tensor& x, std::size_t axis);  // drops the axis
Tensor mean_axis(Tape& tape, const Tensor& x, std::size_t axis);

/// Inverted dropout: keeps each value with probability 1-p and scales by
/// 1/(1-p). Identity in eval mode or when p == 0.
Tensor dropout(Tape& tape, const Tensor& x, double p, Mode mode, Rng& rng);

// 2x-style spatial downsampling of the last two axes by `factor`.
Tensor max_pool2d(Tape& tape, const Tensor& x, std::size_t factor);
Tensor downsample_nearest(Tape& tape, const Tensor& x, std::size_t factor);

/// Rows of table [V,E] selected by ids -> [N,E].
Tensor gather_rows(Tape& tape, const Tensor& table, const std::vector<std::size_t>& ids);

/// Mean softmax cross-entropy of logits [B,K] against class indices.
Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<std::size_t>& labels);

}  // namespace lvqa
