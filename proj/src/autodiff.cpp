#include "lvqa/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace lvqa {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using ImplPtr = std::shared_ptr<TensorImpl>;

[[noreturn]] void mismatch(const std::string& op, const Shape& a, const Shape& b) {
  throw TensorError(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void bad_shape(const std::string& op, const Shape& a, const std::string& why) {
  throw TensorError(op + ": " + why + " (got " + shape_str(a) + ")");
}

void require_defined(const std::string& op, const Tensor& t) {
  if (!t.defined()) throw TensorError(op + ": undefined input tensor");
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank) {
  require_defined(op, t);
  if (t.rank() != rank) bad_shape(op, t.shape(), "expected rank " + std::to_string(rank));
}

// Gradient buffer of an input, allocated on demand; nullptr when the input
// does not take part in differentiation.
double* grad_buf(const ImplPtr& p) {
  if (!p || !p->requires_grad) return nullptr;
  if (p->grad.empty()) p->grad.assign(p->data.size(), 0.0);
  return p->grad.data();
}

Tensor make_result(Shape shape, std::vector<double> data, bool track) {
  Tensor out(std::move(shape), std::move(data), track);
  out.impl()->leaf = !track;
  return out;
}

bool tracks(const Tape& tape, std::initializer_list<const Tensor*> inputs) { return tape.wants_grad(inputs); }

// Index into b for every flat index of a, where b broadcasts against a.
std::vector<std::size_t> broadcast_index(const std::string& op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) mismatch(op, a, b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] != a[i] && b[i] != 1) mismatch(op, a, b);
  }
  const std::size_t rank = a.size();
  std::vector<std::size_t> b_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > 0;) {
    b_stride[i] = b[i] == 1 ? 0 : s;
    s *= b[i];
  }
  const std::size_t n = numel(a);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t bi = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = bi;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      bi += b_stride[d];
      if (counter[d] < a[d]) break;
      bi -= b_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return index;
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename Fwd, typename Deriv>
Tensor unary(Tape& tape, const std::string& op, const Tensor& x, Fwd fwd, Deriv deriv) {
  require_defined(op, x);
  std::vector<double> y(x.size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xs[i]);
  const bool track = tracks(tape, {&x});
  Tensor out = make_result(x.shape(), std::move(y), track);
  if (track) {
    ImplPtr xi = x.impl(), oi = out.impl();
    tape.record(op, {x.id()}, out.id(), [xi, oi, deriv] {
      if (oi->grad.empty()) return;
      double* gx = grad_buf(xi);
      if (!gx) return;
      for (std::size_t i = 0; i < oi->data.size(); ++i) gx[i] += oi->grad[i] * deriv(xi->data[i], oi->data[i]);
    });
  }
  return out;
}

void im2col(const double* img, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, double* col) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = col + ((c * k + ky) * k + kx) * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(height) && ix < static_cast<long>(width);
            row[oy * out_w + ox] = inside ? img[(c * height + iy) * width + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, double* img) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = col + ((c * k + ky) * k + kx) * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(height)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(width)) continue;
            img[(c * height + iy) * width + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

bool Tape::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void Tape::record(std::string op, std::vector<std::uint64_t> inputs, std::uint64_t output,
                  std::function<void()> backward) {
  entries_.push_back({std::move(op), std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw TensorError("backward: undefined loss");
  if (loss.size() != 1) throw TensorError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (entries_.empty()) throw TensorError("backward: tape is empty (no recorded forward pass)");
  if (!loss.requires_grad()) throw TensorError("backward: loss does not depend on any tensor requiring grad");
  auto impl = loss.impl();
  if (impl->grad.empty()) impl->grad.assign(1, 0.0);
  impl->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  entries_.clear();
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul", a.shape(), b.shape());
  std::vector<double> c(m * n);
  MapMat(c.data(), m, n).noalias() = CMapMat(a.data().data(), m, k) * CMapMat(b.data().data(), k, n);
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_result({m, n}, std::move(c), track);
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("matmul", {a.id(), b.id()}, out.id(), [ai, bi, oi, m, k, n] {
      if (oi->grad.empty()) return;
      CMapMat dc(oi->grad.data(), m, n);
      if (double* ga = grad_buf(ai)) MapMat(ga, m, k).noalias() += dc * CMapMat(bi->data.data(), k, n).transpose();
      if (double* gb = grad_buf(bi)) MapMat(gb, k, n).noalias() += CMapMat(ai->data.data(), m, k).transpose() * dc;
    });
  }
  return out;
}

Tensor bmm_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank("bmm_nt", a, 3);
  require_rank("bmm_nt", b, 3);
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(0) != batch || b.dim(2) != k) mismatch("bmm_nt", a.shape(), b.shape());
  std::vector<double> c(batch * m * n);
  for (std::size_t s = 0; s < batch; ++s) {
    MapMat(c.data() + s * m * n, m, n).noalias() =
        CMapMat(a.data().data() + s * m * k, m, k) * CMapMat(b.data().data() + s * n * k, n, k).transpose();
  }
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_result({batch, m, n}, std::move(c), track);
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("bmm_nt", {a.id(), b.id()}, out.id(), [ai, bi, oi, batch, m, k, n] {
      if (oi->grad.empty()) return;
      double* ga = grad_buf(ai);
      double* gb = grad_buf(bi);
      for (std::size_t s = 0; s < batch; ++s) {
        CMapMat dc(oi->grad.data() + s * m * n, m, n);
        if (ga) MapMat(ga + s * m * k, m, k).noalias() += dc * CMapMat(bi->data.data() + s * n * k, n, k);
        if (gb) MapMat(gb + s * n * k, n, k).noalias() += dc.transpose() * CMapMat(ai->data.data() + s * m * k, m, k);
      }
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t rows = x.dim(0), in = x.dim(1), outs = weight.dim(1);
  if (weight.dim(0) != in) mismatch("linear", x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outs)) mismatch("linear", weight.shape(), bias.shape());
  std::vector<double> y(rows * outs);
  MapMat ym(y.data(), rows, outs);
  ym.noalias() = CMapMat(x.data().data(), rows, in) * CMapMat(weight.data().data(), in, outs);
  if (bias.defined()) ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), outs);
  const bool track = tracks(tape, {&x, &weight, &bias});
  Tensor out = make_result({rows, outs}, std::move(y), track);
  if (track) {
    ImplPtr xi = x.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr, oi = out.impl();
    std::vector<std::uint64_t> ids{x.id(), weight.id()};
    if (bias.defined()) ids.push_back(bias.id());
    tape.record("linear", std::move(ids), out.id(), [xi, wi, bi, oi, rows, in, outs] {
      if (oi->grad.empty()) return;
      CMapMat dy(oi->grad.data(), rows, outs);
      if (double* gx = grad_buf(xi)) MapMat(gx, rows, in).noalias() += dy * CMapMat(wi->data.data(), in, outs).transpose();
      if (double* gw = grad_buf(wi)) MapMat(gw, in, outs).noalias() += CMapMat(xi->data.data(), rows, in).transpose() * dy;
      if (double* gb = grad_buf(bi)) Eigen::Map<Eigen::RowVectorXd>(gb, outs) += dy.colwise().sum();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  if (stride == 0) throw TensorError("conv2d: stride must be >= 1");
  const std::size_t batch = x.dim(0), cin = x.dim(1), height = x.dim(2), width = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k) mismatch("conv2d", x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) mismatch("conv2d", weight.shape(), bias.shape());
  if (height + 2 * pad < k || width + 2 * pad < k) mismatch("conv2d", x.shape(), weight.shape());
  const std::size_t out_h = (height + 2 * pad - k) / stride + 1;
  const std::size_t out_w = (width + 2 * pad - k) / stride + 1;
  const std::size_t patch = cin * k * k, spatial = out_h * out_w;

  std::vector<double> y(batch * cout * spatial);
  std::vector<double> col(patch * spatial);
  CMapMat wm(weight.data().data(), cout, patch);
  for (std::size_t s = 0; s < batch; ++s) {
    im2col(x.data().data() + s * cin * height * width, cin, height, width, k, stride, pad, out_h, out_w, col.data());
    MapMat ys(y.data() + s * cout * spatial, cout, spatial);
    ys.noalias() = wm * CMapMat(col.data(), patch, spatial);
    if (bias.defined()) ys.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), cout);
  }
  const bool track = tracks(tape, {&x, &weight, &bias});
  Tensor out = make_result({batch, cout, out_h, out_w}, std::move(y), track);
  if (track) {
    ImplPtr xi = x.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr, oi = out.impl();
    std::vector<std::uint64_t> ids{x.id(), weight.id()};
    if (bias.defined()) ids.push_back(bias.id());
    tape.record("conv2d", std::move(ids), out.id(),
                [xi, wi, bi, oi, batch, cin, height, width, cout, k, stride, pad, out_h, out_w, patch, spatial] {
                  if (oi->grad.empty()) return;
                  double* gx = grad_buf(xi);
                  double* gw = grad_buf(wi);
                  double* gb = grad_buf(bi);
                  std::vector<double> col(patch * spatial), dcol(patch * spatial);
                  CMapMat wm(wi->data.data(), cout, patch);
                  for (std::size_t s = 0; s < batch; ++s) {
                    CMapMat dy(oi->grad.data() + s * cout * spatial, cout, spatial);
                    if (gw) {
                      im2col(xi->data.data() + s * cin * height * width, cin, height, width, k, stride, pad, out_h,
                             out_w, col.data());
                      MapMat(gw, cout, patch).noalias() += dy * CMapMat(col.data(), patch, spatial).transpose();
                    }
                    if (gb) Eigen::Map<Eigen::VectorXd>(gb, cout) += dy.rowwise().sum();
                    if (gx) {
                      MapMat(dcol.data(), patch, spatial).noalias() = wm.transpose() * dy;
                      col2im(dcol.data(), cin, height, width, k, stride, pad, out_h, out_w,
                             gx + s * cin * height * width);
                    }
                  }
                });
  }
  return out;
}

Tensor conv1x1(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("conv1x1", x, 4);
  require_rank("conv1x1", weight, 2);
  const std::size_t batch = x.dim(0), cin = x.dim(1), spatial = x.dim(2) * x.dim(3), cout = weight.dim(0);
  if (weight.dim(1) != cin) mismatch("conv1x1", x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) mismatch("conv1x1", weight.shape(), bias.shape());
  std::vector<double> y(batch * cout * spatial);
  CMapMat wm(weight.data().data(), cout, cin);
  for (std::size_t s = 0; s < batch; ++s) {
    MapMat ys(y.data() + s * cout * spatial, cout, spatial);
    ys.noalias() = wm * CMapMat(x.data().data() + s * cin * spatial, cin, spatial);
    if (bias.defined()) ys.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), cout);
  }
  const bool track = tracks(tape, {&x, &weight, &bias});
  Tensor out = make_result({batch, cout, x.dim(2), x.dim(3)}, std::move(y), track);
  if (track) {
    ImplPtr xi = x.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr, oi = out.impl();
    std::vector<std::uint64_t> ids{x.id(), weight.id()};
    if (bias.defined()) ids.push_back(bias.id());
    tape.record("conv1x1", std::move(ids), out.id(), [xi, wi, bi, oi, batch, cin, spatial, cout] {
      if (oi->grad.empty()) return;
      double* gx = grad_buf(xi);
      double* gw = grad_buf(wi);
      double* gb = grad_buf(bi);
      CMapMat wm(wi->data.data(), cout, cin);
      for (std::size_t s = 0; s < batch; ++s) {
        CMapMat dy(oi->grad.data() + s * cout * spatial, cout, spatial);
        if (gw) MapMat(gw, cout, cin).noalias() += dy * CMapMat(xi->data.data() + s * cin * spatial, cin, spatial).transpose();
        if (gb) Eigen::Map<Eigen::VectorXd>(gb, cout) += dy.rowwise().sum();
        if (gx) MapMat(gx + s * cin * spatial, cin, spatial).noalias() += wm.transpose() * dy;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Element-wise

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_defined("add", a);
  require_defined("add", b);
  if (a.shape() != b.shape()) mismatch("add", a.shape(), b.shape());
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_result(a.shape(), std::move(y), track);
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("add", {a.id(), b.id()}, out.id(), [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const auto n = oi->grad.size();
      if (double* ga = grad_buf(ai))
        for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i];
      if (double* gb = grad_buf(bi))
        for (std::size_t i = 0; i < n; ++i) gb[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_defined("sub", a);
  require_defined("sub", b);
  if (a.shape() != b.shape()) mismatch("sub", a.shape(), b.shape());
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_result(a.shape(), std::move(y), track);
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("sub", {a.id(), b.id()}, out.id(), [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const auto n = oi->grad.size();
      if (double* ga = grad_buf(ai))
        for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i];
      if (double* gb = grad_buf(bi))
        for (std::size_t i = 0; i < n; ++i) gb[i] -= oi->grad[i];
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_defined("mul", a);
  require_defined("mul", b);
  if (a.shape() != b.shape()) mismatch("mul", a.shape(), b.shape());
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_result(a.shape(), std::move(y), track);
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("mul", {a.id(), b.id()}, out.id(), [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const auto n = oi->grad.size();
      if (double* ga = grad_buf(ai))
        for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i] * bi->data[i];
      if (double* gb = grad_buf(bi))
        for (std::size_t i = 0; i < n; ++i) gb[i] += oi->grad[i] * ai->data[i];
    });
  }
  return out;
}

Tensor add_broadcast(Tape& tape, const Tensor& a, const Tensor& b) {
  require_defined("add_broadcast", a);
  require_defined("add_broadcast", b);
  auto index = broadcast_index("add_broadcast", a.shape(), b.shape());
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[index[i]];
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_result(a.shape(), std::move(y), track);
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("add_broadcast", {a.id(), b.id()}, out.id(), [ai, bi, oi, index = std::move(index)] {
      if (oi->grad.empty()) return;
      const auto n = oi->grad.size();
      if (double* ga = grad_buf(ai))
        for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i];
      if (double* gb = grad_buf(bi))
        for (std::size_t i = 0; i < n; ++i) gb[index[i]] += oi->grad[i];
    });
  }
  return out;
}

Tensor mul_broadcast(Tape& tape, const Tensor& a, const Tensor& b) {
  require_defined("mul_broadcast", a);
  require_defined("mul_broadcast", b);
  auto index = broadcast_index("mul_broadcast", a.shape(), b.shape());
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[index[i]];
  const bool track = tracks(tape, {&a, &b});
  Tensor out = make_result(a.shape(), std::move(y), track);
  if (track) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("mul_broadcast", {a.id(), b.id()}, out.id(), [ai, bi, oi, index = std::move(index)] {
      if (oi->grad.empty()) return;
      const auto n = oi->grad.size();
      if (double* ga = grad_buf(ai))
        for (std::size_t i = 0; i < n; ++i) ga[i] += oi->grad[i] * bi->data[index[i]];
      if (double* gb = grad_buf(bi))
        for (std::size_t i = 0; i < n; ++i) gb[index[i]] += oi->grad[i] * ai->data[i];
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  return unary(
      tape, "scale", a, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor relu(Tape& tape, const Tensor& x) {
  // Subgradient 0 at exactly 0.
  return unary(
      tape, "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  return unary(
      tape, "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(Tape& tape, const Tensor& x) {
  return unary(
      tape, "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  require_defined("softmax", x);
  if (axis >= x.rank()) {
    throw TensorError("softmax: axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
  }
  const auto s = split_axis(x.shape(), axis);
  std::vector<double> y(x.size());
  const auto xs = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) peak = std::max(peak, xs[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const double e = std::exp(xs[base + k * s.inner] - peak);
        y[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) y[base + k * s.inner] /= total;
    }
  }
  const bool track = tracks(tape, {&x});
  Tensor out = make_result(x.shape(), std::move(y), track);
  if (track) {
    ImplPtr xi = x.impl(), oi = out.impl();
    tape.record("softmax", {x.id()}, out.id(), [xi, oi, s] {
      if (oi->grad.empty()) return;
      double* gx = grad_buf(xi);
      if (!gx) return;
      const auto& yv = oi->data;
      const auto& gy = oi->grad;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          double dot = 0.0;
          for (std::size_t k = 0; k < s.extent; ++k) dot += gy[base + k * s.inner] * yv[base + k * s.inner];
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t idx = base + k * s.inner;
            gx[idx] += yv[idx] * (gy[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  require_defined("reshape", x);
  if (numel(shape) != x.size()) mismatch("reshape", x.shape(), shape);
  const bool track = tracks(tape, {&x});
  Tensor out = make_result(std::move(shape), x.values(), track);
  if (track) {
    ImplPtr xi = x.impl(), oi = out.impl();
    tape.record("reshape", {x.id()}, out.id(), [xi, oi] {
      if (oi->grad.empty()) return;
      if (double* gx = grad_buf(xi))
        for (std::size_t i = 0; i < oi->grad.size(); ++i) gx[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  for (const auto& p : parts) require_defined("concat", p);
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw TensorError("concat: axis " + std::to_string(axis) + " out of range for shape " + shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) mismatch("concat", first, p.shape());
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) mismatch("concat", first, p.shape());
    }
    out_shape[axis] += p.dim(axis);
  }
  const auto s = split_axis(out_shape, axis);
  std::vector<double> y(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * s.inner;
    const auto src = p.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(src.begin() + o * chunk, chunk, y.begin() + o * s.extent * s.inner + offset);
    }
    offset += chunk;
  }
  bool track = false;
  for (const auto& p : parts) track = track || tracks(tape, {&p});
  Tensor out = make_result(std::move(out_shape), std::move(y), track);
  if (track) {
    std::vector<ImplPtr> impls;
    std::vector<std::uint64_t> ids;
    for (const auto& p : parts) {
      impls.push_back(p.impl());
      ids.push_back(p.id());
    }
    ImplPtr oi = out.impl();
    tape.record("concat", std::move(ids), out.id(), [impls, oi, offsets, s, axis] {
      if (oi->grad.empty()) return;
      for (std::size_t p = 0; p < impls.size(); ++p) {
        double* gp = grad_buf(impls[p]);
        if (!gp) continue;
        const std::size_t chunk = impls[p]->shape[axis] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = oi->grad.data() + o * s.extent * s.inner + offsets[p];
          for (std::size_t j = 0; j < chunk; ++j) gp[o * chunk + j] += src[j];
        }
      }
    });
  }
  return out;
}

Tensor slice(Tape& tape, const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined("slice", x);
  if (axis >= x.rank()) {
    throw TensorError("slice: axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
  }
  if (begin >= end || end > x.dim(axis)) {
    bad_shape("slice", x.shape(), "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid");
  }
  const auto s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * s.inner;
  std::vector<double> y(s.outer * chunk);
  const auto src = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(src.begin() + o * s.extent * s.inner + begin * s.inner, chunk, y.begin() + o * chunk);
  }
  const bool track = tracks(tape, {&x});
  Tensor out = make_result(std::move(out_shape), std::move(y), track);
  if (track) {
    ImplPtr xi = x.impl(), oi = out.impl();
    tape.record("slice", {x.id()}, out.id(), [xi, oi, s, begin, chunk] {
      if (oi->grad.empty()) return;
      double* gx = grad_buf(xi);
      if (!gx) return;
      for (std::size_t o = 0; o < s.outer; ++o) {
        double* dst = gx + o * s.extent * s.inner + begin * s.inner;
        const double* g = oi->grad.data() + o * chunk;
        for (std::size_t j = 0; j < chunk; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(Tape& tape, const Tensor& x) {
  require_defined("sum", x);
  double total = 0.0;
  for (double v : x.data()) total += v;
  const bool track = tracks(tape, {&x});
  Tensor out = make_result({1}, {total}, track);
  if (track) {
    ImplPtr xi = x.impl(), oi = out.impl();
    tape.record("sum", {x.id()}, out.id(), [xi, oi] {
      if (oi->grad.empty()) return;
      if (double* gx = grad_buf(xi))
        for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += oi->grad[0];
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
  require_defined("mean", x);
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum_axis(Tape& tape, const Tensor& x, std::size_t axis) {
  require_defined("sum_axis", x);
  if (axis >= x.rank()) {
    throw TensorError("sum_axis: axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
  }
  const auto s = split_axis(x.shape(), axis);
  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (d != axis) out_shape.push_back(x.dim(d));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> y(s.outer * s.inner, 0.0);
  const auto xs = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.extent; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += xs[(o * s.extent + k) * s.inner + i];
  const bool track = tracks(tape, {&x});
  Tensor out = make_result(std::move(out_shape), std::move(y), track);
  if (track) {
    ImplPtr xi = x.impl(), oi = out.impl();
    tape.record("sum_axis", {x.id()}, out.id(), [xi, oi, s] {
      if (oi->grad.empty()) return;
      double* gx = grad_buf(xi);
      if (!gx) return;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.extent; ++k)
          for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.extent + k) * s.inner + i] += oi->grad[o * s.inner + i];
    });
  }
  return out;
}

Tensor mean_axis(Tape& tape, const Tensor& x, std::size_t axis) {
  Tensor total = sum_axis(tape, x, axis);
  return scale(tape, total, 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Stochastic and resampling ops

Tensor dropout(Tape& tape, const Tensor& x, double p, Mode mode, Rng& rng) {
  require_defined("dropout", x);
  if (p < 0.0 || p >= 1.0) throw TensorError("dropout: rate must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::Eval || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = rng.bernoulli(p) ? 0.0 : keep_scale;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * mask[i];
  const bool track = tracks(tape, {&x});
  Tensor out = make_result(x.shape(), std::move(y), track);
  if (track) {
    ImplPtr xi = x.impl(), oi = out.impl();
    tape.record("dropout", {x.id()}, out.id(), [xi, oi, mask = std::move(mask)] {
      if (oi->grad.empty()) return;
      if (double* gx = grad_buf(xi))
        for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += oi->grad[i] * mask[i];
    });
  }
  return out;
}

namespace {

struct PoolGeometry {
  std::size_t planes, height, width, out_h, out_w;
};

PoolGeometry pool_geometry(const std::string& op, const Tensor& x, std::size_t factor) {
  require_defined(op, x);
  if (x.rank() < 2) bad_shape(op, x.shape(), "need at least two spatial axes");
  if (factor == 0) throw TensorError(op + ": factor must be >= 1");
  const std::size_t height = x.dim(x.rank() - 2), width = x.dim(x.rank() - 1);
  if (height % factor || width % factor) {
    bad_shape(op, x.shape(), "spatial size not divisible by " + std::to_string(factor));
  }
  return {x.size() / (height * width), height, width, height / factor, width / factor};
}

Tensor pool_from_index(Tape& tape, const std::string& op, const Tensor& x, const PoolGeometry& g,
                       std::vector<std::size_t> source) {
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = g.out_h;
  out_shape[out_shape.size() - 1] = g.out_w;
  std::vector<double> y(source.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[source[i]];
  const bool track = tracks(tape, {&x});
  Tensor out = make_result(std::move(out_shape), std::move(y), track);
  if (track) {
    ImplPtr xi = x.impl(), oi = out.impl();
    tape.record(op, {x.id()}, out.id(), [xi, oi, source = std::move(source)] {
      if (oi->grad.empty()) return;
      if (double* gx = grad_buf(xi))
        for (std::size_t i = 0; i < source.size(); ++i) gx[source[i]] += oi->grad[i];
    });
  }
  return out;
}

}  // namespace

Tensor max_pool2d(Tape& tape, const Tensor& x, std::size_t factor) {
  const auto g = pool_geometry("max_pool2d", x, factor);
  std::vector<std::size_t> source(g.planes * g.out_h * g.out_w);
  const auto xs = x.data();
  std::size_t o = 0;
  for (std::size_t p = 0; p < g.planes; ++p) {
    const std::size_t plane = p * g.height * g.width;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        std::size_t best = plane + (oy * factor) * g.width + ox * factor;
        for (std::size_t dy = 0; dy < factor; ++dy) {
          for (std::size_t dx = 0; dx < factor; ++dx) {
            const std::size_t idx = plane + (oy * factor + dy) * g.width + ox * factor + dx;
            if (xs[idx] > xs[best]) best = idx;
          }
        }
        source[o++] = best;
      }
    }
  }
  return pool_from_index(tape, "max_pool2d", x, g, std::move(source));
}

Tensor downsample_nearest(Tape& tape, const Tensor& x, std::size_t factor) {
  const auto g = pool_geometry("downsample_nearest", x, factor);
  std::vector<std::size_t> source(g.planes * g.out_h * g.out_w);
  std::size_t o = 0;
  for (std::size_t p = 0; p < g.planes; ++p)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox)
        source[o++] = p * g.height * g.width + oy * factor * g.width + ox * factor;
  return pool_from_index(tape, "downsample_nearest", x, g, std::move(source));
}

Tensor gather_rows(Tape& tape, const Tensor& table, const std::vector<std::size_t>& ids) {
  require_rank("gather_rows", table, 2);
  if (ids.empty()) throw TensorError("gather_rows: empty id list");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  std::vector<double> y(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw TensorError("gather_rows: id " + std::to_string(ids[i]) + " out of range for table " +
                        shape_str(table.shape()));
    }
    std::copy_n(table.data().begin() + ids[i] * width, width, y.begin() + i * width);
  }
  const bool track = tracks(tape, {&table});
  Tensor out = make_result({ids.size(), width}, std::move(y), track);
  if (track) {
    ImplPtr ti = table.impl(), oi = out.impl();
    tape.record("gather_rows", {table.id()}, out.id(), [ti, oi, ids, width] {
      if (oi->grad.empty()) return;
      double* gt = grad_buf(ti);
      if (!gt) return;
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < width; ++j) gt[ids[i] * width + j] += oi->grad[i * width + j];
    });
  }
  return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<std::size_t>& labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw TensorError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                      shape_str(logits.shape()));
  }
  std::vector<double> probs(batch * classes);
  double loss = 0.0;
  const auto xs = logits.data();
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) throw TensorError("cross_entropy: label " + std::to_string(labels[b]) + " out of range");
    const double* row = xs.data() + b * classes;
    const double peak = *std::max_element(row, row + classes);
    double total = 0.0;
    for (std::size_t k = 0; k < classes; ++k) total += std::exp(row[k] - peak);
    const double log_total = std::log(total) + peak;
    for (std::size_t k = 0; k < classes; ++k) probs[b * classes + k] = std::exp(row[k] - log_total);
    loss += log_total - row[labels[b]];
  }
  loss /= static_cast<double>(batch);
  const bool track = tracks(tape, {&logits});
  Tensor out = make_result({1}, {loss}, track);
  if (track) {
    ImplPtr li = logits.impl(), oi = out.impl();
    tape.record("cross_entropy", {logits.id()}, out.id(),
                [li, oi, labels, probs = std::move(probs), batch, classes] {
                  if (oi->grad.empty()) return;
                  double* gl = grad_buf(li);
                  if (!gl) return;
                  const double g = oi->grad[0] / static_cast<double>(batch);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t k = 0; k < classes; ++k) {
                      const double target = k == labels[b] ? 1.0 : 0.0;
                      gl[b * classes + k] += g * (probs[b * classes + k] - target);
                    }
                  }
                });
  }
  return out;
}

}  // namespace lvqa
