#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>

#include "doctest.h"
#include "helpers.hpp"
#include "lvqa/autodiff.hpp"
#include "lvqa/checkpoint.hpp"
#include "lvqa/grad_check.hpp"
#include "lvqa/optim.hpp"

using namespace lvqa;
using lvqa::test::random_tensor;

namespace {

// Weighted sum so every output coordinate gets a distinct upstream gradient.
Tensor weighted_sum(Tape& tape, const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(rng, y.shape());
  return sum(tape, mul(tape, y, w));
}

std::size_t extent(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.integer(static_cast<long long>(lo), static_cast<long long>(hi)));
}

// Values away from the ReLU kink and from each other, so finite differences
// never straddle a non-differentiable point.
Tensor kink_free(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double mag = 0.05 + 0.9 * rng.uniform() + 1e-3 * static_cast<double>(i);
    v[i] = rng.bernoulli(0.5) ? mag : -mag;
  }
  return Tensor(std::move(shape), std::move(v));
}

void check_op(const std::string& name, const std::function<Tensor(Tape&, const Tensor&, Rng&)>& op,
              const std::function<Tensor(Rng&)>& make_input, int instances = 100) {
  Rng rng(std::hash<std::string>{}(name));
  for (int i = 0; i < instances; ++i) {
    Tensor x = make_input(rng);
    Rng op_rng = rng.split();
    const std::uint64_t wseed = rng.next_u64();
    auto f = [&](Tape& tape, const Tensor& in) {
      Rng local = op_rng;
      return weighted_sum(tape, op(tape, in, local), wseed);
    };
    const GradCheckReport r = grad_check(f, x, 1e-5, 1e-4);
    INFO(name, " instance ", i, " rel err ", r.max_relative_error);
    REQUIRE(r.passed);
  }
}

}  // namespace

TEST_CASE("softmax matches hand-computed values") {
  Tape tape;
  Tensor s = softmax(tape, Tensor({4}, {0, 0, 0, 0}), 0);
  for (double v : s.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  Tensor t = softmax(tape, Tensor({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(t[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(t[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(t[2] == doctest::Approx(0.66524).epsilon(1e-4));
  CHECK(std::abs(t[2] - std::exp(3.0) / z) < 1e-15);
}

TEST_CASE("relu and simple backward examples") {
  Tape tape;
  Tensor r = relu(tape, Tensor({3}, {-1, 0, 2}));
  CHECK(r.values() == std::vector<double>{0, 0, 2});

  Tensor x({3}, {0.3, -2.0, 5.0}, true);
  tape.backward(sum(tape, x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});

  Tensor y({2}, {-1, 2}, true);
  tape.backward(sum(tape, relu(tape, y)));
  CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{0, 1});

  Tensor k({2}, {0.0, 1.0}, true);
  tape.backward(sum(tape, relu(tape, k)));
  CHECK(k.grad()[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss and empty tape") {
  Tape tape;
  Tensor x({2}, {1, 2}, true);
  Tensor y = scale(tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), TensorError);
  Tape empty;
  CHECK_THROWS_AS(empty.backward(Tensor({1}, {1.0}, true)), TensorError);
}

TEST_CASE("shape errors name the op and both shapes") {
  Tape tape;
  try {
    matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL("expected TensorError");
  } catch (const TensorError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(tape, Tensor::zeros({2}), Tensor::zeros({3})), TensorError);
  CHECK_THROWS_AS(softmax(tape, Tensor::zeros({2, 2}), 2), TensorError);
}

TEST_CASE("tape records only when an input requires grad, in topological order") {
  Tape tape;
  Tensor a = Tensor::full({2}, 1.0);
  Tensor b = Tensor::full({2}, 2.0, true);
  add(tape, a, a);
  CHECK(tape.empty());
  Tensor c = add(tape, a, b);
  Tensor d = mul(tape, c, b);
  REQUIRE(tape.size() == 2);
  CHECK(tape.entries()[0].output == c.id());
  CHECK(tape.entries()[1].inputs[0] == c.id());
  CHECK(tape.entries()[1].output == d.id());
  tape.backward(sum(tape, d));
  CHECK(tape.empty());
}

TEST_CASE("softmax is a distribution and shift invariant") {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const std::size_t rows = extent(rng, 1, 4), cols = extent(rng, 1, 6);
    Tensor x = random_tensor(rng, {rows, cols}, -30.0, 30.0);
    Tape tape;
    const std::size_t axis = rng.bernoulli(0.5) ? 1 : 0;
    Tensor s = softmax(tape, x, axis);
    std::vector<double> shifted = x.values();
    const double c = rng.uniform(-50.0, 50.0);
    for (double& v : shifted) v += c;
    Tensor s2 = softmax(tape, Tensor(x.shape(), shifted), axis);
    for (std::size_t k = 0; k < s.size(); ++k) {
      CHECK(s[k] >= 0.0);
      CHECK(std::abs(s[k] - s2[k]) < 1e-9);
    }
    const std::size_t outer = axis == 0 ? cols : rows, inner = axis == 0 ? rows : cols;
    for (std::size_t o = 0; o < outer; ++o) {
      double total = 0.0;
      for (std::size_t j = 0; j < inner; ++j) total += axis == 0 ? s[j * cols + o] : s[o * cols + j];
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("forward ops keep finite inputs finite") {
  Rng rng(3);
  Tape tape;
  Tensor x = random_tensor(rng, {2, 3, 4, 4}, -40.0, 40.0);
  for (const Tensor& y : {sigmoid(tape, x), tanh(tape, x), softmax(tape, x, 1), relu(tape, x),
                          max_pool2d(tape, x, 2), mean_axis(tape, x, 3)}) {
    for (double v : y.data()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("every differentiable op passes grad_check on 100 random instances") {
  auto vec = [](Rng& rng) { return random_tensor(rng, {extent(rng, 4, 16)}); };
  auto mat = [](Rng& rng) { return random_tensor(rng, {extent(rng, 2, 4), extent(rng, 2, 4)}); };

  SUBCASE("element-wise") {
    check_op("sigmoid", [](Tape& t, const Tensor& x, Rng&) { return sigmoid(t, x); }, vec);
    check_op("tanh", [](Tape& t, const Tensor& x, Rng&) { return tanh(t, x); }, vec);
    check_op("relu", [](Tape& t, const Tensor& x, Rng&) { return relu(t, x); },
             [](Rng& rng) { return kink_free(rng, {extent(rng, 4, 16)}); });
    check_op("scale", [](Tape& t, const Tensor& x, Rng&) { return scale(t, x, -1.7); }, vec);
    check_op("mul", [](Tape& t, const Tensor& x, Rng&) { return mul(t, x, x); }, vec);
    check_op("add_sub", [](Tape& t, const Tensor& x, Rng&) { return sub(t, add(t, x, x), scale(t, x, 0.5)); }, vec);
    check_op("dropout", [](Tape& t, const Tensor& x, Rng& r) { return dropout(t, x, 0.3, Mode::Train, r); }, vec);
  }
  SUBCASE("broadcast") {
    auto make = [](Rng& rng) { return random_tensor(rng, {extent(rng, 2, 3), extent(rng, 2, 4)}); };
    check_op("add_broadcast",
             [](Tape& t, const Tensor& x, Rng&) {
               return add_broadcast(t, x, slice(t, x, 0, 0, 1));
             },
             make);
    check_op("mul_broadcast",
             [](Tape& t, const Tensor& x, Rng&) {
               return mul_broadcast(t, x, slice(t, x, 1, 1, 2));
             },
             make);
  }
  SUBCASE("softmax") {
    check_op("softmax0", [](Tape& t, const Tensor& x, Rng&) { return softmax(t, x, 0); }, mat);
    check_op("softmax1", [](Tape& t, const Tensor& x, Rng&) { return softmax(t, x, 1); }, mat);
  }
  SUBCASE("linear algebra") {
    check_op("matmul", [](Tape& t, const Tensor& x, Rng&) { return matmul(t, x, reshape(t, x, {x.dim(1), x.dim(0)})); },
             mat);
    check_op("bmm_nt",
             [](Tape& t, const Tensor& x, Rng&) { return bmm_nt(t, x, scale(t, x, 0.5)); },
             [](Rng& rng) { return random_tensor(rng, {2, extent(rng, 2, 3), extent(rng, 2, 4)}); });
    check_op("linear",
             [](Tape& t, const Tensor& x, Rng& r) {
               Tensor w = random_tensor(r, {x.dim(1), 3});
               Tensor b = random_tensor(r, {3});
               return linear(t, x, w, b);
             },
             mat);
  }
  SUBCASE("convolutions") {
    check_op("conv2d",
             [](Tape& t, const Tensor& x, Rng& r) {
               Tensor w = random_tensor(r, {2, x.dim(1), 3, 3});
               Tensor b = random_tensor(r, {2});
               const std::size_t stride = r.bernoulli(0.5) ? 1 : 2;
               return conv2d(t, x, w, b, stride, 1);
             },
             [](Rng& rng) { return random_tensor(rng, {1, extent(rng, 1, 2), 4, 4}); });
    check_op("conv2d_weight",
             [](Tape& t, const Tensor& w, Rng& r) {
               Tensor x = random_tensor(r, {2, 2, 4, 4});
               return conv2d(t, x, w, Tensor(), 1, 1);
             },
             [](Rng& rng) { return random_tensor(rng, {extent(rng, 1, 2), 2, 3, 3}); });
    check_op("conv1x1",
             [](Tape& t, const Tensor& x, Rng& r) {
               Tensor w = random_tensor(r, {3, x.dim(1)});
               Tensor b = random_tensor(r, {3});
               return conv1x1(t, x, w, b);
             },
             [](Rng& rng) { return random_tensor(rng, {2, extent(rng, 1, 3), 2, 2}); });
  }
  SUBCASE("shape and reductions") {
    auto t3 = [](Rng& rng) { return random_tensor(rng, {extent(rng, 1, 3), extent(rng, 2, 3), 2}); };
    check_op("reshape", [](Tape& t, const Tensor& x, Rng&) { return reshape(t, x, {x.size()}); }, t3);
    check_op("concat", [](Tape& t, const Tensor& x, Rng&) { return concat(t, {x, scale(t, x, 2.0)}, 1); }, t3);
    check_op("slice", [](Tape& t, const Tensor& x, Rng&) { return slice(t, x, 1, 1, x.dim(1)); }, t3);
    check_op("sum", [](Tape& t, const Tensor& x, Rng&) { return sum(t, mul(t, x, x)); }, t3);
    check_op("mean", [](Tape& t, const Tensor& x, Rng&) { return mean(t, mul(t, x, x)); }, t3);
    check_op("sum_axis", [](Tape& t, const Tensor& x, Rng&) { return sum_axis(t, x, 1); }, t3);
    check_op("mean_axis", [](Tape& t, const Tensor& x, Rng&) { return mean_axis(t, x, 2); }, t3);
  }
  SUBCASE("pooling and lookup") {
    check_op("max_pool2d", [](Tape& t, const Tensor& x, Rng&) { return max_pool2d(t, x, 2); },
             [](Rng& rng) { return kink_free(rng, {1, extent(rng, 1, 2), 4, 4}); });
    check_op("downsample_nearest", [](Tape& t, const Tensor& x, Rng&) { return downsample_nearest(t, x, 2); },
             [](Rng& rng) { return random_tensor(rng, {1, 2, 4, 4}); });
    check_op("gather_rows", [](Tape& t, const Tensor& x, Rng&) { return gather_rows(t, x, {2, 0, 2, 1}); },
             [](Rng& rng) { return random_tensor(rng, {3, extent(rng, 2, 5)}); });
    check_op("cross_entropy",
             [](Tape& t, const Tensor& x, Rng&) {
               std::vector<std::size_t> labels(x.dim(0));
               for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % x.dim(1);
               return cross_entropy(t, x, labels);
             },
             mat);
  }
}

TEST_CASE("grad_check reference functions") {
  auto squares = [](Tape& t, const Tensor& x) { return sum(t, mul(t, x, x)); };
  Tensor x({2}, {1.0, 2.0});
  GradCheckReport r = grad_check(squares, x, 1e-5, 1e-9);
  CHECK(r.passed);
  CHECK(r.max_abs_analytic == doctest::Approx(4.0));

  auto constant = [](Tape& t, const Tensor& v) { return scale(t, sum(t, scale(t, v, 0.0)), 1.0); };
  GradCheckReport c = grad_check(constant, Tensor({3}, {1, 2, 3}), 1e-5, 1e-4);
  CHECK(c.max_abs_analytic < 1e-8);
  CHECK(c.max_abs_numeric < 1e-8);
}

TEST_CASE("dropout identities and expectation") {
  Rng rng(11);
  Tape tape;
  Tensor x = random_tensor(rng, {50});
  CHECK(dropout(tape, x, 0.0, Mode::Train, rng).values() == x.values());
  CHECK(dropout(tape, x, 0.5, Mode::Eval, rng).values() == x.values());

  // Each output is 0 or x/(1-p); the mean over 10^4 draws of a unit input
  // must lie within 3 sigma of 1.
  const double p = 0.25;
  const std::size_t n = 10000;
  Tensor ones = Tensor::full({n}, 1.0);
  Tensor y = dropout(tape, ones, p, Mode::Train, rng);
  double m = 0.0;
  for (double v : y.data()) m += v;
  m /= static_cast<double>(n);
  const double sigma = std::sqrt(p / (1.0 - p) / static_cast<double>(n));
  CHECK(std::abs(m - 1.0) < 3.0 * sigma);
}

TEST_CASE("1x1 identity convolution is the identity map") {
  Rng rng(5);
  Tensor x = random_tensor(rng, {2, 3, 4, 5});
  std::vector<double> eye(9, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Tape tape;
  CHECK(conv1x1(tape, x, Tensor({3, 3}, eye), Tensor()).values() == x.values());
  std::vector<double> k(3 * 3 * 9, 0.0);
  for (std::size_t i = 0; i < 3; ++i) k[(i * 3 + i) * 9 + 4] = 1.0;
  CHECK(conv2d(tape, x, Tensor({3, 3, 3, 3}, k), Tensor(), 1, 1).values() == x.values());
}

TEST_CASE("conv2d matches a direct loop") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t ci = extent(rng, 1, 3), co = extent(rng, 1, 3), h = extent(rng, 3, 7), w = extent(rng, 3, 7);
    const std::size_t stride = extent(rng, 1, 2), pad = extent(rng, 0, 1);
    Tensor x = random_tensor(rng, {2, ci, h, w});
    Tensor k = random_tensor(rng, {co, ci, 3, 3});
    Tensor b = random_tensor(rng, {co});
    Tape tape;
    Tensor y = conv2d(tape, x, k, b, stride, pad);
    const std::size_t oh = (h + 2 * pad - 3) / stride + 1, ow = (w + 2 * pad - 3) / stride + 1;
    REQUIRE(y.shape() == Shape{2, co, oh, ow});
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t r = 0; r < oh; ++r)
          for (std::size_t c = 0; c < ow; ++c) {
            double acc = b[o];
            for (std::size_t i = 0; i < ci; ++i)
              for (std::size_t dy = 0; dy < 3; ++dy)
                for (std::size_t dx = 0; dx < 3; ++dx) {
                  const long yy = static_cast<long>(r * stride + dy) - static_cast<long>(pad);
                  const long xx = static_cast<long>(c * stride + dx) - static_cast<long>(pad);
                  if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                  acc += x[((n * ci + i) * h + yy) * w + xx] * k[((o * ci + i) * 3 + dy) * 3 + dx];
                }
            CHECK(std::abs(y[((n * co + o) * oh + r) * ow + c] - acc) < 1e-12);
          }
  }
}

TEST_CASE("adam step") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParamList params{{"w", Tensor({3}, {1, -2, 3}, true)}};
    params[0].tensor.mutable_grad();
    AdamState state;
    adam_step(params, state);
    CHECK(params[0].tensor.values() == std::vector<double>{1, -2, 3});
    CHECK(state.step == 1);
  }
  SUBCASE("one step on a scalar matches the hand formula") {
    ParamList params{{"w", Tensor({1}, {1.0}, true)}};
    params[0].tensor.mutable_grad()[0] = 0.5;
    AdamState state;
    state.learning_rate = 0.001;
    adam_step(params, state);
    const double m = 0.1 * 0.5, v = 0.001 * 0.25;
    const double m_hat = m / (1 - 0.9), v_hat = v / (1 - 0.999);
    const double expected = 1.0 - 0.001 * m_hat / (std::sqrt(v_hat) + 1e-8);
    CHECK(std::abs(params[0].tensor[0] - expected) < 1e-15);
    CHECK(std::abs(params[0].tensor[0] - 0.999) < 1e-8);
    CHECK(params[0].tensor.grad()[0] == 0.0);
  }
  SUBCASE("identical parameters stay identical") {
    ParamList params{{"a", Tensor({2}, {0.3, 0.7}, true)}, {"b", Tensor({2}, {0.3, 0.7}, true)}};
    AdamState state;
    for (int step = 0; step < 5; ++step) {
      for (auto& p : params) {
        auto g = p.tensor.mutable_grad();
        g[0] = 0.1 * step - 0.2;
        g[1] = 1.5;
      }
      adam_step(params, state);
    }
    CHECK(state.step == 5);
    CHECK(params[0].tensor.values() == params[1].tensor.values());
  }
  SUBCASE("missing gradient is an error naming the parameter") {
    ParamList params{{"lonely", Tensor({1}, {1.0}, true)}};
    AdamState state;
    try {
      adam_step(params, state);
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("lonely") != std::string::npos);
    }
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(21);
  ParamList params{{"a", random_tensor(rng, {2, 3})}, {"b.c", random_tensor(rng, {5})}};
  params[1].tensor.mutable_data()[0] = -0.0;
  params[1].tensor.mutable_data()[1] = 1e-300;
  const auto dir = std::filesystem::temp_directory_path() / "lvqa_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, params);
  CHECK(std::filesystem::exists(dir / "index.json"));
  CHECK(std::filesystem::exists(dir / "weights.bin"));
  ParamList loaded = load_checkpoint(dir);
  REQUIRE(loaded.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(loaded[i].name == params[i].name);
    CHECK(loaded[i].tensor.shape() == params[i].tensor.shape());
    CHECK(std::memcmp(loaded[i].tensor.data().data(), params[i].tensor.data().data(),
                      params[i].tensor.size() * sizeof(double)) == 0);
  }
  ParamList wrong{{"a", Tensor::zeros({3, 2})}, {"b.c", Tensor::zeros({5})}};
  CHECK_THROWS_AS(restore_checkpoint(dir, wrong), CheckpointError);
  std::filesystem::remove_all(dir);
}
