#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "lvqa/encoders.hpp"
#include "lvqa/vqa_model.hpp"

using namespace lvqa;
using lvqa::test::random_tensor;

namespace {

QuestionEncoderParams random_lstm(Rng& rng, std::size_t vocab, std::size_t e, std::size_t q) {
  return {random_tensor(rng, {vocab, e}), random_tensor(rng, {e, 4 * q}, -0.8, 0.8),
          random_tensor(rng, {q, 4 * q}, -0.8, 0.8), random_tensor(rng, {4 * q}, -0.5, 0.5)};
}

ImageEncoderParams small_cnn(Rng& rng, std::vector<std::size_t> widths) {
  ImageEncoderParams p;
  std::size_t in = 3;
  for (std::size_t w : widths) {
    p.blocks.push_back({random_tensor(rng, {w, in, 3, 3}, -0.4, 0.4), random_tensor(rng, {w}, -0.1, 0.1)});
    in = w;
  }
  return p;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("tokenize lowercases, splits on punctuation and maps unknowns to UNK") {
  const Vocabulary vocab = Vocabulary::build({"is there a star in this region?"}, {"no", "yes"});
  const auto ids = tokenize("Is there a star in this region?", vocab);
  REQUIRE(ids.size() == 7);
  const std::vector<std::string> words{"is", "there", "a", "star", "in", "this", "region"};
  for (std::size_t i = 0; i < words.size(); ++i) CHECK(vocab.token(ids[i]) == words[i]);
  CHECK(tokenize("IS THERE A STAR IN THIS REGION?", vocab) == ids);
  CHECK(tokenize("is there a comet", vocab)[3] == Vocabulary::kUnk);
  CHECK_THROWS_AS(tokenize("  ?! ", vocab), std::invalid_argument);
  CHECK(split_words("in (0,8) to (24,40)") == std::vector<std::string>{"in", "0", "8", "to", "24", "40"});
}

TEST_CASE("vocabulary ids are dense, frequency ordered and round trip through JSON") {
  const Vocabulary vocab = Vocabulary::build({"b a", "a c", "a b"}, {"yes", "no"});
  CHECK(vocab.token(Vocabulary::kPad) == "<pad>");
  CHECK(vocab.token(Vocabulary::kUnk) == "<unk>");
  CHECK(vocab.token(2) == "a");
  CHECK(vocab.token(3) == "b");
  CHECK(vocab.token(4) == "c");
  CHECK(vocab.size() == 5);
  CHECK(vocab.answer_index("no") == 1);
  const Vocabulary back = Vocabulary::from_json(vocab.to_json());
  CHECK(back == vocab);
  CHECK(back.hash() == vocab.hash());
  CHECK_THROWS_AS(Vocabulary::build({"a"}, {}), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary::build({"a"}, {"yes", "yes"}), std::invalid_argument);
}

TEST_CASE("pad_ids left-pads and truncates to the configured length") {
  CHECK(pad_ids({5, 6}, 4) == std::vector<std::size_t>{0, 0, 5, 6});
  CHECK(pad_ids({1, 2, 3, 4, 5}, 3) == std::vector<std::size_t>{1, 2, 3});
}

TEST_CASE("zero LSTM stays at zero") {
  QuestionEncoderParams p{Tensor::zeros({6, 3}), Tensor::zeros({3, 8}), Tensor::zeros({2, 8}), Tensor::zeros({8})};
  Rng rng(1);
  p.embedding = random_tensor(rng, {6, 3});
  Tape tape;
  Tensor q = encode_question(tape, p, {{2, 4, 5}, {1, 1, 3}});
  REQUIRE(q.shape() == Shape{2, 2});
  for (double v : q.data()) CHECK(v == 0.0);
}

TEST_CASE("single LSTM step matches a hand-evaluated cell") {
  // Embedding row 1 = [0.5, -1]; gate blocks are ordered i, f, g, o.
  QuestionEncoderParams p;
  p.embedding = Tensor({2, 2}, {0, 0, 0.5, -1.0});
  p.w_input = Tensor({2, 8}, {0.1, 0.2, 0.3, -0.1, 0.5, 0.4, -0.2, 0.7,  //
                              -0.3, 0.1, 0.2, 0.6, -0.4, 0.1, 0.3, 0.2});
  p.w_hidden = Tensor::zeros({2, 8});
  p.bias = Tensor({8}, {0.05, -0.05, 0.1, 0.0, 0.2, -0.1, 0.0, 0.3});
  Tape tape;
  Tensor q = encode_question(tape, p, {{1}});
  const double x0 = 0.5, x1 = -1.0;
  for (std::size_t u = 0; u < 2; ++u) {
    auto pre = [&](std::size_t block) {
      const std::size_t col = block * 2 + u;
      return x0 * p.w_input[col] + x1 * p.w_input[8 + col] + p.bias[col];
    };
    const double i = sigmoid_ref(pre(0));
    const double g = std::tanh(pre(2));
    const double o = sigmoid_ref(pre(3));
    const double c = i * g;
    CHECK(std::abs(q[u] - o * std::tanh(c)) < 1e-12);
  }
  // Unit 0 by calculator: i = s(0.4), g = tanh(0.85), o = s(-0.4).
  CHECK(std::abs(q[0] - 0.1571697) < 1e-6);
}

TEST_CASE("question encoder output sizes") {
  Rng rng(2);
  Tape tape;
  CHECK(encode_question(tape, random_lstm(rng, 10, 32, 64), {{2, 3, 4}}).shape() == Shape{1, 64});
  CHECK(encode_question(tape, random_lstm(rng, 10, 8, 1024), {{2, 3}}).shape() == Shape{1, 1024});
}

TEST_CASE("question encoder is deterministic and order sensitive") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_lstm(rng, 12, 5, 6);
    std::vector<std::size_t> ids{2, 5, 7, 9};
    Tape tape;
    Tensor a = encode_question(tape, p, {ids});
    Tensor again = encode_question(tape, p, {ids});
    CHECK(a.values() == again.values());
    std::reverse(ids.begin(), ids.end());
    Tensor b = encode_question(tape, p, {ids});
    CHECK(lvqa::test::max_abs_diff(a.data(), b.data()) > 1e-6);
  }
}

TEST_CASE("question encoder rejects ids outside the vocabulary") {
  Rng rng(4);
  const auto p = random_lstm(rng, 5, 3, 2);
  Tape tape;
  CHECK_THROWS(encode_question(tape, p, {{1, 5}}));
  CHECK_THROWS(encode_question(tape, p, {{}}));
}

TEST_CASE("embedding gradients reach only the rows of tokens present") {
  Rng rng(5);
  auto p = random_lstm(rng, 8, 3, 4);
  p.embedding.set_requires_grad(true);
  Tape tape;
  Tensor q = encode_question(tape, p, {{2, 6, 2}, {3, 3, 6}});
  tape.backward(sum(tape, mul(tape, q, q)));
  for (std::size_t row = 0; row < 8; ++row) {
    double mag = 0.0;
    for (std::size_t e = 0; e < 3; ++e) mag += std::abs(p.embedding.grad()[row * 3 + e]);
    const bool present = row == 2 || row == 3 || row == 6;
    CHECK((mag > 0.0) == present);
  }
}

TEST_CASE("image encoder shapes") {
  Rng rng(6);
  ModelConfig config;
  const ModelParams params = init_params(config, 10, 2, 0);
  Tape tape;
  Tensor x = random_tensor(rng, {1, 3, 64, 64}, 0.0, 1.0);
  CHECK(encode_image(tape, params.image, x).shape() == Shape{1, 32, 8, 8});

  // Paper-scale arithmetic: 448 px through five halvings into 2048 channels.
  const ImageEncoderParams big = small_cnn(rng, {2, 2, 2, 2, 2048});
  Tensor y = encode_image(tape, big, random_tensor(rng, {1, 3, 448, 448}, 0.0, 1.0));
  CHECK(y.shape() == Shape{1, 2048, 14, 14});
}

TEST_CASE("zero image with zero biases encodes to zero") {
  Rng rng(7);
  ImageEncoderParams p = small_cnn(rng, {4, 6});
  for (auto& b : p.blocks) b.bias = Tensor::zeros(b.bias.shape());
  Tape tape;
  const Tensor y = encode_image(tape, p, Tensor::zeros({2, 3, 16, 16}));
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("image encoder rejects bad inputs") {
  Rng rng(8);
  const ImageEncoderParams p = small_cnn(rng, {4, 4, 4});
  Tape tape;
  CHECK_THROWS_AS(encode_image(tape, p, Tensor::zeros({1, 1, 16, 16})), TensorError);
  CHECK_THROWS_AS(encode_image(tape, p, Tensor::zeros({1, 3, 12, 12})), TensorError);
}

TEST_CASE("image encoding commutes with batch decomposition") {
  Rng rng(9);
  const ImageEncoderParams p = small_cnn(rng, {4, 5});
  Tensor batch = random_tensor(rng, {3, 3, 8, 8}, 0.0, 1.0);
  Tape tape;
  Tensor all = encode_image(tape, p, batch);
  const std::size_t per = all.size() / 3;
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor one = encode_image(tape, p, slice(tape, batch, 0, b, b + 1));
    for (std::size_t i = 0; i < per; ++i) CHECK(std::abs(one[i] - all[b * per + i]) < 1e-6);
  }
}
