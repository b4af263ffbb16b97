#include "lvqa/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>
#include <stdexcept>

namespace lvqa {

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  tokens_ = {kPadToken, kUnkToken};
  ids_[kPadToken] = kPad;
  ids_[kUnkToken] = kUnk;
}

void Vocabulary::set_answers(std::vector<std::string> answers) {
  if (answers.empty()) throw std::invalid_argument("vocabulary: answer set is empty");
  std::set<std::string> seen(answers.begin(), answers.end());
  if (seen.size() != answers.size()) throw std::invalid_argument("vocabulary: duplicate answers");
  answers_ = std::move(answers);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& questions, std::vector<std::string> answers) {
  std::map<std::string, std::size_t> counts;
  for (const auto& q : questions) {
    for (auto& w : split_words(q)) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary vocab;
  for (const auto& [word, count] : ranked) {
    if (vocab.ids_.count(word)) continue;
    vocab.ids_[word] = vocab.tokens_.size();
    vocab.tokens_.push_back(word);
  }
  vocab.set_answers(std::move(answers));
  return vocab;
}

std::size_t Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::size_t Vocabulary::answer_index(const std::string& label) const {
  auto it = std::find(answers_.begin(), answers_.end(), label);
  if (it == answers_.end()) throw std::invalid_argument("vocabulary: unknown answer '" + label + "'");
  return static_cast<std::size_t>(it - answers_.begin());
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json tokens = nlohmann::json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) tokens[tokens_[i]] = i;
  return {{"tokens", tokens}, {"answers", answers_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  const auto& tokens = j.at("tokens");
  std::vector<std::string> by_id(tokens.size());
  for (auto it = tokens.begin(); it != tokens.end(); ++it) {
    const auto id = it.value().get<std::size_t>();
    if (id >= by_id.size() || !by_id[id].empty()) throw std::invalid_argument("vocabulary: ids are not dense");
    by_id[id] = it.key();
  }
  if (by_id.size() < 2 || by_id[kPad] != kPadToken || by_id[kUnk] != kUnkToken) {
    throw std::invalid_argument("vocabulary: PAD/UNK ids not reserved");
  }
  Vocabulary vocab;
  vocab.tokens_ = by_id;
  vocab.ids_.clear();
  for (std::size_t i = 0; i < by_id.size(); ++i) vocab.ids_[by_id[i]] = i;
  vocab.set_answers(j.at("answers").get<std::vector<std::string>>());
  return vocab;
}

std::uint64_t Vocabulary::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> split_words(const std::string& question) {
  std::string cleaned;
  cleaned.reserve(question.size());
  for (unsigned char c : question) {
    if (std::ispunct(c)) {
      cleaned.push_back(' ');
    } else {
      cleaned.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  std::istringstream is(cleaned);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  if (words.empty()) throw std::invalid_argument("tokenize: empty question");
  return words;
}

std::vector<std::size_t> tokenize(const std::string& question, const Vocabulary& vocab) {
  std::vector<std::size_t> ids;
  for (const auto& w : split_words(question)) ids.push_back(vocab.id(w));
  return ids;
}

std::vector<std::size_t> pad_ids(std::vector<std::size_t> ids, std::size_t max_len) {
  if (ids.size() >= max_len) {
    ids.resize(max_len);
    return ids;
  }
  std::vector<std::size_t> out(max_len - ids.size(), Vocabulary::kPad);
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

// ---------------------------------------------------------------------------
// Question encoder

Tensor encode_question(Tape& tape, const QuestionEncoderParams& params,
                       const std::vector<std::vector<std::size_t>>& batch_ids) {
  if (batch_ids.empty()) throw std::invalid_argument("encode_question: empty batch");
  const std::size_t steps = batch_ids.front().size();
  if (steps == 0) throw std::invalid_argument("encode_question: empty sequence");
  for (const auto& seq : batch_ids) {
    if (seq.size() != steps) throw std::invalid_argument("encode_question: ragged batch");
  }
  const std::size_t batch = batch_ids.size();
  const std::size_t hidden = params.hidden_size();
  if (params.w_input.dim(1) != 4 * hidden || params.w_hidden.dim(1) != 4 * hidden ||
      params.w_input.dim(0) != params.embedding.dim(1)) {
    throw TensorError("encode_question: inconsistent LSTM weights " + shape_str(params.w_input.shape()) + " / " +
                      shape_str(params.w_hidden.shape()));
  }

  Tensor h, c;
  std::vector<std::size_t> column(batch);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < batch; ++b) column[b] = batch_ids[b][t];
    Tensor x = gather_rows(tape, params.embedding, column);
    Tensor gates = linear(tape, x, params.w_input, params.bias);
    if (h.defined()) gates = add(tape, gates, matmul(tape, h, params.w_hidden));
    Tensor in_gate = sigmoid(tape, slice(tape, gates, 1, 0, hidden));
    Tensor forget_gate = sigmoid(tape, slice(tape, gates, 1, hidden, 2 * hidden));
    Tensor candidate = tanh(tape, slice(tape, gates, 1, 2 * hidden, 3 * hidden));
    Tensor out_gate = sigmoid(tape, slice(tape, gates, 1, 3 * hidden, 4 * hidden));
    Tensor fresh = mul(tape, in_gate, candidate);
    c = c.defined() ? add(tape, mul(tape, forget_gate, c), fresh) : fresh;
    h = mul(tape, out_gate, tanh(tape, c));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Image encoder

Tensor encode_image(Tape& tape, const ImageEncoderParams& params, const Tensor& images) {
  if (params.blocks.empty()) throw std::invalid_argument("encode_image: encoder has no blocks");
  if (images.rank() != 4 || images.dim(1) != params.blocks.front().weight.dim(1)) {
    throw TensorError("encode_image: expected [B, " + std::to_string(params.blocks.front().weight.dim(1)) +
                      ", S, S] input, got " + shape_str(images.shape()));
  }
  const std::size_t factor = std::size_t{1} << params.depth();
  if (images.dim(2) != images.dim(3) || images.dim(2) % factor != 0) {
    throw TensorError("encode_image: image size " + shape_str(images.shape()) + " not divisible by " +
                      std::to_string(factor));
  }
  Tensor x = images;
  for (const auto& block : params.blocks) {
    x = conv2d(tape, x, block.weight, block.bias, 1, 1);
    x = relu(tape, x);
    x = max_pool2d(tape, x, 2);
  }
  return x;
}

}  // namespace lvqa
