#pragma once

#include <cstdint>
#include <map>
#include "json.hpp"
#include <string>
#include <vector>

#include "lvqa/autodiff.hpp"

namespace lvqa {

/// Token and answer vocabularies. PAD is id 0 and UNK id 1; remaining ids are
/// dense and assigned by descending frequency, ties broken lexicographically.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnkToken = "<unk>";

  Vocabulary();

  static Vocabulary build(const std::vector<std::string>& questions, std::vector<std::string> answers);

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(const std::string& token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  const std::vector<std::string>& answers() const { return answers_; }
  std::size_t answer_index(const std::string& label) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON form.
  std::uint64_t hash() const;

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && answers_ == other.answers_;
  }

 private:
  void set_answers(std::vector<std::string> answers);

  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> ids_;
  std::vector<std::string> answers_;
};

/// Lowercases, turns punctuation into separators and splits on whitespace.
/// Throws std::invalid_argument when no token remains.
std::vector<std::string> split_words(const std::string& question);
std::vector<std::size_t> tokenize(const std::string& question, const Vocabulary& vocab);
/// Keeps the first max_len ids, or left-pads with PAD to exactly max_len so
/// the question's own tokens are the last the recurrent cell sees.
std::vector<std::size_t> pad_ids(std::vector<std::size_t> ids, std::size_t max_len);

/// Single-layer unidirectional LSTM over word embeddings. Gate blocks in the
/// 4Q columns are ordered input, forget, cell, output.
struct QuestionEncoderParams {
  Tensor embedding;  // [V, E]
  Tensor w_input;    // [E, 4Q]
  Tensor w_hidden;   // [Q, 4Q]
  Tensor bias;       // [4Q]

  std::size_t hidden_size() const { return w_hidden.dim(0); }
};

/// Final hidden state for every sequence of the batch -> [B, Q]. All
/// sequences must share one length.
Tensor encode_question(Tape& tape, const QuestionEncoderParams& params,
                       const std::vector<std::vector<std::size_t>>& batch_ids);

struct ConvBlock {
  Tensor weight;  // [Co, Ci, 3, 3]
  Tensor bias;    // [Co]
};

/// conv3x3 (stride 1, pad 1) -> ReLU -> 2x2 max pool, repeated per block.
struct ImageEncoderParams {
  std::vector<ConvBlock> blocks;

  std::size_t depth() const { return blocks.size(); }
  std::size_t out_channels() const { return blocks.back().weight.dim(0); }
};

/// [B, 3, S, S] -> [B, C, S / 2^depth, S / 2^depth].
Tensor encode_image(Tape& tape, const ImageEncoderParams& params, const Tensor& images);

}  // namespace lvqa
