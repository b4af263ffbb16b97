#include "lvqa/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include "json.hpp"

namespace lvqa {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

void put_le(std::vector<char>& out, double value) {
  auto bits = std::bit_cast<std::uint64_t>(value);
  for (int b = 0; b < 8; ++b) {
    out.push_back(static_cast<char>(bits & 0xFF));
    bits >>= 8;
  }
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 7; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(p[b]);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const fs::path& dir, const ParamList& params) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CheckpointError("checkpoint: cannot create " + dir.string() + ": " + ec.message());

  ordered_json index = ordered_json::object();
  std::vector<char> blob;
  for (const auto& p : params) {
    if (index.contains(p.name)) throw CheckpointError("checkpoint: duplicate tensor name '" + p.name + "'");
    index[p.name] = {{"shape", p.tensor.shape()}, {"dtype", "float64"}, {"offset", blob.size()}};
    for (double v : p.tensor.data()) put_le(blob, v);
  }

  std::ofstream weights(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!weights) throw CheckpointError("checkpoint: cannot write " + (dir / "weights.bin").string());
  weights.write(blob.data(), static_cast<std::streamsize>(blob.size()));

  std::ofstream idx(dir / "index.json", std::ios::trunc);
  if (!idx) throw CheckpointError("checkpoint: cannot write " + (dir / "index.json").string());
  idx << index.dump(2) << '\n';
}

ParamList load_checkpoint(const fs::path& dir) {
  std::ifstream idx(dir / "index.json");
  if (!idx) throw CheckpointError("checkpoint: missing " + (dir / "index.json").string());
  ordered_json index;
  try {
    index = ordered_json::parse(idx);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint: malformed index.json: " + std::string(e.what()));
  }

  std::ifstream weights(dir / "weights.bin", std::ios::binary);
  if (!weights) throw CheckpointError("checkpoint: missing " + (dir / "weights.bin").string());
  std::vector<char> blob((std::istreambuf_iterator<char>(weights)), std::istreambuf_iterator<char>());

  struct Item {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Item> items;
  for (auto it = index.begin(); it != index.end(); ++it) {
    const auto& entry = it.value();
    if (entry.value("dtype", "") != "float64") {
      throw CheckpointError("checkpoint: tensor '" + it.key() + "' has unsupported dtype");
    }
    items.push_back({it.key(), entry.at("shape").get<Shape>(), entry.at("offset").get<std::size_t>()});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.offset < b.offset; });

  ParamList out;
  for (const auto& item : items) {
    const std::size_t count = numel(item.shape);
    if (item.offset + count * 8 > blob.size()) {
      throw CheckpointError("checkpoint: tensor '" + item.name + "' extends past end of weights.bin");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = get_le(blob.data() + item.offset + i * 8);
    out.push_back({item.name, Tensor(item.shape, std::move(values))});
  }
  return out;
}

void restore_checkpoint(const fs::path& dir, ParamList& params) {
  auto stored = load_checkpoint(dir);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& s : stored) by_name[s.name] = &s.tensor;
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint: missing tensor '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw CheckpointError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(it->second->shape()) +
                            ", expected " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(it->second->data().begin(), it->second->data().end(), dst.begin());
  }
  if (stored.size() != params.size()) {
    throw CheckpointError("checkpoint: holds " + std::to_string(stored.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
  }
}

}  // namespace lvqa
