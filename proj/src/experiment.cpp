#include "lvqa/experiment.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "lvqa/checkpoint.hpp"

namespace lvqa {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

ordered_json defaults_json() {
  const RunConfig defaults;
  return defaults.to_json();
}

void check_keys(const nlohmann::json& j) {
  const ordered_json known = defaults_json();
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw std::invalid_argument("config: unknown section '" + it.key() + "'");
    if (!it.value().is_object()) throw std::invalid_argument("config: section '" + it.key() + "' must be an object");
    for (auto kv = it.value().begin(); kv != it.value().end(); ++kv) {
      if (!known[it.key()].contains(kv.key())) {
        throw std::invalid_argument("config: unknown key '" + it.key() + "." + kv.key() + "'");
      }
    }
  }
}

}  // namespace

ordered_json RunConfig::to_json() const {
  const nlohmann::json model_sorted = model.to_json();
  ordered_json model_json;
  for (const auto& [k, v] : model_sorted.items()) model_json[k] = v;
  return {{"data", data.to_json()}, {"model", model_json}, {"train", train.to_json()}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  check_keys(j);
  RunConfig c;
  const nlohmann::json empty = nlohmann::json::object();
  c.data = DataConfig::from_json(j.contains("data") ? j["data"] : empty);
  c.model = ModelConfig::from_json(j.contains("model") ? j["model"] : empty);
  c.train = TrainConfig::from_json(j.contains("train") ? j["train"] : empty);
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
}

std::vector<std::pair<std::string, std::string>> config_keys() {
  std::vector<std::pair<std::string, std::string>> out;
  const ordered_json d = defaults_json();
  for (const auto& [section, body] : d.items())
    for (const auto& [key, value] : body.items()) out.emplace_back(section + "." + key, value.dump());
  return out;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' is not of the form key=value");
  }
  std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  const ordered_json known = defaults_json();

  std::string section;
  if (const auto dot = key.find('.'); dot != std::string::npos) {
    section = key.substr(0, dot);
    key = key.substr(dot + 1);
    if (!known.contains(section) || !known[section].contains(key)) {
      throw std::invalid_argument("override: unknown key '" + section + "." + key + "'");
    }
  } else {
    std::vector<std::string> hits;
    for (const auto& [s, body] : known.items())
      if (body.contains(key)) hits.push_back(s);
    if (hits.empty()) throw std::invalid_argument("override: unknown key '" + key + "'");
    if (hits.size() > 1) {
      throw std::invalid_argument("override: key '" + key + "' is ambiguous; qualify it as " + hits[0] + "." + key +
                                  " or " + hits[1] + "." + key);
    }
    section = hits.front();
  }

  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  if (known[section][key].is_string() && !value.is_string()) value = raw;
  if (!config.is_object()) config = nlohmann::json::object();
  config[section][key] = value;
}

fs::path run_directory(const fs::path& root, const std::string& name, std::uint64_t seed) {
  return root / name / ("seed" + std::to_string(seed));
}

SplitData load_splits(const fs::path& data_dir) {
  SplitData d;
  d.train = load_split(data_dir, "train");
  d.val = load_split(data_dir, "val");
  d.test = load_split(data_dir, "test");
  if (d.train.samples.empty() || d.val.samples.empty() || d.test.samples.empty()) {
    throw DataError("dataset " + data_dir.string() + " has an empty split");
  }
  return d;
}

FeatureCache& FeatureStore::cache(const std::string& split, Variant variant) {
  const bool own = variant == Variant::CropRegion || variant == Variant::DrawRegion;
  const std::string key = split + "/" + (own ? to_string(variant) : std::string("image"));
  auto& slot = caches_[key];
  if (!slot) slot = std::make_unique<FeatureCache>();
  return *slot;
}

RunResult train_and_evaluate(const SplitData& data, const RunConfig& config, std::uint64_t seed,
                             const fs::path& out_dir, FeatureStore* store, bool verbose) {
  const std::size_t size = data.train.samples.front().image->size;
  if (size != config.model.image_size) {
    throw std::invalid_argument("dataset images are " + std::to_string(size) + "px but model.image_size is " +
                                std::to_string(config.model.image_size));
  }
  FeatureStore local;
  if (!store) store = &local;
  const Variant variant = config.model.variant;

  Vocabulary vocab = build_vocabulary(data.train, variant, config.model.grid_n, config.train.augment);
  VqaModel model(config.model, vocab, seed);

  std::ofstream history_out;
  if (!out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create run directory " + out_dir.string() + ": " + ec.message());
    ordered_json run = config.to_json();
    run["seed"] = seed;
    write_text(out_dir / "config.json", run.dump(2) + "\n");
    history_out.open(out_dir / "history.jsonl", std::ios::trunc);
    if (!history_out) throw IoError("cannot write " + (out_dir / "history.jsonl").string());
  }

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& rec) {
    if (history_out.is_open()) history_out << rec.to_json().dump() << '\n' << std::flush;
    if (verbose) {
      std::cerr << to_string(variant) << " seed " << seed << " epoch " << rec.epoch << " train_loss " << rec.train_loss
                << " val_loss " << rec.val_loss << " val_metric " << rec.val_metric << " lr " << rec.learning_rate
                << '\n';
    }
  };
  if (!out_dir.empty()) {
    hooks.on_best = [&](const VqaModel& m, const EpochRecord&) { m.save(out_dir / "checkpoint"); };
  }

  RunResult result;
  result.history = train_model(model, data.train, data.val, config.train, seed, hooks,
                               &store->cache("train", variant), &store->cache("val", variant));
  const Predictions pred = predict_dataset(model, data.test, &store->cache("test", variant));
  result.test_report = make_report(data.test, pred, model.vocab().answer_index("yes"), to_string(variant), seed);
  if (!out_dir.empty()) {
    ordered_json summary = result.test_report.to_json();
    summary["best_epoch"] = result.history.best_epoch;
    summary["epochs_run"] = result.history.epochs.size();
    write_text(out_dir / "report.json", summary.dump(2) + "\n");
  }
  return result;
}

EvalReport evaluate_checkpoint(const fs::path& run_dir, const Dataset& test, std::uint64_t seed) {
  const VqaModel model = VqaModel::load(run_dir / "checkpoint");
  FeatureCache cache;
  const Predictions pred = predict_dataset(model, test, &cache);
  return make_report(test, pred, model.vocab().answer_index("yes"), to_string(model.config().variant), seed);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace lvqa
