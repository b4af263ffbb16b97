// Command-line front end: dataset generation, training, evaluation,
// comparison tables and attention export.

#include <malloc.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "lvqa/checkpoint.hpp"
#include "lvqa/experiment.hpp"

namespace fs = std::filesystem;
using namespace lvqa;

namespace {

enum Exit { kOk = 0, kUsage = 1, kEnvironment = 2, kNumeric = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path default_root(const char* leaf) {
  if (const char* env = std::getenv("LVQA_RUN_DIR"); env && *env) return fs::path(env) / leaf;
  return fs::path(leaf);
}

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    if (!fs::exists(path)) throw UsageError("config file " + path + " does not exist");
    j = nlohmann::json::parse(read_text(path));
  }
  try {
    for (const auto& o : overrides) apply_override(j, o);
    return RunConfig::from_json(j);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

void require_dir(const fs::path& dir, const char* what) {
  if (!fs::is_directory(dir)) throw DataError(std::string(what) + " " + dir.string() + " does not exist");
}

std::string config_help() {
  std::ostringstream os;
  os << "Config keys (use --set section.key=value):\n";
  for (const auto& [key, value] : config_keys()) os << "  " << key << " (default " << value << ")\n";
  os << "Environment: LVQA_RUN_DIR sets the default output root.\n";
  return os.str();
}

// ---------------------------------------------------------------------------

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON config with data/model/train sections");
  cmd->add_option("--set", c.overrides, "Override a config key (section.key=value), repeatable");
}

int cmd_gen_data(const Common& common, const std::string& out, std::optional<std::uint64_t> seed) {
  RunConfig cfg = resolve_config(common.config, common.overrides);
  if (seed) cfg.data.seed = *seed;
  const fs::path root = out.empty() ? default_root("data") : fs::path(out);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw IoError("cannot create output directory " + root.string());
  const DatasetSummary summary = generate_dataset(cfg.data, root);
  for (const auto& w : summary.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << "wrote " << root.string() << ": train " << summary.train_records << ", val " << summary.val_records
            << ", test " << summary.test_records << " questions\n";
  return kOk;
}

int cmd_train(const Common& common, const std::string& data, const std::string& variant, std::vector<std::uint64_t> seeds,
              std::string name, const std::string& out, bool force, std::size_t jobs, bool verbose) {
  RunConfig cfg = resolve_config(common.config, common.overrides);
  if (!variant.empty()) {
    try {
      cfg.model.variant = parse_variant(variant);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (seeds.empty()) seeds = cfg.train.seeds;
  if (name.empty()) name = to_string(cfg.model.variant);
  const fs::path root = out.empty() ? default_root("runs") : fs::path(out);
  require_dir(data, "data directory");

  for (auto s : seeds) {
    const fs::path dir = run_directory(root, name, s);
    if (fs::exists(dir)) {
      if (!force) throw UsageError("run directory " + dir.string() + " exists; pass --force to overwrite");
      fs::remove_all(dir);
    }
  }
  const SplitData splits = load_splits(data);

  std::mutex print;
  std::exception_ptr failure;
  auto run_one = [&](std::uint64_t s) {
    try {
      FeatureStore store;
      const fs::path dir = run_directory(root, name, s);
      const RunResult r = train_and_evaluate(splits, cfg, s, dir, &store, verbose);
      std::lock_guard<std::mutex> lock(print);
      const auto& all = r.test_report.stratum("overall");
      std::cout << dir.string() << ": best epoch " << r.history.best_epoch << ", test AUC " << all.auc << ", AP "
                << all.ap << ", accuracy " << all.accuracy << '\n';
    } catch (...) {
      std::lock_guard<std::mutex> lock(print);
      if (!failure) failure = std::current_exception();
    }
  };

  jobs = std::max<std::size_t>(1, std::min(jobs, seeds.size()));
  for (std::size_t start = 0; start < seeds.size(); start += jobs) {
    std::vector<std::thread> pool;
    for (std::size_t k = start; k < std::min(start + jobs, seeds.size()); ++k) pool.emplace_back(run_one, seeds[k]);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  return kOk;
}

int cmd_eval(const std::string& run, const std::string& data, const std::string& split) {
  require_dir(run, "run directory");
  require_dir(data, "data directory");
  const auto cfg = nlohmann::json::parse(read_text(fs::path(run) / "config.json"));
  const std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
  const Dataset ds = load_split(data, split);
  const EvalReport report = evaluate_checkpoint(run, ds, seed);
  write_text(fs::path(run) / ("eval_" + split + ".json"), report.to_json().dump(2) + "\n");
  std::cout << "| stratum | n | accuracy | AUC | AP |\n|---|---|---|---|---|\n";
  for (const auto& s : report.strata) {
    std::cout << "| " << s.name << " | " << s.count << " | " << s.accuracy << " | " << s.auc << " | " << s.ap << " |\n";
  }
  return kOk;
}

int cmd_compare(const std::string& data, const std::string& runs, std::vector<std::string> variants,
                const std::vector<std::uint64_t>& seeds, const std::string& out) {
  const fs::path root = runs.empty() ? default_root("runs") : fs::path(runs);
  require_dir(data, "data directory");
  if (variants.empty()) {
    for (Variant v : all_variants()) variants.push_back(to_string(v));
  }
  std::vector<Variant> order;
  for (const auto& name : variants) {
    try {
      order.push_back(parse_variant(name));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  // Table rows always follow the canonical order.
  std::vector<Variant> rows;
  for (Variant v : all_variants())
    if (std::find(order.begin(), order.end(), v) != order.end()) rows.push_back(v);

  std::vector<std::string> missing;
  for (Variant v : rows)
    for (auto s : seeds) {
      const fs::path dir = run_directory(root, to_string(v), s) / "checkpoint";
      if (!fs::exists(dir / "index.json")) missing.push_back(to_string(v) + "/seed" + std::to_string(s));
    }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DataError("missing checkpoints under " + root.string() + ": " + list);
  }

  const Dataset test = load_split(data, "test");
  std::vector<AggregateReport> aggregates;
  nlohmann::ordered_json all = nlohmann::ordered_json::array();
  for (Variant v : rows) {
    std::vector<EvalReport> reports;
    for (auto s : seeds) {
      const fs::path dir = run_directory(root, to_string(v), s);
      reports.push_back(evaluate_checkpoint(dir, test, s));
      write_text(dir / "report.json", reports.back().to_json().dump(2) + "\n");
    }
    aggregates.push_back(aggregate_seeds(reports));
    all.push_back(aggregates.back().to_json());
  }
  const fs::path dest = out.empty() ? root : fs::path(out);
  fs::create_directories(dest);
  const std::string md = "## Test metrics (mean ± std over seeds)\n\n" + comparison_markdown(aggregates) +
                         "\n## Per-object test AUC\n\n" + per_object_markdown(aggregates);
  write_text(dest / "report.json", all.dump(2) + "\n");
  write_text(dest / "report.md", md);
  write_text(dest / "strata.csv", strata_csv(aggregates));
  std::cout << md;
  return kOk;
}

int cmd_attn_export(const std::string& run, const std::string& data, const std::string& split, std::size_t first,
                    std::size_t count, const std::string& out) {
  require_dir(run, "run directory");
  require_dir(data, "data directory");
  const VqaModel model = VqaModel::load(fs::path(run) / "checkpoint");
  const Dataset ds = load_split(data, split);
  const fs::path dest = out.empty() ? fs::path(run) / "attention" : fs::path(out);
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (std::size_t i = first; i < std::min(first + count, ds.samples.size()); ++i) {
    const Sample& s = ds.samples[i];
    Tensor attention;
    const AnswerDistribution answer = model.predict(*s.image, s.question, s.mask, &attention);
    const Shape& sh = attention.shape();
    const Tensor single = attention.detach();
    const Tensor map(Shape{sh[1], sh[2], sh[3]}, single.values());
    const std::string stem = split + "_" + std::to_string(i);
    export_attention(map, *s.image, s.mask, dest, stem);
    index.push_back({{"sample", i},
                     {"question", s.question},
                     {"answer", s.answer},
                     {"predicted", answer.label},
                     {"p_yes", answer.probabilities[model.vocab().answer_index("yes")]},
                     {"stem", stem}});
  }
  write_text(dest / "index.json", index.dump(2) + "\n");
  std::cout << "wrote " << index.size() << " attention exports to " << dest.string() << '\n';
  return kOk;
}

int cmd_stats(const std::string& data, const std::string& out) {
  require_dir(data, "data directory");
  std::vector<QARecord> records;
  for (const char* split : {"train", "val", "test"}) {
    auto part = read_manifest(fs::path(data) / (std::string(split) + ".jsonl"));
    records.insert(records.end(), part.begin(), part.end());
  }
  const std::string csv = stats_csv(count_answers(records));
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Keep large tensor buffers on the heap instead of fresh mmap pages.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Localized visual question answering: data, training and evaluation"};
  app.footer(config_help());
  app.require_subcommand(1);

  Common common;
  std::string out, data, variant, name, run, split = "test";
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> variants;
  std::uint64_t seed = 0;
  bool force = false, verbose = false;
  std::size_t jobs = 1, first = 0, count = 4;

  auto* gen = app.add_subcommand("gen-data", "Render the synthetic dataset");
  add_common(gen, common);
  gen->add_option("-o,--out", out, "Output directory (default $LVQA_RUN_DIR/data or ./data)");
  auto* seed_opt = gen->add_option("--seed", seed, "Dataset seed (overrides data.seed)");

  auto* train = app.add_subcommand("train", "Train one variant for every seed");
  add_common(train, common);
  train->add_option("-d,--data", data, "Dataset directory")->required();
  train->add_option("--variant", variant, "no_mask | region_in_text | crop_region | draw_region | ours");
  train->add_option("--seeds", seeds, "Seeds (default train.seeds)");
  train->add_option("--name", name, "Run name (default: the variant)");
  train->add_option("-o,--out", out, "Runs root (default $LVQA_RUN_DIR/runs or ./runs)");
  train->add_flag("--force", force, "Overwrite existing run directories");
  train->add_option("-j,--jobs", jobs, "Seeds trained concurrently");
  train->add_flag("-v,--verbose", verbose, "Log every epoch to stderr");

  auto* eval = app.add_subcommand("eval", "Evaluate one run's checkpoint");
  eval->add_option("-r,--run", run, "Run directory (runs/<name>/seed<k>)")->required();
  eval->add_option("-d,--data", data, "Dataset directory")->required();
  eval->add_option("--split", split, "train | val | test");

  auto* compare = app.add_subcommand("compare", "Aggregate test metrics over variants and seeds");
  compare->add_option("-d,--data", data, "Dataset directory")->required();
  compare->add_option("--runs", run, "Runs root (default $LVQA_RUN_DIR/runs or ./runs)");
  compare->add_option("--variants", variants, "Variants to include (default all)");
  compare->add_option("--seeds", seeds, "Seeds (default 0 1 2 3 4)");
  compare->add_option("-o,--out", out, "Where report.json/report.md/strata.csv go (default: runs root)");

  auto* attn = app.add_subcommand("attn-export", "Write attention heatmaps and overlays");
  attn->add_option("-r,--run", run, "Run directory")->required();
  attn->add_option("-d,--data", data, "Dataset directory")->required();
  attn->add_option("--split", split, "train | val | test");
  attn->add_option("--first", first, "First sample index");
  attn->add_option("-n,--count", count, "Number of samples");
  attn->add_option("-o,--out", out, "Output directory (default <run>/attention)");

  auto* stats = app.add_subcommand("stats", "Per-object yes/no question counts as CSV");
  stats->add_option("-d,--data", data, "Dataset directory")->required();
  stats->add_option("-o,--out", out, "CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(common, out, seed_opt->count() ? std::optional<std::uint64_t>(seed) : std::nullopt);
    if (*train) return cmd_train(common, data, variant, seeds, name, out, force, jobs, verbose);
    if (*eval) return cmd_eval(run, data, split);
    if (*compare) {
      if (seeds.empty()) seeds = {0, 1, 2, 3, 4};
      return cmd_compare(data, run, variants, seeds, out);
    }
    if (*attn) return cmd_attn_export(run, data, split, first, count, out);
    if (*stats) return cmd_stats(data, out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kEnvironment;
  }
  return kUsage;
}
