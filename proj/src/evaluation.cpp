#include "lvqa/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "lvqa/data_gen.hpp"
#include "lvqa/training.hpp"
#include "lvqa/vqa_model.hpp"

namespace lvqa {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels, const char* op) {
  if (scores.size() != labels.size()) {
    throw MetricError(std::string(op) + ": " + std::to_string(scores.size()) + " scores vs " +
                      std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw MetricError(std::string(op) + ": labels must be 0 or 1");
  }
}

double json_number(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  return v.is_null() ? kNaN : v.get<double>();
}

}  // namespace

double accuracy(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels) {
  if (predictions.empty()) throw MetricError("accuracy: empty input");
  if (predictions.size() != labels.size()) throw MetricError("accuracy: predictions and labels differ in length");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels, "roc_auc");
  const std::size_t n = scores.size();
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw MetricError("roc_auc: both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;  // 1-based ranks, ties averaged
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum += avg;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels, "average_precision");
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0) throw MetricError("average_precision: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (labels[order[i]] != 1) continue;
    ++tp;
    ap += static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  return ap / static_cast<double>(pos);
}

// ---------------------------------------------------------------------------
// Reports

const StratumMetrics& EvalReport::stratum(const std::string& name) const {
  for (const auto& s : strata)
    if (s.name == name) return s;
  throw std::out_of_range("report has no stratum '" + name + "'");
}

ordered_json EvalReport::to_json() const {
  ordered_json rows = ordered_json::array();
  for (const auto& s : strata) {
    rows.push_back({{"name", s.name},
                    {"count", s.count},
                    {"positives", s.positives},
                    {"accuracy", s.accuracy},
                    {"auc", s.auc},
                    {"ap", s.ap}});
  }
  return {{"variant", variant}, {"seed", seed}, {"strata", rows}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.variant = j.at("variant").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& s : j.at("strata")) {
    StratumMetrics m;
    m.name = s.at("name").get<std::string>();
    m.count = s.at("count").get<std::size_t>();
    m.positives = s.value("positives", std::size_t{0});
    m.accuracy = json_number(s, "accuracy");
    m.auc = json_number(s, "auc");
    m.ap = json_number(s, "ap");
    r.strata.push_back(m);
  }
  return r;
}

EvalReport make_report(const Dataset& data, const Predictions& pred, std::size_t yes_index, const std::string& variant,
                       std::uint64_t seed) {
  if (pred.labels.size() != data.samples.size()) throw MetricError("make_report: predictions do not cover the dataset");
  auto metrics = [&](const std::string& name, const std::vector<std::size_t>& rows) {
    StratumMetrics m;
    m.name = name;
    m.count = rows.size();
    std::vector<std::size_t> p, l;
    std::vector<double> s;
    std::vector<int> b;
    for (std::size_t i : rows) {
      p.push_back(pred.predicted[i]);
      l.push_back(pred.labels[i]);
      s.push_back(pred.yes_scores[i]);
      b.push_back(pred.labels[i] == yes_index ? 1 : 0);
    }
    m.positives = static_cast<std::size_t>(std::count(b.begin(), b.end(), 1));
    m.accuracy = accuracy(p, l);
    m.auc = (m.positives > 0 && m.positives < m.count) ? roc_auc(s, b) : kNaN;
    m.ap = m.positives > 0 ? average_precision(s, b) : kNaN;
    return m;
  };

  EvalReport report;
  report.variant = variant;
  report.seed = seed;
  std::vector<std::size_t> all(data.samples.size());
  std::iota(all.begin(), all.end(), 0);
  report.strata.push_back(metrics("overall", all));

  std::map<std::string, std::vector<std::size_t>> by_object;
  std::vector<std::size_t> context;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    by_object[data.samples[i].object].push_back(i);
    if (data.samples[i].context_ambiguous) context.push_back(i);
  }
  for (const auto& [name, rows] : by_object) report.strata.push_back(metrics("object:" + name, rows));
  if (!context.empty()) report.strata.push_back(metrics("context", context));
  return report;
}

// ---------------------------------------------------------------------------
// Aggregation

std::string AggregateCell::format() const {
  if (n == 0 || std::isnan(mean)) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f ± %.3f", mean, std);
  return buf;
}

AggregateCell aggregate_values(const std::vector<double>& values) {
  AggregateCell cell;
  if (values.empty()) throw MetricError("aggregate: no values");
  if (std::any_of(values.begin(), values.end(), [](double v) { return std::isnan(v); })) {
    cell.mean = cell.std = kNaN;
    return cell;
  }
  cell.n = values.size();
  const double n = static_cast<double>(values.size());
  // Shifted by the first value so identical inputs give exactly std 0.
  double shift = 0.0;
  for (double v : values) shift += v - values.front();
  cell.mean = values.front() + shift / n;
  double ss = 0.0;
  for (double v : values) ss += (v - cell.mean) * (v - cell.mean);
  cell.std = std::sqrt(ss / n);
  return cell;
}

const AggregateRow& AggregateReport::row(const std::string& stratum) const {
  for (const auto& r : rows)
    if (r.stratum == stratum) return r;
  throw std::out_of_range("aggregate has no stratum '" + stratum + "'");
}

ordered_json AggregateReport::to_json() const {
  auto cell = [](const AggregateCell& c) {
    return ordered_json{{"mean", c.mean}, {"std", c.std}, {"n", c.n}, {"text", c.format()}};
  };
  ordered_json out_rows = ordered_json::array();
  for (const auto& r : rows) {
    out_rows.push_back({{"stratum", r.stratum},
                        {"count", r.count},
                        {"accuracy", cell(r.accuracy)},
                        {"auc", cell(r.auc)},
                        {"ap", cell(r.ap)}});
  }
  return {{"variant", variant}, {"seeds", seeds}, {"rows", out_rows}};
}

AggregateReport aggregate_seeds(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw MetricError("aggregate_seeds: no reports");
  const EvalReport& first = reports.front();
  for (const auto& r : reports) {
    bool same = r.strata.size() == first.strata.size();
    for (std::size_t i = 0; same && i < r.strata.size(); ++i) {
      same = r.strata[i].name == first.strata[i].name && r.strata[i].count == first.strata[i].count;
    }
    if (!same) throw MetricError("aggregate_seeds: seed " + std::to_string(r.seed) + " has different strata");
  }
  AggregateReport out;
  out.variant = first.variant;
  for (const auto& r : reports) out.seeds.push_back(r.seed);
  for (std::size_t i = 0; i < first.strata.size(); ++i) {
    std::vector<double> acc, auc, ap;
    for (const auto& r : reports) {
      acc.push_back(r.strata[i].accuracy);
      auc.push_back(r.strata[i].auc);
      ap.push_back(r.strata[i].ap);
    }
    AggregateRow row;
    row.stratum = first.strata[i].name;
    row.count = first.strata[i].count;
    row.accuracy = aggregate_values(acc);
    row.auc = aggregate_values(auc);
    row.ap = aggregate_values(ap);
    out.rows.push_back(row);
  }
  return out;
}

std::string comparison_markdown(const std::vector<AggregateReport>& rows) {
  std::ostringstream os;
  os << "| Method | Accuracy | AUC | AP | Context AUC |\n|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const auto& all = r.row("overall");
    std::string context = "n/a";
    for (const auto& row : r.rows)
      if (row.stratum == "context") context = row.auc.format();
    os << "| " << r.variant << " | " << all.accuracy.format() << " | " << all.auc.format() << " | "
       << all.ap.format() << " | " << context << " |\n";
  }
  return os.str();
}

std::string per_object_markdown(const std::vector<AggregateReport>& rows) {
  if (rows.empty()) return "";
  std::vector<std::string> objects;
  for (const auto& row : rows.front().rows)
    if (row.stratum.rfind("object:", 0) == 0) objects.push_back(row.stratum);
  std::ostringstream os;
  os << "| Method |";
  for (const auto& o : objects) os << ' ' << o.substr(7) << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < objects.size(); ++i) os << "---|";
  os << '\n';
  for (const auto& r : rows) {
    os << "| " << r.variant << " |";
    for (const auto& o : objects) os << ' ' << r.row(o).auc.format() << " |";
    os << '\n';
  }
  return os.str();
}

std::string strata_csv(const std::vector<AggregateReport>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "variant,stratum,count,accuracy_mean,accuracy_std,auc_mean,auc_std,ap_mean,ap_std\n";
  for (const auto& r : rows) {
    for (const auto& row : r.rows) {
      os << r.variant << ',' << row.stratum << ',' << row.count << ',' << row.accuracy.mean << ',' << row.accuracy.std
         << ',' << row.auc.mean << ',' << row.auc.std << ',' << row.ap.mean << ',' << row.ap.std << '\n';
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Attention export

std::vector<std::uint8_t> attention_heatmap(const std::vector<double>& map, std::size_t h, std::size_t w,
                                            std::size_t size) {
  if (map.size() != h * w || h == 0 || w == 0) throw std::invalid_argument("attention_heatmap: map is not H x W");
  if (size % h != 0 || size % w != 0) throw std::invalid_argument("attention_heatmap: size must be a multiple of H, W");
  const auto [lo_it, hi_it] = std::minmax_element(map.begin(), map.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  std::vector<std::uint8_t> out(size * size);
  const std::size_t fy = size / h, fx = size / w;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double v = map[(y / fy) * w + x / fx];
      out[y * size + x] = range > 0.0 ? to_byte((v - lo) / range) : 0;
    }
  return out;
}

std::vector<fs::path> export_attention(const Tensor& attention, const Image& image, const Mask& mask,
                                       const fs::path& dir, const std::string& stem) {
  if (attention.rank() != 3) throw std::invalid_argument("export_attention: expected [G, H, W], got " +
                                                         shape_str(attention.shape()));
  if (mask.size != image.size) throw std::invalid_argument("export_attention: mask and image sizes differ");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  const std::size_t g = attention.dim(0), h = attention.dim(1), w = attention.dim(2), s = image.size;
  const Mask edge = region_boundary(mask, 1);
  std::vector<fs::path> written;
  for (std::size_t k = 0; k < g; ++k) {
    const auto data = attention.data();
    std::vector<double> map(data.begin() + static_cast<long>(k * h * w), data.begin() + static_cast<long>((k + 1) * h * w));
    const auto heat = attention_heatmap(map, h, w, s);
    const fs::path pgm = dir / (stem + "_g" + std::to_string(k) + ".pgm");
    write_pgm(pgm, s, s, heat);

    Image overlay(s);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double hv = heat[y * s + x] / 255.0;
        overlay.at(0, y, x) = 0.5 * image.at(0, y, x) + 0.5 * hv;
        overlay.at(1, y, x) = 0.5 * image.at(1, y, x);
        overlay.at(2, y, x) = 0.5 * image.at(2, y, x);
        if (edge.at(y, x)) {
          overlay.at(0, y, x) = 0.0;
          overlay.at(1, y, x) = 1.0;
          overlay.at(2, y, x) = 0.0;
        }
      }
    const fs::path ppm = dir / (stem + "_g" + std::to_string(k) + ".ppm");
    write_ppm(ppm, overlay);
    written.push_back(pgm);
    written.push_back(ppm);
  }
  return written;
}

}  // namespace lvqa
