#include "lvqa/data_gen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "lvqa/rng.hpp"

namespace lvqa {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

const std::vector<std::string>& plain_classes() {
  static const std::vector<std::string> names{"circle", "square", "triangle"};
  return names;
}

struct Rgb {
  double r, g, b;
};

Rgb base_color(const std::string& cls) {
  if (cls == "circle") return {0.85, 0.25, 0.2};
  if (cls == "square") return {0.25, 0.8, 0.3};
  if (cls == "triangle") return {0.3, 0.4, 0.9};
  return {0.95, 0.85, 0.2};  // bars
}

constexpr Rgb kAlphaMarker{0.1, 0.9, 0.9};
constexpr Rgb kBetaMarker{0.9, 0.1, 0.9};
constexpr Rgb kBackground{0.12, 0.12, 0.14};

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

bool boxes_touch(const Box& a, const Box& b, std::size_t gap) {
  return !(a.row1 + gap < b.row0 || b.row1 + gap < a.row0 || a.col1 + gap < b.col0 || b.col1 + gap < a.col0);
}

std::size_t marker_thickness(std::size_t s) { return std::max<std::size_t>(2, s / 20); }
std::size_t bar_length(std::size_t s) { return s / 4; }
std::size_t bar_thickness(std::size_t s) { return std::max<std::size_t>(3, s / 16); }
constexpr std::size_t kMarkerGap = 1;

bool mask_hits_box(const Mask& mask, const Box& box) {
  for (std::size_t y = box.row0; y <= box.row1; ++y)
    for (std::size_t x = box.col0; x <= box.col1; ++x)
      if (mask.at(y, x)) return true;
  return false;
}

std::size_t hits_id(const Scene& scene, const Mask& mask, std::uint16_t id) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.bits.size(); ++i) n += (mask.bits[i] && scene.segmap[i] == id);
  return n;
}

std::vector<const SceneObject*> context_bars(const Scene& scene) {
  std::vector<const SceneObject*> out;
  for (const auto& o : scene.objects)
    if (o.cls == kAlphaBar || o.cls == kBetaBar) out.push_back(&o);
  return out;
}

bool hits_any_marker(const Scene& scene, const Mask& mask) {
  return std::any_of(scene.markers.begin(), scene.markers.end(), [&](const Box& b) { return mask_hits_box(mask, b); });
}

Region sample_region(RegionKind kind, const DataConfig& config, Rng& rng) {
  const std::size_t s = config.image_size;
  const double sd = static_cast<double>(s);
  Region r;
  r.kind = kind;
  if (kind == RegionKind::Rect) {
    auto extent = [&] {
      const auto e = static_cast<std::size_t>(std::lround(rng.uniform(config.region_min, config.region_max) * sd));
      return std::clamp<std::size_t>(e, 1, s);
    };
    const std::size_t h = extent();
    const std::size_t w = extent();
    r.row0 = static_cast<std::size_t>(rng.index(s - h + 1));
    r.col0 = static_cast<std::size_t>(rng.index(s - w + 1));
    r.row1 = r.row0 + h - 1;
    r.col1 = r.col0 + w - 1;
  } else {
    r.radius = rng.uniform(config.region_min, config.region_max) * sd / 2.0;
    r.center_row = rng.uniform(0.0, sd);
    r.center_col = rng.uniform(0.0, sd);
  }
  return r;
}

bool is_context_class(const std::string& cls) { return cls == kAlphaBar || cls == kBetaBar; }

QARecord make_record(const Scene& scene, const std::string& cls, const Region& region, const Mask& mask) {
  QARecord rec;
  rec.question = question_for(cls);
  rec.object = cls;
  rec.region = region;
  rec.answer = overlap(scene, mask, cls) > 0 ? "yes" : "no";
  const auto bars = context_bars(scene);
  if (is_context_class(cls) && bars.size() == 2 && !hits_any_marker(scene, mask)) {
    rec.context_ambiguous = (hits_id(scene, mask, bars[0]->id) > 0) != (hits_id(scene, mask, bars[1]->id) > 0);
  }
  return rec;
}

std::string region_kind_name(RegionKind k) { return k == RegionKind::Rect ? "rect" : "circle"; }

RegionKind parse_region_kind(const std::string& s) {
  if (s == "rect") return RegionKind::Rect;
  if (s == "circle") return RegionKind::Circle;
  throw std::invalid_argument("unknown region kind '" + s + "' (expected rect or circle)");
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void DataConfig::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("data config: " + why); };
  if (image_size < 32) fail("image_size must be at least 32");
  if (train_images + val_images + test_images == 0) fail("at least one image is required");
  if (questions_per_image < 2 || questions_per_image % 2) fail("questions_per_image must be even and >= 2");
  if (!(region_min > 0.0 && region_min <= region_max && region_max <= 1.0)) {
    fail("region sizes must satisfy 0 < region_min <= region_max <= 1");
  }
  if (min_objects == 0 || min_objects > max_objects) fail("object counts must satisfy 1 <= min_objects <= max_objects");
  if (min_object_size < 3 || min_object_size > max_object_size || max_object_size > image_size / 2) {
    fail("object sizes must satisfy 3 <= min_object_size <= max_object_size <= image_size / 2");
  }
  if (context_probability < 0.0 || context_probability > 1.0) fail("context_probability must lie in [0, 1]");
  if (noise < 0.0) fail("noise must be non-negative");
  if (max_retries == 0) fail("max_retries must be positive");
}

nlohmann::ordered_json DataConfig::to_json() const {
  return {{"image_size", image_size},
          {"train_images", train_images},
          {"val_images", val_images},
          {"test_images", test_images},
          {"questions_per_image", questions_per_image},
          {"region_kind", region_kind_name(region_kind)},
          {"region_min", region_min},
          {"region_max", region_max},
          {"min_objects", min_objects},
          {"max_objects", max_objects},
          {"min_object_size", min_object_size},
          {"max_object_size", max_object_size},
          {"context_probability", context_probability},
          {"noise", noise},
          {"max_retries", max_retries},
          {"seed", seed}};
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  DataConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.train_images = j.value("train_images", c.train_images);
  c.val_images = j.value("val_images", c.val_images);
  c.test_images = j.value("test_images", c.test_images);
  c.questions_per_image = j.value("questions_per_image", c.questions_per_image);
  c.region_kind = parse_region_kind(j.value("region_kind", region_kind_name(c.region_kind)));
  c.region_min = j.value("region_min", c.region_min);
  c.region_max = j.value("region_max", c.region_max);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.min_object_size = j.value("min_object_size", c.min_object_size);
  c.max_object_size = j.value("max_object_size", c.max_object_size);
  c.context_probability = j.value("context_probability", c.context_probability);
  c.noise = j.value("noise", c.noise);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Scenes

std::vector<std::string> Scene::classes() const {
  std::set<std::string> seen;
  for (const auto& o : objects) {
    if (o.pixel_count > 0) seen.insert(o.cls);
  }
  return {seen.begin(), seen.end()};
}

Scene generate_scene(std::uint64_t seed, const DataConfig& config, std::optional<bool> first_bar_is_alpha) {
  config.validate();
  const std::size_t s = config.image_size;
  Rng root(seed);
  Rng layout = root.split();
  Rng noise = root.split();
  const bool drawn_marker = root.bernoulli(0.5);

  Scene scene;
  scene.image = Image(s);
  scene.segmap.assign(s * s, 0);

  const std::size_t m = marker_thickness(s);
  std::vector<Box> taken;

  auto place = [&](std::size_t h, std::size_t w) -> std::optional<Box> {
    for (std::size_t attempt = 0; attempt < config.max_retries; ++attempt) {
      Box b;
      b.row0 = static_cast<std::size_t>(layout.index(s - h + 1));
      b.col0 = static_cast<std::size_t>(layout.index(s - w + 1));
      b.row1 = b.row0 + h - 1;
      b.col1 = b.col0 + w - 1;
      const bool clear = std::none_of(taken.begin(), taken.end(), [&](const Box& t) { return boxes_touch(b, t, 2); });
      if (clear) {
        taken.push_back(b);
        return b;
      }
    }
    return std::nullopt;
  };

  struct Pending {
    std::string cls;
    Box box;
    Rgb color;
  };
  std::vector<Pending> pending;

  const bool context = layout.bernoulli(config.context_probability);
  const bool first_alpha = first_bar_is_alpha.value_or(drawn_marker);
  if (context) scene.first_bar_is_alpha = first_alpha;

  // A crowded layout is redrawn from scratch rather than squeezed.
  bool placed = false;
  for (std::size_t restart = 0; restart < config.max_retries && !placed; ++restart) {
    taken.clear();
    pending.clear();
    scene.markers.clear();
    placed = true;
    // Each bar gets a thin marker strip running alongside it, on a random
    // side; the pair occupies one placement box.
    for (std::size_t k = 0; context && k < 2 && placed; ++k) {
      const std::size_t len = bar_length(s), thick = bar_thickness(s);
      const bool horizontal = layout.bernoulli(0.5);
      const bool before = layout.bernoulli(0.5);
      const std::size_t across = thick + kMarkerGap + m;
      const auto box = horizontal ? place(across, len) : place(len, across);
      if (!box) {
        placed = false;
        break;
      }
      Box bar = *box, marker = *box;
      if (horizontal) {
        bar.row0 = before ? box->row0 + m + kMarkerGap : box->row0;
        bar.row1 = bar.row0 + thick - 1;
        marker.row0 = before ? box->row0 : box->row0 + thick + kMarkerGap;
        marker.row1 = marker.row0 + m - 1;
      } else {
        bar.col0 = before ? box->col0 + m + kMarkerGap : box->col0;
        bar.col1 = bar.col0 + thick - 1;
        marker.col0 = before ? box->col0 : box->col0 + thick + kMarkerGap;
        marker.col1 = marker.col0 + m - 1;
      }
      const bool alpha = (k == 0) == first_alpha;
      pending.push_back({alpha ? kAlphaBar : kBetaBar, bar, base_color("bar")});
      scene.markers.push_back(marker);
    }
    if (!placed) continue;
    const auto count = static_cast<std::size_t>(layout.integer(static_cast<long long>(config.min_objects),
                                                               static_cast<long long>(config.max_objects)));
    for (std::size_t k = 0; k < count && placed; ++k) {
      const std::string& cls = plain_classes()[layout.index(plain_classes().size())];
      const auto side = static_cast<std::size_t>(layout.integer(static_cast<long long>(config.min_object_size),
                                                                static_cast<long long>(config.max_object_size)));
      const auto box = place(side, side);
      if (!box) {
        placed = false;
        break;
      }
      Rgb c = base_color(cls);
      c.r = std::clamp(c.r + layout.uniform(-0.08, 0.08), 0.0, 1.0);
      c.g = std::clamp(c.g + layout.uniform(-0.08, 0.08), 0.0, 1.0);
      c.b = std::clamp(c.b + layout.uniform(-0.08, 0.08), 0.0, 1.0);
      pending.push_back({cls, *box, c});
    }
  }
  if (!placed) {
    throw DataError("generate_scene: could not lay out the scene after " + std::to_string(config.max_retries) +
                    " attempts (seed " + std::to_string(seed) + "); reduce object sizes or counts");
  }

  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      scene.image.at(0, y, x) = kBackground.r;
      scene.image.at(1, y, x) = kBackground.g;
      scene.image.at(2, y, x) = kBackground.b;
    }

  auto paint = [&](std::size_t y, std::size_t x, const Rgb& c) {
    scene.image.at(0, y, x) = c.r;
    scene.image.at(1, y, x) = c.g;
    scene.image.at(2, y, x) = c.b;
  };

  for (std::size_t i = 0; i < pending.size(); ++i) {
    const auto id = static_cast<std::uint16_t>(i + 1);
    const Pending& p = pending[i];
    const std::size_t h = p.box.row1 - p.box.row0 + 1;
    const std::size_t w = p.box.col1 - p.box.col0 + 1;
    for (std::size_t dy = 0; dy < h; ++dy) {
      for (std::size_t dx = 0; dx < w; ++dx) {
        bool inside = true;
        if (p.cls == "circle") {
          const double cy = dy + 0.5 - h / 2.0, cx = dx + 0.5 - w / 2.0;
          inside = cy * cy + cx * cx <= (h / 2.0) * (h / 2.0);
        } else if (p.cls == "triangle") {
          const double half = (dy + 1.0) / static_cast<double>(h) * (w / 2.0);
          inside = std::abs(dx + 0.5 - w / 2.0) <= half;
        }
        if (!inside) continue;
        const std::size_t y = p.box.row0 + dy, x = p.box.col0 + dx;
        scene.segmap[y * s + x] = id;
        paint(y, x, p.color);
      }
    }
    SceneObject obj{id, p.cls, 0, p.box};
    scene.objects.push_back(obj);
  }
  for (std::size_t i = 0; i < s * s; ++i) {
    if (scene.segmap[i]) ++scene.objects[scene.segmap[i] - 1].pixel_count;
  }

  for (std::size_t k = 0; k < scene.markers.size(); ++k) {
    const Box& b = scene.markers[k];
    const Rgb c = pending[k].cls == kAlphaBar ? kAlphaMarker : kBetaMarker;
    for (std::size_t y = b.row0; y <= b.row1; ++y)
      for (std::size_t x = b.col0; x <= b.col1; ++x) paint(y, x, c);
  }

  // Noise is drawn for every pixel in a fixed order, so overriding the marker
  // leaves all other pixels untouched. Values are quantized to 8 bits to
  // match what is stored on disk.
  for (double& v : scene.image.pixels) {
    const double noisy = v + config.noise * noise.normal();
    v = to_byte(noisy) / 255.0;
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Regions and questions

Mask Region::rasterize(std::size_t size) const {
  Mask mask(size);
  if (kind == RegionKind::Rect) {
    if (row1 >= size || col1 >= size || row0 > row1 || col0 > col1) {
      throw std::invalid_argument("region: rectangle outside a " + std::to_string(size) + "px image");
    }
    for (std::size_t y = row0; y <= row1; ++y)
      for (std::size_t x = col0; x <= col1; ++x) mask.at(y, x) = 1;
  } else {
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dy = y + 0.5 - center_row, dx = x + 0.5 - center_col;
        if (dy * dy + dx * dx <= radius * radius) mask.at(y, x) = 1;
      }
  }
  return mask;
}

nlohmann::ordered_json Region::to_json() const {
  if (kind == RegionKind::Rect) {
    return {{"kind", "rect"}, {"row0", row0}, {"col0", col0}, {"row1", row1}, {"col1", col1}};
  }
  return {{"kind", "circle"}, {"center_row", center_row}, {"center_col", center_col}, {"radius", radius}};
}

Region Region::from_json(const nlohmann::json& j) {
  Region r;
  r.kind = parse_region_kind(j.at("kind").get<std::string>());
  if (r.kind == RegionKind::Rect) {
    r.row0 = j.at("row0").get<std::size_t>();
    r.col0 = j.at("col0").get<std::size_t>();
    r.row1 = j.at("row1").get<std::size_t>();
    r.col1 = j.at("col1").get<std::size_t>();
  } else {
    r.center_row = j.at("center_row").get<double>();
    r.center_col = j.at("center_col").get<double>();
    r.radius = j.at("radius").get<double>();
  }
  return r;
}

nlohmann::ordered_json QARecord::to_json() const {
  return {{"image_id", image_id},   {"image", image_path}, {"mask", mask_path},
          {"question", question},   {"answer", answer},    {"object", object},
          {"region", region.to_json()}, {"split", split}, {"context_ambiguous", context_ambiguous}};
}

QARecord QARecord::from_json(const nlohmann::json& j) {
  QARecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.image_path = j.at("image").get<std::string>();
  r.mask_path = j.at("mask").get<std::string>();
  r.question = j.at("question").get<std::string>();
  r.answer = j.at("answer").get<std::string>();
  r.object = j.at("object").get<std::string>();
  r.region = Region::from_json(j.at("region"));
  r.split = j.at("split").get<std::string>();
  r.context_ambiguous = j.value("context_ambiguous", false);
  return r;
}

std::string question_for(const std::string& cls) { return "is there " + cls + " in this region?"; }

std::size_t overlap(const Scene& scene, const Mask& mask, const std::string& cls) {
  if (mask.size != scene.size()) throw std::invalid_argument("overlap: mask and scene sizes differ");
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    const std::uint16_t id = scene.segmap[i];
    if (mask.bits[i] && id && scene.objects[id - 1].cls == cls) ++n;
  }
  return n;
}

std::vector<QARecord> generate_questions(const Scene& scene, std::size_t n, RegionKind kind, std::uint64_t seed,
                                         const DataConfig& config) {
  if (n % 2) throw std::invalid_argument("generate_questions: n must be even");
  Rng rng(seed);
  std::vector<QARecord> out;
  const std::size_t s = scene.size();

  auto draw = [&](auto accept) -> std::optional<std::pair<Region, Mask>> {
    for (std::size_t attempt = 0; attempt < config.max_retries; ++attempt) {
      Region r = sample_region(kind, config, rng);
      Mask m = r.rasterize(s);
      if (!m.empty() && accept(m)) return std::make_pair(r, std::move(m));
    }
    return std::nullopt;
  };

  // Context-pair questions come in groups of four: one region on each bar,
  // each asked about both names, never touching a marker. Which bar a region
  // lands on does not depend on the marker colours, so only the markers tell
  // which answer is right.
  const auto bars = context_bars(scene);
  const std::size_t context_groups = bars.size() == 2 ? n / 4 : 0;
  for (std::size_t g = 0; g < context_groups; ++g) {
    auto only = [&](const SceneObject* hit, const SceneObject* miss) {
      return draw([&](const Mask& m) {
        return !hits_any_marker(scene, m) && hits_id(scene, m, hit->id) > 0 && hits_id(scene, m, miss->id) == 0;
      });
    };
    auto on_first = only(bars[0], bars[1]);
    auto on_second = only(bars[1], bars[0]);
    if (!on_first || !on_second) break;
    for (const auto* pick : {&*on_first, &*on_second}) {
      out.push_back(make_record(scene, kAlphaBar, pick->first, pick->second));
      out.push_back(make_record(scene, kBetaBar, pick->first, pick->second));
    }
  }

  std::vector<std::string> plain;
  for (const auto& cls : scene.classes()) {
    if (!is_context_class(cls)) plain.push_back(cls);
  }
  std::size_t failures = 0;
  while (out.size() < n && !plain.empty()) {
    const std::string& cls = plain[rng.index(plain.size())];
    auto yes = draw([&](const Mask& m) { return overlap(scene, m, cls) > 0; });
    auto no = draw([&](const Mask& m) { return overlap(scene, m, cls) == 0; });
    if (!yes || !no) {
      if (++failures > config.max_retries) break;
      continue;
    }
    out.push_back(make_record(scene, cls, yes->first, yes->second));
    out.push_back(make_record(scene, cls, no->first, no->second));
  }
  if (out.size() > n) out.resize(n);
  return out;
}

std::vector<QARecord> balance(const std::vector<QARecord>& records, std::uint64_t seed,
                              std::vector<std::string>* warnings) {
  Rng rng(seed);
  std::map<std::pair<std::string, std::string>, std::pair<std::vector<QARecord>, std::vector<QARecord>>> strata;
  for (const auto& r : records) {
    auto& slot = strata[{r.object, r.split}];
    if (r.answer == "yes") {
      slot.first.push_back(r);
    } else if (r.answer == "no") {
      slot.second.push_back(r);
    } else {
      throw DataError("balance: unexpected answer '" + r.answer + "'");
    }
  }
  std::vector<QARecord> out;
  for (auto& [key, lists] : strata) {
    auto& [yes, no] = lists;
    if (yes.empty() || no.empty()) {
      if (warnings) {
        warnings->push_back("dropping stratum object=" + key.first + " split=" + key.second + ": only " +
                            (yes.empty() ? "no" : "yes") + " answers");
      }
      continue;
    }
    auto& major = yes.size() > no.size() ? yes : no;
    const std::size_t keep = std::min(yes.size(), no.size());
    if (major.size() > keep) {
      shuffle(major, rng);
      major.resize(keep);
    }
    out.insert(out.end(), yes.begin(), yes.end());
    out.insert(out.end(), no.begin(), no.end());
  }
  shuffle(out, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files

std::vector<ClassCount> count_answers(const std::vector<QARecord>& records) {
  std::map<std::pair<std::string, std::string>, ClassCount> by;
  for (const auto& r : records) {
    auto& c = by[{r.split, r.object}];
    c.split = r.split;
    c.object = r.object;
    (r.answer == "yes" ? c.yes : c.no) += 1;
  }
  std::vector<ClassCount> out;
  for (auto& [k, v] : by) out.push_back(v);
  return out;
}

std::string stats_csv(const std::vector<ClassCount>& counts) {
  std::ostringstream os;
  os << "split,object,yes,no,total\n";
  for (const auto& c : counts) os << c.split << ',' << c.object << ',' << c.yes << ',' << c.no << ',' << c.yes + c.no << '\n';
  return os.str();
}

void write_manifest(const fs::path& path, const std::vector<QARecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << r.to_json().dump() << '\n';
}

std::vector<QARecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  std::vector<QARecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(QARecord::from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

DatasetSummary generate_dataset(const DataConfig& config, const fs::path& root) {
  config.validate();
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");

  const std::size_t total = config.train_images + config.val_images + config.test_images;
  std::vector<QARecord> records;
  for (std::size_t i = 0; i < total; ++i) {
    const std::string split = i < config.train_images                       ? "train"
                              : i < config.train_images + config.val_images ? "val"
                                                                            : "test";
    char id[32];
    std::snprintf(id, sizeof id, "img_%05zu", i);
    const Scene scene = generate_scene(mix(config.seed, 2 * i), config);
    const std::string image_rel = std::string("images/") + id + ".ppm";
    write_ppm(root / image_rel, scene.image);

    auto qs = generate_questions(scene, config.questions_per_image, config.region_kind, mix(config.seed, 2 * i + 1),
                                 config);
    for (std::size_t q = 0; q < qs.size(); ++q) {
      char mid[48];
      std::snprintf(mid, sizeof mid, "masks/%s_q%02zu.pgm", id, q);
      qs[q].image_id = id;
      qs[q].image_path = image_rel;
      qs[q].mask_path = mid;
      qs[q].split = split;
      write_mask(root / mid, qs[q].region.rasterize(config.image_size));
      records.push_back(std::move(qs[q]));
    }
  }

  DatasetSummary summary;
  const auto balanced = balance(records, mix(config.seed, 0xBA1A), &summary.warnings);
  std::map<std::string, std::vector<QARecord>> by_split;
  for (const auto& r : balanced) by_split[r.split].push_back(r);
  for (const char* split : {"train", "val", "test"}) write_manifest(root / (std::string(split) + ".jsonl"), by_split[split]);
  summary.train_records = by_split["train"].size();
  summary.val_records = by_split["val"].size();
  summary.test_records = by_split["test"].size();

  std::ofstream stats(root / "stats.csv", std::ios::trunc);
  stats << stats_csv(count_answers(balanced));
  std::ofstream cfg(root / "data_config.json", std::ios::trunc);
  cfg << config.to_json().dump(2) << '\n';
  if (!stats || !cfg) throw IoError("cannot write dataset metadata under " + root.string());
  return summary;
}

Dataset load_split(const fs::path& root, const std::string& split) {
  const auto records = read_manifest(root / (split + ".jsonl"));
  Dataset ds;
  std::map<std::string, std::pair<std::shared_ptr<const Image>, std::size_t>> images;
  for (const auto& r : records) {
    auto it = images.find(r.image_path);
    if (it == images.end()) {
      auto img = std::make_shared<const Image>(read_ppm(root / r.image_path));
      it = images.emplace(r.image_path, std::make_pair(img, images.size())).first;
    }
    Sample s;
    s.image = it->second.first;
    s.image_index = it->second.second;
    s.mask = read_mask(root / r.mask_path);
    if (s.mask.size != s.image->size) throw DataError("mask " + r.mask_path + " does not match its image size");
    if (s.mask.empty()) throw DataError("mask " + r.mask_path + " is empty");
    s.question = r.question;
    s.answer = r.answer;
    s.object = r.object;
    s.context_ambiguous = r.context_ambiguous;
    ds.samples.push_back(std::move(s));
  }
  ds.image_count = images.size();
  return ds;
}

}  // namespace lvqa
