#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "lvqa/data_gen.hpp"

using namespace lvqa;
namespace fs = std::filesystem;

namespace {

DataConfig tiny_config(std::uint64_t seed) {
  DataConfig c;
  c.train_images = 12;
  c.val_images = 4;
  c.test_images = 6;
  c.questions_per_image = 8;
  c.seed = seed;
  return c;
}

// Yes iff some pixel inside the region belongs to an object of that class,
// read straight from the segmentation map.
std::string label_oracle(const Scene& scene, const Mask& mask, const std::string& cls) {
  for (std::size_t y = 0; y < scene.size(); ++y)
    for (std::size_t x = 0; x < scene.size(); ++x) {
      const auto id = scene.id_at(y, x);
      if (mask.at(y, x) && id != 0 && scene.objects.at(id - 1).cls == cls) return "yes";
    }
  return "no";
}

QARecord rec(const std::string& object, const std::string& split, const std::string& answer, int tag) {
  QARecord r;
  r.object = object;
  r.split = split;
  r.answer = answer;
  r.image_id = "img_" + std::to_string(tag);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("scenes are deterministic in the seed") {
  DataConfig c;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Scene a = generate_scene(seed, c), b = generate_scene(seed, c);
    CHECK(a.image == b.image);
    CHECK(a.segmap == b.segmap);
  }
  CHECK(generate_scene(1, c).image != generate_scene(2, c).image);
}

TEST_CASE("segmentation map agrees with the object list") {
  DataConfig c;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Scene scene = generate_scene(seed, c);
    std::vector<std::size_t> counted(scene.objects.size() + 1, 0);
    for (auto id : scene.segmap) ++counted.at(id);
    for (const auto& o : scene.objects) {
      CHECK(o.pixel_count == counted[o.id]);
      CHECK(o.pixel_count > 0);
    }
    const bool context = !scene.markers.empty();
    CHECK((scene.markers.size() == 0 || scene.markers.size() == 2));
    std::size_t bars = 0;
    for (const auto& o : scene.objects) bars += o.cls == kAlphaBar || o.cls == kBetaBar;
    CHECK(bars == (context ? 2u : 0u));
    // Markers are not objects.
    for (const Box& m : scene.markers)
      for (std::size_t y = m.row0; y <= m.row1; ++y)
        for (std::size_t x = m.col0; x <= m.col1; ++x) CHECK(scene.id_at(y, x) == 0);
  }
}

TEST_CASE("swapping the markers changes only marker pixels and the bar names") {
  DataConfig c;
  c.context_probability = 1.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene a = generate_scene(seed, c, true), b = generate_scene(seed, c, false);
    REQUIRE(a.markers.size() == 2);
    CHECK(a.segmap == b.segmap);
    auto in_marker = [&](std::size_t y, std::size_t x) {
      for (const Box& m : a.markers)
        if (y >= m.row0 && y <= m.row1 && x >= m.col0 && x <= m.col1) return true;
      return false;
    };
    std::size_t changed = 0;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < a.size(); ++y)
        for (std::size_t x = 0; x < a.size(); ++x)
          if (a.image.at(ch, y, x) != b.image.at(ch, y, x)) {
            CHECK(in_marker(y, x));
            ++changed;
          }
    CHECK(changed > 0);
    for (std::size_t k = 0; k < a.objects.size(); ++k) {
      const bool bar = a.objects[k].cls == kAlphaBar || a.objects[k].cls == kBetaBar;
      if (bar) {
        CHECK(a.objects[k].cls != b.objects[k].cls);
      } else {
        CHECK(a.objects[k].cls == b.objects[k].cls);
      }
    }
  }
}

TEST_CASE("answers agree with the label oracle") {
  DataConfig c;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; checked < 1000; ++seed) {
    const Scene scene = generate_scene(seed, c);
    for (const QARecord& r : generate_questions(scene, 8, RegionKind::Rect, seed + 1000, c)) {
      const Mask m = r.region.rasterize(scene.size());
      CHECK(r.answer == label_oracle(scene, m, r.object));
      CHECK(r.question == "is there " + r.object + " in this region?");
      ++checked;
    }
  }
}

TEST_CASE("questions come in yes/no pairs and context groups of four") {
  DataConfig c;
  c.context_probability = 1.0;
  std::size_t grouped = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene scene = generate_scene(seed, c);
    const auto qs = generate_questions(scene, 8, RegionKind::Rect, seed, c);
    REQUIRE(qs.size() == 8);
    std::size_t yes = 0, ambiguous = 0;
    for (const auto& q : qs) {
      yes += q.answer == "yes";
      ambiguous += q.context_ambiguous;
    }
    CHECK(yes == 4);
    // Every slot goes to context groups unless no bar-only region exists.
    CHECK((ambiguous == 8 || ambiguous == 0));
    if (ambiguous == 0) continue;
    ++grouped;
    for (std::size_t i = 0; i < 8; i += 2) {
      // Same region, both names, opposite answers.
      CHECK(qs[i].region.to_json() == qs[i + 1].region.to_json());
      CHECK(qs[i].object != qs[i + 1].object);
      CHECK(qs[i].answer != qs[i + 1].answer);
    }
  }
  CHECK(grouped >= 15);
  CHECK_THROWS_AS(generate_questions(generate_scene(0, c), 7, RegionKind::Rect, 0, c), std::invalid_argument);
}

TEST_CASE("context-ambiguous answers flip with the markers while the region pixels stay put") {
  DataConfig c;
  c.context_probability = 1.0;
  std::size_t seen = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Scene a = generate_scene(seed, c, true), b = generate_scene(seed, c, false);
    for (const QARecord& r : generate_questions(a, 8, RegionKind::Rect, seed, c)) {
      if (!r.context_ambiguous) continue;
      ++seen;
      const Mask m = r.region.rasterize(a.size());
      CHECK(label_oracle(a, m, r.object) != label_oracle(b, m, r.object));
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t y = 0; y < a.size(); ++y)
          for (std::size_t x = 0; x < a.size(); ++x)
            if (m.at(y, x)) CHECK(a.image.at(ch, y, x) == b.image.at(ch, y, x));
    }
  }
  CHECK(seen >= 100);
}

TEST_CASE("balance down-samples the majority answer per stratum") {
  std::vector<QARecord> records;
  int tag = 0;
  for (int i = 0; i < 60; ++i) records.push_back(rec("circle", "train", "yes", tag++));
  for (int i = 0; i < 40; ++i) records.push_back(rec("circle", "train", "no", tag++));
  for (int i = 0; i < 5; ++i) records.push_back(rec("square", "train", "yes", tag++));
  for (int i = 0; i < 5; ++i) records.push_back(rec("square", "train", "no", tag++));
  for (int i = 0; i < 3; ++i) records.push_back(rec("circle", "test", "no", tag++));
  records.push_back(rec("circle", "test", "yes", tag++));
  records.push_back(rec("triangle", "val", "yes", tag++));

  std::vector<std::string> warnings;
  const auto out = balance(records, 7, &warnings);
  std::map<std::pair<std::string, std::string>, std::pair<int, int>> counts;
  for (const auto& r : out) {
    auto& c = counts[{r.object, r.split}];
    (r.answer == "yes" ? c.first : c.second)++;
  }
  CHECK(counts[{"circle", "train"}] == std::pair{40, 40});
  CHECK(counts[{"square", "train"}] == std::pair{5, 5});
  CHECK(counts[{"circle", "test"}] == std::pair{1, 1});
  CHECK(counts.count({"triangle", "val"}) == 0);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("triangle") != std::string::npos);
  CHECK(out.size() == 92);

  // Kept records are drawn from the input, each at most once.
  std::set<std::string> ids;
  for (const auto& r : out) CHECK(ids.insert(r.image_id).second);
  CHECK(balance(records, 7).size() == out.size());
  std::vector<std::string> a, b;
  for (const auto& r : balance(records, 7)) a.push_back(r.image_id);
  for (const auto& r : out) b.push_back(r.image_id);
  CHECK(a == b);

  CHECK_THROWS_AS(balance({rec("circle", "train", "maybe", 0)}, 1), DataError);
}

TEST_CASE("rectangle and circle regions rasterize as specified") {
  Region r;
  r.row0 = 2;
  r.col0 = 3;
  r.row1 = 4;
  r.col1 = 7;
  const Mask m = r.rasterize(32);
  CHECK(m.count() == 15);
  CHECK(m.at(2, 3) == 1);
  CHECK(m.at(4, 7) == 1);
  CHECK(m.at(5, 7) == 0);
  r.row1 = 40;
  CHECK_THROWS_AS(r.rasterize(32), std::invalid_argument);

  Region c;
  c.kind = RegionKind::Circle;
  c.center_row = 16;
  c.center_col = 16;
  c.radius = 4;
  const Mask d = c.rasterize(32);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const double dy = y + 0.5 - 16, dx = x + 0.5 - 16;
      CHECK((d.at(y, x) == 1) == (dy * dy + dx * dx <= 16.0));
    }
  CHECK(Region::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("config validation") {
  DataConfig c;
  CHECK_NOTHROW(c.validate());
  DataConfig bad = c;
  bad.min_objects = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.questions_per_image = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.region_min = 0.6;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.context_probability = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(DataConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("generated dataset: disjoint splits, balanced strata, stable bytes") {
  const auto dir = fresh_dir("lvqa_dataset_a");
  const DataConfig c = tiny_config(3);
  const DatasetSummary summary = generate_dataset(c, dir);
  CHECK(summary.train_records > 0);
  CHECK(summary.test_records > 0);

  std::map<std::string, std::set<std::string>> images;
  std::vector<QARecord> all;
  for (const char* split : {"train", "val", "test"}) {
    for (const auto& r : read_manifest(dir / (std::string(split) + ".jsonl"))) {
      CHECK(r.split == split);
      images[split].insert(r.image_id);
      all.push_back(r);
    }
  }
  for (const auto& id : images["train"]) {
    CHECK(images["val"].count(id) == 0);
    CHECK(images["test"].count(id) == 0);
  }
  for (const auto& id : images["val"]) CHECK(images["test"].count(id) == 0);

  for (const auto& cc : count_answers(all)) {
    INFO(cc.split, " ", cc.object);
    CHECK(cc.yes == cc.no);
  }
  CHECK(slurp(dir / "stats.csv") == stats_csv(count_answers(all)));

  // Masks on disk match the manifest regions.
  for (std::size_t i = 0; i < all.size(); i += 7)
    CHECK(read_mask(dir / all[i].mask_path) == all[i].region.rasterize(c.image_size));

  const auto again = fresh_dir("lvqa_dataset_b");
  generate_dataset(c, again);
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "stats.csv", "data_config.json"})
    CHECK(slurp(dir / f) == slurp(again / f));

  const Dataset train = load_split(dir, "train");
  CHECK(train.samples.size() == summary.train_records);
  CHECK(train.image_count == images["train"].size());
  fs::remove_all(dir);
  fs::remove_all(again);
}

TEST_CASE("manifest round trip") {
  const auto dir = fresh_dir("lvqa_manifest");
  fs::create_directories(dir);
  DataConfig c;
  const Scene scene = generate_scene(5, c);
  auto qs = generate_questions(scene, 8, RegionKind::Circle, 5, c);
  for (auto& q : qs) {
    q.image_id = "img_00005";
    q.split = "val";
  }
  write_manifest(dir / "m.jsonl", qs);
  const auto back = read_manifest(dir / "m.jsonl");
  REQUIRE(back.size() == qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) CHECK(back[i].to_json() == qs[i].to_json());
  CHECK_THROWS(read_manifest(dir / "missing.jsonl"));
  fs::remove_all(dir);
}

TEST_CASE("stats csv layout") {
  std::vector<ClassCount> counts{{"train", "circle", 3, 3}, {"test", "square", 1, 2}};
  CHECK(stats_csv(counts) == "split,object,yes,no,total\ntrain,circle,3,3,6\ntest,square,1,2,3\n");
}
