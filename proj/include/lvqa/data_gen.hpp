#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvqa/image.hpp"

namespace lvqa {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kAlphaBar = "alpha-bar";
inline constexpr const char* kBetaBar = "beta-bar";

enum class RegionKind { Rect, Circle };

struct DataConfig {
  std::size_t image_size = 64;
  std::size_t train_images = 400;
  std::size_t val_images = 60;
  std::size_t test_images = 120;
  std::size_t questions_per_image = 8;
  RegionKind region_kind = RegionKind::Rect;
  double region_min = 0.10;  // fraction of the image side
  double region_max = 0.50;
  std::size_t min_objects = 2;  // plain shapes (circle, square, triangle)
  std::size_t max_objects = 3;
  std::size_t min_object_size = 10;
  std::size_t max_object_size = 14;
  /// Probability that a scene holds the alpha-bar/beta-bar pair and markers.
  double context_probability = 0.5;
  double noise = 0.04;
  std::size_t max_retries = 200;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct SceneObject {
  std::uint16_t id = 0;
  std::string cls;
  std::size_t pixel_count = 0;
  Box box;
};

/// A rendered scene. When the context pair is present it holds two bars drawn
/// identically, each with a small marker beside it; the marker's colour alone
/// decides which bar is the alpha-bar. Markers are not objects.
struct Scene {
  Image image;
  std::vector<std::uint16_t> segmap;  // object id per pixel, 0 = background
  std::vector<SceneObject> objects;
  std::vector<Box> markers;  // one per context bar, in object order
  bool first_bar_is_alpha = true;

  std::size_t size() const { return image.size; }
  std::uint16_t id_at(std::size_t y, std::size_t x) const { return segmap[y * image.size + x]; }
  std::vector<std::string> classes() const;
};

/// Deterministic in (seed, config). `first_bar_is_alpha` overrides the marker
/// draw without changing any pixel outside the markers.
Scene generate_scene(std::uint64_t seed, const DataConfig& config,
                     std::optional<bool> first_bar_is_alpha = std::nullopt);

struct Region {
  RegionKind kind = RegionKind::Rect;
  // Rect: inclusive pixel corners. Circle: centre and radius in pixels.
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;
  double center_row = 0.0, center_col = 0.0, radius = 0.0;

  Mask rasterize(std::size_t size) const;
  nlohmann::ordered_json to_json() const;
  static Region from_json(const nlohmann::json& j);
};

struct QARecord {
  std::string image_id;
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
  std::string question;
  std::string answer;  // "yes" | "no"
  std::string object;
  Region region;
  std::string split;
  /// Question about the context pair whose region touches no marker and
  /// exactly one bar, so its answer flips if the marker colours are swapped.
  bool context_ambiguous = false;

  nlohmann::ordered_json to_json() const;
  static QARecord from_json(const nlohmann::json& j);
};

std::string question_for(const std::string& cls);

/// Pixels of class `cls` inside the mask.
std::size_t overlap(const Scene& scene, const Mask& mask, const std::string& cls);

/// n/2 "yes" and n/2 "no" records, each pair about one class present in the
/// scene, labelled by the at-least-one-pixel rule. n must be even.
std::vector<QARecord> generate_questions(const Scene& scene, std::size_t n, RegionKind kind, std::uint64_t seed,
                                         const DataConfig& config);

/// Down-samples the majority answer in every (object, split) stratum, then
/// shuffles. Strata lacking either answer are dropped with a warning.
std::vector<QARecord> balance(const std::vector<QARecord>& records, std::uint64_t seed,
                              std::vector<std::string>* warnings = nullptr);

struct DatasetSummary {
  std::size_t train_records = 0, val_records = 0, test_records = 0;
  std::vector<std::string> warnings;
};

/// Renders every scene, writes images/, masks/, {train,val,test}.jsonl,
/// stats.csv and data_config.json under root.
DatasetSummary generate_dataset(const DataConfig& config, const std::filesystem::path& root);

std::vector<QARecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<QARecord>& records);

struct ClassCount {
  std::string split, object;
  std::size_t yes = 0, no = 0;
};
std::vector<ClassCount> count_answers(const std::vector<QARecord>& records);
std::string stats_csv(const std::vector<ClassCount>& counts);

/// One localized question with its image loaded.
struct Sample {
  std::shared_ptr<const Image> image;
  std::size_t image_index = 0;  // dense within the dataset
  Mask mask;
  std::string question;
  std::string answer;
  std::string object;
  bool context_ambiguous = false;
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t image_count = 0;
};

Dataset load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace lvqa
