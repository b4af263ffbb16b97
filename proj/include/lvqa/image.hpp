#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace lvqa {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// RGB image, channel-major (3 x size x size), values in [0, 1].
struct Image {
  std::size_t size = 0;
  std::vector<double> pixels;

  Image() = default;
  explicit Image(std::size_t s) : size(s), pixels(3 * s * s, 0.0) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * size + y) * size + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * size + y) * size + x]; }
  bool operator==(const Image&) const = default;
};

/// Binary region mask at full image resolution.
struct Mask {
  std::size_t size = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  explicit Mask(std::size_t s, std::uint8_t fill = 0) : size(s), bits(s * s, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * size + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * size + x]; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool operator==(const Mask&) const = default;
};

/// Inclusive bounding box of set pixels.
struct Box {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;
};
Box bounding_box(const Mask& mask);

Image flip_horizontal(const Image& image);
Mask flip_horizontal(const Mask& mask);

// Binary PPM (P6) and PGM (P5) with maxval 255.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& gray);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& width, std::size_t& height);
void write_mask(const std::filesystem::path& path, const Mask& mask);
Mask read_mask(const std::filesystem::path& path);

std::uint8_t to_byte(double v);

}  // namespace lvqa
