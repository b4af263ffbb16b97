#include "lvqa/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace lvqa {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

Box bounding_box(const Mask& mask) {
  Box box{mask.size, mask.size, 0, 0};
  bool any = false;
  for (std::size_t y = 0; y < mask.size; ++y) {
    for (std::size_t x = 0; x < mask.size; ++x) {
      if (!mask.at(y, x)) continue;
      any = true;
      box.row0 = std::min(box.row0, y);
      box.col0 = std::min(box.col0, x);
      box.row1 = std::max(box.row1, y);
      box.col1 = std::max(box.col1, x);
    }
  }
  if (!any) throw std::invalid_argument("bounding_box: empty mask");
  return box;
}

Image flip_horizontal(const Image& image) {
  Image out(image.size);
  const std::size_t s = image.size;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) out.at(c, y, x) = image.at(c, y, s - 1 - x);
  return out;
}

Mask flip_horizontal(const Mask& mask) {
  Mask out(mask.size);
  const std::size_t s = mask.size;
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) out.at(y, x) = mask.at(y, s - 1 - x);
  return out;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, std::size_t width, std::size_t height,
                  const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << magic << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::uint8_t> read_netpbm(const std::filesystem::path& path, const std::string& magic,
                                      std::size_t channels, std::size_t& width, std::size_t& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string got;
  std::size_t maxval = 0;
  in >> got >> width >> height >> maxval;
  if (!in || got != magic || maxval != 255) throw IoError("unsupported netpbm header in " + path.string());
  in.get();
  std::vector<std::uint8_t> bytes(width * height * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError("truncated pixel data in " + path.string());
  return bytes;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& image) {
  const std::size_t s = image.size;
  std::vector<std::uint8_t> bytes(3 * s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x)
      for (std::size_t c = 0; c < 3; ++c) bytes[(y * s + x) * 3 + c] = to_byte(image.at(c, y, x));
  write_netpbm(path, "P6", s, s, bytes);
}

Image read_ppm(const std::filesystem::path& path) {
  std::size_t w = 0, h = 0;
  auto bytes = read_netpbm(path, "P6", 3, w, h);
  if (w != h) throw IoError("non-square image " + path.string());
  Image image(w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) image.at(c, y, x) = bytes[(y * w + x) * 3 + c] / 255.0;
  return image;
}

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& gray) {
  if (gray.size() != width * height) throw IoError("pgm size mismatch for " + path.string());
  write_netpbm(path, "P5", width, height, gray);
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& width, std::size_t& height) {
  return read_netpbm(path, "P5", 1, width, height);
}

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> gray(mask.bits.size());
  std::transform(mask.bits.begin(), mask.bits.end(), gray.begin(), [](std::uint8_t b) { return b ? 255 : 0; });
  write_pgm(path, mask.size, mask.size, gray);
}

Mask read_mask(const std::filesystem::path& path) {
  std::size_t w = 0, h = 0;
  auto gray = read_pgm(path, w, h);
  if (w != h) throw IoError("non-square mask " + path.string());
  Mask mask(w);
  std::transform(gray.begin(), gray.end(), mask.bits.begin(), [](std::uint8_t g) { return g >= 128 ? 1 : 0; });
  return mask;
}

}  // namespace lvqa
