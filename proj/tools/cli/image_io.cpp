#include "cli/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mtu/container.hpp"
#include "mtu/errors.hpp"

namespace mtu::cli {

RgbImage to_rgb(const data::Image& planar, std::size_t size) {
  const std::size_t plane = size * size;
  if (planar.size() != 3 * plane) {
    throw DataError("image of " + std::to_string(planar.size()) + " values is not 3x" + std::to_string(size) + "x" +
                    std::to_string(size));
  }
  RgbImage out{size, size, std::vector<unsigned char>(3 * plane)};
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(planar[c * plane + p], -1.0f, 1.0f);
      out.pixels[3 * p + c] = static_cast<unsigned char>(std::lround((v + 1.0f) * 127.5f));
    }
  }
  return out;
}

data::Image from_rgb(const RgbImage& img) {
  if (img.width != img.height) throw DataError("condition image must be square");
  const std::size_t plane = img.width * img.height;
  data::Image out(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + p] = img.pixels[3 * p + c] / 127.5f - 1.0f;
  }
  return out;
}

std::string encode_ppm(const RgbImage& img) {
  std::string s = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  s.append(img.pixels.begin(), img.pixels.end());
  return s;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open image " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (!f || magic != "P6" || maxval != 255 || w == 0 || h == 0) {
    throw DataError(path.string() + ": not a binary 8-bit PPM");
  }
  f.get();  // single whitespace after the header
  RgbImage img{w, h, std::vector<unsigned char>(3 * w * h)};
  f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw DataError(path.string() + ": truncated");
  return img;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) { io::write_text_atomic(path, encode_ppm(img)); }

RgbImage grid(const std::vector<RgbImage>& tiles, std::size_t columns) {
  if (tiles.empty()) return {};
  const auto tw = tiles[0].width, th = tiles[0].height;
  columns = std::max<std::size_t>(1, std::min(columns, tiles.size()));
  const auto rows = (tiles.size() + columns - 1) / columns;
  RgbImage out{columns * (tw + 1) + 1, rows * (th + 1) + 1, {}};
  out.pixels.assign(3 * out.width * out.height, 255);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (tiles[i].width != tw || tiles[i].height != th) throw DataError("grid: tiles differ in size");
    const auto x0 = 1 + (i % columns) * (tw + 1), y0 = 1 + (i / columns) * (th + 1);
    for (std::size_t y = 0; y < th; ++y) {
      std::copy_n(tiles[i].pixels.begin() + static_cast<std::ptrdiff_t>(3 * y * tw), 3 * tw,
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(3 * ((y0 + y) * out.width + x0)));
    }
  }
  return out;
}

}  // namespace mtu::cli
