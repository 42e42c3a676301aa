#pragma once

// Binary PPM (P6) images. Pixel values in [-1, 1] map linearly onto 0..255.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "mtu/data.hpp"

namespace mtu::cli {

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> pixels;  // interleaved RGB, row-major
};

/// Planar [3, size, size] floats in [-1, 1] -> interleaved 8-bit.
RgbImage to_rgb(const data::Image& planar, std::size_t size);
/// Inverse of to_rgb up to 8-bit quantization.
data::Image from_rgb(const RgbImage& img);

std::string encode_ppm(const RgbImage& img);
/// Throws DataError on a malformed or non-P6/255 file.
RgbImage read_ppm(const std::filesystem::path& path);
/// Atomic write.
void write_ppm(const std::filesystem::path& path, const RgbImage& img);

/// Tiles images (all the same size) into `columns` columns with a 1-pixel gap.
RgbImage grid(const std::vector<RgbImage>& tiles, std::size_t columns);

}  // namespace mtu::cli
