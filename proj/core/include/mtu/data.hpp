#pragma once

// Synthetic stand-ins for the four tasks. Scenes are flat-colored shapes on a
// flat background, values in [-1, 1], layout [c, H, W].

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtu/task.hpp"

namespace mtu::data {

inline constexpr std::size_t kImageSize = 24;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kTextLen = 8;
inline constexpr int kPad = 0;

enum class Shape2D { kCircle = 0, kSquare = 1, kTriangle = 2 };
inline constexpr std::size_t kNumShapes = 3;
inline constexpr std::size_t kNumColors = 6;

using Rgb = std::array<float, 3>;
/// Object colors: red, green, blue, yellow, magenta, cyan.
const Rgb& palette(std::size_t color);
/// Backgrounds are the palette at half intensity.
Rgb background(std::size_t color);
std::string_view color_word(std::size_t color);
std::string_view shape_word(Shape2D s);

/// Fixed 64-token vocabulary; index 0 is padding.
const std::vector<std::string>& vocabulary();
int token_id(std::string_view word);
/// Space-separated words to kTextLen ids, padded. Throws DataError on unknown
/// words or overlong prompts.
std::vector<int> encode(std::string_view prompt);
std::string decode(const std::vector<int>& ids);
/// One token per line, index = line number.
void write_vocabulary(const std::filesystem::path& path);
std::vector<std::string> read_vocabulary(const std::filesystem::path& path);

struct Object {
  Shape2D shape = Shape2D::kCircle;
  std::size_t color = 0;
  int cx = 12, cy = 12, r = 5;
};

/// Pixel coverage of an object; row-major H×W.
std::vector<std::uint8_t> object_mask(const Object& o, std::size_t size = kImageSize);
using Image = std::vector<float>;  // kChannels × size × size
Image render(std::size_t bg_color, const std::vector<Object>& objects, std::size_t size = kImageSize);

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };
std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct SplitSizes {
  std::size_t train = 2048, val = 256, test = 256;
  std::size_t size(Split s) const;
  /// First global index of a split; splits occupy consecutive index ranges.
  std::size_t offset(Split s) const;
  bool operator==(const SplitSizes&) const = default;
};

struct SampleMeta {
  std::size_t index = 0;  // global index across splits
  std::size_t bg = 0;
  std::vector<Object> objects;       // scene content of the condition / T2I image
  std::size_t new_color = 0;         // IE target color
  std::size_t target_object = 0;     // IE/IP edited object
  std::array<int, 4> box{0, 0, 0, 0};  // IP mask box x0, y0, x1, y1 (exclusive)
  std::uint64_t degrade_seed = 0;    // SR noise stream
};

struct Sample {
  TaskId task = TaskId::kT2I;
  Image target;
  std::optional<Image> cond;
  std::vector<int> tokens;
  SampleMeta meta;
};

/// Recolors the object's pixels.
Image recolor(const Image& img, const Object& o, std::size_t new_color);
/// 2× box downscale, 3×3 Gaussian blur, additive noise, nearest upscale, clip.
Image degrade(const Image& target, std::uint64_t noise_seed);
/// Fills [x0, x1) × [y0, y1) with the neutral value 0.
Image mask_box(const Image& img, const std::array<int, 4>& box);

/// Sample `index` of a split; pure in (task, split, index, seed).
Sample generate_one(TaskId task, Split split, std::size_t index, std::uint64_t seed, const SplitSizes& sizes = {});

struct Dataset {
  TaskId task = TaskId::kT2I;
  Split split = Split::kTrain;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;
};

/// First `count` samples of the split; throws DataError when count is 0 or
/// exceeds the split size.
Dataset generate(TaskId task, Split split, std::size_t count, std::uint64_t seed, const SplitSizes& sizes = {});

/// One container file per split; the vocabulary is written to vocab.txt beside it.
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace mtu::data
