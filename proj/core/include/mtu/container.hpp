#pragma once

// MTUCKPT1 container: a plain-text manifest followed by raw little-endian
// blobs. Used for model checkpoints and dataset splits.
//
//   MTUCKPT1
//   version 1
//   meta <key> <value...>
//   tensor name=<n> shape=<d0,d1,..> dtype=<f32|f64|i32> offset=<o> bytes=<b> tag=<t> frozen=<0|1>
//   data
//   <blob bytes; offsets relative to the first byte after "data\n">
//
// Names, keys and tags contain no whitespace; meta values run to end of line.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtu/tensor.hpp"

namespace mtu::io {

inline constexpr std::string_view kMagic = "MTUCKPT1";
inline constexpr int kFormatVersion = 1;

enum class DType { kF32, kF64, kI32 };

std::string_view dtype_name(DType d);
std::size_t dtype_size(DType d);

struct Blob {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::string tag = "other";
  bool frozen = false;
  std::vector<std::byte> bytes;

  template <class T>
  std::vector<T> as() const;  // converts f32/f64 to T; i32 only to int
};

struct Container {
  std::map<std::string, std::string> meta;
  std::vector<Blob> blobs;

  const Blob* find(std::string_view name) const;
  /// Throws CheckpointError when the key is absent.
  const std::string& require_meta(const std::string& key) const;

  template <class T>
  void add_real(std::string name, Shape shape, std::span<const T> values, std::string tag = "other",
                bool frozen = false);
  void add_ints(std::string name, Shape shape, std::span<const int> values, std::string tag = "other");
};

/// Writes to a temp file in the same directory, then renames over `path`.
void write_container(const std::filesystem::path& path, const Container& c);
/// Throws CheckpointError on bad magic, truncated data or malformed manifest.
Container read_container(const std::filesystem::path& path);

/// Atomic text write (temp file + rename).
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace mtu::io
