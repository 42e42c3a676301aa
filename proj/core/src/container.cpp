#include "mtu/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "mtu/errors.hpp"

static_assert(std::endian::native == std::endian::little, "MTUCKPT1 blobs are little-endian");

namespace mtu::io {

std::string_view dtype_name(DType d) {
  switch (d) {
    case DType::kF32:
      return "f32";
    case DType::kF64:
      return "f64";
    case DType::kI32:
      return "i32";
  }
  return "f32";
}

std::size_t dtype_size(DType d) { return d == DType::kF64 ? 8 : 4; }

namespace {

DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  if (s == "i32") return DType::kI32;
  throw CheckpointError("unknown dtype '" + std::string(s) + "'");
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::kF32;
  if constexpr (std::is_same_v<T, double>) return DType::kF64;
  return DType::kI32;
}

std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape(const std::string& s) {
  Shape out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(part)));
    } catch (const std::exception&) {
      throw CheckpointError("malformed shape '" + s + "'");
    }
  }
  return out;
}

std::filesystem::path temp_path_for(const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  return tmp;
}

}  // namespace

template <class T>
std::vector<T> Blob::as() const {
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != n * dtype_size(dtype)) throw CheckpointError("blob '" + name + "' has inconsistent size");
  std::vector<T> out(n);
  if constexpr (std::is_same_v<T, int>) {
    if (dtype != DType::kI32) throw CheckpointError("blob '" + name + "' is not integer");
    std::memcpy(out.data(), bytes.data(), bytes.size());
  } else {
    if (dtype == DType::kF32) {
      std::vector<float> tmp(n);
      std::memcpy(tmp.data(), bytes.data(), bytes.size());
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(tmp[i]);
    } else if (dtype == DType::kF64) {
      std::vector<double> tmp(n);
      std::memcpy(tmp.data(), bytes.data(), bytes.size());
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(tmp[i]);
    } else {
      throw CheckpointError("blob '" + name + "' is not real-valued");
    }
  }
  return out;
}

template std::vector<float> Blob::as<float>() const;
template std::vector<double> Blob::as<double>() const;
template std::vector<int> Blob::as<int>() const;

const Blob* Container::find(std::string_view name) const {
  for (const auto& b : blobs)
    if (b.name == name) return &b;
  return nullptr;
}

const std::string& Container::require_meta(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw CheckpointError("missing manifest field '" + key + "'");
  return it->second;
}

template <class T>
void Container::add_real(std::string name, Shape shape, std::span<const T> values, std::string tag, bool frozen) {
  Blob b;
  b.name = std::move(name);
  b.dtype = dtype_of<T>();
  b.shape = std::move(shape);
  b.tag = std::move(tag);
  b.frozen = frozen;
  b.bytes.resize(values.size() * sizeof(T));
  std::memcpy(b.bytes.data(), values.data(), b.bytes.size());
  blobs.push_back(std::move(b));
}

template void Container::add_real<float>(std::string, Shape, std::span<const float>, std::string, bool);
template void Container::add_real<double>(std::string, Shape, std::span<const double>, std::string, bool);

void Container::add_ints(std::string name, Shape shape, std::span<const int> values, std::string tag) {
  Blob b;
  b.name = std::move(name);
  b.dtype = DType::kI32;
  b.shape = std::move(shape);
  b.tag = std::move(tag);
  b.bytes.resize(values.size() * sizeof(int));
  std::memcpy(b.bytes.data(), values.data(), b.bytes.size());
  blobs.push_back(std::move(b));
}

void write_container(const std::filesystem::path& path, const Container& c) {
  std::ostringstream head;
  head << kMagic << '\n' << "version " << kFormatVersion << '\n';
  for (const auto& [k, v] : c.meta) {
    if (k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw CheckpointError("manifest field '" + k + "' contains illegal whitespace");
    }
    head << "meta " << k << ' ' << v << '\n';
  }
  std::size_t offset = 0;
  for (const auto& b : c.blobs) {
    if (b.bytes.size() != shape_numel(b.shape) * dtype_size(b.dtype)) {
      throw CheckpointError("blob '" + b.name + "' size does not match its shape");
    }
    head << "tensor name=" << b.name << " shape=" << join_shape(b.shape) << " dtype=" << dtype_name(b.dtype)
         << " offset=" << offset << " bytes=" << b.bytes.size() << " tag=" << b.tag << " frozen=" << (b.frozen ? 1 : 0)
         << '\n';
    offset += b.bytes.size();
  }
  head << "data\n";

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = temp_path_for(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    const std::string h = head.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& b : c.blobs) out.write(reinterpret_cast<const char*>(b.bytes.data()), static_cast<std::streamsize>(b.bytes.size()));
    out.flush();
    if (!out) throw CheckpointError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw CheckpointError("'" + path.string() + "' is not an MTUCKPT1 file (bad magic)");
  }
  Container c;
  struct Pending {
    Blob blob;
    std::size_t offset;
    std::size_t nbytes;
  };
  std::vector<Pending> pending;
  bool saw_data = false;
  while (std::getline(in, line)) {
    if (line == "data") {
      saw_data = true;
      break;
    }
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "version") {
      int v = 0;
      ls >> v;
      if (v != kFormatVersion) throw CheckpointError("unsupported MTUCKPT1 version " + std::to_string(v));
    } else if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      c.meta[key] = value;
    } else if (kind == "tensor") {
      std::map<std::string, std::string> kv;
      std::string tok;
      while (ls >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw CheckpointError("malformed tensor record: " + line);
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
      }
      for (const char* key : {"name", "shape", "dtype", "offset", "bytes", "tag", "frozen"}) {
        if (!kv.count(key)) throw CheckpointError("tensor record lacks '" + std::string(key) + "': " + line);
      }
      Pending p;
      p.blob.name = kv["name"];
      p.blob.shape = parse_shape(kv["shape"]);
      p.blob.dtype = parse_dtype(kv["dtype"]);
      p.blob.tag = kv["tag"];
      p.blob.frozen = kv["frozen"] == "1";
      try {
        p.offset = std::stoull(kv["offset"]);
        p.nbytes = std::stoull(kv["bytes"]);
      } catch (const std::exception&) {
        throw CheckpointError("malformed tensor record: " + line);
      }
      if (p.nbytes != shape_numel(p.blob.shape) * dtype_size(p.blob.dtype)) {
        throw CheckpointError("tensor '" + p.blob.name + "' byte count does not match shape");
      }
      pending.push_back(std::move(p));
    } else if (!kind.empty()) {
      throw CheckpointError("unknown manifest record '" + kind + "'");
    }
  }
  if (!saw_data) throw CheckpointError("'" + path.string() + "' has no data section");
  const auto data_start = in.tellg();
  for (auto& p : pending) {
    p.blob.bytes.resize(p.nbytes);
    in.seekg(data_start + static_cast<std::streamoff>(p.offset));
    in.read(reinterpret_cast<char*>(p.blob.bytes.data()), static_cast<std::streamsize>(p.nbytes));
    if (!in || static_cast<std::size_t>(in.gcount()) != p.nbytes) {
      throw CheckpointError("'" + path.string() + "' is truncated at tensor '" + p.blob.name + "'");
    }
    c.blobs.push_back(std::move(p.blob));
  }
  return c;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = temp_path_for(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out << text;
    if (!out) throw std::runtime_error("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace mtu::io
