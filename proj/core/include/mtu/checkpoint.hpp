#pragma once

// Model checkpoints on top of the MTUCKPT1 container. Parameters keep their
// names, tags and frozen flags; optimizer moments are stored as
// optim.m/<name> and optim.v/<name>.

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "mtu/denoiser.hpp"
#include "mtu/optim.hpp"

namespace mtu {

template <class T>
struct Checkpoint {
  Denoiser<T> model;
  std::optional<AdamW<T>> optimizer;
  /// Every manifest key, including the ones that rebuilt the model.
  std::map<std::string, std::string> meta;
};

/// Manifest keys describing `spec` (kind, model.*, tasks, moe.*).
std::map<std::string, std::string> spec_meta(const ModelSpec& spec);
/// Inverse of spec_meta; throws CheckpointError on missing or malformed keys.
ModelSpec spec_from_meta(const std::map<std::string, std::string>& meta);

/// Atomic write. `extra` keys are stored verbatim and must not collide with
/// the reserved ones.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const Denoiser<T>& model, const AdamW<T>* optimizer = nullptr,
                     const std::map<std::string, std::string>& extra = {});

/// Values are converted to T when the file holds the other precision.
template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace mtu
