#pragma once

// Run configuration for the `mtu` tool: an INI file with one section per
// concern, overridable key by key from the command line.
//
//   [run]    seed, out
//   [model]  DenoiserConfig fields
//   [moe]    num_experts, top_k (0 = all), d_task, router_hidden, expert_width
//   [train]  steps, batch_size, lr, beta1, beta2, eps, weight_decay, cond_dropout, log_every
//   [data]   dir (empty = generate in memory), seed, train, val, test
//   [tasks]  list
//   [sample] steps, text_scale, image_scale, count
//   [eval]   split, count, steps, batch_size

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtu/data.hpp"
#include "mtu/denoiser.hpp"
#include "mtu/diffusion.hpp"
#include "mtu/train.hpp"

namespace mtu::cli {

struct SampleSettings {
  std::size_t steps = 50;
  double text_scale = 1.0;
  double image_scale = 1.0;
  std::size_t count = 4;

  bool operator==(const SampleSettings&) const = default;
};

struct EvalSettings {
  data::Split split = data::Split::kTest;
  std::size_t count = 0;  // 0 = whole split
  std::size_t steps = 50;
  std::size_t batch_size = 64;

  bool operator==(const EvalSettings&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/default";
  DenoiserConfig model;
  MoEConfig moe;
  train::TrainConfig train;
  /// Per-step lines go to the log file always and to stdout every `log_every` steps.
  std::size_t log_every = 50;
  std::filesystem::path data_dir;
  std::uint64_t data_seed = 1;
  data::SplitSizes sizes;
  std::vector<TaskId> tasks{TaskId::kT2I, TaskId::kIE, TaskId::kSR, TaskId::kIP};
  SampleSettings sample;
  EvalSettings eval;

  bool operator==(const RunConfig&) const = default;
};

/// Defaults, then the file (if any), then `section.key=value` overrides in
/// order. Throws ConfigError on unknown keys, malformed values or an invalid
/// model/MoE combination.
RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

/// Applies one `section.key=value` override.
void apply_override(RunConfig& cfg, const std::string& assignment);

/// INI text that load_config reads back to an equal RunConfig.
std::string to_ini(const RunConfig& cfg);

}  // namespace mtu::cli
