#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cli/run_config.hpp"

namespace mtu::cli {

struct Context {
  RunConfig cfg;
  std::string command;  // subcommand name, recorded in outputs
  std::ostream* out = nullptr;
};

struct Paths {
  std::filesystem::path ckpt;     // input checkpoint
  std::filesystem::path resume;   // checkpoint with optimizer state to continue from
  std::filesystem::path pre;      // pretrained reference for analyze
  std::vector<std::filesystem::path> fine;
  std::filesystem::path cond;     // condition image (PPM)
};

struct Choices {
  std::optional<TaskId> task;
  std::string component;
  std::optional<std::string> prompt;
  std::size_t index = 0;
  bool individual = false;
  std::vector<std::size_t> experts;
  std::vector<std::size_t> top_k;
};

void cmd_gen_data(const Context& ctx);
void cmd_pretrain(const Context& ctx, const Paths& paths);
void cmd_finetune(const Context& ctx, const Paths& paths, const Choices& choices);
void cmd_component_ft(const Context& ctx, const Paths& paths, const Choices& choices);
void cmd_analyze(const Context& ctx, const Paths& paths, const Choices& choices);
void cmd_upcycle(const Context& ctx, const Paths& paths);
void cmd_train_mtu(const Context& ctx, const Paths& paths);
void cmd_sample(const Context& ctx, const Paths& paths, const Choices& choices);
void cmd_evaluate(const Context& ctx, const Paths& paths, const Choices& choices);
void cmd_flops(const Context& ctx, const Paths& paths, const Choices& choices);
void cmd_ablate_experts(const Context& ctx, const Paths& paths, const Choices& choices);

}  // namespace mtu::cli
