#include "cli/app.hpp"

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <sstream>

#include "cli/commands.hpp"
#include "mtu/errors.hpp"

namespace mtu::cli {

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task upcycling of a toy diffusion denoiser"};
  app.require_subcommand(1);
  app.fallthrough();

  std::filesystem::path config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  app.add_option("--config", config_file, "INI run configuration");
  app.add_option("--set", overrides, "Override a config key: section.key=value (repeatable)");
  app.add_option("--seed", seed, "Run seed (run.seed)");
  app.add_option("--out", out_dir, "Output directory (run.out)");

  Paths paths;
  Choices choices;
  std::string task_name_arg;
  std::string experts_arg, topk_arg;

  auto add_ckpt = [&](CLI::App* s, const char* help) { s->add_option("--ckpt", paths.ckpt, help); };
  auto add_task = [&](CLI::App* s, bool required) {
    auto* o = s->add_option("--task", task_name_arg, "Task: T2I, IE, SR or IP");
    if (required) o->required();
  };

  std::map<std::string, std::function<void(const Context&)>> handlers;
  auto sub = [&](const char* name, const char* help, std::function<void(const Context&)> fn) {
    handlers[name] = std::move(fn);
    return app.add_subcommand(name, help);
  };

  sub("gen-data", "Write the synthetic datasets to <out>/data", [](const Context& c) { cmd_gen_data(c); });

  auto* pretrain = sub("pretrain", "Train a dense text-to-image denoiser",
                       [&](const Context& c) { cmd_pretrain(c, paths); });
  pretrain->add_option("--resume", paths.resume, "Continue from this checkpoint and its optimizer state");

  auto* finetune = sub("finetune", "Fine-tune every parameter of a pretrained model on one image task",
                       [&](const Context& c) { cmd_finetune(c, paths, choices); });
  add_ckpt(finetune, "Pretrained dense checkpoint");
  add_task(finetune, true);
  finetune->add_option("--resume", paths.resume, "Continue from this checkpoint and its optimizer state");

  auto* component = sub("component-ft", "Fine-tune one component class (SA, CA or FFN) on one image task",
                        [&](const Context& c) { cmd_component_ft(c, paths, choices); });
  add_ckpt(component, "Pretrained dense checkpoint");
  add_task(component, true);
  component->add_option("--component", choices.component, "SA, CA or FFN")->required();
  component->add_option("--resume", paths.resume, "Continue from this checkpoint and its optimizer state");

  auto* analyze = sub("analyze", "Per-layer deviation of fine-tuned models from the pretrained one",
                      [&](const Context& c) { cmd_analyze(c, paths, choices); });
  analyze->add_option("--pre", paths.pre, "Pretrained dense checkpoint")->required();
  analyze->add_option("--fine", paths.fine, "Fine-tuned checkpoint (repeatable)")->required();
  analyze->add_flag("--individual", choices.individual, "Rank SA-Q..CA-O separately instead of pooling");

  auto* upcycle = sub("upcycle", "Convert a dense model into a multi-task model (tasks.list, [moe])",
                      [&](const Context& c) { cmd_upcycle(c, paths); });
  add_ckpt(upcycle, "Pretrained dense checkpoint");

  auto* train_mtu = sub("train-mtu", "Train the task-specific parameters of an upcycled model",
                        [&](const Context& c) { cmd_train_mtu(c, paths); });
  add_ckpt(train_mtu, "Upcycled checkpoint");
  train_mtu->add_option("--resume", paths.resume, "Continue from this checkpoint and its optimizer state");

  auto* sample_cmd = sub("sample", "Generate images", [&](const Context& c) { cmd_sample(c, paths, choices); });
  add_ckpt(sample_cmd, "Checkpoint");
  add_task(sample_cmd, false);
  sample_cmd->add_option("--prompt", choices.prompt, "Prompt text (default: the dataset sample's prompt)");
  sample_cmd->add_option("--cond", paths.cond, "Condition image, binary PPM");
  sample_cmd->add_option("--index", choices.index, "Dataset sample supplying missing prompt/condition");

  auto* evaluate = sub("evaluate", "Sample a split and score it", [&](const Context& c) {
    cmd_evaluate(c, paths, choices);
  });
  add_ckpt(evaluate, "Checkpoint");
  add_task(evaluate, false);

  auto* flops = sub("flops", "Parameter and FLOP accounting", [&](const Context& c) { cmd_flops(c, paths, choices); });
  add_ckpt(flops, "Checkpoint");
  add_task(flops, false);

  auto* ablate = sub("ablate-experts", "Upcycle and train over expert counts and top-k",
                     [&](const Context& c) { cmd_ablate_experts(c, paths, choices); });
  add_ckpt(ablate, "Pretrained dense checkpoint");
  ablate->add_option("--experts", experts_arg, "Comma-separated expert counts");
  ablate->add_option("--top-k", topk_arg, "Comma-separated top-k values; 0 = all experts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (seed) overrides.push_back("run.seed=" + std::to_string(*seed));
    if (out_dir) overrides.push_back("run.out=" + *out_dir);
    Context ctx{load_config(config_file, overrides), app.get_subcommands().front()->get_name(), &out};
    if (!task_name_arg.empty()) {
      try {
        choices.task = parse_task(task_name_arg);
      } catch (const std::exception& e) {
        throw ConfigError(e.what());
      }
    }
    auto parse_list = [](const std::string& csv, const char* flag) {
      std::vector<std::size_t> v;
      std::stringstream ss(csv);
      for (std::string item; std::getline(ss, item, ',');) {
        try {
          std::size_t pos = 0;
          v.push_back(std::stoul(item, &pos));
          if (pos != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
          throw ConfigError(std::string(flag) + ": '" + item + "' is not a count");
        }
      }
      return v;
    };
    choices.experts = parse_list(experts_arg, "--experts");
    choices.top_k = parse_list(topk_arg, "--top-k");
    handlers.at(ctx.command)(ctx);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace mtu::cli
