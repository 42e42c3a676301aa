#include "cli/commands.hpp"

#include <algorithm>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "cli/image_io.hpp"
#include "mtu/checkpoint.hpp"
#include "mtu/container.hpp"
#include "mtu/deviation.hpp"
#include "mtu/errors.hpp"
#include "mtu/evaluate.hpp"
#include "mtu/metrics.hpp"
#include "mtu/moe.hpp"
#include "mtu/rng.hpp"

namespace mtu::cli {
namespace {

namespace fs = std::filesystem;

std::ostream& out(const Context& ctx) { return *ctx.out; }

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(8) << v;
  return os.str();
}

// Creates the output directory and records the resolved configuration there.
void begin(const Context& ctx) {
  fs::create_directories(ctx.cfg.out);
  io::write_text_atomic(ctx.cfg.out / "config.ini", to_ini(ctx.cfg));
}

void write_text(const Context& ctx, const std::string& name, const std::string& text) {
  io::write_text_atomic(ctx.cfg.out / name, text);
  out(ctx) << "wrote " << (ctx.cfg.out / name).string() << "\n";
}

void check_data_shape(const RunConfig& cfg) {
  const auto& m = cfg.model;
  if (m.image_size != data::kImageSize || m.channels != data::kChannels || m.text_len != data::kTextLen ||
      m.vocab != data::vocabulary().size()) {
    throw ConfigError("model.image_size/channels/text_len/vocab must match the toy data (" +
                      std::to_string(data::kImageSize) + "/" + std::to_string(data::kChannels) + "/" +
                      std::to_string(data::kTextLen) + "/" + std::to_string(data::vocabulary().size()) + ")");
  }
}

fs::path dataset_path(const fs::path& dir, TaskId task, data::Split split) {
  return dir / (std::string(task_name(task)) + "_" + std::string(data::split_name(split)) + ".mtu");
}

// From data.dir when set, otherwise generated in memory.
data::Dataset dataset(const RunConfig& cfg, TaskId task, data::Split split) {
  if (!cfg.data_dir.empty()) {
    const auto path = dataset_path(cfg.data_dir, task, split);
    if (!fs::exists(path)) throw DataError("dataset " + path.string() + " does not exist");
    auto ds = data::load_dataset(path);
    if (ds.task != task || ds.split != split) throw DataError(path.string() + " holds another task or split");
    return ds;
  }
  return data::generate(task, split, cfg.sizes.size(split), cfg.data_seed, cfg.sizes);
}

Checkpoint<float> load(const fs::path& path) {
  if (path.empty()) throw ConfigError("missing --ckpt");
  if (!fs::exists(path)) throw CheckpointError("checkpoint " + path.string() + " does not exist");
  return load_checkpoint<float>(path);
}

void require_task(const Denoiser<float>& m, TaskId task, const fs::path& path) {
  if (!m.spec().supports(task)) {
    throw CheckpointError(path.string() + " serves " + join_tasks(m.spec().tasks) + ", not " +
                          std::string(task_name(task)));
  }
}

TaskId require_choice(const std::optional<TaskId>& task) {
  if (!task) throw ConfigError("missing --task");
  return *task;
}

std::map<std::string, std::string> run_meta(const Context& ctx) {
  return {{"run.command", ctx.command}, {"run.seed", std::to_string(ctx.cfg.seed)}};
}

NoiseSchedule schedule_for(const Denoiser<float>& m) { return NoiseSchedule::linear(m.config().timesteps); }

// Trains to cfg.train.steps, logging every step to train_log.txt and every
// log_every steps to the console.
void run_training(const Context& ctx, Denoiser<float>& model, AdamW<float>& opt, const std::vector<TaskId>& tasks) {
  std::map<TaskId, data::Dataset> sets;
  std::map<TaskId, const data::Dataset*> ptrs;
  for (auto t : tasks) ptrs[t] = &sets.emplace(t, dataset(ctx.cfg, t, data::Split::kTrain)).first->second;
  auto tcfg = ctx.cfg.train;
  tcfg.seed = ctx.cfg.seed;
  std::string log;
  const auto start = opt.steps();
  train::train(model, opt, ptrs, schedule_for(model), tcfg, [&](const train::StepRecord& r) {
    const auto line = r.to_line();
    log += line + "\n";
    if (static_cast<std::size_t>(r.step) % ctx.cfg.log_every == 0 || static_cast<std::size_t>(r.step) == tcfg.steps) {
      out(ctx) << line << "\n" << std::flush;
    }
  });
  if (opt.steps() == start) out(ctx) << "already at step " << start << "; nothing to train\n";
  write_text(ctx, "train_log.txt", log);
}

// Validation diffusion loss per task, as `task,metric,value` rows.
std::string val_losses(const Context& ctx, const Denoiser<float>& model, const std::vector<TaskId>& tasks,
                       const std::string& metric) {
  const auto cache = model.spec().is_mtu() ? std::optional(moe::TaskWeightCache<float>::build(model)) : std::nullopt;
  std::string rows;
  for (auto t : tasks) {
    const auto val = dataset(ctx.cfg, t, data::Split::kVal);
    const double v = train::validation_loss(model, val, schedule_for(model), mix_seed(ctx.cfg.seed, {7}), 64,
                                            cache ? &*cache : nullptr);
    out(ctx) << metric << "." << task_name(t) << "=" << num(v) << "\n";
    rows += std::string(task_name(t)) + "," + metric + "," + num(v) + "\n";
  }
  return rows;
}

GuidanceConfig guidance(const RunConfig& cfg, TaskId task) {
  GuidanceConfig g;
  g.text_scale = cfg.sample.text_scale;
  if (task_has_image(task)) g.image_scale = cfg.sample.image_scale;
  return g;
}

eval::EvalConfig eval_config(const RunConfig& cfg, TaskId task) {
  eval::EvalConfig e;
  e.count = cfg.eval.count;
  e.steps = cfg.eval.steps;
  e.batch_size = cfg.eval.batch_size;
  e.guidance = guidance(cfg, task);
  e.seed = cfg.seed;
  return e;
}

std::string eval_rows(const eval::EvalReport& r) {
  const std::string t(task_name(r.task));
  std::string rows = t + ",mse," + num(r.mean_mse) + "\n" + t + ",psnr," + num(r.psnr) + "\n";
  rows += t + ",ii," + num(r.mean_ii) + "\n" + t + ",it," + num(r.mean_it) + "\n";
  rows += t + ",ii_degenerate," + std::to_string(r.ii_degenerate) + "\n";
  rows += t + ",it_degenerate," + std::to_string(r.it_degenerate) + "\n";
  return rows;
}

// Dense fine-tuning shared by finetune and component-ft.
void fine_tune(const Context& ctx, const Paths& paths, TaskId task, const std::optional<ComponentClass>& keep) {
  check_data_shape(ctx.cfg);
  std::optional<Denoiser<float>> model;
  AdamW<float> opt(ctx.cfg.train.optim);
  if (!paths.resume.empty()) {
    auto ck = load(paths.resume);
    require_task(ck.model, task, paths.resume);
    model.emplace(std::move(ck.model));
    if (ck.optimizer) opt = std::move(*ck.optimizer);
  } else {
    const auto pre = load(paths.ckpt);
    if (pre.model.spec().is_mtu() || !pre.model.spec().supports(TaskId::kT2I)) {
      throw CheckpointError(paths.ckpt.string() + " is not a dense text-to-image checkpoint");
    }
    model.emplace(retarget_dense(pre.model, task));
    if (keep) train::freeze_except(model->params(), *keep, true);
  }
  begin(ctx);
  std::string metrics = "task,metric,value\n" + val_losses(ctx, *model, {task}, "val_loss_start");
  run_training(ctx, *model, opt, {task});
  save_checkpoint(ctx.cfg.out / "model.ckpt", *model, &opt, run_meta(ctx));
  out(ctx) << "wrote " << (ctx.cfg.out / "model.ckpt").string() << "\n";
  metrics += val_losses(ctx, *model, {task}, "val_loss");
  if (keep) {
    const auto r = eval::evaluate(*model, schedule_for(*model), dataset(ctx.cfg, task, ctx.cfg.eval.split),
                                  eval_config(ctx.cfg, task));
    out(ctx) << r.summary() << "\n";
    metrics += eval_rows(r);
  }
  write_text(ctx, "metrics.csv", metrics);
}

std::string accounting_csv(const Denoiser<float>& m) {
  const auto cache = m.spec().is_mtu() ? std::optional(moe::TaskWeightCache<float>::build(m)) : std::nullopt;
  std::string csv = "task,kind,component,value\n";
  for (auto t : m.spec().tasks) {
    const auto r = metrics::account(m, t, cache ? &*cache : nullptr);
    const std::string tn(task_name(t));
    csv += tn + ",params,total," + std::to_string(r.total_params) + "\n";
    csv += tn + ",params,trainable," + std::to_string(r.trainable_params) + "\n";
    csv += tn + ",params,frozen," + std::to_string(r.frozen_params) + "\n";
    for (const auto& [c, v] : r.params_by_component) csv += tn + ",params," + c + "," + std::to_string(v) + "\n";
    csv += tn + ",flops,total," + std::to_string(r.total_flops) + "\n";
    for (const auto& [c, v] : r.flops_by_component) csv += tn + ",flops," + c + "," + std::to_string(v) + "\n";
    csv += tn + ",experts,active," + std::to_string(r.active_experts) + "\n";
  }
  return csv;
}

}  // namespace

void cmd_gen_data(const Context& ctx) {
  begin(ctx);
  const auto dir = ctx.cfg.out / "data";
  for (auto task : ctx.cfg.tasks) {
    for (auto split : {data::Split::kTrain, data::Split::kVal, data::Split::kTest}) {
      const auto ds = data::generate(task, split, ctx.cfg.sizes.size(split), ctx.cfg.data_seed, ctx.cfg.sizes);
      const auto path = dataset_path(dir, task, split);
      data::save_dataset(path, ds);
      out(ctx) << "wrote " << path.string() << " (" << ds.samples.size() << " samples)\n";
    }
  }
}

void cmd_pretrain(const Context& ctx, const Paths& paths) {
  check_data_shape(ctx.cfg);
  std::optional<Denoiser<float>> model;
  AdamW<float> opt(ctx.cfg.train.optim);
  if (!paths.resume.empty()) {
    auto ck = load(paths.resume);
    require_task(ck.model, TaskId::kT2I, paths.resume);
    model.emplace(std::move(ck.model));
    if (ck.optimizer) opt = std::move(*ck.optimizer);
  } else {
    model.emplace(Denoiser<float>::init_dense(ctx.cfg.model, TaskId::kT2I, ctx.cfg.seed));
  }
  begin(ctx);
  std::string metrics = "task,metric,value\n" + val_losses(ctx, *model, {TaskId::kT2I}, "val_loss_start");
  run_training(ctx, *model, opt, {TaskId::kT2I});
  save_checkpoint(ctx.cfg.out / "model.ckpt", *model, &opt, run_meta(ctx));
  out(ctx) << "wrote " << (ctx.cfg.out / "model.ckpt").string() << "\n";
  metrics += val_losses(ctx, *model, {TaskId::kT2I}, "val_loss");
  write_text(ctx, "metrics.csv", metrics);
}

void cmd_finetune(const Context& ctx, const Paths& paths, const Choices& choices) {
  const auto task = require_choice(choices.task);
  if (!task_has_image(task)) throw ConfigError("finetune targets an image-conditioned task (IE, SR or IP)");
  fine_tune(ctx, paths, task, std::nullopt);
}

void cmd_component_ft(const Context& ctx, const Paths& paths, const Choices& choices) {
  const auto task = require_choice(choices.task);
  if (!task_has_image(task)) throw ConfigError("component-ft targets an image-conditioned task (IE, SR or IP)");
  ComponentClass keep;
  try {
    keep = parse_component_class(choices.component);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  fine_tune(ctx, paths, task, keep);
}

void cmd_analyze(const Context& ctx, const Paths& paths, const Choices& choices) {
  if (paths.pre.empty() || paths.fine.empty()) throw ConfigError("analyze needs --pre and at least one --fine");
  const auto pre = load(paths.pre);
  const auto grouping = choices.individual ? analysis::Grouping::kIndividual : analysis::Grouping::kPooled;
  std::vector<analysis::DeviationReport> reports;
  for (const auto& f : paths.fine) {
    const auto fine = load(f);
    if (fine.model.spec().is_mtu() || fine.model.spec().tasks.size() != 1) {
      throw CheckpointError(f.string() + " is not a dense single-task checkpoint");
    }
    const auto task = fine.model.spec().tasks[0];
    const auto base = retarget_dense(pre.model, task);
    reports.push_back(analysis::deviation_report(task, fine.model.params(), base.params(), grouping));
  }
  begin(ctx);
  const auto table = analysis::rank_components(reports);
  out(ctx) << "layer,component";
  for (auto t : table.tasks) out(ctx) << ",phi." << task_name(t);
  out(ctx) << ",avg_rank\n";
  for (const auto& r : table.rows) {
    out(ctx) << r.layer << "," << r.component;
    for (auto t : table.tasks) out(ctx) << "," << num(r.phi.at(t));
    out(ctx) << "," << num(r.avg_rank) << "\n";
  }
  std::set<std::string> comps;
  for (const auto& r : table.rows) comps.insert(r.component);
  out(ctx) << "layers led (largest average deviation):";
  for (const auto& c : comps) out(ctx) << " " << c << "=" << table.layers_led_by(c);
  out(ctx) << " of " << table.layer_count() << "\n";
  const std::string stem = choices.individual ? "deviation_individual" : "deviation_pooled";
  write_text(ctx, stem + ".csv", analysis::to_csv(table));
  write_text(ctx, stem + "_ascending.csv", analysis::to_csv(table, true));
}

void cmd_upcycle(const Context& ctx, const Paths& paths) {
  const auto pre = load(paths.ckpt);
  if (pre.model.spec().is_mtu()) throw CheckpointError(paths.ckpt.string() + " is already upcycled");
  auto tasks = ctx.cfg.tasks;
  const auto mtu = moe::upcycle(pre.model, tasks, ctx.cfg.moe, ctx.cfg.seed);
  begin(ctx);
  save_checkpoint<float>(ctx.cfg.out / "model.ckpt", mtu, nullptr, run_meta(ctx));
  out(ctx) << "wrote " << (ctx.cfg.out / "model.ckpt").string() << "\n";
  const auto rd = metrics::account(pre.model, pre.model.spec().tasks[0]);
  const auto cache = moe::TaskWeightCache<float>::build(mtu);
  const auto rm = metrics::account(mtu, tasks[0], &cache);
  out(ctx) << "params dense=" << rd.total_params << " mtu=" << rm.total_params << " trainable=" << rm.trainable_params
           << " overhead=" << num(100.0 * (double(rm.total_params) - double(rd.total_params)) / double(rd.total_params))
           << "%\n";
  write_text(ctx, "flops.csv", accounting_csv(mtu));
}

void cmd_train_mtu(const Context& ctx, const Paths& paths) {
  check_data_shape(ctx.cfg);
  const auto& src = paths.resume.empty() ? paths.ckpt : paths.resume;
  auto ck = load(src);
  if (!ck.model.spec().is_mtu()) throw CheckpointError(src.string() + " is not an upcycled checkpoint");
  AdamW<float> opt(ctx.cfg.train.optim);
  if (!paths.resume.empty() && ck.optimizer) opt = std::move(*ck.optimizer);
  auto& model = ck.model;
  const auto tasks = model.spec().tasks;
  begin(ctx);
  std::string metrics = "task,metric,value\n" + val_losses(ctx, model, tasks, "val_loss_start");
  run_training(ctx, model, opt, tasks);
  save_checkpoint(ctx.cfg.out / "model.ckpt", model, &opt, run_meta(ctx));
  out(ctx) << "wrote " << (ctx.cfg.out / "model.ckpt").string() << "\n";
  metrics += val_losses(ctx, model, tasks, "val_loss");
  write_text(ctx, "metrics.csv", metrics);
  write_text(ctx, "router_weights.csv", analysis::export_router_distribution(model).to_csv());
}

void cmd_sample(const Context& ctx, const Paths& paths, const Choices& choices) {
  const auto ck = load(paths.ckpt);
  const auto& model = ck.model;
  const auto task = choices.task.value_or(model.spec().tasks[0]);
  require_task(model, task, paths.ckpt);
  const auto& c = model.config();
  const std::size_t n = ctx.cfg.sample.count;
  if (n == 0) throw ConfigError("sample.count must be positive");

  // Condition image and prompt: explicit flags, otherwise dataset sample `index`.
  std::optional<data::Sample> ref;
  if ((task_has_image(task) && paths.cond.empty()) || !choices.prompt) {
    check_data_shape(ctx.cfg);
    const auto split = ctx.cfg.eval.split;
    if (choices.index >= ctx.cfg.sizes.size(split)) throw DataError("--index outside the split");
    ref = data::generate_one(task, split, choices.index, ctx.cfg.data_seed, ctx.cfg.sizes);
  }
  std::vector<int> tokens;
  if (choices.prompt) {
    tokens = data::encode(*choices.prompt);
  } else {
    tokens = ref->tokens;
  }
  if (tokens.size() != c.text_len) throw DataError("prompt length does not match the model's text length");
  std::optional<data::Image> cond;
  if (task_has_image(task)) {
    cond = paths.cond.empty() ? *ref->cond : from_rgb(read_ppm(paths.cond));
    if (cond->size() != c.channels * c.image_size * c.image_size) {
      throw DataError("condition image is not " + std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
    }
  } else if (!paths.cond.empty()) {
    throw ConfigError("task " + std::string(task_name(task)) + " takes no condition image");
  }

  const auto text = TokenBatch::repeat(tokens, n);
  std::optional<Tensor<float>> cond_t;
  if (cond) {
    std::vector<float> rep;
    for (std::size_t i = 0; i < n; ++i) rep.insert(rep.end(), cond->begin(), cond->end());
    cond_t = Tensor<float>::constant({n, c.channels, c.image_size, c.image_size}, std::move(rep));
  }
  const auto cache = model.spec().is_mtu() ? std::optional(moe::TaskWeightCache<float>::build(model)) : std::nullopt;
  const auto x = sample(model, schedule_for(model), task, text, cond_t ? &*cond_t : nullptr, ctx.cfg.sample.steps,
                        guidance(ctx.cfg, task), ctx.cfg.seed, cache ? &*cache : nullptr);

  begin(ctx);
  const std::size_t per = c.channels * c.image_size * c.image_size;
  std::vector<RgbImage> tiles;
  if (cond) tiles.push_back(to_rgb(*cond, c.image_size));
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = x.data().subspan(i * per, per);
    const auto img = to_rgb(data::Image(d.begin(), d.end()), c.image_size);
    std::ostringstream name;
    name << "sample_" << std::setw(3) << std::setfill('0') << i << ".ppm";
    write_ppm(ctx.cfg.out / name.str(), img);
    tiles.push_back(img);
  }
  write_ppm(ctx.cfg.out / "grid.ppm", grid(tiles, tiles.size()));
  write_text(ctx, "prompt.txt", data::decode(tokens) + "\n");
  out(ctx) << "wrote " << n << " samples and grid.ppm for prompt '" << data::decode(tokens) << "'\n";
}

void cmd_evaluate(const Context& ctx, const Paths& paths, const Choices& choices) {
  check_data_shape(ctx.cfg);
  const auto ck = load(paths.ckpt);
  const auto& model = ck.model;
  const auto task = choices.task.value_or(model.spec().tasks[0]);
  require_task(model, task, paths.ckpt);
  const auto ds = dataset(ctx.cfg, task, ctx.cfg.eval.split);
  const auto cache = model.spec().is_mtu() ? std::optional(moe::TaskWeightCache<float>::build(model)) : std::nullopt;
  std::vector<data::Image> outputs;
  const auto r = eval::evaluate(model, schedule_for(model), ds, eval_config(ctx.cfg, task), &outputs,
                                cache ? &*cache : nullptr);
  begin(ctx);
  out(ctx) << r.summary() << "\n";
  std::string per = "index,mse,psnr,ii,ii_degenerate,it,it_degenerate\n";
  for (const auto& s : r.samples) {
    per += std::to_string(s.index) + "," + num(s.mse) + "," + num(s.psnr) + "," + num(s.ii.value) + "," +
           std::to_string(s.ii.degenerate) + "," + num(s.it.value) + "," + std::to_string(s.it.degenerate) + "\n";
  }
  write_text(ctx, "samples.csv", per);
  write_text(ctx, "metrics.csv", "task,metric,value\n" + eval_rows(r));
  // Up to 8 rows of condition | output | target.
  std::vector<RgbImage> tiles;
  const auto size = model.config().image_size;
  for (std::size_t i = 0; i < std::min<std::size_t>(8, outputs.size()); ++i) {
    const auto& s = ds.samples[i];
    tiles.push_back(to_rgb(s.cond ? *s.cond : data::Image(s.target.size(), 0.0f), size));
    tiles.push_back(to_rgb(outputs[i], size));
    tiles.push_back(to_rgb(s.target, size));
  }
  write_ppm(ctx.cfg.out / "grid.ppm", grid(tiles, 3));
}

void cmd_flops(const Context& ctx, const Paths& paths, const Choices& choices) {
  const auto ck = load(paths.ckpt);
  const auto& m = ck.model;
  if (choices.task) require_task(m, *choices.task, paths.ckpt);
  const auto cache = m.spec().is_mtu() ? std::optional(moe::TaskWeightCache<float>::build(m)) : std::nullopt;
  for (auto t : m.spec().tasks) {
    if (choices.task && t != *choices.task) continue;
    const auto r = metrics::account(m, t, cache ? &*cache : nullptr);
    out(ctx) << "task=" << task_name(t) << " params=" << r.total_params << " trainable=" << r.trainable_params
             << " flops=" << r.total_flops;
    for (const auto& [c, v] : r.flops_by_component) out(ctx) << " flops." << c << "=" << v;
    out(ctx) << " active_experts=" << r.active_experts << "\n";
  }
  begin(ctx);
  write_text(ctx, "flops.csv", accounting_csv(m));
}

void cmd_ablate_experts(const Context& ctx, const Paths& paths, const Choices& choices) {
  check_data_shape(ctx.cfg);
  const auto pre = load(paths.ckpt);
  if (pre.model.spec().is_mtu()) throw CheckpointError(paths.ckpt.string() + " is already upcycled");
  const auto experts = choices.experts.empty() ? std::vector<std::size_t>{ctx.cfg.moe.num_experts} : choices.experts;
  const auto top_ks = choices.top_k.empty() ? std::vector<std::size_t>{0} : choices.top_k;
  begin(ctx);
  std::string csv = "experts,top_k,task,val_loss,ffn_flops,total_params\n";
  for (auto n : experts) {
    for (auto k : top_ks) {
      if (k > n) continue;
      auto mcfg = ctx.cfg.moe;
      mcfg.num_experts = n;
      mcfg.top_k = k ? std::optional(k) : std::nullopt;
      mcfg.validate(pre.model.config().d_ffn);
      auto mtu = moe::upcycle(pre.model, ctx.cfg.tasks, mcfg, ctx.cfg.seed);
      AdamW<float> opt(ctx.cfg.train.optim);
      auto sub = ctx;
      sub.cfg.out = ctx.cfg.out / ("N" + std::to_string(n) + "_k" + std::to_string(k));
      fs::create_directories(sub.cfg.out);
      out(ctx) << "== experts=" << n << " top_k=" << (k ? std::to_string(k) : "all") << "\n";
      run_training(sub, mtu, opt, ctx.cfg.tasks);
      const auto cache = moe::TaskWeightCache<float>::build(mtu);
      for (auto t : ctx.cfg.tasks) {
        const auto val = dataset(ctx.cfg, t, data::Split::kVal);
        const double v =
            train::validation_loss(mtu, val, schedule_for(mtu), mix_seed(ctx.cfg.seed, {7}), 64, &cache);
        const auto r = metrics::account(mtu, t, &cache);
        csv += std::to_string(n) + "," + std::to_string(k) + "," + std::string(task_name(t)) + "," + num(v) + "," +
               std::to_string(r.flops_by_component.at("FFN")) + "," + std::to_string(r.total_params) + "\n";
        out(ctx) << "experts=" << n << " top_k=" << k << " task=" << task_name(t) << " val_loss=" << num(v)
                 << " ffn_flops=" << r.flops_by_component.at("FFN") << "\n";
      }
    }
  }
  write_text(ctx, "ablation.csv", csv);
}

}  // namespace mtu::cli
