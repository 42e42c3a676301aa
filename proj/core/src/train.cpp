#include "mtu/train.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

#include "mtu/errors.hpp"
#include "mtu/rng.hpp"

namespace mtu::train {

namespace {

template <class T>
ConditioningBatch<T> assemble(const data::Dataset& ds, const std::vector<std::size_t>& idx, Rng& rng,
                              const NoiseSchedule& schedule, double dropout) {
  const auto n = idx.size();
  const auto per = data::kChannels * data::kImageSize * data::kImageSize;
  const Shape shape{n, data::kChannels, data::kImageSize, data::kImageSize};
  const bool has_image = task_has_image(ds.task);
  std::uniform_int_distribution<int> tdist(1, static_cast<int>(schedule.timesteps()));
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  std::vector<T> z0(n * per), cond(has_image ? n * per : 0);
  TokenBatch text{n, data::kTextLen, {}};
  std::vector<int> t(n);
  for (std::size_t b = 0; b < n; ++b) {
    const auto& s = ds.samples.at(idx[b]);
    std::copy(s.target.begin(), s.target.end(), z0.begin() + static_cast<std::ptrdiff_t>(b * per));
    t[b] = tdist(rng);
    const bool drop_text = dropout > 0 && coin(rng) < dropout;
    const bool drop_image = dropout > 0 && coin(rng) < dropout;
    if (drop_text) {
      text.ids.insert(text.ids.end(), data::kTextLen, data::kPad);
    } else {
      text.ids.insert(text.ids.end(), s.tokens.begin(), s.tokens.end());
    }
    if (has_image && !drop_image) {
      std::copy(s.cond->begin(), s.cond->end(), cond.begin() + static_cast<std::ptrdiff_t>(b * per));
    }
  }
  ConditioningBatch<T> out;
  out.task = ds.task;
  out.z0 = Tensor<T>::constant(shape, std::move(z0));
  out.text = std::move(text);
  if (has_image) out.cond = Tensor<T>::constant(shape, std::move(cond));
  out.t = std::move(t);
  out.eps = Tensor<T>::constant(shape, normal_vector<T>(rng, n * per));
  return out;
}

}  // namespace

template <class T>
ConditioningBatch<T> make_batch(const data::Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                                const NoiseSchedule& schedule, double cond_dropout) {
  if (ds.samples.empty()) throw DataError("dataset is empty");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, ds.samples.size() - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = pick(rng);
  return assemble<T>(ds, idx, rng, schedule, cond_dropout);
}

template <class T>
ConditioningBatch<T> fixed_batch(const data::Dataset& ds, std::size_t first, std::size_t count, std::uint64_t seed,
                                 const NoiseSchedule& schedule) {
  if (count == 0 || first + count > ds.samples.size()) throw DataError("fixed batch outside dataset");
  Rng rng(seed);
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  return assemble<T>(ds, idx, rng, schedule, 0.0);
}

std::string StepRecord::to_line() const {
  std::ostringstream os;
  char buf[64];
  os << "step=" << step;
  std::snprintf(buf, sizeof buf, " lr=%g wall=%.3f", lr, wall_seconds);
  os << buf;
  for (const auto& [task, l] : loss) {
    std::snprintf(buf, sizeof buf, " loss.%s=%.6f", std::string(task_name(task)).c_str(), l);
    os << buf;
  }
  return os.str();
}

template <class T>
void train(Denoiser<T>& model, AdamW<T>& optimizer, const std::map<TaskId, const data::Dataset*>& datasets,
           const NoiseSchedule& schedule, const TrainConfig& cfg, const std::function<void(const StepRecord&)>& on_step) {
  if (datasets.empty()) throw ConfigError("training needs at least one dataset");
  for (const auto& [task, ds] : datasets) {
    if (!model.spec().supports(task)) {
      throw DataError("model does not serve task " + std::string(task_name(task)) + " (registered: " +
                      join_tasks(model.spec().tasks) + ")");
    }
    if (!ds || ds->task != task) throw DataError("dataset for " + std::string(task_name(task)) + " holds another task");
  }
  if (model.spec().is_mtu()) {
    for (auto task : model.spec().tasks) {
      if (!datasets.contains(task)) throw DataError("missing dataset for task " + std::string(task_name(task)));
    }
  }
  const auto start = std::chrono::steady_clock::now();
  while (optimizer.steps() < static_cast<std::int64_t>(cfg.steps)) {
    const auto step = static_cast<std::uint64_t>(optimizer.steps());
    model.params().zero_grad();
    StepRecord rec;
    // One backward per task: the gradient of the summed objective, with only
    // one task's activations alive at a time.
    for (const auto& [task, ds] : datasets) {
      const auto batch = make_batch<T>(*ds, cfg.batch_size, mix_seed(cfg.seed, {step, static_cast<std::uint64_t>(task)}),
                                       schedule, cfg.cond_dropout);
      const auto loss = diffusion_loss(model, batch, schedule);
      rec.loss[task] = static_cast<double>(loss.item());
      backward(loss);
    }
    optimizer.step(model.params());
    rec.step = optimizer.steps();
    rec.lr = optimizer.config().lr;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (on_step) on_step(rec);
  }
  model.params().zero_grad();
}

template <class T>
double validation_loss(const Denoiser<T>& model, const data::Dataset& ds, const NoiseSchedule& schedule,
                       std::uint64_t seed, std::size_t batch_size, const moe::TaskWeightCache<T>* cache) {
  if (ds.samples.empty()) throw DataError("validation set is empty");
  double total = 0;
  std::size_t chunk = 0;
  for (std::size_t first = 0; first < ds.samples.size(); first += batch_size, ++chunk) {
    const auto count = std::min(batch_size, ds.samples.size() - first);
    const auto batch = fixed_batch<T>(ds, first, count, mix_seed(seed, {chunk}), schedule);
    total += static_cast<double>(diffusion_loss(model, batch, schedule, cache).item()) * static_cast<double>(count);
  }
  return total / static_cast<double>(ds.samples.size());
}

template <class T>
void freeze_except(ParamTree<T>& params, ComponentClass keep, bool keep_input_conv) {
  for (auto& [name, e] : params) {
    const bool train = component_class(e.tag) == keep || (keep_input_conv && e.tag == Component::kInputConv);
    params.set_frozen(name, !train);
  }
}

#define MTU_INSTANTIATE_TRAIN(T)                                                                                  \
  template ConditioningBatch<T> make_batch(const data::Dataset&, std::size_t, std::uint64_t, const NoiseSchedule&, \
                                           double);                                                               \
  template ConditioningBatch<T> fixed_batch(const data::Dataset&, std::size_t, std::size_t, std::uint64_t,         \
                                            const NoiseSchedule&);                                                \
  template void train(Denoiser<T>&, AdamW<T>&, const std::map<TaskId, const data::Dataset*>&, const NoiseSchedule&, \
                      const TrainConfig&, const std::function<void(const StepRecord&)>&);                         \
  template double validation_loss(const Denoiser<T>&, const data::Dataset&, const NoiseSchedule&, std::uint64_t,   \
                                  std::size_t, const moe::TaskWeightCache<T>*);                                   \
  template void freeze_except(ParamTree<T>&, ComponentClass, bool);

MTU_INSTANTIATE_TRAIN(float)
MTU_INSTANTIATE_TRAIN(double)

}  // namespace mtu::train
