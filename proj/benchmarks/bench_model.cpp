#include <benchmark/benchmark.h>

#include "mtu/data.hpp"
#include "mtu/diffusion.hpp"
#include "mtu/moe.hpp"
#include "mtu/train.hpp"

namespace mtu {
namespace {

const Denoiser<float>& pretrained() {
  static const auto m = Denoiser<float>::init_dense(DenoiserConfig{}, TaskId::kT2I, 0);
  return m;
}

const data::Dataset& dataset(TaskId task) {
  static std::map<TaskId, data::Dataset> cache;
  auto it = cache.find(task);
  if (it == cache.end()) it = cache.emplace(task, data::generate(task, data::Split::kTrain, 64, 0)).first;
  return it->second;
}

void BM_DenoiserForward(benchmark::State& state) {
  const auto& m = pretrained();
  const auto schedule = NoiseSchedule::linear(m.config().timesteps);
  const auto batch = train::fixed_batch<float>(dataset(TaskId::kT2I), 0, static_cast<std::size_t>(state.range(0)),
                                               1, schedule);
  for (auto _ : state) benchmark::DoNotOptimize(diffusion_loss(m, batch, schedule).item());
}
BENCHMARK(BM_DenoiserForward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

// One optimizer step per iteration; batch 16 per task.
void train_steps(benchmark::State& state, Denoiser<float> model, const std::vector<TaskId>& tasks) {
  const auto schedule = NoiseSchedule::linear(model.config().timesteps);
  std::map<TaskId, const data::Dataset*> ds;
  for (auto t : tasks) ds[t] = &dataset(t);
  AdamW<float> opt(AdamWConfig{});
  train::TrainConfig cfg;
  cfg.batch_size = 16;
  for (auto _ : state) {
    cfg.steps = static_cast<std::size_t>(opt.steps()) + 1;
    train::train(model, opt, ds, schedule, cfg);
  }
}

void BM_TrainStepDense(benchmark::State& state) {
  train_steps(state, Denoiser<float>(pretrained().spec(), pretrained().params().clone()), {TaskId::kT2I});
}
BENCHMARK(BM_TrainStepDense)->Unit(benchmark::kMillisecond);

void BM_TrainStepMtu(benchmark::State& state) {
  const std::vector<TaskId> tasks{TaskId::kT2I, TaskId::kIE, TaskId::kSR, TaskId::kIP};
  train_steps(state, moe::upcycle(pretrained(), tasks, MoEConfig{}, 0), tasks);
}
BENCHMARK(BM_TrainStepMtu)->Unit(benchmark::kMillisecond);

void BM_SampleDdim(benchmark::State& state) {
  const auto& m = pretrained();
  const auto schedule = NoiseSchedule::linear(m.config().timesteps);
  const auto text = train::fixed_batch<float>(dataset(TaskId::kT2I), 0, 1, 1, schedule).text;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        sample<float>(m, schedule, TaskId::kT2I, text, nullptr, static_cast<std::size_t>(state.range(0)), GuidanceConfig{}, 2).data().data());
  }
}
BENCHMARK(BM_SampleDdim)->Arg(10)->Arg(50)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace mtu
