#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "mtu/data.hpp"
#include "mtu/diffusion.hpp"
#include "mtu/optim.hpp"

namespace mtu::train {

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  AdamWConfig optim;
  /// Each condition is replaced by its null value independently with this probability.
  double cond_dropout = 0.1;

  bool operator==(const TrainConfig&) const = default;
};

/// Random batch: indices drawn with replacement, t ~ U[1, T], ε ~ N(0, I),
/// then condition dropout. Pure in `seed`.
template <class T>
ConditioningBatch<T> make_batch(const data::Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                                const NoiseSchedule& schedule, double cond_dropout);

/// Samples [first, first + count) without dropout; t and ε drawn from `seed`.
template <class T>
ConditioningBatch<T> fixed_batch(const data::Dataset& ds, std::size_t first, std::size_t count, std::uint64_t seed,
                                 const NoiseSchedule& schedule);

struct StepRecord {
  std::int64_t step = 0;  // 1-based, after the update
  std::map<TaskId, double> loss;
  double lr = 0.0;
  double wall_seconds = 0.0;

  /// `step=12 lr=0.001 wall=3.21 loss.T2I=0.41 ...`
  std::string to_line() const;
};

/// Runs optimizer steps until `optimizer.steps() == cfg.steps`. Each step draws
/// one batch per dataset from mix_seed(cfg.seed, {step, task}), so a run resumed
/// from a saved optimizer reproduces the uninterrupted one bitwise. Every task
/// in `datasets` must be served by the model; an MTU model needs one per task.
template <class T>
void train(Denoiser<T>& model, AdamW<T>& optimizer, const std::map<TaskId, const data::Dataset*>& datasets,
           const NoiseSchedule& schedule, const TrainConfig& cfg,
           const std::function<void(const StepRecord&)>& on_step = {});

/// Mean per-element diffusion loss over the whole dataset, with fixed t and ε.
template <class T>
double validation_loss(const Denoiser<T>& model, const data::Dataset& ds, const NoiseSchedule& schedule,
                       std::uint64_t seed, std::size_t batch_size = 64, const moe::TaskWeightCache<T>* cache = nullptr);

/// Freezes every parameter outside component class `keep`. The input
/// convolution of an image task stays trainable when `keep_input_conv` is set,
/// since its condition channels start at zero.
template <class T>
void freeze_except(ParamTree<T>& params, ComponentClass keep, bool keep_input_conv);

}  // namespace mtu::train
