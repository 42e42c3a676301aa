#pragma once

// Multi-task upcycling: sharded FFN experts, task-embedding routers,
// task-specific pre-expert layer norms and task-specific input convolutions.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mtu/denoiser.hpp"
#include "mtu/diffusion.hpp"

namespace mtu::moe {

/// Raw two-layer FFN weights: w1 [hidden, d_model], b1 [hidden], w2 [d_model, hidden], b2 [d_model].
template <class T>
struct FfnWeights {
  std::size_t d_model = 0;
  std::size_t hidden = 0;
  std::vector<T> w1, b1, w2, b2;

  std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
};

/// GELU two-layer MLP on the last axis.
template <class T>
Tensor<T> ffn_forward(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2,
                      const Tensor<T>& b2);

/// Splits a dense FFN into n experts: expert i takes hidden rows [i·h, (i+1)·h)
/// of w1/b1, the matching columns of w2 scaled by n, and a full copy of b2, so
/// Σ_i (1/n)·E_i(x) = FFN(x). Throws ConfigError when n ∤ hidden.
template <class T>
std::vector<FfnWeights<T>> shard_ffn(const FfnWeights<T>& dense, std::size_t n);

/// Over-complete variant for top-k ablations: `shards` slices, each copied into
/// experts/shards experts (expert i holds slice i mod shards, w2 scaled by shards).
template <class T>
std::vector<FfnWeights<T>> shard_ffn_replicated(const FfnWeights<T>& dense, std::size_t shards,
                                                std::size_t experts);

template <class T>
struct RouterParams {
  Tensor<T> w1, b1, w2, b2;  // d_task -> hidden (ReLU) -> N
};

template <class T>
struct ExpertParams {
  Tensor<T> w1, b1, w2, b2;
};

/// Read-only view of one upcycled FFN layer inside a model's ParamTree.
template <class T>
struct MoEFfnLayer {
  std::size_t layer = 0;
  std::vector<ExpertParams<T>> experts;
  RouterParams<T> router;
  std::map<TaskId, std::pair<Tensor<T>, Tensor<T>>> task_norms;  // scale, shift

  static MoEFfnLayer view(const Denoiser<T>& model, std::size_t layer);
};

/// w = softmax(g(e_τ)), restricted to the top_k largest entries when set.
template <class T>
Tensor<T> route(const Tensor<T>& task_embedding, const RouterParams<T>& router, std::optional<std::size_t> top_k);

/// Σ_i w_i·E_i(norm_τ(x)); experts with zero weight are not evaluated.
template <class T>
Tensor<T> moe_ffn_forward(const Tensor<T>& x, const MoEFfnLayer<T>& layer, TaskId task, const Tensor<T>& weights);

/// Per-(task, layer) routing weights, equal to route() evaluated on the current parameters.
template <class T>
class TaskWeightCache {
 public:
  static TaskWeightCache build(const Denoiser<T>& model);

  std::span<const T> weights(TaskId task, std::size_t layer) const;
  /// Constant tensor view of weights().
  Tensor<T> tensor(TaskId task, std::size_t layer) const;
  /// Recomputes every vector; returns how many changed.
  std::size_t refresh(const Denoiser<T>& model);
  const std::map<std::pair<TaskId, std::size_t>, std::vector<T>>& entries() const { return entries_; }
  /// Replaces one vector (analysis and tests); must have length N.
  void set(TaskId task, std::size_t layer, std::vector<T> w);

 private:
  std::map<std::pair<TaskId, std::size_t>, std::vector<T>> entries_;
};

template <class T>
TaskWeightCache<T> precompute_task_weights(const Denoiser<T>& model) {
  return TaskWeightCache<T>::build(model);
}

/// True for the parameters an MTU model trains: experts, routers, task norms,
/// task input convolutions and task embeddings.
bool is_task_parameter(std::string_view name);

/// Converts a dense T2I model into an MTU model. Shared parameters are copied
/// and frozen; FFNs are sharded into experts; each task gets a copy of the
/// pre-FFN norm and an input convolution (extra condition channels zeroed);
/// routers start with a zero output layer (uniform weights).
template <class T>
Denoiser<T> upcycle(const Denoiser<T>& dense, const std::vector<TaskId>& tasks, const MoEConfig& cfg,
                    std::uint64_t seed);

/// Σ_τ diffusion_loss(model, batch_τ); one batch per registered task.
template <class T>
Tensor<T> mtu_loss(const Denoiser<T>& model, const std::map<TaskId, ConditioningBatch<T>>& batches,
                   const NoiseSchedule& schedule);

/// Reads the dense FFN of block l from a dense model.
template <class T>
FfnWeights<T> dense_ffn(const Denoiser<T>& dense, std::size_t layer);

}  // namespace mtu::moe
