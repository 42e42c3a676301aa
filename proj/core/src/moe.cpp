#include "mtu/moe.hpp"

#include <cmath>
#include <string>

#include "mtu/errors.hpp"
#include "mtu/ops.hpp"
#include "mtu/rng.hpp"

namespace mtu::moe {

template <class T>
Tensor<T> ffn_forward(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2,
                      const Tensor<T>& b2) {
  return ops::linear(ops::gelu(ops::linear(x, w1, b1)), w2, b2);
}

namespace {

template <class T>
void check_ffn(const FfnWeights<T>& f) {
  if (f.w1.size() != f.hidden * f.d_model || f.b1.size() != f.hidden || f.w2.size() != f.d_model * f.hidden ||
      f.b2.size() != f.d_model) {
    throw ShapeError("ffn weights inconsistent with d_model " + std::to_string(f.d_model) + ", hidden " +
                     std::to_string(f.hidden));
  }
}

// Hidden slice [lo, lo + h) of a dense FFN with the second layer scaled by `gain`.
template <class T>
FfnWeights<T> slice_ffn(const FfnWeights<T>& dense, std::size_t lo, std::size_t h, T gain) {
  const auto d = dense.d_model, hd = dense.hidden;
  FfnWeights<T> e{d, h, {}, {}, {}, dense.b2};
  e.w1.assign(dense.w1.begin() + static_cast<std::ptrdiff_t>(lo * d),
              dense.w1.begin() + static_cast<std::ptrdiff_t>((lo + h) * d));
  e.b1.assign(dense.b1.begin() + static_cast<std::ptrdiff_t>(lo), dense.b1.begin() + static_cast<std::ptrdiff_t>(lo + h));
  e.w2.resize(d * h);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t j = 0; j < h; ++j) e.w2[r * h + j] = dense.w2[r * hd + lo + j] * gain;
  return e;
}

}  // namespace

template <class T>
std::vector<FfnWeights<T>> shard_ffn(const FfnWeights<T>& dense, std::size_t n) {
  check_ffn(dense);
  if (n == 0 || dense.hidden % n != 0) {
    throw ConfigError("cannot shard FFN of width " + std::to_string(dense.hidden) + " into " + std::to_string(n) +
                      " experts: " + std::to_string(n) + " does not divide " + std::to_string(dense.hidden));
  }
  const auto h = dense.hidden / n;
  std::vector<FfnWeights<T>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(slice_ffn(dense, i * h, h, static_cast<T>(n)));
  return out;
}

template <class T>
std::vector<FfnWeights<T>> shard_ffn_replicated(const FfnWeights<T>& dense, std::size_t shards, std::size_t experts) {
  if (shards == 0 || experts % shards != 0) {
    throw ConfigError("expert count " + std::to_string(experts) + " is not a multiple of the shard count " +
                      std::to_string(shards));
  }
  const auto base = shard_ffn(dense, shards);
  std::vector<FfnWeights<T>> out;
  out.reserve(experts);
  for (std::size_t i = 0; i < experts; ++i) out.push_back(base[i % shards]);
  return out;
}

template <class T>
MoEFfnLayer<T> MoEFfnLayer<T>::view(const Denoiser<T>& model, std::size_t layer) {
  const auto& spec = model.spec();
  if (!spec.is_mtu()) throw ConfigError("model has no expert layers");
  if (layer >= spec.denoiser.num_blocks) {
    throw std::out_of_range("layer " + std::to_string(layer) + " outside model depth " +
                            std::to_string(spec.denoiser.num_blocks));
  }
  const auto& p = model.params();
  MoEFfnLayer out;
  out.layer = layer;
  for (std::size_t i = 0; i < spec.moe->num_experts; ++i) {
    out.experts.push_back({p.tensor(names::expert(layer, i, "w1.weight")), p.tensor(names::expert(layer, i, "w1.bias")),
                           p.tensor(names::expert(layer, i, "w2.weight")), p.tensor(names::expert(layer, i, "w2.bias"))});
  }
  out.router = {p.tensor(names::router(layer, "w1.weight")), p.tensor(names::router(layer, "w1.bias")),
                p.tensor(names::router(layer, "w2.weight")), p.tensor(names::router(layer, "w2.bias"))};
  for (auto task : spec.tasks) {
    out.task_norms.emplace(task, std::pair{p.tensor(names::ffn_norm(layer, task, "weight")),
                                           p.tensor(names::ffn_norm(layer, task, "bias"))});
  }
  return out;
}

template <class T>
Tensor<T> route(const Tensor<T>& task_embedding, const RouterParams<T>& router, std::optional<std::size_t> top_k) {
  if (task_embedding.rank() != 1 || task_embedding.dim(0) != router.w1.dim(1)) {
    throw ShapeError("task embedding " + shape_str(task_embedding.shape()) + " does not match router input " +
                     shape_str(router.w1.shape()));
  }
  const auto h = ops::relu(ops::linear(task_embedding, router.w1, router.b1));
  const auto logits = ops::linear(h, router.w2, router.b2);
  if (top_k && *top_k > logits.dim(0)) {
    throw ConfigError("top_k " + std::to_string(*top_k) + " exceeds expert count " + std::to_string(logits.dim(0)));
  }
  return ops::route_weights(logits, top_k);
}

template <class T>
Tensor<T> moe_ffn_forward(const Tensor<T>& x, const MoEFfnLayer<T>& layer, TaskId task, const Tensor<T>& weights) {
  const auto norm = layer.task_norms.find(task);
  if (norm == layer.task_norms.end()) {
    std::vector<TaskId> known;
    for (const auto& [t, _] : layer.task_norms) known.push_back(t);
    throw DataError("layer " + std::to_string(layer.layer) + " has no entry for task " + std::string(task_name(task)) +
                    " (registered: " + join_tasks(known) + ")");
  }
  if (weights.rank() != 1 || weights.dim(0) != layer.experts.size()) {
    throw ShapeError("routing weights " + shape_str(weights.shape()) + " for " + std::to_string(layer.experts.size()) +
                     " experts");
  }
  const auto h = ops::layer_norm(x, norm->second.first, norm->second.second);
  std::vector<Tensor<T>> outs(layer.experts.size());
  for (std::size_t i = 0; i < outs.size(); ++i) {
    if (weights.data()[i] == T(0)) continue;
    const auto& e = layer.experts[i];
    outs[i] = ffn_forward(h, e.w1, e.b1, e.w2, e.b2);
  }
  return ops::weighted_sum(outs, weights);
}

template <class T>
TaskWeightCache<T> TaskWeightCache<T>::build(const Denoiser<T>& model) {
  TaskWeightCache cache;
  cache.refresh(model);
  return cache;
}

template <class T>
std::size_t TaskWeightCache<T>::refresh(const Denoiser<T>& model) {
  const auto& spec = model.spec();
  if (!spec.is_mtu()) throw ConfigError("task weights need an upcycled model");
  std::size_t changed = 0;
  std::map<std::pair<TaskId, std::size_t>, std::vector<T>> fresh;
  for (std::size_t l = 0; l < spec.denoiser.num_blocks; ++l) {
    const auto layer = MoEFfnLayer<T>::view(model, l);
    for (auto task : spec.tasks) {
      const auto w = route(model.params().tensor(names::task_embedding(task)), layer.router, spec.moe->top_k);
      std::vector<T> v(w.data().begin(), w.data().end());
      const auto old = entries_.find({task, l});
      if (old == entries_.end() || old->second != v) ++changed;
      fresh.emplace(std::pair{task, l}, std::move(v));
    }
  }
  entries_ = std::move(fresh);
  return changed;
}

template <class T>
std::span<const T> TaskWeightCache<T>::weights(TaskId task, std::size_t layer) const {
  const auto it = entries_.find({task, layer});
  if (it == entries_.end()) {
    throw DataError("no cached task weights for task " + std::string(task_name(task)) + " at layer " +
                    std::to_string(layer));
  }
  return it->second;
}

template <class T>
Tensor<T> TaskWeightCache<T>::tensor(TaskId task, std::size_t layer) const {
  const auto w = weights(task, layer);
  return Tensor<T>::constant({w.size()}, std::vector<T>(w.begin(), w.end()));
}

template <class T>
void TaskWeightCache<T>::set(TaskId task, std::size_t layer, std::vector<T> w) {
  const auto it = entries_.find({task, layer});
  if (it == entries_.end()) throw DataError("no cache slot for task " + std::string(task_name(task)));
  if (w.size() != it->second.size()) throw ShapeError("task weight vector has the wrong length");
  it->second = std::move(w);
}

bool is_task_parameter(std::string_view name) {
  auto has = [name](std::string_view s) { return name.find(s) != std::string_view::npos; };
  return name.starts_with("input_conv.") || name.starts_with("task_embed.") || has(".ffn.expert") ||
         has(".router.") || has(".ffn_norm.");
}

template <class T>
FfnWeights<T> dense_ffn(const Denoiser<T>& dense, std::size_t layer) {
  const auto& p = dense.params();
  auto vec = [&](std::string_view leaf) {
    const auto d = p.tensor(names::block(layer, leaf)).data();
    return std::vector<T>(d.begin(), d.end());
  };
  const auto& cfg = dense.config();
  return {cfg.d_model, p.tensor(names::block(layer, "ffn.w1.weight")).dim(0), vec("ffn.w1.weight"),
          vec("ffn.w1.bias"), vec("ffn.w2.weight"), vec("ffn.w2.bias")};
}

namespace {

bool replaced_by_upcycle(std::string_view name) {
  return name.starts_with("input_conv.") || name.find(".norm_ffn.") != std::string_view::npos ||
         name.find(".ffn.w") != std::string_view::npos;
}

template <class T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

template <class T>
Denoiser<T> upcycle(const Denoiser<T>& dense, const std::vector<TaskId>& tasks, const MoEConfig& cfg,
                    std::uint64_t seed) {
  if (dense.spec().is_mtu()) throw ConfigError("upcycle expects a dense model");
  if (tasks.empty()) throw ConfigError("upcycle needs at least one task");
  const auto& dc = dense.config();
  ModelSpec spec{dc, tasks, cfg};
  spec.validate();

  const auto& src = dense.params();
  const auto& w_in = src.tensor(names::input_conv(std::nullopt, "weight"));
  if (w_in.dim(1) != dc.channels) {
    throw ConfigError("upcycle expects a text-to-image model with " + std::to_string(dc.channels) +
                      " input channels, got " + std::to_string(w_in.dim(1)));
  }

  ParamTree<T> tree;
  for (const auto& [name, e] : src) {
    if (replaced_by_upcycle(name)) continue;
    tree.add(name, e.value.shape(), values(e.value), e.tag, true);
  }

  const auto stem = w_in.dim(0), c = dc.channels;
  for (auto task : tasks) {
    const auto cin = spec.input_channels(task);
    std::vector<T> w(stem * cin * 9, T(0));
    for (std::size_t o = 0; o < stem; ++o)
      for (std::size_t k = 0; k < c * 9; ++k) w[(o * cin) * 9 + k] = w_in.data()[(o * c) * 9 + k];
    tree.add(names::input_conv(task, "weight"), {stem, cin, 3, 3}, std::move(w), Component::kInputConv);
    tree.add(names::input_conv(task, "bias"), {stem}, values(src.tensor(names::input_conv(std::nullopt, "bias"))),
             Component::kInputConv);
  }

  Rng rng(mix_seed(seed, {0x0C1E}));
  const auto n = cfg.num_experts, rh = cfg.router_width(), dt = cfg.d_task, d = dc.d_model;
  for (std::size_t l = 0; l < dc.num_blocks; ++l) {
    for (auto task : tasks) {
      tree.add(names::ffn_norm(l, task, "weight"), {d}, values(src.tensor(names::block(l, "norm_ffn.weight"))),
               Component::kNorm);
      tree.add(names::ffn_norm(l, task, "bias"), {d}, values(src.tensor(names::block(l, "norm_ffn.bias"))),
               Component::kNorm);
    }
    const auto experts = shard_ffn_replicated(dense_ffn(dense, l), cfg.granularity(dc.d_ffn), n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = experts[i];
      tree.add(names::expert(l, i, "w1.weight"), {e.hidden, d}, e.w1, Component::kFfn);
      tree.add(names::expert(l, i, "w1.bias"), {e.hidden}, e.b1, Component::kFfn);
      tree.add(names::expert(l, i, "w2.weight"), {d, e.hidden}, e.w2, Component::kFfn);
      tree.add(names::expert(l, i, "w2.bias"), {d}, e.b2, Component::kFfn);
    }
    tree.add(names::router(l, "w1.weight"), {rh, dt}, normal_vector<T>(rng, rh * dt, 1.0 / std::sqrt(double(dt))),
             Component::kRouter);
    tree.add(names::router(l, "w1.bias"), {rh}, std::vector<T>(rh, T(0)), Component::kRouter);
    tree.add(names::router(l, "w2.weight"), {n, rh}, std::vector<T>(n * rh, T(0)), Component::kRouter);
    tree.add(names::router(l, "w2.bias"), {n}, std::vector<T>(n, T(0)), Component::kRouter);
  }
  for (auto task : tasks) {
    tree.add(names::task_embedding(task), {dt}, normal_vector<T>(rng, dt, 1.0), Component::kRouter);
  }
  return Denoiser<T>(std::move(spec), std::move(tree));
}

template <class T>
Tensor<T> mtu_loss(const Denoiser<T>& model, const std::map<TaskId, ConditioningBatch<T>>& batches,
                   const NoiseSchedule& schedule) {
  const auto& tasks = model.spec().tasks;
  for (const auto& [task, _] : batches) {
    if (!model.spec().supports(task)) {
      throw DataError("batch for unregistered task " + std::string(task_name(task)) + " (registered: " +
                      join_tasks(tasks) + ")");
    }
  }
  Tensor<T> total;
  for (auto task : tasks) {
    const auto it = batches.find(task);
    if (it == batches.end()) throw DataError("missing batch for task " + std::string(task_name(task)));
    if (it->second.task != task) throw DataError("batch keyed " + std::string(task_name(task)) + " has another task");
    auto loss = diffusion_loss(model, it->second, schedule);
    total = total.defined() ? ops::add(total, loss) : loss;
  }
  return total;
}

#define MTU_INSTANTIATE_MOE(T)                                                                                     \
  template Tensor<T> ffn_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                 const Tensor<T>&);                                                                \
  template std::vector<FfnWeights<T>> shard_ffn(const FfnWeights<T>&, std::size_t);                                \
  template std::vector<FfnWeights<T>> shard_ffn_replicated(const FfnWeights<T>&, std::size_t, std::size_t);        \
  template struct MoEFfnLayer<T>;                                                                                  \
  template Tensor<T> route(const Tensor<T>&, const RouterParams<T>&, std::optional<std::size_t>);                  \
  template Tensor<T> moe_ffn_forward(const Tensor<T>&, const MoEFfnLayer<T>&, TaskId, const Tensor<T>&);           \
  template class TaskWeightCache<T>;                                                                               \
  template FfnWeights<T> dense_ffn(const Denoiser<T>&, std::size_t);                                               \
  template Denoiser<T> upcycle(const Denoiser<T>&, const std::vector<TaskId>&, const MoEConfig&, std::uint64_t);   \
  template Tensor<T> mtu_loss(const Denoiser<T>&, const std::map<TaskId, ConditioningBatch<T>>&, const NoiseSchedule&);

MTU_INSTANTIATE_MOE(float)
MTU_INSTANTIATE_MOE(double)

}  // namespace mtu::moe
