#include "mtu/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "mtu/errors.hpp"
#include "mtu/moe.hpp"
#include "mtu/ops.hpp"
#include "mtu/rng.hpp"

namespace mtu {

template <class T>
void ConditioningBatch<T>::validate(std::size_t timesteps) const {
  if (!z0.defined() || !eps.defined()) throw DataError("batch lacks latents or noise");
  if (z0.shape() != eps.shape()) throw DataError("batch noise shape differs from latent shape");
  const auto b = z0.dim(0);
  if (t.size() != b || text.batch != b) throw DataError("batch size disagrees across fields");
  if (task_has_image(task) != cond.has_value()) {
    throw DataError("task " + std::string(task_name(task)) +
                    (task_has_image(task) ? " batch needs a condition image" : " batch must not carry an image"));
  }
  if (cond && cond->shape() != z0.shape()) throw DataError("condition image shape differs from latent shape");
  for (int ti : t) {
    if (ti < 1 || static_cast<std::size_t>(ti) > timesteps) {
      throw DataError("timestep " + std::to_string(ti) + " outside [1, " + std::to_string(timesteps) + "]");
    }
  }
}

template <class T>
Tensor<T> diffusion_loss(const Denoiser<T>& model, const ConditioningBatch<T>& batch, const NoiseSchedule& schedule,
                         const moe::TaskWeightCache<T>* cache) {
  batch.validate(schedule.timesteps());
  const auto z_t = forward_noise(batch.z0, batch.t, batch.eps, schedule);
  const auto eps_hat = model.predict(z_t, batch.cond ? &*batch.cond : nullptr, batch.text, batch.t, batch.task, cache);
  return ops::mse(eps_hat, batch.eps);
}

template <class T>
std::vector<T> combine_guidance(std::span<const T> e_uu, std::span<const T> e_iu, std::span<const T> e_it,
                                double image_scale, double text_scale) {
  if (e_uu.size() != e_iu.size() || e_uu.size() != e_it.size()) throw ShapeError("combine_guidance: size mismatch");
  const T si = static_cast<T>(image_scale), st = static_cast<T>(text_scale);
  std::vector<T> out(e_uu.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = e_uu[i] + si * (e_iu[i] - e_uu[i]) + st * (e_it[i] - e_iu[i]);
  }
  return out;
}

namespace {

template <class T>
Tensor<T> repeat_batch(const std::vector<const Tensor<T>*>& parts) {
  std::vector<Tensor<T>> ts;
  for (auto* p : parts) ts.push_back(*p);
  return ops::concat<T>(ts, 0);
}

TokenBatch stack_tokens(const std::vector<const TokenBatch*>& parts) {
  TokenBatch out{0, parts.front()->length, {}};
  for (auto* p : parts) {
    out.batch += p->batch;
    out.ids.insert(out.ids.end(), p->ids.begin(), p->ids.end());
  }
  return out;
}

template <class T>
std::span<const T> slice(const Tensor<T>& x, std::size_t part, std::size_t parts) {
  const auto n = x.numel() / parts;
  return x.data().subspan(part * n, n);
}

}  // namespace

template <class T>
Tensor<T> guided_noise(const Denoiser<T>& model, const Tensor<T>& z_t, int t, TaskId task, const TokenBatch& text,
                       const Tensor<T>* cond_image, const GuidanceConfig& guidance,
                       const moe::TaskWeightCache<T>* cache) {
  const bool has_image = task_has_image(task);
  if (!has_image && guidance.image_scale) {
    throw ConfigError("image guidance scale given for text-only task " + std::string(task_name(task)));
  }
  if (has_image != (cond_image != nullptr)) {
    throw DataError("task " + std::string(task_name(task)) + (has_image ? " needs" : " takes no") + " condition image");
  }
  const auto b = z_t.dim(0);
  const double s_t = guidance.text_scale;
  const double s_i = has_image ? guidance.image_scale.value_or(1.0) : 0.0;
  const std::vector<int> tt(b, t);
  const auto null_text = null_tokens(b, text.length);

  if (!has_image) {
    if (s_t == 1.0) return model.predict(z_t, nullptr, text, tt, task, cache);
    const std::vector<int> t2(2 * b, t);
    const auto out = model.predict(repeat_batch<T>({&z_t, &z_t}), nullptr, stack_tokens({&null_text, &text}), t2,
                                   task, cache);
    const auto e_u = slice(out, 0, 2), e_c = slice(out, 1, 2);
    return Tensor<T>::constant(z_t.shape(), combine_guidance<T>(e_u, e_u, e_c, 0.0, s_t));
  }

  if (s_t == 1.0 && s_i == 1.0) return model.predict(z_t, cond_image, text, tt, task, cache);
  const auto null_image = Tensor<T>::zeros(z_t.shape());
  const std::vector<int> t3(3 * b, t);
  const auto conds = repeat_batch<T>({&null_image, cond_image, cond_image});
  const auto out = model.predict(repeat_batch<T>({&z_t, &z_t, &z_t}), &conds,
                                 stack_tokens({&null_text, &null_text, &text}), t3, task, cache);
  return Tensor<T>::constant(z_t.shape(), combine_guidance<T>(slice(out, 0, 3), slice(out, 1, 3), slice(out, 2, 3),
                                                              s_i, s_t));
}

std::vector<int> sampling_timesteps(std::size_t timesteps, std::size_t steps) {
  if (steps < 1 || steps > timesteps) {
    throw ConfigError("sampling steps " + std::to_string(steps) + " outside [1, " + std::to_string(timesteps) + "]");
  }
  std::vector<int> out(steps);
  if (steps == 1) {
    out[0] = static_cast<int>(timesteps);
    return out;
  }
  for (std::size_t i = 0; i < steps; ++i) {
    const double pos = 1.0 + static_cast<double>(timesteps - 1) * static_cast<double>(steps - 1 - i) /
                                 static_cast<double>(steps - 1);
    out[i] = static_cast<int>(std::lround(pos));
  }
  return out;
}

template <class T>
Tensor<T> sample(const Denoiser<T>& model, const NoiseSchedule& schedule, TaskId task, const TokenBatch& text,
                 const Tensor<T>* cond_image, std::size_t steps, const GuidanceConfig& guidance, std::uint64_t seed,
                 const moe::TaskWeightCache<T>* cache) {
  const auto& cfg = model.config();
  if (!task_has_image(task) && guidance.image_scale) {
    throw ConfigError("image guidance scale given for text-only task " + std::string(task_name(task)));
  }
  const auto ts = sampling_timesteps(schedule.timesteps(), steps);
  const Shape shape{text.batch, cfg.channels, cfg.image_size, cfg.image_size};
  Rng rng(mix_seed(seed, {0x5A3B1E}));
  std::vector<T> z = normal_vector<T>(rng, shape_numel(shape));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto zt = Tensor<T>::constant(shape, z);
    const auto eps = guided_noise(model, zt, ts[i], task, text, cond_image, guidance, cache);
    const double a_t = schedule.a(static_cast<std::size_t>(ts[i]));
    const double a_prev = i + 1 < ts.size() ? schedule.a(static_cast<std::size_t>(ts[i + 1])) : 1.0;
    const T sa = static_cast<T>(std::sqrt(a_t)), sn = static_cast<T>(std::sqrt(1.0 - a_t));
    const T pa = static_cast<T>(std::sqrt(a_prev)), pn = static_cast<T>(std::sqrt(1.0 - a_prev));
    for (std::size_t j = 0; j < z.size(); ++j) {
      const T x0 = std::clamp((z[j] - sn * eps.data()[j]) / sa, T(-1), T(1));
      z[j] = pa * x0 + pn * eps.data()[j];
    }
  }
  for (auto& v : z) v = std::clamp(v, T(-1), T(1));
  return Tensor<T>::constant(shape, std::move(z));
}

#define MTU_INSTANTIATE_DIFFUSION(T)                                                                                   \
  template struct ConditioningBatch<T>;                                                                                \
  template Tensor<T> diffusion_loss(const Denoiser<T>&, const ConditioningBatch<T>&, const NoiseSchedule&,             \
                                    const moe::TaskWeightCache<T>*);                                                   \
  template std::vector<T> combine_guidance(std::span<const T>, std::span<const T>, std::span<const T>, double, double); \
  template Tensor<T> guided_noise(const Denoiser<T>&, const Tensor<T>&, int, TaskId, const TokenBatch&,                \
                                  const Tensor<T>*, const GuidanceConfig&, const moe::TaskWeightCache<T>*);            \
  template Tensor<T> sample(const Denoiser<T>&, const NoiseSchedule&, TaskId, const TokenBatch&, const Tensor<T>*,     \
                            std::size_t, const GuidanceConfig&, std::uint64_t, const moe::TaskWeightCache<T>*);

MTU_INSTANTIATE_DIFFUSION(float)
MTU_INSTANTIATE_DIFFUSION(double)

}  // namespace mtu
