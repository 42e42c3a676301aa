#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mtu/denoiser.hpp"
#include "mtu/schedule.hpp"

namespace mtu {

/// One training/evaluation batch for a single task.
template <class T>
struct ConditioningBatch {
  TaskId task = TaskId::kT2I;
  Tensor<T> z0;                   // clean latents [B, c, H, W]
  TokenBatch text;                // c_T
  std::optional<Tensor<T>> cond;  // c_I, present iff the task is image-conditioned
  std::vector<int> t;             // per-example timestep in [1, T]
  Tensor<T> eps;                  // per-example noise, same shape as z0

  /// Throws DataError when the fields disagree with each other or the task.
  void validate(std::size_t timesteps) const;
};

/// mean((ε - f_θ(z_t, c_T, c_I, t))²) over all elements.
template <class T>
Tensor<T> diffusion_loss(const Denoiser<T>& model, const ConditioningBatch<T>& batch, const NoiseSchedule& schedule,
                         const moe::TaskWeightCache<T>* cache = nullptr);

struct GuidanceConfig {
  double text_scale = 1.0;
  /// Only for image-conditioned tasks; defaults to 1 there.
  std::optional<double> image_scale;
};

/// ε(∅,∅) + s_I·(ε(c_I,∅) − ε(∅,∅)) + s_T·(ε(c_I,c_T) − ε(c_I,∅)), elementwise.
/// For text-only tasks pass e_uncond for both e_uu and e_iu with s_I = 0.
template <class T>
std::vector<T> combine_guidance(std::span<const T> e_uu, std::span<const T> e_iu, std::span<const T> e_it,
                                double image_scale, double text_scale);

/// Guided noise estimate at one timestep. Null text is the padding sequence;
/// null image is all zeros. Scales of exactly 1 skip the unconditional passes.
template <class T>
Tensor<T> guided_noise(const Denoiser<T>& model, const Tensor<T>& z_t, int t, TaskId task, const TokenBatch& text,
                       const Tensor<T>* cond_image, const GuidanceConfig& guidance,
                       const moe::TaskWeightCache<T>* cache = nullptr);

/// `steps` timesteps spread over [1, T], descending; steps == T gives T..1.
std::vector<int> sampling_timesteps(std::size_t timesteps, std::size_t steps);

/// Deterministic (η = 0) sampler with clipped x̂_0; returns images in [-1, 1].
/// Throws ConfigError for steps ∉ [1, T] or an image scale on a text-only task.
template <class T>
Tensor<T> sample(const Denoiser<T>& model, const NoiseSchedule& schedule, TaskId task, const TokenBatch& text,
                 const Tensor<T>* cond_image, std::size_t steps, const GuidanceConfig& guidance, std::uint64_t seed,
                 const moe::TaskWeightCache<T>* cache = nullptr);

}  // namespace mtu
