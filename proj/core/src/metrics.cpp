#include "mtu/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "mtu/moe.hpp"

namespace mtu::metrics {

std::vector<double> PixelFeatures::operator()(std::span<const float> image) const {
  if (image.size() != width_) {
    throw std::invalid_argument("feature extractor expects " + std::to_string(width_) + " values, got " +
                                std::to_string(image.size()));
  }
  double mean = 0;
  for (float v : image) mean += v;
  mean /= static_cast<double>(image.size());
  std::vector<double> out(image.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = image[i] - mean;
  return out;
}

Similarity cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: vectors differ in length");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return {0.0, true};
  return {std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0), false};
}

namespace {

std::vector<double> diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("directional similarity: feature widths differ");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace

Similarity it_directional_similarity(std::span<const double> t_in, std::span<const double> t_ed,
                                     std::span<const double> i_in, std::span<const double> i_ed) {
  return cosine(diff(t_ed, t_in), diff(i_ed, i_in));
}

Similarity ii_directional_similarity(std::span<const double> i_gt, std::span<const double> i_in,
                                     std::span<const double> i_ed) {
  return cosine(diff(i_gt, i_in), diff(i_ed, i_in));
}

PsnrMse psnr_mse(std::span<const float> pred, std::span<const float> target, double peak) {
  if (pred.size() != target.size() || pred.empty()) throw std::invalid_argument("psnr_mse: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    s += d * d;
  }
  PsnrMse out;
  out.mse = s / static_cast<double>(pred.size());
  if (out.mse > 0) out.psnr = 10.0 * std::log10(peak * peak / out.mse);
  return out;
}

template <class T>
AccountingReport account(const Denoiser<T>& model, TaskId task, const moe::TaskWeightCache<T>* cache) {
  const auto& spec = model.spec();
  const auto& cfg = spec.denoiser;
  AccountingReport r;
  for (const auto& [name, e] : model.params()) {
    const auto n = static_cast<std::uint64_t>(e.value.numel());
    r.total_params += n;
    (e.frozen ? r.frozen_params : r.trainable_params) += n;
    r.params_by_component[std::string(component_name(e.tag))] += n;
  }

  using U = std::uint64_t;
  const U hw = cfg.image_size * cfg.image_size, s = cfg.stem_channels, c = cfg.channels;
  const U L = cfg.tokens(), Lt = cfg.text_len, d = cfg.d_model, dt = cfg.d_text;
  const U tok = s * cfg.patch * cfg.patch;
  const U cin = spec.input_channels(task);
  auto& f = r.flops_by_component;
  f["input-conv"] = 2 * hw * s * cin * 9;
  f["patch-embed"] = 2 * L * tok * d;
  f["time-embed"] = 2 * d * d;
  f["SA"] = 0;
  f["CA"] = 0;
  f["FFN"] = 0;
  std::optional<moe::TaskWeightCache<T>> own;
  if (spec.is_mtu()) {
    f["moe-combine"] = 0;
    if (!cache) cache = &own.emplace(moe::TaskWeightCache<T>::build(model));
  }
  for (std::size_t l = 0; l < cfg.num_blocks; ++l) {
    f["SA"] += 2 * (4 * L * d * d + 2 * L * L * d);
    f["CA"] += 2 * (2 * L * d * d + 2 * Lt * dt * d + 2 * L * Lt * d);
    if (!spec.is_mtu()) {
      f["FFN"] += 2 * 2 * L * d * cfg.d_ffn;
      continue;
    }
    const U h = spec.moe->expert_hidden(cfg.d_ffn);
    U active = 0;
    for (T w : cache->weights(task, l)) active += w != T(0);
    r.active_experts += active;
    f["FFN"] += active * 2 * 2 * L * d * h;
    f["moe-combine"] += 2 * active * L * d;
  }
  f["output"] = 2 * L * d * tok + 2 * hw * c * s * 9;
  for (const auto& [_, v] : f) r.total_flops += v;
  return r;
}

template AccountingReport account(const Denoiser<float>&, TaskId, const moe::TaskWeightCache<float>*);
template AccountingReport account(const Denoiser<double>&, TaskId, const moe::TaskWeightCache<double>*);

}  // namespace mtu::metrics
