#include "mtu/evaluate.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "mtu/errors.hpp"
#include "mtu/moe.hpp"
#include "mtu/rng.hpp"

namespace mtu::eval {

namespace {

constexpr std::size_t kPer = data::kChannels * data::kImageSize * data::kImageSize;

template <class T>
Tensor<T> stack(const data::Dataset& ds, std::size_t first, std::size_t count, bool cond) {
  if (count == 0 || first + count > ds.samples.size()) throw DataError("stack outside dataset");
  std::vector<T> v;
  v.reserve(count * kPer);
  for (std::size_t i = first; i < first + count; ++i) {
    const auto& s = ds.samples[i];
    if (cond && !s.cond) throw DataError("sample " + std::to_string(i) + " has no condition image");
    const auto& img = cond ? *s.cond : s.target;
    v.insert(v.end(), img.begin(), img.end());
  }
  return Tensor<T>::constant({count, data::kChannels, data::kImageSize, data::kImageSize}, std::move(v));
}

}  // namespace

template <class T>
Tensor<T> stack_targets(const data::Dataset& ds, std::size_t first, std::size_t count) {
  return stack<T>(ds, first, count, false);
}

template <class T>
Tensor<T> stack_conditions(const data::Dataset& ds, std::size_t first, std::size_t count) {
  return stack<T>(ds, first, count, true);
}

TokenBatch stack_tokens(const data::Dataset& ds, std::size_t first, std::size_t count) {
  if (count == 0 || first + count > ds.samples.size()) throw DataError("stack outside dataset");
  TokenBatch tb{count, data::kTextLen, {}};
  for (std::size_t i = first; i < first + count; ++i) {
    tb.ids.insert(tb.ids.end(), ds.samples[i].tokens.begin(), ds.samples[i].tokens.end());
  }
  return tb;
}

std::string EvalReport::summary() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "task=%s n=%zu mse=%.6f psnr=%.3f ii=%.4f it=%.4f ii_degenerate=%zu it_degenerate=%zu",
                std::string(task_name(task)).c_str(), samples.size(), mean_mse, psnr, mean_ii, mean_it,
                ii_degenerate, it_degenerate);
  return buf;
}

template <class T>
EvalReport evaluate(const Denoiser<T>& model, const NoiseSchedule& schedule, const data::Dataset& ds,
                    const EvalConfig& cfg, std::vector<data::Image>* outputs, const moe::TaskWeightCache<T>* cache) {
  const auto n = cfg.count == 0 ? ds.samples.size() : cfg.count;
  if (n == 0 || n > ds.samples.size()) {
    throw DataError("evaluation asks for " + std::to_string(n) + " samples, dataset holds " +
                    std::to_string(ds.samples.size()));
  }
  if (cfg.batch_size == 0) throw ConfigError("evaluation batch size must be >= 1");
  const bool has_image = task_has_image(ds.task);
  const metrics::PixelFeatures features(kPer);

  EvalReport r;
  r.task = ds.task;
  if (outputs) outputs->clear();
  std::size_t chunk = 0;
  for (std::size_t first = 0; first < n; first += cfg.batch_size, ++chunk) {
    const auto count = std::min(cfg.batch_size, n - first);
    const auto text = stack_tokens(ds, first, count);
    std::optional<Tensor<T>> cond;
    if (has_image) cond = stack_conditions<T>(ds, first, count);
    const auto out = sample(model, schedule, ds.task, text, cond ? &*cond : nullptr, cfg.steps, cfg.guidance,
                            mix_seed(cfg.seed, {chunk}), cache);
    const auto vals = out.data();
    for (std::size_t b = 0; b < count; ++b) {
      const auto& s = ds.samples[first + b];
      data::Image img(vals.begin() + static_cast<std::ptrdiff_t>(b * kPer),
                      vals.begin() + static_cast<std::ptrdiff_t>((b + 1) * kPer));
      SampleScore sc;
      sc.index = first + b;
      const auto pm = metrics::psnr_mse(img, s.target);
      sc.mse = pm.mse;
      sc.psnr = pm.psnr;
      if (has_image) {
        const auto f_ed = features(img), f_gt = features(s.target), f_in = features(*s.cond);
        sc.ii = metrics::ii_directional_similarity(f_gt, f_in, f_ed);
        if (ds.task == TaskId::kSR) {
          sc.it = {0.0, true};
        } else {
          const auto t_in = features(data::render(s.meta.bg, s.meta.objects));
          sc.it = metrics::it_directional_similarity(t_in, f_gt, f_in, f_ed);
        }
      } else {
        sc.ii = {0.0, true};
        sc.it = {0.0, true};
      }
      r.mean_mse += sc.mse;
      r.mean_ii += sc.ii.value;
      r.mean_it += sc.it.value;
      r.ii_degenerate += sc.ii.degenerate;
      r.it_degenerate += sc.it.degenerate;
      r.samples.push_back(sc);
      if (outputs) outputs->push_back(std::move(img));
    }
  }
  const auto k = static_cast<double>(n);
  r.mean_mse /= k;
  r.mean_ii /= k;
  r.mean_it /= k;
  r.psnr = r.mean_mse == 0 ? std::numeric_limits<double>::infinity()
                           : 10.0 * std::log10(metrics::kPixelPeak * metrics::kPixelPeak / r.mean_mse);
  return r;
}

#define MTU_INSTANTIATE_EVAL(T)                                                                                  \
  template Tensor<T> stack_targets(const data::Dataset&, std::size_t, std::size_t);                             \
  template Tensor<T> stack_conditions(const data::Dataset&, std::size_t, std::size_t);                          \
  template EvalReport evaluate(const Denoiser<T>&, const NoiseSchedule&, const data::Dataset&, const EvalConfig&, \
                               std::vector<data::Image>*, const moe::TaskWeightCache<T>*);

MTU_INSTANTIATE_EVAL(float)
MTU_INSTANTIATE_EVAL(double)

}  // namespace mtu::eval
