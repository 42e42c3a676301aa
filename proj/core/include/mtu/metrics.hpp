#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mtu/denoiser.hpp"

namespace mtu::metrics {

/// Image -> feature vector. The default stand-in for learned image features
/// is the flattened image minus its own mean.
class PixelFeatures {
 public:
  explicit PixelFeatures(std::size_t width) : width_(width) {}
  std::size_t width() const { return width_; }
  /// Throws std::invalid_argument when the image size differs from width().
  std::vector<double> operator()(std::span<const float> image) const;

 private:
  std::size_t width_;
};

struct Similarity {
  double value = 0.0;
  /// Set when a difference vector was zero and the value defaulted to 0.
  bool degenerate = false;
};

/// cos(a, b), or 0 flagged degenerate when either vector is zero.
Similarity cosine(std::span<const double> a, std::span<const double> b);
/// cos(T_ed − T_in, I_ed − I_in).
Similarity it_directional_similarity(std::span<const double> t_in, std::span<const double> t_ed,
                                     std::span<const double> i_in, std::span<const double> i_ed);
/// cos(I_gt − I_in, I_ed − I_in).
Similarity ii_directional_similarity(std::span<const double> i_gt, std::span<const double> i_in,
                                     std::span<const double> i_ed);

struct PsnrMse {
  double mse = 0.0;
  /// +infinity when mse == 0.
  double psnr = std::numeric_limits<double>::infinity();
};

/// Peak-to-peak range of the [-1, 1] pixel domain.
inline constexpr double kPixelPeak = 2.0;
PsnrMse psnr_mse(std::span<const float> pred, std::span<const float> target, double peak = kPixelPeak);

/// Parameter and forward-FLOP counts. FLOPs are 2 per multiply-accumulate
/// for one example through one denoiser call; elementwise work is not counted.
struct AccountingReport {
  std::uint64_t total_params = 0;
  std::uint64_t trainable_params = 0;
  std::uint64_t frozen_params = 0;
  std::map<std::string, std::uint64_t> params_by_component;  // component tag names
  std::uint64_t total_flops = 0;
  /// input-conv, patch-embed, time-embed, SA, CA, FFN, moe-combine, output.
  std::map<std::string, std::uint64_t> flops_by_component;
  std::size_t active_experts = 0;  // summed over layers; 0 for dense models
};

/// FLOPs of an MTU model count only experts with nonzero weight for `task`
/// (taken from the cache when given). Routers cost nothing at inference since
/// task weights are precomputed.
template <class T>
AccountingReport account(const Denoiser<T>& model, TaskId task, const moe::TaskWeightCache<T>* cache = nullptr);

}  // namespace mtu::metrics
