#pragma once

// Test-split evaluation: sample every example, then score the outputs against
// the targets (PSNR) and the inputs (directional similarities).

#include <cstdint>
#include <string>
#include <vector>

#include "mtu/data.hpp"
#include "mtu/diffusion.hpp"
#include "mtu/metrics.hpp"

namespace mtu::eval {

struct EvalConfig {
  std::size_t count = 256;  // leading samples of the dataset; 0 means all
  std::size_t steps = 50;
  std::size_t batch_size = 64;
  GuidanceConfig guidance;
  std::uint64_t seed = 0;
};

struct SampleScore {
  std::size_t index = 0;
  double mse = 0.0;
  double psnr = 0.0;
  metrics::Similarity ii;
  metrics::Similarity it;
};

struct EvalReport {
  TaskId task = TaskId::kT2I;
  std::vector<SampleScore> samples;
  double mean_mse = 0.0;
  /// From mean_mse, so a single perfect sample cannot make it infinite.
  double psnr = 0.0;
  double mean_ii = 0.0;
  double mean_it = 0.0;
  std::size_t ii_degenerate = 0;
  std::size_t it_degenerate = 0;

  /// `task=IE n=256 mse=.. psnr=.. ii=.. it=.. ii_degenerate=.. it_degenerate=..`
  std::string summary() const;
};

/// Text features of an edit are stood in for by the pixel features of the
/// scene each prompt describes: the clean input scene and the target. The
/// super-resolution prompt is empty, so its it-similarity is 0 and flagged.
/// Text-to-image has no input image; both similarities are flagged there.
template <class T>
EvalReport evaluate(const Denoiser<T>& model, const NoiseSchedule& schedule, const data::Dataset& ds,
                    const EvalConfig& cfg, std::vector<data::Image>* outputs = nullptr,
                    const moe::TaskWeightCache<T>* cache = nullptr);

/// Dataset samples [first, first + count) stacked into one [count, c, H, W] tensor.
template <class T>
Tensor<T> stack_targets(const data::Dataset& ds, std::size_t first, std::size_t count);
template <class T>
Tensor<T> stack_conditions(const data::Dataset& ds, std::size_t first, std::size_t count);
TokenBatch stack_tokens(const data::Dataset& ds, std::size_t first, std::size_t count);

}  // namespace mtu::eval
