#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtu/param_tree.hpp"
#include "mtu/task.hpp"
#include "mtu/tensor.hpp"

namespace mtu {

namespace moe {
template <class T>
class TaskWeightCache;
}

/// Architecture of the toy transformer denoiser.
///
/// The image is lifted to `stem_channels` by a 3×3 input convolution, cut into
/// patch×patch tokens and projected to d_model. Each block is pre-norm
/// self-attention, cross-attention over text tokens and an FFN. The output
/// path mirrors the input: token projection, un-patching and a 3×3 output
/// convolution back to `channels`.
struct DenoiserConfig {
  std::size_t image_size = 24;
  std::size_t channels = 3;
  std::size_t num_blocks = 6;
  std::size_t d_model = 96;
  std::size_t d_ffn = 384;
  std::size_t heads = 4;
  std::size_t d_text = 64;
  std::size_t vocab = 64;
  std::size_t text_len = 8;
  std::size_t timesteps = 200;
  std::size_t stem_channels = 16;
  std::size_t patch = 4;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::size_t tokens() const { return (image_size / patch) * (image_size / patch); }
  bool operator==(const DenoiserConfig&) const = default;
};

/// Expert layout of an upcycled model.
struct MoEConfig {
  std::size_t num_experts = 4;
  std::optional<std::size_t> top_k;
  std::size_t d_task = 32;
  /// Hidden width of each router MLP; 0 means d_task.
  std::size_t router_hidden = 0;
  /// Hidden width of each expert; 0 means iso-parameter mode (d_ffn / num_experts).
  std::size_t expert_width = 0;

  std::size_t router_width() const { return router_hidden ? router_hidden : d_task; }
  std::size_t expert_hidden(std::size_t d_ffn) const { return expert_width ? expert_width : d_ffn / num_experts; }
  /// G = d_ffn / d_expert.
  std::size_t granularity(std::size_t d_ffn) const { return d_ffn / expert_hidden(d_ffn); }
  bool iso_parameter(std::size_t d_ffn) const { return expert_hidden(d_ffn) * num_experts == d_ffn; }
  /// Throws ConfigError (N ∤ d_ffn, top_k ∉ [1, N], replication mismatch).
  void validate(std::size_t d_ffn) const;
  bool operator==(const MoEConfig&) const = default;
};

/// Dense models serve exactly one task (T2I takes c input channels, the
/// image-conditioned tasks 2c); MTU models carry a task registry and a MoEConfig.
struct ModelSpec {
  DenoiserConfig denoiser;
  std::vector<TaskId> tasks{TaskId::kT2I};
  std::optional<MoEConfig> moe;

  bool is_mtu() const { return moe.has_value(); }
  bool supports(TaskId t) const;
  std::size_t input_channels(TaskId t) const;
  void validate() const;
};

/// Token ids, row-major [batch, length].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;

  static TokenBatch repeat(std::span<const int> row, std::size_t batch);
  std::span<const int> row(std::size_t b) const { return {ids.data() + b * length, length}; }
};

/// Parameter names shared by the model, upcycling and analysis code.
namespace names {
std::string block(std::size_t l, std::string_view leaf);
std::string input_conv(std::optional<TaskId> task, std::string_view leaf);
std::string ffn_norm(std::size_t l, TaskId task, std::string_view leaf);
std::string expert(std::size_t l, std::size_t i, std::string_view leaf);
std::string router(std::size_t l, std::string_view leaf);
std::string task_embedding(TaskId task);
/// Block index encoded in a parameter name, or nullopt for global entries.
std::optional<std::size_t> layer_of(std::string_view name);
}  // namespace names

/// Noise predictor f_θ(z_in, c_T, t) for dense and upcycled models.
template <class T>
class Denoiser {
 public:
  Denoiser(ModelSpec spec, ParamTree<T> params);

  /// Randomly initialized dense model (spec.moe must be empty).
  static Denoiser init_dense(const DenoiserConfig& cfg, TaskId task, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const DenoiserConfig& config() const { return spec_.denoiser; }
  const ParamTree<T>& params() const { return params_; }
  ParamTree<T>& params() { return params_; }

  /// ε̂ from an already channel-concatenated input z_in [B, C_in, H, W].
  /// For MTU models, routing weights come from `cache` when given, otherwise
  /// they are computed on the graph (so routers receive gradients).
  Tensor<T> forward(const Tensor<T>& z_in, const TokenBatch& text, std::span<const int> t, TaskId task,
                    const moe::TaskWeightCache<T>* cache = nullptr) const;

  /// Concatenates the condition image (if any) to z_t along channels, then forward().
  Tensor<T> predict(const Tensor<T>& z_t, const Tensor<T>* cond_image, const TokenBatch& text, std::span<const int> t,
                    TaskId task, const moe::TaskWeightCache<T>* cache = nullptr) const;

 private:
  Tensor<T> ffn_block(std::size_t l, const Tensor<T>& x, TaskId task, const moe::TaskWeightCache<T>* cache) const;
  const Tensor<T>& p(std::string_view name) const { return params_.tensor(name); }

  ModelSpec spec_;
  ParamTree<T> params_;
};

/// Name -> shape of every parameter a model with this spec holds.
std::map<std::string, Shape> expected_parameters(const ModelSpec& spec);

/// Dense copy of a text-to-image model re-targeted at `task`: the input
/// convolution gains c zero-initialized condition channels when the task
/// carries an image. Everything else, including frozen flags, is copied.
template <class T>
Denoiser<T> retarget_dense(const Denoiser<T>& dense, TaskId task);

/// Sinusoidal timestep features [B, width].
template <class T>
Tensor<T> timestep_features(std::span<const int> t, std::size_t width);

/// Null text condition: every position is the padding token (id 0).
TokenBatch null_tokens(std::size_t batch, std::size_t length);

}  // namespace mtu
