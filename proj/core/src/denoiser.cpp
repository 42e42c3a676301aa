#include "mtu/denoiser.hpp"

#include <cmath>

#include "mtu/errors.hpp"
#include "mtu/moe.hpp"
#include "mtu/ops.hpp"
#include "mtu/rng.hpp"

namespace mtu {

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (channels == 0) fail("channels must be >= 1");
  if (num_blocks == 0) fail("num_blocks must be >= 1");
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    fail("d_model (" + std::to_string(d_model) + ") must be divisible by heads (" + std::to_string(heads) + ")");
  }
  if (d_ffn < 1) fail("d_ffn must be >= 1");
  if (timesteps < 2) fail("timesteps must be >= 2");
  if (patch == 0 || image_size == 0 || image_size % patch != 0) {
    fail("image_size (" + std::to_string(image_size) + ") must be a multiple of patch (" + std::to_string(patch) + ")");
  }
  if (stem_channels == 0 || d_text == 0 || text_len == 0) fail("stem_channels, d_text and text_len must be >= 1");
  if (vocab < 2) fail("vocab must hold at least the padding token and one word");
}

void MoEConfig::validate(std::size_t d_ffn) const {
  auto fail = [](const std::string& msg) { throw ConfigError("moe config: " + msg); };
  if (num_experts < 1) fail("num_experts must be >= 1");
  if (d_task < 1) fail("d_task must be >= 1");
  if (expert_width == 0 && d_ffn % num_experts != 0) {
    fail("num_experts (" + std::to_string(num_experts) + ") does not divide d_ffn (" + std::to_string(d_ffn) + ")");
  }
  const auto h = expert_hidden(d_ffn);
  if (h == 0 || d_ffn % h != 0) {
    fail("expert width " + std::to_string(h) + " does not divide d_ffn (" + std::to_string(d_ffn) + ")");
  }
  if (num_experts % granularity(d_ffn) != 0) {
    fail("num_experts (" + std::to_string(num_experts) + ") must be a multiple of the shard count (" +
         std::to_string(granularity(d_ffn)) + ")");
  }
  if (top_k && (*top_k < 1 || *top_k > num_experts)) {
    fail("top_k (" + std::to_string(*top_k) + ") must lie in [1, " + std::to_string(num_experts) + "]");
  }
}

bool ModelSpec::supports(TaskId t) const {
  for (auto x : tasks)
    if (x == t) return true;
  return false;
}

std::size_t ModelSpec::input_channels(TaskId t) const {
  return task_has_image(t) ? 2 * denoiser.channels : denoiser.channels;
}

void ModelSpec::validate() const {
  denoiser.validate();
  if (tasks.empty()) throw ConfigError("model needs at least one task");
  if (!is_mtu() && tasks.size() != 1) throw ConfigError("a dense model serves exactly one task");
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t j = i + 1; j < tasks.size(); ++j)
      if (tasks[i] == tasks[j]) throw ConfigError("task " + std::string(task_name(tasks[i])) + " registered twice");
  if (moe) moe->validate(denoiser.d_ffn);
}

TokenBatch TokenBatch::repeat(std::span<const int> row, std::size_t batch) {
  TokenBatch tb{batch, row.size(), {}};
  tb.ids.reserve(batch * row.size());
  for (std::size_t b = 0; b < batch; ++b) tb.ids.insert(tb.ids.end(), row.begin(), row.end());
  return tb;
}

TokenBatch null_tokens(std::size_t batch, std::size_t length) {
  return TokenBatch{batch, length, std::vector<int>(batch * length, 0)};
}

namespace names {

std::string block(std::size_t l, std::string_view leaf) { return "block" + std::to_string(l) + "." + std::string(leaf); }

std::string input_conv(std::optional<TaskId> task, std::string_view leaf) {
  if (!task) return "input_conv." + std::string(leaf);
  return "input_conv." + std::string(task_name(*task)) + "." + std::string(leaf);
}

std::string ffn_norm(std::size_t l, TaskId task, std::string_view leaf) {
  return block(l, "ffn_norm." + std::string(task_name(task)) + "." + std::string(leaf));
}

std::string expert(std::size_t l, std::size_t i, std::string_view leaf) {
  return block(l, "ffn.expert" + std::to_string(i) + "." + std::string(leaf));
}

std::string router(std::size_t l, std::string_view leaf) { return block(l, "router." + std::string(leaf)); }

std::string task_embedding(TaskId task) { return "task_embed." + std::string(task_name(task)); }

std::optional<std::size_t> layer_of(std::string_view name) {
  if (name.substr(0, 5) != "block") return std::nullopt;
  const auto dot = name.find('.');
  if (dot == std::string_view::npos || dot == 5) return std::nullopt;
  std::size_t l = 0;
  for (std::size_t i = 5; i < dot; ++i) {
    if (name[i] < '0' || name[i] > '9') return std::nullopt;
    l = l * 10 + static_cast<std::size_t>(name[i] - '0');
  }
  return l;
}

}  // namespace names

template <class T>
Tensor<T> timestep_features(std::span<const int> t, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<T> out(t.size() * width, T(0));
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
      out[b * width + j] = static_cast<T>(std::sin(t[b] * freq));
      out[b * width + half + j] = static_cast<T>(std::cos(t[b] * freq));
    }
  }
  return Tensor<T>::constant({t.size(), width}, std::move(out));
}

std::map<std::string, Shape> expected_parameters(const ModelSpec& spec) {
  spec.validate();
  const auto& cfg = spec.denoiser;
  const auto d = cfg.d_model, s = cfg.stem_channels, tok = s * cfg.patch * cfg.patch;
  std::map<std::string, Shape> out;
  if (spec.is_mtu()) {
    for (auto task : spec.tasks) {
      out[names::input_conv(task, "weight")] = {s, spec.input_channels(task), 3, 3};
      out[names::input_conv(task, "bias")] = {s};
      out[names::task_embedding(task)] = {spec.moe->d_task};
    }
  } else {
    out[names::input_conv(std::nullopt, "weight")] = {s, spec.input_channels(spec.tasks.front()), 3, 3};
    out[names::input_conv(std::nullopt, "bias")] = {s};
  }
  out["patch_embed.weight"] = {d, tok};
  out["patch_embed.bias"] = {d};
  out["pos_embed"] = {cfg.tokens(), d};
  out["time_embed.weight"] = {d, d};
  out["time_embed.bias"] = {d};
  out["text_embed"] = {cfg.vocab, cfg.d_text};
  out["text_pos"] = {cfg.text_len, cfg.d_text};
  for (std::size_t l = 0; l < cfg.num_blocks; ++l) {
    auto b = [l](std::string_view leaf) { return names::block(l, leaf); };
    for (const char* n : {"norm_sa", "norm_ca"}) {
      out[b(std::string(n) + ".weight")] = {d};
      out[b(std::string(n) + ".bias")] = {d};
    }
    for (const char* n : {"sa.q.weight", "sa.k.weight", "sa.v.weight", "sa.o.weight", "ca.q.weight", "ca.o.weight"})
      out[b(n)] = {d, d};
    out[b("sa.o.bias")] = {d};
    out[b("ca.o.bias")] = {d};
    out[b("ca.k.weight")] = {d, cfg.d_text};
    out[b("ca.v.weight")] = {d, cfg.d_text};
    if (!spec.is_mtu()) {
      out[b("norm_ffn.weight")] = {d};
      out[b("norm_ffn.bias")] = {d};
      out[b("ffn.w1.weight")] = {cfg.d_ffn, d};
      out[b("ffn.w1.bias")] = {cfg.d_ffn};
      out[b("ffn.w2.weight")] = {d, cfg.d_ffn};
      out[b("ffn.w2.bias")] = {d};
      continue;
    }
    const auto& moe = *spec.moe;
    const auto h = moe.expert_hidden(cfg.d_ffn), rh = moe.router_width();
    for (auto task : spec.tasks) {
      out[names::ffn_norm(l, task, "weight")] = {d};
      out[names::ffn_norm(l, task, "bias")] = {d};
    }
    for (std::size_t i = 0; i < moe.num_experts; ++i) {
      out[names::expert(l, i, "w1.weight")] = {h, d};
      out[names::expert(l, i, "w1.bias")] = {h};
      out[names::expert(l, i, "w2.weight")] = {d, h};
      out[names::expert(l, i, "w2.bias")] = {d};
    }
    out[names::router(l, "w1.weight")] = {rh, moe.d_task};
    out[names::router(l, "w1.bias")] = {rh};
    out[names::router(l, "w2.weight")] = {moe.num_experts, rh};
    out[names::router(l, "w2.bias")] = {moe.num_experts};
  }
  out["final_norm.weight"] = {d};
  out["final_norm.bias"] = {d};
  out["out_proj.weight"] = {tok, d};
  out["out_proj.bias"] = {tok};
  out["output_conv.weight"] = {cfg.channels, s, 3, 3};
  out["output_conv.bias"] = {cfg.channels};
  return out;
}

template <class T>
Denoiser<T>::Denoiser(ModelSpec spec, ParamTree<T> params) : spec_(std::move(spec)), params_(std::move(params)) {
  const auto expected = expected_parameters(spec_);
  for (const auto& [name, shape] : expected) {
    if (!params_.contains(name)) throw CheckpointError("model lacks parameter '" + name + "'");
    const auto& got = params_.tensor(name).shape();
    if (got != shape) {
      throw CheckpointError("parameter '" + name + "' has shape " + shape_str(got) + ", expected " + shape_str(shape));
    }
  }
  for (const auto& [name, e] : params_) {
    if (!expected.contains(name)) throw CheckpointError("unexpected parameter '" + name + "' for this model spec");
  }
}

template <class T>
Denoiser<T> retarget_dense(const Denoiser<T>& dense, TaskId task) {
  if (dense.spec().is_mtu()) throw ConfigError("retarget_dense expects a dense model");
  auto spec = dense.spec();
  spec.tasks = {task};
  const auto cin = spec.input_channels(task);
  ParamTree<T> tree;
  for (const auto& [name, e] : dense.params()) {
    if (name != names::input_conv(std::nullopt, "weight")) {
      std::vector<T> v(e.value.data().begin(), e.value.data().end());
      tree.add(name, e.value.shape(), std::move(v), e.tag, e.frozen);
      continue;
    }
    const auto s = e.value.dim(0), c0 = e.value.dim(1);
    if (c0 > cin) {
      throw ConfigError("cannot retarget a " + std::to_string(c0) + "-channel input convolution to task " +
                        std::string(task_name(task)));
    }
    std::vector<T> w(s * cin * 9, T(0));
    for (std::size_t o = 0; o < s; ++o)
      for (std::size_t k = 0; k < c0 * 9; ++k) w[o * cin * 9 + k] = e.value.data()[o * c0 * 9 + k];
    tree.add(name, {s, cin, 3, 3}, std::move(w), e.tag, e.frozen);
  }
  return Denoiser<T>(std::move(spec), std::move(tree));
}

template <class T>
Denoiser<T> Denoiser<T>::init_dense(const DenoiserConfig& cfg, TaskId task, std::uint64_t seed) {
  ModelSpec spec{cfg, {task}, std::nullopt};
  spec.validate();
  Rng rng(mix_seed(seed, {0xDE7A}));
  ParamTree<T> tree;
  const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.num_blocks));
  auto weight = [&](const std::string& name, Shape shape, std::size_t fan_in, Component tag, double gain = 1.0) {
    const auto n = shape_numel(shape);
    tree.add(name, std::move(shape), normal_vector<T>(rng, n, gain / std::sqrt(static_cast<double>(fan_in))), tag);
  };
  auto filled = [&](const std::string& name, Shape shape, T value, Component tag) {
    const auto n = shape_numel(shape);
    tree.add(name, std::move(shape), std::vector<T>(n, value), tag);
  };
  auto norm = [&](const std::string& prefix) {
    filled(prefix + ".weight", {cfg.d_model}, T(1), Component::kNorm);
    filled(prefix + ".bias", {cfg.d_model}, T(0), Component::kNorm);
  };

  const auto cin = spec.input_channels(task);
  const auto d = cfg.d_model, s = cfg.stem_channels, tok = s * cfg.patch * cfg.patch;
  weight(names::input_conv(std::nullopt, "weight"), {s, cin, 3, 3}, cin * 9, Component::kInputConv);
  filled(names::input_conv(std::nullopt, "bias"), {s}, T(0), Component::kInputConv);
  weight("patch_embed.weight", {d, tok}, tok, Component::kEmbed);
  filled("patch_embed.bias", {d}, T(0), Component::kEmbed);
  tree.add("pos_embed", {cfg.tokens(), d}, normal_vector<T>(rng, cfg.tokens() * d, 0.02), Component::kEmbed);
  weight("time_embed.weight", {d, d}, d, Component::kEmbed);
  filled("time_embed.bias", {d}, T(0), Component::kEmbed);
  tree.add("text_embed", {cfg.vocab, cfg.d_text}, normal_vector<T>(rng, cfg.vocab * cfg.d_text, 1.0), Component::kEmbed);
  tree.add("text_pos", {cfg.text_len, cfg.d_text}, normal_vector<T>(rng, cfg.text_len * cfg.d_text, 0.02),
           Component::kEmbed);

  for (std::size_t l = 0; l < cfg.num_blocks; ++l) {
    auto b = [l](std::string_view leaf) { return names::block(l, leaf); };
    norm(b("norm_sa"));
    weight(b("sa.q.weight"), {d, d}, d, Component::kSaQ);
    weight(b("sa.k.weight"), {d, d}, d, Component::kSaK);
    weight(b("sa.v.weight"), {d, d}, d, Component::kSaV);
    weight(b("sa.o.weight"), {d, d}, d, Component::kSaO, residual_gain);
    filled(b("sa.o.bias"), {d}, T(0), Component::kSaO);
    norm(b("norm_ca"));
    weight(b("ca.q.weight"), {d, d}, d, Component::kCaQ);
    weight(b("ca.k.weight"), {d, cfg.d_text}, cfg.d_text, Component::kCaK);
    weight(b("ca.v.weight"), {d, cfg.d_text}, cfg.d_text, Component::kCaV);
    weight(b("ca.o.weight"), {d, d}, d, Component::kCaO, residual_gain);
    filled(b("ca.o.bias"), {d}, T(0), Component::kCaO);
    norm(b("norm_ffn"));
    weight(b("ffn.w1.weight"), {cfg.d_ffn, d}, d, Component::kFfn);
    filled(b("ffn.w1.bias"), {cfg.d_ffn}, T(0), Component::kFfn);
    weight(b("ffn.w2.weight"), {d, cfg.d_ffn}, cfg.d_ffn, Component::kFfn, residual_gain);
    filled(b("ffn.w2.bias"), {d}, T(0), Component::kFfn);
  }
  norm("final_norm");
  weight("out_proj.weight", {tok, d}, d, Component::kOutputConv);
  filled("out_proj.bias", {tok}, T(0), Component::kOutputConv);
  weight("output_conv.weight", {cfg.channels, s, 3, 3}, s * 9, Component::kOutputConv);
  filled("output_conv.bias", {cfg.channels}, T(0), Component::kOutputConv);
  return Denoiser(std::move(spec), std::move(tree));
}

template <class T>
Tensor<T> Denoiser<T>::ffn_block(std::size_t l, const Tensor<T>& x, TaskId task,
                                 const moe::TaskWeightCache<T>* cache) const {
  if (!spec_.is_mtu()) {
    auto b = [l](std::string_view leaf) { return names::block(l, leaf); };
    const auto h = ops::layer_norm(x, p(b("norm_ffn.weight")), p(b("norm_ffn.bias")));
    return moe::ffn_forward(h, p(b("ffn.w1.weight")), p(b("ffn.w1.bias")), p(b("ffn.w2.weight")), p(b("ffn.w2.bias")));
  }
  const auto layer = moe::MoEFfnLayer<T>::view(*this, l);
  const Tensor<T> weights = cache ? cache->tensor(task, l) : moe::route(p(names::task_embedding(task)), layer.router,
                                                                        spec_.moe->top_k);
  return moe::moe_ffn_forward(x, layer, task, weights);
}

template <class T>
Tensor<T> Denoiser<T>::forward(const Tensor<T>& z_in, const TokenBatch& text, std::span<const int> t, TaskId task,
                               const moe::TaskWeightCache<T>* cache) const {
  const auto& cfg = spec_.denoiser;
  if (!spec_.supports(task)) {
    throw DataError("model does not serve task " + std::string(task_name(task)) + " (registered: " +
                    join_tasks(spec_.tasks) + ")");
  }
  const auto conv_task = spec_.is_mtu() ? std::optional<TaskId>(task) : std::nullopt;
  const auto& w_in = p(names::input_conv(conv_task, "weight"));
  if (z_in.rank() != 4 || z_in.dim(1) != w_in.dim(1) || z_in.dim(2) != cfg.image_size ||
      z_in.dim(3) != cfg.image_size) {
    throw ShapeError("denoiser input " + shape_str(z_in.shape()) + " does not match input convolution " +
                     shape_str(w_in.shape()) + " at image size " + std::to_string(cfg.image_size));
  }
  const auto batch = z_in.dim(0);
  if (text.batch != batch || text.length != cfg.text_len || t.size() != batch) {
    throw ShapeError("denoiser: batch " + std::to_string(batch) + " with " + std::to_string(text.batch) + "x" +
                     std::to_string(text.length) + " tokens and " + std::to_string(t.size()) + " timesteps");
  }

  auto h = ops::conv2d(z_in, w_in, p(names::input_conv(conv_task, "bias")), 1);
  auto x = ops::linear(ops::patchify(h, cfg.patch), p("patch_embed.weight"), p("patch_embed.bias"));
  x = ops::add_broadcast(x, p("pos_embed"));
  x = ops::add_rows(x, ops::linear(timestep_features<T>(t, cfg.d_model), p("time_embed.weight"), p("time_embed.bias")));

  auto txt = ops::embedding(p("text_embed"), text.ids, {batch, cfg.text_len});
  txt = ops::add_broadcast(txt, p("text_pos"));

  for (std::size_t l = 0; l < cfg.num_blocks; ++l) {
    auto b = [l](std::string_view leaf) { return names::block(l, leaf); };
    auto a = ops::layer_norm(x, p(b("norm_sa.weight")), p(b("norm_sa.bias")));
    auto sa = ops::attention(ops::linear(a, p(b("sa.q.weight"))), ops::linear(a, p(b("sa.k.weight"))),
                             ops::linear(a, p(b("sa.v.weight"))), cfg.heads);
    x = ops::add(x, ops::linear(sa, p(b("sa.o.weight")), p(b("sa.o.bias"))));

    a = ops::layer_norm(x, p(b("norm_ca.weight")), p(b("norm_ca.bias")));
    auto ca = ops::attention(ops::linear(a, p(b("ca.q.weight"))), ops::linear(txt, p(b("ca.k.weight"))),
                             ops::linear(txt, p(b("ca.v.weight"))), cfg.heads);
    x = ops::add(x, ops::linear(ca, p(b("ca.o.weight")), p(b("ca.o.bias"))));

    x = ops::add(x, ffn_block(l, x, task, cache));
  }
  x = ops::layer_norm(x, p("final_norm.weight"), p("final_norm.bias"));
  auto y = ops::linear(x, p("out_proj.weight"), p("out_proj.bias"));
  auto img = ops::unpatchify(y, cfg.stem_channels, cfg.image_size, cfg.image_size, cfg.patch);
  return ops::conv2d(img, p("output_conv.weight"), p("output_conv.bias"), 1);
}

template <class T>
Tensor<T> Denoiser<T>::predict(const Tensor<T>& z_t, const Tensor<T>* cond_image, const TokenBatch& text,
                               std::span<const int> t, TaskId task, const moe::TaskWeightCache<T>* cache) const {
  if (task_has_image(task) != (cond_image != nullptr)) {
    throw DataError("task " + std::string(task_name(task)) +
                    (task_has_image(task) ? " requires a condition image" : " takes no condition image"));
  }
  if (!cond_image) return forward(z_t, text, t, task, cache);
  check_same_shape(z_t.shape(), cond_image->shape(), "condition image vs noisy latent");
  return forward(ops::concat<T>({z_t, *cond_image}, 1), text, t, task, cache);
}

template class Denoiser<float>;
template class Denoiser<double>;
template Denoiser<float> retarget_dense(const Denoiser<float>&, TaskId);
template Denoiser<double> retarget_dense(const Denoiser<double>&, TaskId);
template Tensor<float> timestep_features<float>(std::span<const int>, std::size_t);
template Tensor<double> timestep_features<double>(std::span<const int>, std::size_t);

}  // namespace mtu
