#include "mtu/checkpoint.hpp"

#include <charconv>
#include <type_traits>

#include "mtu/container.hpp"
#include "mtu/errors.hpp"

namespace mtu {

namespace {

constexpr std::string_view kMomentM = "optim.m/";
constexpr std::string_view kMomentV = "optim.v/";

std::size_t parse_size(const std::map<std::string, std::string>& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw CheckpointError("checkpoint manifest lacks '" + key + "'");
  std::size_t v = 0;
  const auto& s = it->second;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw CheckpointError("checkpoint manifest key '" + key + "' is not a count: '" + s + "'");
  }
  return v;
}

double parse_double(const std::map<std::string, std::string>& meta, const std::string& key) {
  const auto it = meta.find(key);
  if (it == meta.end()) throw CheckpointError("checkpoint manifest lacks '" + key + "'");
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint manifest key '" + key + "' is not a number: '" + it->second + "'");
  }
}

std::string fmt_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

struct ConfigField {
  const char* key;
  std::size_t DenoiserConfig::*member;
};

constexpr ConfigField kFields[] = {
    {"model.image_size", &DenoiserConfig::image_size}, {"model.channels", &DenoiserConfig::channels},
    {"model.num_blocks", &DenoiserConfig::num_blocks}, {"model.d_model", &DenoiserConfig::d_model},
    {"model.d_ffn", &DenoiserConfig::d_ffn},           {"model.heads", &DenoiserConfig::heads},
    {"model.d_text", &DenoiserConfig::d_text},         {"model.vocab", &DenoiserConfig::vocab},
    {"model.text_len", &DenoiserConfig::text_len},     {"model.timesteps", &DenoiserConfig::timesteps},
    {"model.stem_channels", &DenoiserConfig::stem_channels}, {"model.patch", &DenoiserConfig::patch},
};

}  // namespace

std::map<std::string, std::string> spec_meta(const ModelSpec& spec) {
  std::map<std::string, std::string> m;
  m["kind"] = spec.is_mtu() ? "mtu" : "dense";
  for (const auto& f : kFields) m[f.key] = std::to_string(spec.denoiser.*f.member);
  m["tasks"] = join_tasks(spec.tasks);
  if (spec.moe) {
    m["moe.num_experts"] = std::to_string(spec.moe->num_experts);
    m["moe.top_k"] = spec.moe->top_k ? std::to_string(*spec.moe->top_k) : "none";
    m["moe.d_task"] = std::to_string(spec.moe->d_task);
    m["moe.router_hidden"] = std::to_string(spec.moe->router_hidden);
    m["moe.expert_width"] = std::to_string(spec.moe->expert_width);
  }
  return m;
}

ModelSpec spec_from_meta(const std::map<std::string, std::string>& meta) {
  const auto kind = meta.find("kind");
  if (kind == meta.end()) throw CheckpointError("checkpoint manifest lacks 'kind'");
  if (kind->second != "dense" && kind->second != "mtu") {
    throw CheckpointError("checkpoint kind '" + kind->second + "' is neither dense nor mtu");
  }
  ModelSpec spec;
  for (const auto& f : kFields) spec.denoiser.*f.member = parse_size(meta, f.key);
  const auto tasks = meta.find("tasks");
  if (tasks == meta.end()) throw CheckpointError("checkpoint manifest lacks 'tasks'");
  try {
    spec.tasks = parse_task_list(tasks->second);
  } catch (const DataError& e) {
    throw CheckpointError(std::string("checkpoint task registry: ") + e.what());
  }
  if (kind->second == "mtu") {
    MoEConfig moe;
    moe.num_experts = parse_size(meta, "moe.num_experts");
    moe.d_task = parse_size(meta, "moe.d_task");
    moe.router_hidden = parse_size(meta, "moe.router_hidden");
    moe.expert_width = parse_size(meta, "moe.expert_width");
    const auto k = meta.find("moe.top_k");
    if (k == meta.end()) throw CheckpointError("checkpoint manifest lacks 'moe.top_k'");
    if (k->second != "none") moe.top_k = parse_size(meta, "moe.top_k");
    spec.moe = moe;
  }
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint describes an invalid model: ") + e.what());
  }
  return spec;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Denoiser<T>& model, const AdamW<T>* optimizer,
                     const std::map<std::string, std::string>& extra) {
  io::Container c;
  c.meta = spec_meta(model.spec());
  c.meta["dtype"] = std::is_same_v<T, float> ? "f32" : "f64";
  if (optimizer) {
    const auto& oc = optimizer->config();
    c.meta["optim.step"] = std::to_string(optimizer->steps());
    c.meta["optim.lr"] = fmt_double(oc.lr);
    c.meta["optim.beta1"] = fmt_double(oc.beta1);
    c.meta["optim.beta2"] = fmt_double(oc.beta2);
    c.meta["optim.eps"] = fmt_double(oc.eps);
    c.meta["optim.weight_decay"] = fmt_double(oc.weight_decay);
  }
  for (const auto& [k, v] : extra) {
    if (c.meta.contains(k)) throw std::invalid_argument("checkpoint meta key '" + k + "' is reserved");
    c.meta[k] = v;
  }
  for (const auto& [name, e] : model.params()) {
    c.add_real<T>(name, e.value.shape(), e.value.data(), std::string(component_name(e.tag)), e.frozen);
  }
  if (optimizer) {
    for (const auto& [name, mom] : optimizer->state()) {
      const Shape s{mom.m.size()};
      c.add_real<T>(std::string(kMomentM) + name, s, mom.m, "other");
      c.add_real<T>(std::string(kMomentV) + name, s, mom.v, "other");
    }
  }
  io::write_container(path, c);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const auto c = io::read_container(path);
  auto spec = spec_from_meta(c.meta);
  ParamTree<T> tree;
  std::map<std::string, typename AdamW<T>::Moments> moments;
  for (const auto& b : c.blobs) {
    if (b.dtype == io::DType::kI32) throw CheckpointError("checkpoint entry '" + b.name + "' holds integers");
    const std::string_view name = b.name;
    if (name.starts_with(kMomentM)) {
      moments[std::string(name.substr(kMomentM.size()))].m = b.as<T>();
    } else if (name.starts_with(kMomentV)) {
      moments[std::string(name.substr(kMomentV.size()))].v = b.as<T>();
    } else {
      Component tag;
      try {
        tag = parse_component(b.tag);
      } catch (const std::exception&) {
        throw CheckpointError("checkpoint entry '" + b.name + "' has unknown tag '" + b.tag + "'");
      }
      tree.add(b.name, b.shape, b.as<T>(), tag, b.frozen);
    }
  }
  Checkpoint<T> out{Denoiser<T>(std::move(spec), std::move(tree)), std::nullopt, c.meta};
  if (c.meta.contains("optim.step")) {
    AdamWConfig oc{parse_double(c.meta, "optim.lr"), parse_double(c.meta, "optim.beta1"),
                   parse_double(c.meta, "optim.beta2"), parse_double(c.meta, "optim.eps"),
                   parse_double(c.meta, "optim.weight_decay")};
    AdamW<T> opt(oc);
    opt.set_steps(static_cast<std::int64_t>(parse_size(c.meta, "optim.step")));
    for (auto& [name, mom] : moments) {
      if (!out.model.params().contains(name)) {
        throw CheckpointError("optimizer state for unknown parameter '" + name + "'");
      }
      const auto n = out.model.params().tensor(name).numel();
      if (mom.m.size() != n || mom.v.size() != n) {
        throw CheckpointError("optimizer state for '" + name + "' has the wrong size");
      }
    }
    opt.state() = std::move(moments);
    out.optimizer = std::move(opt);
  } else if (!moments.empty()) {
    throw CheckpointError("checkpoint has optimizer moments but no optimizer step");
  }
  return out;
}

template void save_checkpoint(const std::filesystem::path&, const Denoiser<float>&, const AdamW<float>*,
                              const std::map<std::string, std::string>&);
template void save_checkpoint(const std::filesystem::path&, const Denoiser<double>&, const AdamW<double>*,
                              const std::map<std::string, std::string>&);
template Checkpoint<float> load_checkpoint(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint(const std::filesystem::path&);

}  // namespace mtu
