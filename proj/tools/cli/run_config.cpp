#include "cli/run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <functional>
#include <sstream>

#include "mtu/errors.hpp"

namespace mtu::cli {
namespace {

namespace pt = boost::property_tree;

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + text + "'");
  return v;
}

template <class T>
std::string show(T v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Field num(const char* section, const char* key, std::function<T&(RunConfig&)> ref) {
  const std::string full = std::string(section) + "." + key;
  return {section, key, [ref](const RunConfig& c) { return show(ref(const_cast<RunConfig&>(c))); },
          [ref, full](RunConfig& c, const std::string& v) { ref(c) = parse_number<T>(full, v); }};
}

const std::vector<Field>& fields() {
  using S = std::size_t;
  static const std::vector<Field> table{
      num<std::uint64_t>("run", "seed", [](RunConfig& c) -> auto& { return c.seed; }),
      {"run", "out", [](const RunConfig& c) { return c.out.string(); },
       [](RunConfig& c, const std::string& v) { c.out = v; }},

      num<S>("model", "image_size", [](RunConfig& c) -> auto& { return c.model.image_size; }),
      num<S>("model", "channels", [](RunConfig& c) -> auto& { return c.model.channels; }),
      num<S>("model", "num_blocks", [](RunConfig& c) -> auto& { return c.model.num_blocks; }),
      num<S>("model", "d_model", [](RunConfig& c) -> auto& { return c.model.d_model; }),
      num<S>("model", "d_ffn", [](RunConfig& c) -> auto& { return c.model.d_ffn; }),
      num<S>("model", "heads", [](RunConfig& c) -> auto& { return c.model.heads; }),
      num<S>("model", "d_text", [](RunConfig& c) -> auto& { return c.model.d_text; }),
      num<S>("model", "vocab", [](RunConfig& c) -> auto& { return c.model.vocab; }),
      num<S>("model", "text_len", [](RunConfig& c) -> auto& { return c.model.text_len; }),
      num<S>("model", "timesteps", [](RunConfig& c) -> auto& { return c.model.timesteps; }),
      num<S>("model", "stem_channels", [](RunConfig& c) -> auto& { return c.model.stem_channels; }),
      num<S>("model", "patch", [](RunConfig& c) -> auto& { return c.model.patch; }),

      num<S>("moe", "num_experts", [](RunConfig& c) -> auto& { return c.moe.num_experts; }),
      {"moe", "top_k", [](const RunConfig& c) { return show(c.moe.top_k.value_or(0)); },
       [](RunConfig& c, const std::string& v) {
         const auto k = parse_number<S>("moe.top_k", v);
         c.moe.top_k = k ? std::optional<S>(k) : std::nullopt;
       }},
      num<S>("moe", "d_task", [](RunConfig& c) -> auto& { return c.moe.d_task; }),
      num<S>("moe", "router_hidden", [](RunConfig& c) -> auto& { return c.moe.router_hidden; }),
      num<S>("moe", "expert_width", [](RunConfig& c) -> auto& { return c.moe.expert_width; }),

      num<S>("train", "steps", [](RunConfig& c) -> auto& { return c.train.steps; }),
      num<S>("train", "batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }),
      num<double>("train", "lr", [](RunConfig& c) -> auto& { return c.train.optim.lr; }),
      num<double>("train", "beta1", [](RunConfig& c) -> auto& { return c.train.optim.beta1; }),
      num<double>("train", "beta2", [](RunConfig& c) -> auto& { return c.train.optim.beta2; }),
      num<double>("train", "eps", [](RunConfig& c) -> auto& { return c.train.optim.eps; }),
      num<double>("train", "weight_decay", [](RunConfig& c) -> auto& { return c.train.optim.weight_decay; }),
      num<double>("train", "cond_dropout", [](RunConfig& c) -> auto& { return c.train.cond_dropout; }),
      num<S>("train", "log_every", [](RunConfig& c) -> auto& { return c.log_every; }),

      {"data", "dir", [](const RunConfig& c) { return c.data_dir.string(); },
       [](RunConfig& c, const std::string& v) { c.data_dir = v; }},
      num<std::uint64_t>("data", "seed", [](RunConfig& c) -> auto& { return c.data_seed; }),
      num<S>("data", "train", [](RunConfig& c) -> auto& { return c.sizes.train; }),
      num<S>("data", "val", [](RunConfig& c) -> auto& { return c.sizes.val; }),
      num<S>("data", "test", [](RunConfig& c) -> auto& { return c.sizes.test; }),

      {"tasks", "list", [](const RunConfig& c) { return join_tasks(c.tasks); },
       [](RunConfig& c, const std::string& v) {
         try {
           c.tasks = parse_task_list(v);
         } catch (const std::exception& e) {
           throw ConfigError(std::string("tasks.list: ") + e.what());
         }
       }},

      num<S>("sample", "steps", [](RunConfig& c) -> auto& { return c.sample.steps; }),
      num<double>("sample", "text_scale", [](RunConfig& c) -> auto& { return c.sample.text_scale; }),
      num<double>("sample", "image_scale", [](RunConfig& c) -> auto& { return c.sample.image_scale; }),
      num<S>("sample", "count", [](RunConfig& c) -> auto& { return c.sample.count; }),

      {"eval", "split", [](const RunConfig& c) { return std::string(data::split_name(c.eval.split)); },
       [](RunConfig& c, const std::string& v) {
         try {
           c.eval.split = data::parse_split(v);
         } catch (const std::exception& e) {
           throw ConfigError(std::string("eval.split: ") + e.what());
         }
       }},
      num<S>("eval", "count", [](RunConfig& c) -> auto& { return c.eval.count; }),
      num<S>("eval", "steps", [](RunConfig& c) -> auto& { return c.eval.steps; }),
      num<S>("eval", "batch_size", [](RunConfig& c) -> auto& { return c.eval.batch_size; }),
  };
  return table;
}

const Field& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (section == f.section && key == f.key) return f;
  }
  throw ConfigError("unknown config key " + section + "." + key);
}

void validate(const RunConfig& c) {
  c.model.validate();
  c.moe.validate(c.model.d_ffn);
  if (c.tasks.empty()) throw ConfigError("tasks.list: empty");
  if (c.train.batch_size == 0) throw ConfigError("train.batch_size: must be positive");
  if (c.train.optim.lr <= 0) throw ConfigError("train.lr: must be positive");
  if (c.train.cond_dropout < 0 || c.train.cond_dropout > 1) throw ConfigError("train.cond_dropout: outside [0, 1]");
  if (c.sample.steps == 0 || c.sample.steps > c.model.timesteps) {
    throw ConfigError("sample.steps: outside [1, " + std::to_string(c.model.timesteps) + "]");
  }
  if (c.eval.steps == 0 || c.eval.steps > c.model.timesteps) {
    throw ConfigError("eval.steps: outside [1, " + std::to_string(c.model.timesteps) + "]");
  }
  if (c.eval.batch_size == 0) throw ConfigError("eval.batch_size: must be positive");
  if (c.log_every == 0) throw ConfigError("train.log_every: must be positive");
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not section.key=value");
  }
  find_field(assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1))
      .set(cfg, assignment.substr(eq + 1));
}

RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!file.empty()) {
    if (!std::filesystem::exists(file)) throw ConfigError("config file " + file.string() + " does not exist");
    pt::ptree tree;
    try {
      pt::read_ini(file.string(), tree);
    } catch (const pt::ini_parser_error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    for (const auto& [section, keys] : tree) {
      if (keys.empty()) throw ConfigError("config: key '" + section + "' outside a section");
      for (const auto& [key, value] : keys) find_field(section, key).set(cfg, value.data());
    }
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  validate(cfg);
  return cfg;
}

std::string to_ini(const RunConfig& cfg) {
  pt::ptree tree;
  for (const auto& f : fields()) tree.put(pt::ptree::path_type(std::string(f.section) + "/" + f.key, '/'), f.get(cfg));
  std::ostringstream os;
  pt::write_ini(os, tree);
  return os.str();
}

}  // namespace mtu::cli
