#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mtu/param_tree.hpp"

namespace mtu {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  bool operator==(const AdamWConfig&) const = default;
};

/// Adam with decoupled weight decay. Frozen entries are never touched.
template <class T>
class AdamW {
 public:
  struct Moments {
    std::vector<T> m;
    std::vector<T> v;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// One update from the accumulated gradients; entries without a gradient
  /// still receive weight decay. Throws NumericError if an update is non-finite.
  void step(ParamTree<T>& params);

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  const std::map<std::string, Moments>& state() const { return state_; }
  std::map<std::string, Moments>& state() { return state_; }

 private:
  AdamWConfig cfg_;
  std::int64_t steps_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace mtu
