#include "mtu/optim.hpp"

#include <cmath>

namespace mtu {

template <class T>
void AdamW<T>::step(ParamTree<T>& params) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T step_size = static_cast<T>(cfg_.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg_.eps);
  const T decay = static_cast<T>(1.0 - cfg_.lr * cfg_.weight_decay);
  for (auto& [name, entry] : params) {
    if (entry.frozen) continue;
    auto w = entry.value.mutable_data();
    auto& mom = state_[name];
    if (mom.m.size() != w.size()) {
      mom.m.assign(w.size(), T(0));
      mom.v.assign(w.size(), T(0));
    }
    const auto g = entry.value.grad();
    const bool has_g = g.size() == w.size();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = has_g ? g[i] : T(0);
      mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * gi;
      mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * gi * gi;
      w[i] = w[i] * decay - step_size * mom.m[i] / (std::sqrt(mom.v[i]) * inv_sqrt_bc2 + eps);
    }
    detail::check_finite<T>(w, "AdamW");
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace mtu
