#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mtu/tensor.hpp"

namespace mtu {

/// Cumulative signal fraction a_0..a_T, a_0 = 1, strictly decreasing.
class NoiseSchedule {
 public:
  /// Linear noise-variance increments beta_t in [1e-4, 0.02]·(1000/T), capped at
  /// 0.999, and a_t = Π(1 - beta_s).
  static NoiseSchedule linear(std::size_t timesteps);
  /// Throws std::invalid_argument unless a_0 = 1 (1e-6), strictly decreasing, values in [0, 1].
  explicit NoiseSchedule(std::vector<double> a);

  std::size_t timesteps() const { return a_.size() - 1; }
  double a(std::size_t t) const;
  std::span<const double> values() const { return a_; }

 private:
  std::vector<double> a_;
};

/// z_t = sqrt(a_t)·z_0 + sqrt(1 - a_t)·ε with one timestep per example (leading axis).
template <class T>
Tensor<T> forward_noise(const Tensor<T>& z0, std::span<const int> t, const Tensor<T>& eps,
                        const NoiseSchedule& schedule);

}  // namespace mtu
