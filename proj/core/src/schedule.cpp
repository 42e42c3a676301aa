#include "mtu/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mtu {

namespace {
constexpr double kMaxBeta = 0.999;
}  // namespace

NoiseSchedule NoiseSchedule::linear(std::size_t timesteps) {
  if (timesteps < 2) throw std::invalid_argument("noise schedule needs T >= 2");
  const double scale = 1000.0 / static_cast<double>(timesteps);
  const double b0 = 1e-4 * scale, b1 = 0.02 * scale;
  std::vector<double> a(timesteps + 1);
  a[0] = 1.0;
  for (std::size_t t = 1; t <= timesteps; ++t) {
    // Capped so short schedules keep a_T > 0.
    const double beta =
        std::min(kMaxBeta, b0 + (b1 - b0) * static_cast<double>(t - 1) / static_cast<double>(timesteps - 1));
    a[t] = a[t - 1] * (1.0 - beta);
  }
  return NoiseSchedule(std::move(a));
}

NoiseSchedule::NoiseSchedule(std::vector<double> a) : a_(std::move(a)) {
  if (a_.size() < 3) throw std::invalid_argument("noise schedule needs T >= 2");
  if (std::abs(a_[0] - 1.0) > 1e-6) throw std::invalid_argument("noise schedule must start at a_0 = 1");
  for (std::size_t t = 0; t < a_.size(); ++t) {
    if (!(a_[t] >= 0.0 && a_[t] <= 1.0)) throw std::invalid_argument("noise schedule value outside [0, 1]");
    if (t && !(a_[t] < a_[t - 1])) throw std::invalid_argument("noise schedule must strictly decrease");
  }
}

double NoiseSchedule::a(std::size_t t) const {
  if (t >= a_.size()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(timesteps()) + "]");
  }
  return a_[t];
}

template <class T>
Tensor<T> forward_noise(const Tensor<T>& z0, std::span<const int> t, const Tensor<T>& eps,
                        const NoiseSchedule& schedule) {
  check_same_shape(z0.shape(), eps.shape(), "forward_noise");
  if (z0.rank() < 1 || z0.dim(0) != t.size()) {
    throw ShapeError("forward_noise: " + std::to_string(t.size()) + " timesteps for batch " + shape_str(z0.shape()));
  }
  const std::size_t per = z0.numel() / t.size();
  std::vector<T> out(z0.numel());
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (t[b] < 1 || static_cast<std::size_t>(t[b]) > schedule.timesteps()) {
      throw std::out_of_range("forward_noise: timestep " + std::to_string(t[b]) + " outside [1, " +
                              std::to_string(schedule.timesteps()) + "]");
    }
    const double a = schedule.a(static_cast<std::size_t>(t[b]));
    const T sa = static_cast<T>(std::sqrt(a)), sn = static_cast<T>(std::sqrt(1.0 - a));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = sa * z0.data()[i] + sn * eps.data()[i];
  }
  return Tensor<T>::constant(z0.shape(), std::move(out));
}

template Tensor<float> forward_noise(const Tensor<float>&, std::span<const int>, const Tensor<float>&,
                                     const NoiseSchedule&);
template Tensor<double> forward_noise(const Tensor<double>&, std::span<const int>, const Tensor<double>&,
                                      const NoiseSchedule&);

}  // namespace mtu
