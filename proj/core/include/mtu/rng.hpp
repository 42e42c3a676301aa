#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace mtu {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a path of integers
/// (splitmix64 chaining), e.g. mix_seed(seed, {task, split, index}).
std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts);

template <class T>
std::vector<T> normal_vector(Rng& rng, std::size_t n, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace mtu
