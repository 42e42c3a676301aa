#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mtu/tensor.hpp"

namespace mtu::ops {

inline constexpr double kLayerNormEps = 1e-5;

// Linear algebra.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// y = x·Wᵀ + b over the last axis; weight is [out, in], bias [out] (optional).
template <class T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});
/// Stride-1 2-D convolution on NCHW input, weight [O, C, kh, kw].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t padding);

// Normalization and activations.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = kLayerNormEps);
template <class T> Tensor<T> softmax(const Tensor<T>& x);
template <class T> Tensor<T> relu(const Tensor<T>& x);
/// tanh approximation.
template <class T> Tensor<T> gelu(const Tensor<T>& x);

/// Multi-head scaled dot-product attention. q: [B, Lq, D]; k, v: [B, Lk, D].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads);

// Structural.
template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// [B, C, H, W] -> [B, (H/p)(W/p), C·p·p]
template <class T> Tensor<T> patchify(const Tensor<T>& x, std::size_t patch);
/// Inverse of patchify.
template <class T>
Tensor<T> unpatchify(const Tensor<T>& x, std::size_t channels, std::size_t height, std::size_t width,
                     std::size_t patch);
/// Rows of table [V, D] gathered by ids; result shape = prefix + [D].
template <class T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, Shape prefix);

// Elementwise.
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T s);
/// b's shape must equal the trailing dims of a; b is repeated over the leading ones.
template <class T> Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b);
/// x: [B, ..., D], rows: [B, D]; adds rows[b] to every D-vector of example b.
template <class T> Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& rows);

// Reductions.
template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);
/// mean((a - b)^2) over all elements.
template <class T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);
/// Mean softmax cross-entropy over rows of logits [M, C].
template <class T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

// Routing primitives.
/// Softmax over the top_k largest logits (ties -> lower index), zeros elsewhere.
/// The normalizer is summed in sorted order, so the result is invariant under
/// a joint permutation of logits and outputs. top_k = nullopt keeps all.
template <class T> Tensor<T> route_weights(const Tensor<T>& logits, std::optional<std::size_t> top_k);
/// Σ_i w_i·xs_i with an order-independent per-element reduction; entries with
/// w_i == 0 may be left undefined in xs.
template <class T> Tensor<T> weighted_sum(const std::vector<Tensor<T>>& xs, const Tensor<T>& w);

/// Indices of the top_k largest values, ties broken by lower index, ascending index order.
std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k);

}  // namespace mtu::ops
