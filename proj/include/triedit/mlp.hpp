// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "triedit/common.hpp"

namespace triedit {

enum class Activation : uint8_t { kRelu = 0, kLeakyRelu = 1, kSigmoid = 2, kIdentity = 3 };

inline constexpr double kLeakySlope = 0.01;

std::string_view activation_name(Activation a);

template <typename T>
struct DenseLayer {
  RowMatrix<T> weight;  // out x in
  Vector<T> bias;       // out
  Activation activation = Activation::kIdentity;

  int in_dim() const { return static_cast<int>(weight.cols()); }
  int out_dim() const { return static_cast<int>(weight.rows()); }
};

/// A chain of dense layers. Parameter order everywhere (gradients, optimizer
/// state, serialization) is layer by layer, weight then bias.
template <typename T>
struct Mlp {
  std::vector<DenseLayer<T>> layers;

  /// Zero-filled network; `dims` has layers+1 entries.
  static Mlp zeros(const std::vector<int>& dims, const std::vector<Activation>& activations);

  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
  void init_kaiming(Rng& rng);

  bool empty() const { return layers.empty(); }
  int in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  int out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
  size_t parameter_count() const;
  bool same_shape(const Mlp& other) const;
  bool all_finite() const;
  void set_zero();
  void add(const Mlp& other);

  /// Visits each parameter array as a flat span.
  template <typename Fn>
  void for_each_array(Fn&& fn) {
    for (auto& layer : layers) {
      fn(std::span<T>(layer.weight.data(), static_cast<size_t>(layer.weight.size())));
      fn(std::span<T>(layer.bias.data(), static_cast<size_t>(layer.bias.size())));
    }
  }
  template <typename Fn>
  void for_each_array(Fn&& fn) const {
    for (const auto& layer : layers) {
      fn(std::span<const T>(layer.weight.data(), static_cast<size_t>(layer.weight.size())));
      fn(std::span<const T>(layer.bias.data(), static_cast<size_t>(layer.bias.size())));
    }
  }

  template <typename U>
  Mlp<U> cast() const {
    Mlp<U> out;
    for (const auto& layer : layers) {
      out.layers.push_back({layer.weight.template cast<U>(), layer.bias.template cast<U>(), layer.activation});
    }
    return out;
  }

  /// Single input vector; same arithmetic as the batched path.
  void forward(std::span<const T> input, std::span<T> output) const;
};

/// Per-layer inputs and pre-activations recorded by a batched forward pass.
template <typename T>
struct MlpTape {
  std::vector<RowMatrix<T>> inputs;
  std::vector<RowMatrix<T>> preacts;
};

/// y = mlp(x) row by row. Every output element is accumulated in a fixed
/// order that does not depend on the row's position in the batch.
template <typename T>
void mlp_forward(const Mlp<T>& mlp, const RowMatrix<T>& x, RowMatrix<T>* y, MlpTape<T>* tape);

/// Backpropagates `dy` (gradient w.r.t. the outputs of the last forward with
/// `tape`). Accumulates parameter gradients into `grad` and writes input
/// gradients into `dx`; either may be null.
template <typename T>
void mlp_backward(const Mlp<T>& mlp, const MlpTape<T>& tape, RowMatrix<T> dy, Mlp<T>* grad,
                  RowMatrix<T>* dx);

// Dense kernels shared with the field evaluator.
namespace kernels {
/// y[i,:] (+)= sum_k x[i,k] * b[k,:]
template <typename T>
void rows_times(const T* x, int n, int k, const T* b, int m, T* y);
/// g[o,:] += sum_i d[i,o] * x[i,:]   (g is m x k)
template <typename T>
void accumulate_outer(const T* d, const T* x, int n, int m, int k, T* g);
}  // namespace kernels

}  // namespace triedit
