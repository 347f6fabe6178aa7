// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Classical emission-absorption compositing:
//   alpha_i = 1 - exp(-sigma_i * delta_i)
//   T_i     = prod_{j<i} (1 - alpha_j)
//   out     = sum_i T_i alpha_i v_i   (+ T_{n+1} * background)

#include <span>
#include <vector>

namespace triedit {

template <typename T>
struct CompositeWeights {
  std::vector<T> alpha;
  std::vector<T> transmittance;  // n + 1 entries; back() is the residual T_{n+1}
  std::vector<T> weights;        // T_i * alpha_i

  T accumulated() const;  // sum of weights
  T residual() const { return transmittance.back(); }
};

template <typename T>
CompositeWeights<T> composite_weights(std::span<const T> sigmas, std::span<const T> deltas);

template <typename T>
struct CompositeResult {
  std::vector<T> value;  // composited values, one entry per channel
  T depth = 0;           // sum_i w_i t_i
  T alpha = 0;           // sum_i w_i
  std::vector<T> weights;
  std::vector<T> transmittance;  // T_1..T_n
};

/// Composites `values` (n x channels, row-major) and, when `depths` is
/// non-empty, the sample depths. Throws on NaN, negative sigma or
/// non-positive delta.
template <typename T>
CompositeResult<T> composite(std::span<const T> sigmas, std::span<const T> deltas, std::span<const T> values,
                             int channels, std::span<const T> depths = {});

/// Reverse mode for out = sum_i w_i v_i + T_{n+1} * background. Adds the
/// sigma gradients to `d_sigma` and writes w_i * grad into `d_values` when
/// non-null. `background` may be empty (treated as zero).
template <typename T>
void composite_backward(std::span<const T> deltas, const CompositeWeights<T>& w, std::span<const T> values,
                        int channels, std::span<const T> background, std::span<const T> grad, T* d_sigma,
                        T* d_values);

}  // namespace triedit
