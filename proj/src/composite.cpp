// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/composite.hpp"

#include <cmath>
#include <string>

#include "triedit/common.hpp"

namespace triedit {

template <typename T>
T CompositeWeights<T>::accumulated() const {
  T s = 0;
  for (T v : weights) s += v;
  return s;
}

template <typename T>
CompositeWeights<T> composite_weights(std::span<const T> sigmas, std::span<const T> deltas) {
  if (sigmas.size() != deltas.size()) fail(ErrorCode::kUsage, "composite: sigma/delta length mismatch");
  const size_t n = sigmas.size();
  CompositeWeights<T> w;
  w.alpha.resize(n);
  w.weights.resize(n);
  w.transmittance.resize(n + 1);
  T trans = 1;
  for (size_t i = 0; i < n; ++i) {
    const T s = sigmas[i];
    const T d = deltas[i];
    if (std::isnan(static_cast<double>(s)) || std::isnan(static_cast<double>(d))) {
      fail(ErrorCode::kNumerical, "composite: NaN input at sample " + std::to_string(i));
    }
    if (s < T(0)) fail(ErrorCode::kUsage, "composite: negative density");
    if (!(d > T(0))) fail(ErrorCode::kUsage, "composite: non-positive spacing");
    const T keep = std::exp(-s * d);
    w.transmittance[i] = trans;
    w.alpha[i] = T(1) - keep;
    w.weights[i] = trans * w.alpha[i];
    trans *= keep;
  }
  w.transmittance[n] = trans;
  return w;
}

template <typename T>
CompositeResult<T> composite(std::span<const T> sigmas, std::span<const T> deltas, std::span<const T> values,
                             int channels, std::span<const T> depths) {
  const size_t n = sigmas.size();
  if (values.size() != n * static_cast<size_t>(channels)) fail(ErrorCode::kUsage, "composite: values length mismatch");
  if (!depths.empty() && depths.size() != n) fail(ErrorCode::kUsage, "composite: depth length mismatch");
  for (T v : values) {
    if (std::isnan(static_cast<double>(v))) fail(ErrorCode::kNumerical, "composite: NaN value");
  }
  CompositeWeights<T> w = composite_weights(sigmas, deltas);
  CompositeResult<T> r;
  r.value.assign(channels, T(0));
  for (size_t i = 0; i < n; ++i) {
    const T wi = w.weights[i];
    for (int c = 0; c < channels; ++c) r.value[c] += wi * values[i * channels + c];
    if (!depths.empty()) r.depth += wi * depths[i];
    r.alpha += wi;
  }
  r.weights = std::move(w.weights);
  w.transmittance.pop_back();
  r.transmittance = std::move(w.transmittance);
  return r;
}

template <typename T>
void composite_backward(std::span<const T> deltas, const CompositeWeights<T>& w, std::span<const T> values,
                        int channels, std::span<const T> background, std::span<const T> grad, T* d_sigma,
                        T* d_values) {
  const size_t n = deltas.size();
  // suffix = sum_{i>k} w_i <grad, v_i> + T_{n+1} <grad, background>
  T suffix = 0;
  if (!background.empty()) {
    for (int c = 0; c < channels; ++c) suffix += grad[c] * background[c];
    suffix *= w.transmittance[n];
  }
  for (size_t k = n; k-- > 0;) {
    const T* v = values.data() + k * channels;
    T gv = 0;
    for (int c = 0; c < channels; ++c) gv += grad[c] * v[c];
    if (d_sigma) d_sigma[k] += deltas[k] * (w.transmittance[k + 1] * gv - suffix);
    if (d_values) {
      for (int c = 0; c < channels; ++c) d_values[k * channels + c] = w.weights[k] * grad[c];
    }
    suffix += w.weights[k] * gv;
  }
}

#define TRIEDIT_INSTANTIATE(T)                                                                                 \
  template struct CompositeWeights<T>;                                                                          \
  template CompositeWeights<T> composite_weights<T>(std::span<const T>, std::span<const T>);                   \
  template CompositeResult<T> composite<T>(std::span<const T>, std::span<const T>, std::span<const T>, int,    \
                                           std::span<const T>);                                                \
  template void composite_backward<T>(std::span<const T>, const CompositeWeights<T>&, std::span<const T>, int, \
                                      std::span<const T>, std::span<const T>, T*, T*);
TRIEDIT_INSTANTIATE(float)
TRIEDIT_INSTANTIATE(double)
#undef TRIEDIT_INSTANTIATE

}  // namespace triedit
