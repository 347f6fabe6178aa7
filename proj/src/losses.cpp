// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/losses.hpp"

#include <cmath>

#include "triedit/common.hpp"

namespace triedit {
namespace {

// Visits every adjacent pair (a, b) of one plane as element offsets.
template <typename Fn>
void for_each_neighbor_pair(int resolution, int features, Fn&& fn) {
  const size_t r = static_cast<size_t>(resolution);
  const size_t f = static_cast<size_t>(features);
  for (size_t v = 0; v < r; ++v) {
    for (size_t u = 0; u < r; ++u) {
      const size_t base = (v * r + u) * f;
      if (u + 1 < r) {
        for (size_t k = 0; k < f; ++k) fn(base + k, base + f + k);
      }
      if (v + 1 < r) {
        for (size_t k = 0; k < f; ++k) fn(base + k, base + r * f + k);
      }
    }
  }
}

}  // namespace

template <typename T>
double loss_photometric(std::span<const T> rendered, std::span<const T> target) {
  if (rendered.empty()) fail(ErrorCode::kUsage, "photometric loss: empty batch");
  if (rendered.size() != target.size()) fail(ErrorCode::kUsage, "photometric loss: size mismatch");
  double s = 0;
  for (size_t i = 0; i < rendered.size(); ++i) {
    const double e = static_cast<double>(rendered[i]) - static_cast<double>(target[i]);
    s += e * e;
  }
  return s / static_cast<double>(rendered.size());
}

template <typename T>
double loss_feature(std::span<const T> rendered, std::span<const T> target, int dim) {
  if (dim <= 0 || rendered.size() % dim != 0 || target.size() != rendered.size()) {
    fail(ErrorCode::kUsage, "feature loss: dimension mismatch");
  }
  return loss_photometric(rendered, target);
}

template <typename T>
double loss_l1(const std::array<std::vector<T>, 3>& planes) {
  double s = 0;
  for (const auto& p : planes) {
    for (T v : p) s += std::abs(static_cast<double>(v));
  }
  return s;
}

template <typename T>
double loss_tv(const std::array<std::vector<T>, 3>& planes, int resolution, int features) {
  double s = 0;
  for (const auto& p : planes) {
    for_each_neighbor_pair(resolution, features, [&](size_t a, size_t b) {
      const double d = static_cast<double>(p[b]) - static_cast<double>(p[a]);
      s += d * d;
    });
  }
  return s;
}

template <typename T>
void loss_l1_grad(const std::array<std::vector<T>, 3>& planes, T scale, std::array<std::vector<T>, 3>* grad) {
  for (int i = 0; i < 3; ++i) {
    const auto& p = planes[i];
    auto& g = (*grad)[i];
    for (size_t k = 0; k < p.size(); ++k) {
      if (p[k] > T(0)) {
        g[k] += scale;
      } else if (p[k] < T(0)) {
        g[k] -= scale;
      }
    }
  }
}

template <typename T>
void loss_tv_grad(const std::array<std::vector<T>, 3>& planes, int resolution, int features, T scale,
                  std::array<std::vector<T>, 3>* grad) {
  for (int i = 0; i < 3; ++i) {
    const auto& p = planes[i];
    auto& g = (*grad)[i];
    for_each_neighbor_pair(resolution, features, [&](size_t a, size_t b) {
      const T d = T(2) * scale * (p[b] - p[a]);
      g[b] += d;
      g[a] -= d;
    });
  }
}

template <typename T>
double loss_depth(std::span<const T> rendered, std::span<const T> edited, std::span<const T> original,
                  std::span<const uint8_t> mask) {
  const size_t n = rendered.size();
  if (edited.size() != n || original.size() != n || mask.size() != n) {
    fail(ErrorCode::kUsage, "depth loss: image planes are not aligned");
  }
  double in = 0, out = 0;
  size_t n_in = 0, n_out = 0;
  for (size_t i = 0; i < n; ++i) {
    if (mask[i]) {
      const double e = static_cast<double>(rendered[i]) - static_cast<double>(edited[i]);
      in += e * e;
      ++n_in;
    } else {
      const double e = static_cast<double>(rendered[i]) - static_cast<double>(original[i]);
      out += e * e;
      ++n_out;
    }
  }
  return (n_in ? in / n_in : 0.0) + (n_out ? out / n_out : 0.0);
}

template <typename T>
double loss_density_preserve(std::span<const T> sigma_orig, std::span<const T> sigma_edit,
                             std::span<const uint8_t> inside) {
  const size_t n = sigma_orig.size();
  if (sigma_edit.size() != n || inside.size() != n) fail(ErrorCode::kUsage, "density loss: probe arrays misaligned");
  double s = 0;
  size_t count = 0;
  for (size_t i = 0; i < n; ++i) {
    if (inside[i]) continue;
    const double e = static_cast<double>(sigma_orig[i]) - static_cast<double>(sigma_edit[i]);
    s += e * e;
    ++count;
  }
  return count ? s / count : 0.0;
}

#define TRIEDIT_INSTANTIATE(T)                                                                                    \
  template double loss_photometric<T>(std::span<const T>, std::span<const T>);                                   \
  template double loss_feature<T>(std::span<const T>, std::span<const T>, int);                                  \
  template double loss_l1<T>(const std::array<std::vector<T>, 3>&);                                              \
  template double loss_tv<T>(const std::array<std::vector<T>, 3>&, int, int);                                    \
  template void loss_l1_grad<T>(const std::array<std::vector<T>, 3>&, T, std::array<std::vector<T>, 3>*);        \
  template void loss_tv_grad<T>(const std::array<std::vector<T>, 3>&, int, int, T,                               \
                                std::array<std::vector<T>, 3>*);                                                 \
  template double loss_depth<T>(std::span<const T>, std::span<const T>, std::span<const T>,                      \
                                std::span<const uint8_t>);                                                       \
  template double loss_density_preserve<T>(std::span<const T>, std::span<const T>, std::span<const uint8_t>);
TRIEDIT_INSTANTIATE(float)
TRIEDIT_INSTANTIATE(double)
#undef TRIEDIT_INSTANTIATE

}  // namespace triedit
