// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Loss terms of the training objective. All values are accumulated in double
// precision whatever the parameter type.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace triedit {

/// Mean of squared differences over every element (pixels x channels).
template <typename T>
double loss_photometric(std::span<const T> rendered, std::span<const T> target);

/// Same normalization as the photometric term, over D_sem channels.
template <typename T>
double loss_feature(std::span<const T> rendered, std::span<const T> target, int dim);

/// Sum of absolute plane entries.
template <typename T>
double loss_l1(const std::array<std::vector<T>, 3>& planes);

/// Sum over all planes and channels of squared differences between
/// horizontally and vertically adjacent grid nodes.
template <typename T>
double loss_tv(const std::array<std::vector<T>, 3>& planes, int resolution, int features);

/// Adds scale * d(L1)/dP (sign, zero at zero) into `grad`.
template <typename T>
void loss_l1_grad(const std::array<std::vector<T>, 3>& planes, T scale, std::array<std::vector<T>, 3>* grad);
template <typename T>
void loss_tv_grad(const std::array<std::vector<T>, 3>& planes, int resolution, int features, T scale,
                  std::array<std::vector<T>, 3>* grad);

/// mean_{mask}(R - E)^2 + mean_{!mask}(R - C)^2. An empty side contributes 0.
template <typename T>
double loss_depth(std::span<const T> rendered, std::span<const T> edited, std::span<const T> original,
                  std::span<const uint8_t> mask);

/// Mean over probes with inside[i] == 0 of (orig - edit)^2.
template <typename T>
double loss_density_preserve(std::span<const T> sigma_orig, std::span<const T> sigma_edit,
                             std::span<const uint8_t> inside);

}  // namespace triedit
