// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "triedit/camera.hpp"
#include "triedit/edit_token.hpp"
#include "triedit/field.hpp"
#include "triedit/image.hpp"
#include "triedit/selection.hpp"

namespace triedit {

/// Which side of the selection has its density forced to zero.
enum class DeletionMode : uint8_t { kOff = 0, kSelected = 1, kUnselected = 2 };

struct RenderOptions {
  int samples_per_ray = 128;
  Rgb background{0.0f, 0.0f, 0.0f};
  bool features = false;
  /// Accumulate sum_i w_i [predicate] per ray (needs `selection`).
  bool selection_weight = false;
  std::optional<SelectionParams> selection;
  /// When set, the predicate is read from the cache instead of f_sem.
  std::shared_ptr<const BakedMask> baked;
  DeletionMode deletion = DeletionMode::kOff;
  /// Enabled tokens in application order.
  std::vector<const EditToken*> tokens;
  int workers = 0;
};

/// Flat per-ray outputs.
struct RenderBuffers {
  int count = 0;
  int sem_dim = 0;
  std::vector<float> rgb;       // count x 3
  std::vector<float> features;  // count x sem_dim (when requested)
  std::vector<float> depth;     // sum_i w_i t_i
  std::vector<float> alpha;     // sum_i w_i
  std::vector<float> selected;  // sum_i w_i [predicate] (when requested)
};

struct RenderOutput {
  Image rgb;
  Image features;
  Image depth;
  Image alpha;
  Image selected;
};

RenderBuffers render_rays(std::span<const Ray> rays, const TriPlaneField<float>& field, const RenderOptions& options);
RenderBuffers render_pixels(const Camera& camera, std::span<const PixelIndex> pixels,
                            const TriPlaneField<float>& field, const RenderOptions& options);
RenderOutput render_view(const Camera& camera, const TriPlaneField<float>& field, const RenderOptions& options);

/// Options with the enabled tokens of `stack` attached.
RenderOptions with_stack(RenderOptions options, const EditStack& stack);

}  // namespace triedit
