// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Feature-distance object selection. A point belongs to the selection when
// the squared distance between its semantic feature and the mean query
// feature f_bar is strictly below the threshold thr.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "triedit/camera.hpp"
#include "triedit/common.hpp"
#include "triedit/image.hpp"

namespace triedit {

template <typename T>
struct TriPlaneField;

struct SelectionParams {
  std::vector<float> f_bar;
  float thr = 0.0f;
  uint64_t field_version = 0;

  bool empty() const { return f_bar.empty(); }
  bool operator==(const SelectionParams&) const = default;
};

template <typename T>
inline T feature_distance(std::span<const T> f_sem, std::span<const float> f_bar) {
  T d = 0;
  for (size_t k = 0; k < f_bar.size(); ++k) {
    const T e = static_cast<T>(f_bar[k]) - f_sem[k];
    d += e * e;
  }
  return d;
}

template <typename T>
inline bool feature_selected(std::span<const T> f_sem, const SelectionParams& sel) {
  return feature_distance(f_sem, std::span<const float>(sel.f_bar)) < static_cast<T>(sel.thr);
}

/// Occupancy cache of the predicate at voxel centers; lookups use the
/// nearest voxel.
struct BakedMask {
  int resolution = 0;
  Aabb bounds;
  uint64_t bake_version = 0;
  std::vector<uint8_t> occupied;  // index (z*V + y)*V + x

  bool lookup(const Vec3& p) const;
  Vec3 voxel_center(int x, int y, int z) const;
  size_t count() const;
};

struct SelectionMask {
  SelectionParams params;
  std::shared_ptr<const BakedMask> baked;
};

/// Patch in view pixel coordinates: a rectangle or a brush bitmap.
struct Patch {
  std::vector<PixelIndex> pixels;

  static Patch rectangle(int x, int y, int w, int h, int image_width, int image_height);
  /// Pixels where the single-channel bitmap exceeds 0.5.
  static Patch from_bitmap(const Image& bitmap);
};

/// Mean rendered feature f_2D over the patch pixels.
std::vector<float> query_mean_feature(const Camera& camera, const Patch& patch, const TriPlaneField<float>& field,
                                      int samples_per_ray, int workers = 0);

/// Live predicate at a point; false outside the bounds.
template <typename T>
bool mask_predicate(const Vec3& p, const SelectionParams& sel, const TriPlaneField<T>& field);

/// Predicate over many points at once (points outside the bounds are false).
template <typename T>
std::vector<uint8_t> mask_predicate_batch(std::span<const Vec3> points, const SelectionParams& sel,
                                          const TriPlaneField<T>& field);

BakedMask bake_mask(const SelectionParams& sel, int resolution, const TriPlaneField<float>& field);

/// Per pixel: accumulated weight of selected samples >= 0.5.
Image project_mask(const Camera& camera, const SelectionParams& sel, const TriPlaneField<float>& field,
                   int samples_per_ray, int workers = 0);

/// Squared feature distances to f_bar at `count` stratified probe points,
/// keeping only points whose density exceeds `min_sigma`.
std::vector<float> probe_feature_distances(std::span<const float> f_bar, const TriPlaneField<float>& field,
                                           int count, uint64_t seed, float min_sigma);

struct DistanceRange {
  float p01 = 0.0f;
  float p99 = 0.0f;
};
DistanceRange distance_percentiles(std::vector<float> distances);

/// Otsu split of the distance histogram (two-class variance maximization).
float otsu_threshold(std::span<const float> distances, int bins = 256);

/// Slider range and suggested threshold for a query feature. `samples` is
/// the number of dense probes; with none, `suggested` is 0.
struct ThresholdCalibration {
  DistanceRange range;
  float suggested = 0.0f;
  size_t samples = 0;
};
inline constexpr float kProbeMinSigma = 1.0f;
ThresholdCalibration calibrate_threshold(std::span<const float> f_bar, const TriPlaneField<float>& field, int count,
                                         uint64_t seed, float min_sigma = kProbeMinSigma);

}  // namespace triedit
