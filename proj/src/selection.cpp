// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/selection.hpp"

#include <algorithm>
#include <cmath>

#include "triedit/evaluator.hpp"
#include "triedit/field.hpp"
#include "triedit/renderer.hpp"

namespace triedit {
namespace {

constexpr int kPredicateBatch = 4096;

// Evaluates f_sem for in-bounds points and calls fn(index, f_sem, sigma).
template <typename T, typename Fn>
void for_each_feature(std::span<const Vec3> points, const TriPlaneField<T>& field, Fn&& fn) {
  FieldEvaluator<T> ev;
  std::vector<Vec3> batch;
  std::vector<size_t> index;
  const int d = field.config.sem_dim;
  auto flush = [&] {
    if (batch.empty()) return;
    ev.forward(field, batch, false);
    for (size_t j = 0; j < batch.size(); ++j) {
      fn(index[j], std::span<const T>(ev.f_sem().data() + j * d, d), ev.sigma()[j]);
    }
    batch.clear();
    index.clear();
  };
  for (size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite() || !field.bounds.contains(points[i])) continue;
    batch.push_back(points[i]);
    index.push_back(i);
    if (batch.size() == kPredicateBatch) flush();
  }
  flush();
}

}  // namespace

bool BakedMask::lookup(const Vec3& p) const {
  if (resolution <= 0 || !bounds.contains(p)) return false;
  const Vec3 q = bounds.normalized(p);
  int idx[3];
  for (int a = 0; a < 3; ++a) idx[a] = std::clamp(static_cast<int>(std::floor(q[a] * resolution)), 0, resolution - 1);
  const size_t v = static_cast<size_t>(resolution);
  return occupied[(idx[2] * v + idx[1]) * v + idx[0]] != 0;
}

Vec3 BakedMask::voxel_center(int x, int y, int z) const {
  const Vec3 u((x + 0.5) / resolution, (y + 0.5) / resolution, (z + 0.5) / resolution);
  return bounds.min + (u.array() * bounds.extent().array()).matrix();
}

size_t BakedMask::count() const { return static_cast<size_t>(std::count(occupied.begin(), occupied.end(), 1)); }

Patch Patch::rectangle(int x, int y, int w, int h, int image_width, int image_height) {
  Patch p;
  const int x0 = std::max(0, x), y0 = std::max(0, y);
  const int x1 = std::min(image_width, x + std::max(0, w)), y1 = std::min(image_height, y + std::max(0, h));
  for (int yy = y0; yy < y1; ++yy) {
    for (int xx = x0; xx < x1; ++xx) p.pixels.push_back({xx, yy});
  }
  return p;
}

Patch Patch::from_bitmap(const Image& bitmap) {
  Patch p;
  for (int y = 0; y < bitmap.height; ++y) {
    for (int x = 0; x < bitmap.width; ++x) {
      if (bitmap.at(x, y, 0) > 0.5f) p.pixels.push_back({x, y});
    }
  }
  return p;
}

std::vector<float> query_mean_feature(const Camera& camera, const Patch& patch, const TriPlaneField<float>& field,
                                      int samples_per_ray, int workers) {
  if (patch.pixels.empty()) fail(ErrorCode::kUsage, "selection: empty patch");
  RenderOptions opt;
  opt.samples_per_ray = samples_per_ray;
  opt.features = true;
  opt.workers = workers;
  RenderBuffers b = render_pixels(camera, patch.pixels, field, opt);
  const int d = b.sem_dim;
  std::vector<double> acc(d, 0.0);
  for (int i = 0; i < b.count; ++i) {
    for (int c = 0; c < d; ++c) acc[c] += b.features[static_cast<size_t>(i) * d + c];
  }
  std::vector<float> f_bar(d);
  for (int c = 0; c < d; ++c) f_bar[c] = static_cast<float>(acc[c] / b.count);
  return f_bar;
}

template <typename T>
bool mask_predicate(const Vec3& p, const SelectionParams& sel, const TriPlaneField<T>& field) {
  if (!p.allFinite() || !field.bounds.contains(p)) return false;
  RadianceSample<T> s = eval_point(p, field);
  return feature_selected(std::span<const T>(s.f_sem), sel);
}

template <typename T>
std::vector<uint8_t> mask_predicate_batch(std::span<const Vec3> points, const SelectionParams& sel,
                                          const TriPlaneField<T>& field) {
  std::vector<uint8_t> out(points.size(), 0);
  for_each_feature(points, field, [&](size_t i, std::span<const T> f, T) { out[i] = feature_selected(f, sel); });
  return out;
}

BakedMask bake_mask(const SelectionParams& sel, int resolution, const TriPlaneField<float>& field) {
  if (resolution <= 0) fail(ErrorCode::kUsage, "bake_mask: resolution must be positive");
  BakedMask mask;
  mask.resolution = resolution;
  mask.bounds = field.bounds;
  mask.bake_version = field.version;
  const size_t v = static_cast<size_t>(resolution);
  std::vector<Vec3> centers;
  centers.reserve(v * v * v);
  for (int z = 0; z < resolution; ++z) {
    for (int y = 0; y < resolution; ++y) {
      for (int x = 0; x < resolution; ++x) centers.push_back(mask.voxel_center(x, y, z));
    }
  }
  mask.occupied = sel.empty() ? std::vector<uint8_t>(centers.size(), 0) : mask_predicate_batch<float>(centers, sel, field);
  return mask;
}

Image project_mask(const Camera& camera, const SelectionParams& sel, const TriPlaneField<float>& field,
                   int samples_per_ray, int workers) {
  RenderOptions opt;
  opt.samples_per_ray = samples_per_ray;
  opt.selection = sel;
  opt.selection_weight = true;
  opt.workers = workers;
  RenderOutput r = render_view(camera, field, opt);
  Image mask(camera.width(), camera.height(), 1);
  for (size_t i = 0; i < mask.pixels.size(); ++i) mask.pixels[i] = r.selected.pixels[i] >= 0.5f ? 1.0f : 0.0f;
  return mask;
}

std::vector<float> probe_feature_distances(std::span<const float> f_bar, const TriPlaneField<float>& field, int count,
                                           uint64_t seed, float min_sigma) {
  const int k = std::max(1, static_cast<int>(std::lround(std::cbrt(static_cast<double>(count)))));
  Rng rng(seed);
  std::vector<Vec3> points;
  points.reserve(static_cast<size_t>(k) * k * k);
  const Vec3 ext = field.bounds.extent();
  for (int z = 0; z < k; ++z) {
    for (int y = 0; y < k; ++y) {
      for (int x = 0; x < k; ++x) {
        const Vec3 u((x + rng.uniform()) / k, (y + rng.uniform()) / k, (z + rng.uniform()) / k);
        points.push_back(field.bounds.min + (u.array() * ext.array()).matrix());
      }
    }
  }
  std::vector<float> out;
  for_each_feature(points, field, [&](size_t, std::span<const float> f, float sigma) {
    if (sigma > min_sigma) out.push_back(feature_distance(f, f_bar));
  });
  return out;
}

DistanceRange distance_percentiles(std::vector<float> distances) {
  DistanceRange r;
  if (distances.empty()) return r;
  std::sort(distances.begin(), distances.end());
  auto rank = [&](double q) {
    const size_t i = static_cast<size_t>(std::ceil(q * distances.size()));
    return distances[std::min(distances.size() - 1, i == 0 ? 0 : i - 1)];
  };
  r.p01 = rank(0.01);
  r.p99 = rank(0.99);
  return r;
}

float otsu_threshold(std::span<const float> distances, int bins) {
  if (distances.empty()) fail(ErrorCode::kUsage, "otsu: no samples");
  const auto [lo_it, hi_it] = std::minmax_element(distances.begin(), distances.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return static_cast<float>(hi);
  std::vector<double> hist(bins, 0.0);
  const double width = (hi - lo) / bins;
  for (float d : distances) hist[std::min(bins - 1, static_cast<int>((d - lo) / width))] += 1.0;
  const double total = static_cast<double>(distances.size());
  double sum_all = 0;
  for (int b = 0; b < bins; ++b) sum_all += b * hist[b];
  double w0 = 0, sum0 = 0, best = -1;
  int best_bin = 0;
  for (int b = 0; b < bins - 1; ++b) {
    w0 += hist[b];
    sum0 += b * hist[b];
    const double w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = b;
    }
  }
  return static_cast<float>(lo + (best_bin + 1) * width);
}

template bool mask_predicate<float>(const Vec3&, const SelectionParams&, const TriPlaneField<float>&);
template bool mask_predicate<double>(const Vec3&, const SelectionParams&, const TriPlaneField<double>&);
template std::vector<uint8_t> mask_predicate_batch<float>(std::span<const Vec3>, const SelectionParams&,
                                                          const TriPlaneField<float>&);
template std::vector<uint8_t> mask_predicate_batch<double>(std::span<const Vec3>, const SelectionParams&,
                                                           const TriPlaneField<double>&);

ThresholdCalibration calibrate_threshold(std::span<const float> f_bar, const TriPlaneField<float>& field, int count,
                                         uint64_t seed, float min_sigma) {
  ThresholdCalibration c;
  std::vector<float> d = probe_feature_distances(f_bar, field, count, seed, min_sigma);
  c.samples = d.size();
  if (d.empty()) return c;
  c.suggested = otsu_threshold(d);
  c.range = distance_percentiles(std::move(d));
  return c;
}

}  // namespace triedit
