// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Analytic test scenes: spheres and boxes of constant density, color and
// one-hot feature. Ground truth images come from compositing the exact
// fields with 512 samples per ray.

#include <string>
#include <vector>

#include "triedit/camera.hpp"
#include "triedit/image.hpp"
#include "triedit/scene_io.hpp"

namespace triedit {

struct Primitive {
  enum class Shape { kSphere, kBox } shape = Shape::kSphere;
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Constant(0.5);  // sphere: size.x() is the radius; box: half extents
  Rgb color{1.0f, 1.0f, 1.0f};
  int feature_id = 0;
  double density = 40.0;

  bool contains(const Vec3& p) const;
};

struct SyntheticSpec {
  std::string name = "synthetic";
  std::vector<Primitive> primitives;
  Rgb background{0.0f, 0.0f, 0.0f};
  Aabb bounds;
  int feature_dim = 8;
  int width = 128;
  int height = 128;
  double fov_degrees = 40.0;
  int train_views = 16;
  int holdout_views = 4;
  double radius = 3.0;
  Vec3 look_at = Vec3::Zero();
  double min_elevation_degrees = 10.0;
  double max_elevation_degrees = 60.0;
  uint64_t seed = 7;
  int oracle_samples = 512;

  /// Throws kData on duplicate feature ids, ids >= feature_dim or negative
  /// densities.
  void validate() const;
};

SyntheticSpec load_synthetic_spec(const std::string& path);
std::string format_synthetic_spec(const SyntheticSpec& spec);

/// Default acceptance scene: a red sphere and a blue box on black.
SyntheticSpec two_object_spec();

struct OracleView {
  Image rgb;
  Image features;
  Image depth;
  Image alpha;
};

class SyntheticScene {
 public:
  explicit SyntheticScene(SyntheticSpec spec);

  const SyntheticSpec& spec() const { return spec_; }

  double density(const Vec3& p) const;
  Rgb color(const Vec3& p) const;
  std::vector<float> feature(const Vec3& p) const;
  /// Index of the first primitive containing p, or -1.
  int member(const Vec3& p) const;

  /// Train cameras first, then holdout cameras.
  const std::vector<Camera>& cameras() const { return cameras_; }
  bool is_holdout(int index) const { return index >= spec_.train_views; }

  OracleView render(const Camera& camera, int workers = 0) const;
  /// The same scene with primitive `index` removed.
  SyntheticScene without(int index) const;

  /// Writes images/, features/, depth/ and manifest.txt under `dir`.
  Dataset write_dataset(const std::string& dir, int workers = 0) const;

 private:
  SyntheticSpec spec_;
  std::vector<Camera> cameras_;
};

/// Hemisphere rig: `count` cameras on a golden-angle spiral between the
/// given elevations, all looking at `target`.
std::vector<Camera> hemisphere_rig(int count, double radius, const Vec3& target, double min_elev_deg,
                                   double max_elev_deg, const Intrinsics& intrinsics, double near, double far,
                                   uint64_t seed);

}  // namespace triedit
