// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pinhole cameras. Camera space follows the OpenGL convention: the camera
// looks down -z with +y up and +x right; image rows grow downward. Rays pass
// through pixel centers (x + 0.5, y + 0.5).

#include <Eigen/Core>

#include <span>
#include <vector>

#include "triedit/common.hpp"

namespace triedit {

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  bool operator==(const Intrinsics&) const = default;
};

struct Camera {
  Intrinsics intrinsics;
  Eigen::Matrix4d camera_to_world = Eigen::Matrix4d::Identity();  // rigid
  double near = 0.1;
  double far = 10.0;

  /// Throws kData on non-positive focal lengths, bad near/far or a
  /// non-orthonormal rotation block (tolerance 1e-5).
  void validate() const;
  Vec3 position() const { return camera_to_world.block<3, 1>(0, 3); }
  Eigen::Matrix3d rotation() const { return camera_to_world.block<3, 3>(0, 0); }
  int width() const { return intrinsics.width; }
  int height() const { return intrinsics.height; }

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, const Intrinsics& intrinsics,
                        double near, double far);
  /// Symmetric intrinsics from a horizontal field of view.
  static Intrinsics from_fov(int width, int height, double fov_x_degrees);
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3(0, 0, -1);  // unit length
  double near = 0.0;
  double far = 1.0;
};

struct PixelIndex {
  int x = 0;
  int y = 0;
};

Ray generate_ray(const Camera& camera, int x, int y);
std::vector<Ray> generate_rays(const Camera& camera, std::span<const PixelIndex> pixels);

struct RaySamples {
  std::vector<double> t;
  std::vector<double> delta;
  std::vector<Vec3> points;
};

/// Stratified samples over [near, far]: bin midpoints, or one uniform draw per
/// bin when `jitter` is given. The last spacing runs to `far`.
RaySamples sample_ray(const Ray& ray, double near, double far, int n_samples, Rng* jitter = nullptr);

}  // namespace triedit
