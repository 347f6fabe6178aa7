// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/camera.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <string>

namespace triedit {

void Camera::validate() const {
  const auto& k = intrinsics;
  if (!(k.fx > 0.0) || !(k.fy > 0.0)) fail(ErrorCode::kData, "camera: focal lengths must be positive");
  if (k.width <= 0 || k.height <= 0) fail(ErrorCode::kData, "camera: image size must be positive");
  if (!(near > 0.0) || !(far > near)) fail(ErrorCode::kData, "camera: require 0 < near < far");
  if (!camera_to_world.allFinite()) fail(ErrorCode::kData, "camera: non-finite pose");
  Eigen::Matrix3d r = rotation();
  double err = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (err > 1e-5) fail(ErrorCode::kData, "camera: rotation block is not orthonormal (err " + std::to_string(err) + ")");
  Eigen::RowVector4d last = camera_to_world.row(3);
  if ((last - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-9) {
    fail(ErrorCode::kData, "camera: last pose row must be 0 0 0 1");
  }
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, const Intrinsics& intrinsics,
                       double near, double far) {
  Vec3 back = (eye - target).normalized();  // camera +z
  Vec3 right = up.cross(back);
  if (right.norm() < 1e-12) right = Vec3(1, 0, 0).cross(back);
  right.normalize();
  Vec3 true_up = back.cross(right);
  Camera cam;
  cam.intrinsics = intrinsics;
  cam.camera_to_world.setIdentity();
  cam.camera_to_world.block<3, 1>(0, 0) = right;
  cam.camera_to_world.block<3, 1>(0, 1) = true_up;
  cam.camera_to_world.block<3, 1>(0, 2) = back;
  cam.camera_to_world.block<3, 1>(0, 3) = eye;
  cam.near = near;
  cam.far = far;
  return cam;
}

Intrinsics Camera::from_fov(int width, int height, double fov_x_degrees) {
  Intrinsics k;
  k.width = width;
  k.height = height;
  k.fx = 0.5 * width / std::tan(0.5 * fov_x_degrees * M_PI / 180.0);
  k.fy = k.fx;
  k.cx = 0.5 * width;
  k.cy = 0.5 * height;
  return k;
}

Ray generate_ray(const Camera& camera, int x, int y) {
  const auto& k = camera.intrinsics;
  if (x < 0 || y < 0 || x >= k.width || y >= k.height) {
    fail(ErrorCode::kUsage, "generate_ray: pixel (" + std::to_string(x) + ", " + std::to_string(y) + ") out of range");
  }
  Vec3 d_cam((x + 0.5 - k.cx) / k.fx, -(y + 0.5 - k.cy) / k.fy, -1.0);
  Ray ray;
  ray.origin = camera.position();
  ray.direction = (camera.rotation() * d_cam).normalized();
  ray.near = camera.near;
  ray.far = camera.far;
  return ray;
}

std::vector<Ray> generate_rays(const Camera& camera, std::span<const PixelIndex> pixels) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& px : pixels) rays.push_back(generate_ray(camera, px.x, px.y));
  return rays;
}

RaySamples sample_ray(const Ray& ray, double near, double far, int n_samples, Rng* jitter) {
  if (n_samples < 1) fail(ErrorCode::kUsage, "sample_ray: n_samples must be >= 1");
  if (!(near < far)) fail(ErrorCode::kUsage, "sample_ray: near must be < far");
  RaySamples s;
  s.t.resize(n_samples);
  s.delta.resize(n_samples);
  s.points.resize(n_samples);
  const double width = (far - near) / n_samples;
  for (int i = 0; i < n_samples; ++i) {
    const double u = jitter ? jitter->uniform() : 0.5;
    s.t[i] = near + (i + u) * width;
  }
  for (int i = 0; i < n_samples; ++i) {
    s.delta[i] = (i + 1 < n_samples ? s.t[i + 1] : far) - s.t[i];
    s.points[i] = ray.origin + s.t[i] * ray.direction;
  }
  return s;
}

}  // namespace triedit
