// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/synthetic.hpp"

#include <cmath>
#include <filesystem>
#include <set>

#include "triedit/keyvalue.hpp"
#include "triedit/parallel.hpp"

namespace triedit {
namespace fs = std::filesystem;
namespace {

Vec3 vec3(const std::vector<double>& v) { return Vec3(v[0], v[1], v[2]); }

Rgb rgb(const std::vector<double>& v) {
  return {static_cast<float>(v[0]), static_cast<float>(v[1]), static_cast<float>(v[2])};
}

std::string name_of(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%03d", index);
  return buf;
}

}  // namespace

bool Primitive::contains(const Vec3& p) const {
  const Vec3 d = p - center;
  if (shape == Shape::kSphere) return d.squaredNorm() <= size.x() * size.x();
  return (d.cwiseAbs().array() <= size.array()).all();
}

void SyntheticSpec::validate() const {
  std::set<int> ids;
  for (const auto& p : primitives) {
    if (p.feature_id < 0 || p.feature_id >= feature_dim) fail(ErrorCode::kData, "synthetic spec: feature id out of range");
    if (!ids.insert(p.feature_id).second) fail(ErrorCode::kData, "synthetic spec: feature ids must be distinct");
    if (!(p.density >= 0)) fail(ErrorCode::kData, "synthetic spec: density must be >= 0");
    if (!(p.size.array() > 0).all()) fail(ErrorCode::kData, "synthetic spec: primitive size must be positive");
  }
  if (width <= 0 || height <= 0 || train_views < 4 || holdout_views < 0) {
    fail(ErrorCode::kData, "synthetic spec: bad image size or view counts");
  }
  if (!(radius > 0) || !(fov_degrees > 0 && fov_degrees < 180)) fail(ErrorCode::kData, "synthetic spec: bad rig");
}

SyntheticSpec load_synthetic_spec(const std::string& path) {
  KeyValueDocument doc = read_key_value_file(path);
  const auto& h = doc.header;
  SyntheticSpec s;
  s.name = h.get_string("name", s.name);
  if (h.has("background")) s.background = rgb(h.get_doubles("background", 3));
  if (h.has("bounds_min")) s.bounds.min = vec3(h.get_doubles("bounds_min", 3));
  if (h.has("bounds_max")) s.bounds.max = vec3(h.get_doubles("bounds_max", 3));
  s.feature_dim = static_cast<int>(h.get_int("feature_dim", s.feature_dim));
  s.width = static_cast<int>(h.get_int("width", s.width));
  s.height = static_cast<int>(h.get_int("height", s.height));
  s.fov_degrees = h.get_double("fov", s.fov_degrees);
  s.train_views = static_cast<int>(h.get_int("train_views", s.train_views));
  s.holdout_views = static_cast<int>(h.get_int("holdout_views", s.holdout_views));
  s.radius = h.get_double("radius", s.radius);
  if (h.has("look_at")) s.look_at = vec3(h.get_doubles("look_at", 3));
  s.min_elevation_degrees = h.get_double("min_elevation", s.min_elevation_degrees);
  s.max_elevation_degrees = h.get_double("max_elevation", s.max_elevation_degrees);
  s.seed = static_cast<uint64_t>(h.get_int("seed", static_cast<long long>(s.seed)));
  s.oracle_samples = static_cast<int>(h.get_int("oracle_samples", s.oracle_samples));
  for (const KeyValueBlock* b : doc.sections_named("primitive")) {
    Primitive p;
    const std::string type = b->get_string("type");
    if (type == "sphere") {
      p.shape = Primitive::Shape::kSphere;
      p.size = Vec3::Constant(b->get_double("radius"));
    } else if (type == "box") {
      p.shape = Primitive::Shape::kBox;
      p.size = vec3(b->get_doubles("half_size", 3));
    } else {
      fail(ErrorCode::kData, path + ": primitive type must be sphere or box");
    }
    p.center = vec3(b->get_doubles("center", 3));
    p.color = rgb(b->get_doubles("color", 3));
    p.feature_id = static_cast<int>(b->get_int("feature"));
    p.density = b->get_double("density", p.density);
    s.primitives.push_back(p);
  }
  s.validate();
  return s;
}

std::string format_synthetic_spec(const SyntheticSpec& s) {
  KeyValueDocument doc;
  auto& h = doc.header;
  auto v3 = [](const Vec3& v) { return format_numbers({v.x(), v.y(), v.z()}); };
  auto c3 = [](const Rgb& c) { return format_numbers({c[0], c[1], c[2]}); };
  h.set("name", s.name);
  h.set("background", c3(s.background));
  h.set("bounds_min", v3(s.bounds.min));
  h.set("bounds_max", v3(s.bounds.max));
  h.set("feature_dim", std::to_string(s.feature_dim));
  h.set("width", std::to_string(s.width));
  h.set("height", std::to_string(s.height));
  h.set("fov", format_number(s.fov_degrees));
  h.set("train_views", std::to_string(s.train_views));
  h.set("holdout_views", std::to_string(s.holdout_views));
  h.set("radius", format_number(s.radius));
  h.set("look_at", v3(s.look_at));
  h.set("min_elevation", format_number(s.min_elevation_degrees));
  h.set("max_elevation", format_number(s.max_elevation_degrees));
  h.set("seed", std::to_string(s.seed));
  h.set("oracle_samples", std::to_string(s.oracle_samples));
  for (const auto& p : s.primitives) {
    KeyValueBlock b("primitive", "");
    if (p.shape == Primitive::Shape::kSphere) {
      b.set("type", "sphere");
      b.set("radius", format_number(p.size.x()));
    } else {
      b.set("type", "box");
      b.set("half_size", v3(p.size));
    }
    b.set("center", v3(p.center));
    b.set("color", c3(p.color));
    b.set("feature", std::to_string(p.feature_id));
    b.set("density", format_number(p.density));
    doc.sections.push_back(std::move(b));
  }
  return format_key_value(doc);
}

SyntheticSpec two_object_spec() {
  SyntheticSpec s;
  s.name = "two_objects";
  Primitive sphere;
  sphere.shape = Primitive::Shape::kSphere;
  sphere.center = Vec3(-0.35, 0.0, 0.1);
  sphere.size = Vec3::Constant(0.4);
  sphere.color = {0.85f, 0.2f, 0.15f};
  sphere.feature_id = 0;
  Primitive box;
  box.shape = Primitive::Shape::kBox;
  box.center = Vec3(0.4, 0.05, -0.2);
  box.size = Vec3(0.25, 0.3, 0.25);
  box.color = {0.2f, 0.35f, 0.85f};
  box.feature_id = 1;
  s.primitives = {sphere, box};
  return s;
}

std::vector<Camera> hemisphere_rig(int count, double radius, const Vec3& target, double min_elev_deg,
                                   double max_elev_deg, const Intrinsics& intrinsics, double near, double far,
                                   uint64_t seed) {
  std::vector<Camera> cams;
  Rng rng(seed);
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  for (int k = 0; k < count; ++k) {
    const double u = count > 1 ? (k + 0.5) / count : 0.5;
    // Uniform in sin(elevation) keeps the spiral roughly equal-area.
    const double s0 = std::sin(min_elev_deg * M_PI / 180.0), s1 = std::sin(max_elev_deg * M_PI / 180.0);
    const double elev = std::asin(s0 + u * (s1 - s0));
    const double az = phase + k * golden;
    const Vec3 eye = target + radius * Vec3(std::cos(elev) * std::cos(az), std::sin(elev), std::cos(elev) * std::sin(az));
    cams.push_back(Camera::look_at(eye, target, Vec3(0, 1, 0), intrinsics, near, far));
  }
  return cams;
}

SyntheticScene::SyntheticScene(SyntheticSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const Intrinsics k = Camera::from_fov(spec_.width, spec_.height, spec_.fov_degrees);
  const double reach = 0.5 * spec_.bounds.extent().norm();
  const double near = std::max(0.05, spec_.radius - reach);
  const double far = spec_.radius + reach;
  const int total = spec_.train_views + spec_.holdout_views;
  std::vector<Camera> all = hemisphere_rig(total, spec_.radius, spec_.look_at, spec_.min_elevation_degrees,
                                           spec_.max_elevation_degrees, k, near, far, spec_.seed);
  // Holdout views are spread through the spiral rather than taken from its end.
  std::vector<bool> hold(total, false);
  for (int i = 0; i < spec_.holdout_views; ++i) hold[static_cast<int>((i + 0.5) * total / spec_.holdout_views)] = true;
  for (int i = 0; i < total; ++i) {
    if (!hold[i]) cameras_.push_back(all[i]);
  }
  for (int i = 0; i < total; ++i) {
    if (hold[i]) cameras_.push_back(all[i]);
  }
}

double SyntheticScene::density(const Vec3& p) const {
  double s = 0;
  for (const auto& prim : spec_.primitives) {
    if (prim.contains(p)) s += prim.density;
  }
  return s;
}

Rgb SyntheticScene::color(const Vec3& p) const {
  double acc[3] = {0, 0, 0}, total = 0;
  for (const auto& prim : spec_.primitives) {
    if (!prim.contains(p)) continue;
    for (int c = 0; c < 3; ++c) acc[c] += prim.density * prim.color[c];
    total += prim.density;
  }
  if (total <= 0) return {0, 0, 0};
  return {static_cast<float>(acc[0] / total), static_cast<float>(acc[1] / total), static_cast<float>(acc[2] / total)};
}

std::vector<float> SyntheticScene::feature(const Vec3& p) const {
  std::vector<float> f(spec_.feature_dim, 0.0f);
  double total = 0;
  for (const auto& prim : spec_.primitives) {
    if (prim.contains(p)) total += prim.density;
  }
  if (total <= 0) return f;
  for (const auto& prim : spec_.primitives) {
    if (prim.contains(p)) f[prim.feature_id] += static_cast<float>(prim.density / total);
  }
  return f;
}

int SyntheticScene::member(const Vec3& p) const {
  for (size_t i = 0; i < spec_.primitives.size(); ++i) {
    if (spec_.primitives[i].contains(p)) return static_cast<int>(i);
  }
  return -1;
}

OracleView SyntheticScene::render(const Camera& camera, int workers) const {
  camera.validate();
  const int w = camera.width(), h = camera.height(), d = spec_.feature_dim;
  OracleView out{Image(w, h, 3), Image(w, h, d), Image(w, h, 1), Image(w, h, 1)};
  parallel_for(std::min(resolve_workers(workers), h), h, [&](int y, int) {
    for (int x = 0; x < w; ++x) {
      const Ray ray = generate_ray(camera, x, y);
      const RaySamples s = sample_ray(ray, camera.near, camera.far, spec_.oracle_samples);
      double trans = 1, rgb[3] = {0, 0, 0}, depth = 0, alpha = 0;
      std::vector<double> feat(d, 0.0);
      for (size_t i = 0; i < s.t.size(); ++i) {
        const Vec3& p = s.points[i];
        const double sigma = density(p);
        if (sigma <= 0) continue;
        const double keep = std::exp(-sigma * s.delta[i]);
        const double wi = trans * (1 - keep);
        trans *= keep;
        const Rgb c = color(p);
        for (int k = 0; k < 3; ++k) rgb[k] += wi * c[k];
        const auto f = feature(p);
        for (int k = 0; k < d; ++k) feat[k] += wi * f[k];
        depth += wi * s.t[i];
        alpha += wi;
      }
      for (int k = 0; k < 3; ++k) out.rgb.at(x, y, k) = static_cast<float>(rgb[k] + trans * spec_.background[k]);
      for (int k = 0; k < d; ++k) out.features.at(x, y, k) = static_cast<float>(feat[k]);
      out.depth.at(x, y) = static_cast<float>(depth);
      out.alpha.at(x, y) = static_cast<float>(alpha);
    }
  });
  return out;
}

SyntheticScene SyntheticScene::without(int index) const {
  SyntheticSpec s = spec_;
  if (index < 0 || index >= static_cast<int>(s.primitives.size())) fail(ErrorCode::kUsage, "no such primitive");
  s.primitives.erase(s.primitives.begin() + index);
  return SyntheticScene(s);
}

Dataset SyntheticScene::write_dataset(const std::string& dir, int workers) const {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "features");
  fs::create_directories(fs::path(dir) / "depth");
  Dataset ds;
  ds.name = spec_.name;
  ds.root = dir;
  ds.bounds = spec_.bounds;
  ds.feature_dim = spec_.feature_dim;
  for (size_t i = 0; i < cameras_.size(); ++i) {
    Frame f;
    f.id = name_of(static_cast<int>(i));
    f.camera = cameras_[i];
    f.split = is_holdout(static_cast<int>(i)) ? Split::kHoldout : Split::kTrain;
    OracleView v = render(f.camera, workers);
    f.image_path = (fs::path(dir) / "images" / (f.id + ".png")).string();
    f.feature_path = (fs::path(dir) / "features" / (f.id + ".pnf")).string();
    f.depth_path = (fs::path(dir) / "depth" / (f.id + ".png")).string();
    write_png8(f.image_path, v.rgb);
    save_features(f.feature_path, v.features);
    write_png16(f.depth_path, encode_depth(v.depth, f.camera.near, f.camera.far));
    f.rgb = quantize_image8(v.rgb);
    f.features = std::move(v.features);
    f.depth = decode_depth(encode_depth(v.depth, f.camera.near, f.camera.far), f.camera.near, f.camera.far);
    ds.frames.push_back(std::move(f));
  }
  save_manifest(ds, (fs::path(dir) / "manifest.txt").string());
  write_file_atomic((fs::path(dir) / "scene.txt").string(), format_synthetic_spec(spec_));
  return ds;
}

}  // namespace triedit
