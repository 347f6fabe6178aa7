// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <unistd.h>
#include <string>
#include <vector>

#include "triedit/field.hpp"
#include "triedit/synthetic.hpp"
#include "triedit/train.hpp"

namespace triedit::testing {

/// Fresh directory under the system temp dir; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("triedit-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

/// Small two-object scene for fast tests.
inline SyntheticSpec tiny_spec(int size = 24, int train = 6, int holdout = 2) {
  SyntheticSpec s = two_object_spec();
  s.width = size;
  s.height = size;
  s.train_views = train;
  s.holdout_views = holdout;
  s.oracle_samples = 64;
  return s;
}

inline FieldConfig tiny_field_config(int sem_dim = 8) {
  FieldConfig c;
  c.resolution = 8;
  c.features = 4;
  c.geom_hidden = 8;
  c.geo_features = 6;
  c.sem_dim = sem_dim;
  c.color_hidden = 8;
  c.edit_hidden = 6;
  return c;
}

/// Rays from outside the unit box towards jittered interior targets.
inline std::vector<Ray> random_rays(Rng& rng, int count) {
  std::vector<Ray> rays;
  for (int i = 0; i < count; ++i) {
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    const Vec3 target(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    Ray r;
    r.origin = target - 3.0 * dir;
    r.direction = dir;
    r.near = 1.5;
    r.far = 4.5;
    rays.push_back(r);
  }
  return rays;
}

/// Randomizes every parameter of `field` (planes in [-0.5, 0.5], MLPs
/// Kaiming with random biases) so no activation sits exactly at a kink.
inline void randomize(TriPlaneField<double>* field, Rng& rng) {
  for (auto& p : field->planes) {
    for (auto& v : p) v = rng.uniform(-0.5, 0.5);
  }
  for (Mlp<double>* m : {&field->geom, &field->sem, &field->color}) {
    m->init_kaiming(rng);
    for (auto& layer : m->layers) {
      for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = rng.uniform(-0.2, 0.2);
    }
  }
}

/// Randomized tiny float field with enough density to saturate some rays.
inline TriPlaneField<float> dense_test_field(uint64_t seed, FieldConfig config = tiny_field_config()) {
  TriPlaneField<double> f = TriPlaneField<float>::create(config, Aabb{}, seed).cast<double>();
  Rng rng(seed);
  randomize(&f, rng);
  f.geom.layers.back().bias[0] = 2.0;
  return f.cast<float>();
}

struct GradientCase {
  TriPlaneField<double> field;
  RayBatch<double> batch;
  DensityProbes<double> probes;
  Mlp<double> edit;
  EditTerm<double> edit_term;
  LossWeights weights;
  BlockSet active;
  bool with_edit = false;
};

/// Random tiny configuration of the full objective: photometric, feature,
/// L1, TV, depth and density terms; odd seeds add a feature or color edit
/// residual and train it alongside the field.
inline GradientCase make_gradient_case(uint64_t seed, int rays = 4, int samples = 8) {
  Rng rng(seed * 7919 + 13);
  GradientCase gc;
  FieldConfig fc = tiny_field_config(8);
  fc.combine = (seed % 3 == 2) ? CombineMode::kConcat : CombineMode::kAdd;
  Aabb box;
  gc.field = TriPlaneField<float>::create(fc, box, seed).cast<double>();
  randomize(&gc.field, rng);

  auto& b = gc.batch;
  b.rays = random_rays(rng, rays);
  for (int i = 0; i < rays; ++i) {
    for (int c = 0; c < 3; ++c) b.rgb.push_back(rng.uniform());
    for (int c = 0; c < fc.sem_dim; ++c) b.features.push_back(rng.uniform(-0.5, 1.0));
    b.edited_depth.push_back(rng.uniform(2.0, 4.0));
    b.original_depth.push_back(rng.uniform(2.0, 4.0));
    b.mask.push_back(static_cast<uint8_t>(i % 2));
  }

  SelectionParams sel;
  for (int c = 0; c < fc.sem_dim; ++c) sel.f_bar.push_back(static_cast<float>(rng.uniform(-0.3, 0.3)));
  sel.thr = 1e9f;  // every sample selected: the edit predicate has no kink
  gc.probes.points.clear();
  for (int i = 0; i < 12; ++i) {
    gc.probes.points.push_back(Vec3(rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)));
    gc.probes.sigma_orig.push_back(rng.uniform(0.0, 3.0));
    gc.probes.inside.push_back(static_cast<uint8_t>(i % 4 == 0));
  }

  gc.weights.lambda1 = 1e-3;
  gc.weights.lambda2 = 1e-2;
  gc.weights.lambda3 = 0.05;
  gc.weights.lambda4 = 0.1;
  gc.weights.feature = 0.5;
  gc.active = BlockSet::all_field();
  gc.with_edit = seed % 2 == 1;
  if (gc.with_edit) {
    const bool feature = seed % 4 == 1;
    gc.edit = make_edit_mlp<double>(feature ? fc.sem_dim : 3, 6);
    gc.edit.init_kaiming(rng);
    // Keep residuals small so edited colors stay inside the clamp range.
    for (auto& v : gc.edit.layers.back().weight.reshaped()) v *= 0.05;
    gc.edit_term.mlp = &gc.edit;
    gc.edit_term.kind = feature ? TokenKind::kFeatureResidual : TokenKind::kColorResidual;
    gc.edit_term.selection = sel;
    gc.active = gc.active.with(Block::kEdit);
  }
  (void)samples;
  return gc;
}

inline LossInputs<double> gradient_inputs(const GradientCase& gc, int samples = 8) {
  LossInputs<double> in;
  in.batch = &gc.batch;
  in.samples_per_ray = samples;
  in.background = {0.1f, 0.2f, 0.3f};
  in.edit = gc.with_edit ? &gc.edit_term : nullptr;
  in.probes = &gc.probes;
  in.weights = gc.weights;
  in.workers = 1;
  return in;
}

struct GradientReport {
  double max_rel_error = 0;
  std::string worst;
  size_t checked = 0;
};

/// Central differences (h = 1e-6; a wider step straddles ReLU and L1 kinks) on every parameter of the active blocks.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6); the floor keeps
/// finite-difference roundoff from dominating vanishing gradients.
inline GradientReport check_gradients(uint64_t seed) {
  GradientCase gc = make_gradient_case(seed);
  LossInputs<double> in = gradient_inputs(gc);
  GradientSet<double> grads = GradientSet<double>::zeros_like(gc.field, gc.with_edit ? &gc.edit : nullptr, gc.active);
  compute_loss_and_gradients(gc.field, in, &grads);

  GradientReport rep;
  const double h = 1e-6;
  auto loss_at = [&]() { return compute_loss_and_gradients<double>(gc.field, in, nullptr).total; };
  auto probe = [&](const std::string& name, std::span<double> params, std::span<const double> analytic) {
    for (size_t i = 0; i < params.size(); ++i) {
      const double keep = params[i];
      params[i] = keep + h;
      const double up = loss_at();
      params[i] = keep - h;
      const double down = loss_at();
      params[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s[%zu] analytic %.6g numeric %.6g", name.c_str(), i, a, numeric);
        rep.worst = buf;
      }
    }
  };
  std::vector<std::pair<std::string, std::span<double>>> field_params;
  gc.field.for_each_parameter([&](Block, const std::string& name, std::span<double> p) {
    field_params.push_back({name, p});
  });
  std::vector<std::span<const double>> analytic;
  grads.for_each([&](Block, const std::string&, std::span<double> g) { analytic.push_back(g); });
  size_t k = 0;
  for (auto& [name, p] : field_params) probe(name, p, analytic[k++]);
  if (gc.with_edit) {
    gc.edit.for_each_array([&](std::span<double> p) {
      probe("edit", p, analytic[k]);
      ++k;
    });
  }
  return rep;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Intersection over union of two boolean rasters or occupancy lists.
inline double iou(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

}  // namespace triedit::testing
