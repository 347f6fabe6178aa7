// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tri-plane radiance + semantic feature field. A point is projected onto the
// xy, xz and yz planes, each plane is sampled bilinearly, and the three
// feature vectors are summed (or concatenated) into h(p). Three MLPs then map
// h -> (density, geometry features) -> semantic features -> color.
//
// Grid convention: plane node (u, v) sits at normalized coordinate
// (u / (R-1), v / (R-1)) of the scene bounds, so nodes cover the box corners.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triedit/common.hpp"
#include "triedit/mlp.hpp"

namespace triedit {

enum class CombineMode : uint8_t { kAdd = 0, kConcat = 1 };

enum class ClampPolicy {
  kError,  // out-of-bounds points are a caller bug
  kClamp,  // project onto the box first
};

struct FieldConfig {
  int resolution = 256;
  int features = 32;
  CombineMode combine = CombineMode::kAdd;
  int geom_hidden = 64;
  int geo_features = 64;
  int sem_dim = 64;
  int color_hidden = 64;
  int edit_hidden = 48;

  int mlp_input() const { return combine == CombineMode::kAdd ? features : 3 * features; }
  bool operator==(const FieldConfig&) const = default;
};

enum class Block : uint8_t { kPlanes = 0, kGeom = 1, kSem = 2, kColor = 3, kEdit = 4 };

std::string_view block_name(Block b);

class BlockSet {
 public:
  constexpr BlockSet() = default;
  static constexpr BlockSet all_field() { return BlockSet(0x0f); }
  static constexpr BlockSet only(Block b) { return BlockSet(static_cast<uint8_t>(1u << static_cast<int>(b))); }
  constexpr bool has(Block b) const { return bits_ & (1u << static_cast<int>(b)); }
  constexpr BlockSet with(Block b) const { return BlockSet(bits_ | (1u << static_cast<int>(b))); }
  constexpr BlockSet without(Block b) const { return BlockSet(bits_ & ~(1u << static_cast<int>(b))); }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool operator==(const BlockSet&) const = default;

 private:
  constexpr explicit BlockSet(uint8_t bits) : bits_(bits) {}
  uint8_t bits_ = 0;
};

template <typename T>
struct TriPlaneField {
  FieldConfig config;
  Aabb bounds;
  std::array<std::vector<T>, 3> planes;  // xy, xz, yz; each R*R*F, index ((v*R)+u)*F+f
  Mlp<T> geom;          // h -> [sigma_raw, f_geom]
  Mlp<T> sem;           // f_geom -> f_sem
  Mlp<T> color;         // f_sem -> rgb (sigmoid output)
  Mlp<T> edit_default;  // initialization for residual edit tokens
  uint64_t version = 0;

  /// Planes uniform in [-1e-2, 1e-2]; MLP weights Kaiming-uniform, biases
  /// zero. The edit template has a zero output layer so it starts as a no-op.
  static TriPlaneField create(const FieldConfig& config, const Aabb& bounds, uint64_t seed);

  size_t plane_size() const { return planes[0].size(); }
  size_t parameter_count() const;
  /// Throws kData when an invariant is violated.
  void validate() const;

  template <typename U>
  TriPlaneField<U> cast() const {
    TriPlaneField<U> out;
    out.config = config;
    out.bounds = bounds;
    for (int i = 0; i < 3; ++i) out.planes[i].assign(planes[i].begin(), planes[i].end());
    out.geom = geom.template cast<U>();
    out.sem = sem.template cast<U>();
    out.color = color.template cast<U>();
    out.edit_default = edit_default.template cast<U>();
    out.version = version;
    return out;
  }

  /// Visits trainable arrays with stable names ("plane_xy", "geom.0.weight").
  template <typename Fn>
  void for_each_parameter(Fn&& fn);
};

/// Per-point sample of the field. View direction is intentionally absent.
template <typename T>
struct RadianceSample {
  T sigma = 0;
  std::vector<T> f_geom;
  std::vector<T> f_sem;
  std::array<T, 3> color{};
};

/// Bilinear lookup footprint of one point on the three planes.
template <typename T>
struct PlaneLookup {
  std::array<uint32_t, 3> offset;  // element index of corner (u0, v0)
  std::array<T, 3> fu;
  std::array<T, 3> fv;
};

/// Axis pairs for the xy, xz and yz planes.
inline constexpr std::array<std::array<int, 2>, 3> kPlaneAxes{{{0, 1}, {0, 2}, {1, 2}}};

template <typename T>
PlaneLookup<T> plane_lookup(const TriPlaneField<T>& field, const Vec3& p);

/// Writes h(p) into `out` (mlp_input() values).
template <typename T>
void gather_features(const TriPlaneField<T>& field, const PlaneLookup<T>& lookup, T* out);

template <typename T>
std::vector<T> interpolate_planes(const Vec3& p, const TriPlaneField<T>& field);

template <typename T>
RadianceSample<T> eval_point(const Vec3& p, const TriPlaneField<T>& field,
                             ClampPolicy policy = ClampPolicy::kError);

/// Gradients shaped like the field (plus an optional edit MLP). Blocks not in
/// `active` are left empty.
template <typename T>
struct GradientSet {
  BlockSet active;
  std::array<std::vector<T>, 3> planes;
  Mlp<T> geom, sem, color, edit;

  static GradientSet zeros_like(const TriPlaneField<T>& field, const Mlp<T>* edit, BlockSet active);
  void set_zero();
  void add(const GradientSet& other);
  /// Name of the first array containing NaN/Inf, if any.
  std::optional<std::string> first_nonfinite() const;
  double max_abs() const;

  template <typename Fn>
  void for_each(Fn&& fn);
};

namespace detail {
template <typename T, typename Fn>
void visit_mlp(const char* prefix, Block block, Mlp<T>& mlp, Fn& fn) {
  for (size_t l = 0; l < mlp.layers.size(); ++l) {
    auto& layer = mlp.layers[l];
    std::string base = std::string(prefix) + "." + std::to_string(l);
    fn(block, base + ".weight", std::span<T>(layer.weight.data(), static_cast<size_t>(layer.weight.size())));
    fn(block, base + ".bias", std::span<T>(layer.bias.data(), static_cast<size_t>(layer.bias.size())));
  }
}
inline constexpr std::array<const char*, 3> kPlaneNames{"plane_xy", "plane_xz", "plane_yz"};
}  // namespace detail

template <typename T>
template <typename Fn>
void TriPlaneField<T>::for_each_parameter(Fn&& fn) {
  for (int i = 0; i < 3; ++i) fn(Block::kPlanes, std::string(detail::kPlaneNames[i]), std::span<T>(planes[i]));
  detail::visit_mlp("geom", Block::kGeom, geom, fn);
  detail::visit_mlp("sem", Block::kSem, sem, fn);
  detail::visit_mlp("color", Block::kColor, color, fn);
}

template <typename T>
template <typename Fn>
void GradientSet<T>::for_each(Fn&& fn) {
  if (active.has(Block::kPlanes)) {
    for (int i = 0; i < 3; ++i) fn(Block::kPlanes, std::string(detail::kPlaneNames[i]), std::span<T>(planes[i]));
  }
  if (active.has(Block::kGeom)) detail::visit_mlp("geom", Block::kGeom, geom, fn);
  if (active.has(Block::kSem)) detail::visit_mlp("sem", Block::kSem, sem, fn);
  if (active.has(Block::kColor)) detail::visit_mlp("color", Block::kColor, color, fn);
  if (active.has(Block::kEdit)) detail::visit_mlp("edit", Block::kEdit, edit, fn);
}

/// Residual edit network: in -> hidden -> hidden -> 3, leaky hidden
/// activations, identity output.
template <typename T>
Mlp<T> make_edit_mlp(int in_dim, int hidden);

}  // namespace triedit
