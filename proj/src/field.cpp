// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/field.hpp"

#include <cmath>

namespace triedit {

std::string_view block_name(Block b) {
  switch (b) {
    case Block::kPlanes: return "planes";
    case Block::kGeom: return "geom";
    case Block::kSem: return "sem";
    case Block::kColor: return "color";
    case Block::kEdit: return "edit";
  }
  return "?";
}

template <typename T>
Mlp<T> make_edit_mlp(int in_dim, int hidden) {
  return Mlp<T>::zeros({in_dim, hidden, hidden, 3},
                       {Activation::kLeakyRelu, Activation::kLeakyRelu, Activation::kIdentity});
}

template <typename T>
TriPlaneField<T> TriPlaneField<T>::create(const FieldConfig& config, const Aabb& bounds, uint64_t seed) {
  if (config.resolution < 2 || config.features < 1 || config.geo_features < 1 || config.sem_dim < 1) {
    fail(ErrorCode::kUsage, "field config: resolution >= 2 and positive widths required");
  }
  TriPlaneField<T> field;
  field.config = config;
  field.bounds = bounds;
  Rng rng(seed);
  const size_t n = static_cast<size_t>(config.resolution) * config.resolution * config.features;
  for (auto& plane : field.planes) {
    plane.resize(n);
    for (auto& v : plane) v = static_cast<T>(rng.uniform(-1e-2, 1e-2));
  }
  field.geom = Mlp<T>::zeros({config.mlp_input(), config.geom_hidden, 1 + config.geo_features},
                             {Activation::kRelu, Activation::kIdentity});
  field.sem = Mlp<T>::zeros({config.geo_features, config.sem_dim}, {Activation::kIdentity});
  field.color = Mlp<T>::zeros({config.sem_dim, config.color_hidden, 3}, {Activation::kRelu, Activation::kSigmoid});
  field.geom.init_kaiming(rng);
  field.sem.init_kaiming(rng);
  field.color.init_kaiming(rng);
  field.edit_default = make_edit_mlp<T>(config.sem_dim, config.edit_hidden);
  field.edit_default.init_kaiming(rng);
  field.edit_default.layers.back().weight.setZero();
  field.version = 1;
  return field;
}

template <typename T>
size_t TriPlaneField<T>::parameter_count() const {
  return 3 * plane_size() + geom.parameter_count() + sem.parameter_count() + color.parameter_count();
}

template <typename T>
void TriPlaneField<T>::validate() const {
  const auto& c = config;
  const size_t n = static_cast<size_t>(c.resolution) * c.resolution * c.features;
  if (c.resolution < 2) fail(ErrorCode::kData, "field: resolution must be >= 2");
  for (const auto& plane : planes) {
    if (plane.size() != n) fail(ErrorCode::kData, "field: planes must share R x R x F");
    for (T v : plane) {
      if (!std::isfinite(static_cast<double>(v))) fail(ErrorCode::kData, "field: non-finite plane value");
    }
  }
  if (geom.layers.size() < 1 || geom.in_dim() != c.mlp_input() || geom.out_dim() != 1 + c.geo_features) {
    fail(ErrorCode::kData, "field: geometry MLP does not match plane width");
  }
  if (sem.in_dim() != c.geo_features || sem.out_dim() != c.sem_dim) fail(ErrorCode::kData, "field: semantic MLP dims");
  if (color.in_dim() != c.sem_dim || color.out_dim() != 3) fail(ErrorCode::kData, "field: color MLP dims");
  for (const Mlp<T>* m : {&geom, &sem, &color, &edit_default}) {
    for (size_t l = 1; l < m->layers.size(); ++l) {
      if (m->layers[l].in_dim() != m->layers[l - 1].out_dim()) fail(ErrorCode::kData, "field: MLP layers do not chain");
    }
    if (!m->all_finite()) fail(ErrorCode::kData, "field: non-finite MLP parameter");
  }
  if (!(bounds.max.array() > bounds.min.array()).all()) fail(ErrorCode::kData, "field: empty bounds");
}

template <typename T>
PlaneLookup<T> plane_lookup(const TriPlaneField<T>& field, const Vec3& p) {
  const int r = field.config.resolution;
  const int f = field.config.features;
  const Vec3 q = field.bounds.normalized(p);
  PlaneLookup<T> out;
  for (int pl = 0; pl < 3; ++pl) {
    const double gu = q[kPlaneAxes[pl][0]] * (r - 1);
    const double gv = q[kPlaneAxes[pl][1]] * (r - 1);
    const int u0 = std::clamp(static_cast<int>(std::floor(gu)), 0, r - 2);
    const int v0 = std::clamp(static_cast<int>(std::floor(gv)), 0, r - 2);
    out.offset[pl] = static_cast<uint32_t>((static_cast<size_t>(v0) * r + u0) * f);
    out.fu[pl] = static_cast<T>(gu - u0);
    out.fv[pl] = static_cast<T>(gv - v0);
  }
  return out;
}

template <typename T>
void gather_features(const TriPlaneField<T>& field, const PlaneLookup<T>& lookup, T* out) {
  const int f = field.config.features;
  const size_t row = static_cast<size_t>(field.config.resolution) * f;
  const bool add = field.config.combine == CombineMode::kAdd;
  if (add) std::fill(out, out + f, T(0));
  for (int pl = 0; pl < 3; ++pl) {
    const T* c00 = field.planes[pl].data() + lookup.offset[pl];
    const T* c10 = c00 + f;
    const T* c01 = c00 + row;
    const T* c11 = c01 + f;
    const T fu = lookup.fu[pl];
    const T fv = lookup.fv[pl];
    const T w00 = (T(1) - fu) * (T(1) - fv);
    const T w10 = fu * (T(1) - fv);
    const T w01 = (T(1) - fu) * fv;
    const T w11 = fu * fv;
    T* dst = add ? out : out + pl * f;
    for (int k = 0; k < f; ++k) {
      const T v = w00 * c00[k] + w10 * c10[k] + w01 * c01[k] + w11 * c11[k];
      dst[k] = add ? dst[k] + v : v;
    }
  }
}

template <typename T>
std::vector<T> interpolate_planes(const Vec3& p, const TriPlaneField<T>& field) {
  if (!p.allFinite()) fail(ErrorCode::kUsage, "interpolate_planes: non-finite point");
  if (!field.bounds.contains(p)) fail(ErrorCode::kUsage, "interpolate_planes: point outside scene bounds");
  std::vector<T> h(field.config.mlp_input());
  gather_features(field, plane_lookup(field, p), h.data());
  return h;
}

template <typename T>
GradientSet<T> GradientSet<T>::zeros_like(const TriPlaneField<T>& field, const Mlp<T>* edit, BlockSet active) {
  GradientSet<T> g;
  g.active = active;
  if (active.has(Block::kPlanes)) {
    for (int i = 0; i < 3; ++i) g.planes[i].assign(field.planes[i].size(), T(0));
  }
  auto zeros = [](const Mlp<T>& m) {
    Mlp<T> z = m;
    z.set_zero();
    return z;
  };
  if (active.has(Block::kGeom)) g.geom = zeros(field.geom);
  if (active.has(Block::kSem)) g.sem = zeros(field.sem);
  if (active.has(Block::kColor)) g.color = zeros(field.color);
  if (active.has(Block::kEdit)) {
    if (!edit) fail(ErrorCode::kUsage, "gradient set: edit block requested without an edit MLP");
    g.edit = zeros(*edit);
  }
  return g;
}

template <typename T>
void GradientSet<T>::set_zero() {
  for (auto& p : planes) std::fill(p.begin(), p.end(), T(0));
  geom.set_zero();
  sem.set_zero();
  color.set_zero();
  edit.set_zero();
}

template <typename T>
void GradientSet<T>::add(const GradientSet& other) {
  for (int i = 0; i < 3; ++i) {
    for (size_t k = 0; k < planes[i].size(); ++k) planes[i][k] += other.planes[i][k];
  }
  geom.add(other.geom);
  sem.add(other.sem);
  color.add(other.color);
  edit.add(other.edit);
}

template <typename T>
std::optional<std::string> GradientSet<T>::first_nonfinite() const {
  std::optional<std::string> bad;
  const_cast<GradientSet*>(this)->for_each([&](Block, const std::string& name, std::span<T> values) {
    if (bad) return;
    for (T v : values) {
      if (!std::isfinite(static_cast<double>(v))) {
        bad = name;
        return;
      }
    }
  });
  return bad;
}

template <typename T>
double GradientSet<T>::max_abs() const {
  double m = 0.0;
  const_cast<GradientSet*>(this)->for_each([&](Block, const std::string&, std::span<T> values) {
    for (T v : values) m = std::max(m, std::abs(static_cast<double>(v)));
  });
  return m;
}

#define TRIEDIT_INSTANTIATE(T)                                                               \
  template struct TriPlaneField<T>;                                                          \
  template struct GradientSet<T>;                                                            \
  template Mlp<T> make_edit_mlp<T>(int, int);                                                \
  template PlaneLookup<T> plane_lookup<T>(const TriPlaneField<T>&, const Vec3&);             \
  template void gather_features<T>(const TriPlaneField<T>&, const PlaneLookup<T>&, T*);      \
  template std::vector<T> interpolate_planes<T>(const Vec3&, const TriPlaneField<T>&);

TRIEDIT_INSTANTIATE(float)
TRIEDIT_INSTANTIATE(double)
#undef TRIEDIT_INSTANTIATE

}  // namespace triedit
