// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/evaluator.hpp"

namespace triedit {

template <typename T>
void FieldEvaluator<T>::forward(const TriPlaneField<T>& field, std::span<const Vec3> points, bool record) {
  const int n = static_cast<int>(points.size());
  const int width = field.config.mlp_input();
  lookups_.resize(n);
  h_.resize(n, width);
  for (int i = 0; i < n; ++i) {
    lookups_[i] = plane_lookup(field, points[i]);
    gather_features(field, lookups_[i], h_.data() + static_cast<size_t>(i) * width);
  }
  RowMatrix<T> geom_out;
  mlp_forward(field.geom, h_, &geom_out, record ? &geom_tape_ : nullptr);
  const int g = field.config.geo_features;
  sigma_raw_ = geom_out.col(0);
  sigma_ = sigma_raw_.cwiseMax(T(0));
  f_geom_ = geom_out.rightCols(g);
  mlp_forward(field.sem, f_geom_, &f_sem_, record ? &sem_tape_ : nullptr);
  mlp_forward(field.color, f_sem_, &color_, record ? &color_tape_ : nullptr);
  recorded_ = record;
}

template <typename T>
void FieldEvaluator<T>::backward(const TriPlaneField<T>& field, const T* d_sigma, const RowMatrix<T>* d_fsem,
                                 const RowMatrix<T>* d_color, GradientSet<T>* grads) const {
  if (!recorded_) fail(ErrorCode::kState, "evaluator: backward without a recorded forward");
  const BlockSet active = grads->active;
  const int n = size();
  const bool need_geom_input = active.has(Block::kPlanes);
  const bool need_geom_out = need_geom_input || active.has(Block::kGeom);
  const bool need_sem_out = need_geom_out || active.has(Block::kSem);

  RowMatrix<T> dfsem;
  if (d_fsem) dfsem = *d_fsem;
  if (d_color && (need_sem_out || active.has(Block::kColor))) {
    RowMatrix<T> from_color;
    mlp_backward(field.color, color_tape_, *d_color, active.has(Block::kColor) ? &grads->color : nullptr,
                 need_sem_out ? &from_color : nullptr);
    if (need_sem_out) {
      if (dfsem.size() == 0) {
        dfsem = std::move(from_color);
      } else {
        dfsem += from_color;
      }
    }
  }
  if (!need_sem_out) return;

  const int g = field.config.geo_features;
  RowMatrix<T> dgeom_out = RowMatrix<T>::Zero(n, 1 + g);
  if (dfsem.size() != 0) {
    RowMatrix<T> dfgeom;
    mlp_backward(field.sem, sem_tape_, dfsem, active.has(Block::kSem) ? &grads->sem : nullptr,
                 need_geom_out ? &dfgeom : nullptr);
    if (need_geom_out) dgeom_out.rightCols(g) = dfgeom;
  }
  if (!need_geom_out) return;
  if (d_sigma) {
    for (int i = 0; i < n; ++i) dgeom_out(i, 0) = sigma_raw_[i] > T(0) ? d_sigma[i] : T(0);
  }
  RowMatrix<T> dh;
  mlp_backward(field.geom, geom_tape_, std::move(dgeom_out), active.has(Block::kGeom) ? &grads->geom : nullptr,
               need_geom_input ? &dh : nullptr);
  if (!need_geom_input) return;

  const int f = field.config.features;
  const size_t row = static_cast<size_t>(field.config.resolution) * f;
  const bool add = field.config.combine == CombineMode::kAdd;
  for (int i = 0; i < n; ++i) {
    const auto& lk = lookups_[i];
    const T* dhi = dh.data() + static_cast<size_t>(i) * dh.cols();
    for (int pl = 0; pl < 3; ++pl) {
      const T* src = add ? dhi : dhi + pl * f;
      const T fu = lk.fu[pl];
      const T fv = lk.fv[pl];
      const T w00 = (T(1) - fu) * (T(1) - fv);
      const T w10 = fu * (T(1) - fv);
      const T w01 = (T(1) - fu) * fv;
      const T w11 = fu * fv;
      T* c00 = grads->planes[pl].data() + lk.offset[pl];
      T* c10 = c00 + f;
      T* c01 = c00 + row;
      T* c11 = c01 + f;
      for (int k = 0; k < f; ++k) {
        const T d = src[k];
        c00[k] += w00 * d;
        c10[k] += w10 * d;
        c01[k] += w01 * d;
        c11[k] += w11 * d;
      }
    }
  }
}

template <typename T>
RadianceSample<T> eval_point(const Vec3& p, const TriPlaneField<T>& field, ClampPolicy policy) {
  if (!p.allFinite()) fail(ErrorCode::kUsage, "eval_point: non-finite point");
  Vec3 q = p;
  if (!field.bounds.contains(p)) {
    if (policy == ClampPolicy::kError) fail(ErrorCode::kUsage, "eval_point: point outside scene bounds");
    q = p.cwiseMax(field.bounds.min).cwiseMin(field.bounds.max);
  }
  FieldEvaluator<T> ev;
  ev.forward(field, std::span<const Vec3>(&q, 1), false);
  RadianceSample<T> s;
  s.sigma = ev.sigma()[0];
  s.f_geom.assign(ev.f_geom().data(), ev.f_geom().data() + ev.f_geom().cols());
  s.f_sem.assign(ev.f_sem().data(), ev.f_sem().data() + ev.f_sem().cols());
  for (int c = 0; c < 3; ++c) s.color[c] = ev.color()(0, c);
  return s;
}

template class FieldEvaluator<float>;
template class FieldEvaluator<double>;
template RadianceSample<float> eval_point<float>(const Vec3&, const TriPlaneField<float>&, ClampPolicy);
template RadianceSample<double> eval_point<double>(const Vec3&, const TriPlaneField<double>&, ClampPolicy);

}  // namespace triedit
