// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "triedit/field.hpp"

namespace triedit {

/// Batched field evaluation with an optional tape for reverse mode. Every
/// point passed to forward() must lie inside the field bounds; callers cull.
template <typename T>
class FieldEvaluator {
 public:
  void forward(const TriPlaneField<T>& field, std::span<const Vec3> points, bool record);

  int size() const { return static_cast<int>(sigma_.size()); }
  const Vector<T>& sigma() const { return sigma_; }
  const Vector<T>& sigma_raw() const { return sigma_raw_; }
  const RowMatrix<T>& f_geom() const { return f_geom_; }
  const RowMatrix<T>& f_sem() const { return f_sem_; }
  const RowMatrix<T>& color() const { return color_; }

  /// Accumulates parameter gradients for the active blocks of `grads` given
  /// upstream gradients w.r.t. sigma, f_sem and color (any may be null).
  /// Requires the preceding forward() to have been recorded.
  void backward(const TriPlaneField<T>& field, const T* d_sigma, const RowMatrix<T>* d_fsem,
                const RowMatrix<T>* d_color, GradientSet<T>* grads) const;

 private:
  bool recorded_ = false;
  std::vector<PlaneLookup<T>> lookups_;
  RowMatrix<T> h_;
  MlpTape<T> geom_tape_, sem_tape_, color_tape_;
  Vector<T> sigma_, sigma_raw_;
  RowMatrix<T> f_geom_, f_sem_, color_;
};

}  // namespace triedit
