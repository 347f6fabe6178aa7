// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triedit/camera.hpp"
#include "triedit/edit_token.hpp"
#include "triedit/field.hpp"
#include "triedit/image.hpp"
#include "triedit/selection.hpp"

namespace triedit {

enum class Regime { kPretrain, kEditResidual, kFinetune };

std::string_view regime_name(Regime r);
Regime parse_regime(const std::string& name);

struct LossWeights {
  double lambda1 = 1e-4;  // L1 on planes
  double lambda2 = 1e-3;  // TV on planes
  double lambda3 = 0.05;  // depth
  double lambda4 = 0.1;   // density preservation outside the selection
  double feature = 1.0;   // feature distillation

  void validate() const;
};

struct TrainConfig {
  Regime regime = Regime::kPretrain;
  int iterations = 40000;
  int rays_per_batch = 192;
  double learning_rate = 5e-3;
  /// Plane learning rate; <= 0 uses learning_rate.
  double plane_learning_rate = 2e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  LossWeights weights;
  uint64_t seed = 0;
  BlockSet trainable = BlockSet::all_field();
  int samples_per_ray = 128;
  bool jitter = true;
  Rgb background{0.0f, 0.0f, 0.0f};
  int workers = 0;
  int density_probes = 4096;
  /// Parameters are copied aside this often so divergence can roll back.
  int snapshot_every = 250;

  /// Throws kUsage: iterations <= 0, non-positive batch or rates, negative
  /// weights, or an edit_residual config that trains anything but the edit.
  void validate() const;
};

/// Per-ray training inputs. Optional arrays are empty when absent.
template <typename T>
struct RayBatch {
  std::vector<Ray> rays;
  std::vector<T> rgb;             // n x 3 targets
  std::vector<T> features;        // n x D targets
  std::vector<T> edited_depth;    // E_depth
  std::vector<T> original_depth;  // C_depth
  std::vector<uint8_t> mask;      // 2D selection
  std::vector<uint64_t> jitter_seeds;

  size_t size() const { return rays.size(); }
};

/// Residual edit applied to selected samples during the forward pass.
template <typename T>
struct EditTerm {
  const Mlp<T>* mlp = nullptr;
  TokenKind kind = TokenKind::kFeatureResidual;
  SelectionParams selection;
};

/// Density-preservation probes: positions, frozen densities and the
/// selection evaluated on the frozen field.
template <typename T>
struct DensityProbes {
  std::vector<Vec3> points;
  std::vector<T> sigma_orig;
  std::vector<uint8_t> inside;
};

template <typename T>
struct LossInputs {
  const RayBatch<T>* batch = nullptr;
  int samples_per_ray = 64;
  Rgb background{0.0f, 0.0f, 0.0f};
  const EditTerm<T>* edit = nullptr;
  const DensityProbes<T>* probes = nullptr;
  LossWeights weights;
  int workers = 1;
};

struct LossBreakdown {
  double photometric = 0;
  double feature = 0;
  double l1 = 0;
  double tv = 0;
  double depth = 0;
  double density = 0;
  double total = 0;
};

/// Total objective and, when `grads` is non-null, its exact gradient for the
/// active blocks of `grads`:
///   photometric + feature_w * feature + l1_w * L1 + tv_w * TV
///   + depth_w * depth + density_w * density
/// where each term is present only when its inputs are.
template <typename T>
LossBreakdown compute_loss_and_gradients(const TriPlaneField<T>& field, const LossInputs<T>& inputs,
                                         GradientSet<T>* grads);

template <typename T>
DensityProbes<T> make_density_probes(const TriPlaneField<T>& original, const SelectionParams* selection, int count,
                                     uint64_t seed);

/// Bias-corrected Adam over a list of parameter arrays.
template <typename T>
struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               std::span<const double> learning_rates, double beta1, double beta2, double eps, AdamState<T>* state);

/// A posed training image with optional supervision planes.
struct TrainView {
  std::string id;
  Camera camera;
  Image rgb;
  Image features;        // D_sem channels (pretrain)
  Image edited_depth;    // E_depth, distance along the ray
  Image original_depth;  // C_depth
  Image mask;            // projected selection, 0/1
};

struct ProgressEvent {
  int iteration = 0;  // 1-based
  int total = 0;
  LossBreakdown loss;
  double elapsed_ms = 0;
};

/// Return false to cancel.
using ProgressSink = std::function<bool(const ProgressEvent&)>;

struct TrainHooks {
  ProgressSink progress;
  std::ostream* metrics = nullptr;  // newline-delimited JSON records
  int metrics_every = 1;
  std::function<void(const TriPlaneField<float>&, int)> snapshot;
  int publish_every = 0;
};

struct TrainResult {
  std::vector<double> loss_trace;  // total loss per iteration
  int iterations_run = 0;
  bool cancelled = false;
  double elapsed_ms = 0;
  /// edit_residual: full masked photometric loss before and after training.
  double masked_initial = 0;
  double masked_final = 0;
};

/// Photometric + feature distillation + L1/TV on random rays of all views.
TrainResult run_pretrain(TriPlaneField<float>* field, std::span<const TrainView> views, const TrainConfig& config,
                         const TrainHooks& hooks = {});

/// Trains the MLP of `token` against the edited views with the field frozen.
/// `prior` tokens (already in the stack) are applied before the new one.
/// Uses a cache of the frozen field's samples per pixel; samples lighter than
/// `min_weight` are treated as unedited.
TrainResult run_edit_residual(const TriPlaneField<float>& field, EditToken* token, std::span<const TrainView> views,
                              const TrainConfig& config, std::span<const EditToken* const> prior = {},
                              const TrainHooks& hooks = {}, double min_weight = 1e-6);

/// Full-field retraining on edited views for `epochs` passes over their
/// pixels (config.iterations is ignored when epochs > 0). Depth targets are
/// required when lambda3 > 0; density probes use `original` and `selection`.
TrainResult run_finetune(TriPlaneField<float>* field, const TriPlaneField<float>& original,
                         const SelectionParams* selection, std::span<const TrainView> views, const TrainConfig& config,
                         int epochs, const TrainHooks& hooks = {});

/// Masked-region photometric error of the edit cache, exposed for tests: the
/// loss of the fast edit path on the given pixels vs. the generic engine.
struct EditCacheCheck {
  LossBreakdown cached;
  LossBreakdown generic;
  double max_grad_diff = 0;
  double max_grad = 0;
};
EditCacheCheck compare_edit_paths(const TriPlaneField<float>& field, const EditToken& token,
                                  std::span<const TrainView> views, int samples_per_ray, int pixels, uint64_t seed);

/// Default per-regime settings (iterations, batch, learning rate).
TrainConfig default_config(Regime regime);

}  // namespace triedit
