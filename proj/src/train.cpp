// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "triedit/composite.hpp"
#include "triedit/evaluator.hpp"
#include "triedit/losses.hpp"
#include "triedit/parallel.hpp"
#include "triedit/renderer.hpp"

namespace triedit {
namespace {

constexpr int kRaysPerTask = 16;

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

template <typename T>
struct WorkerState {
  FieldEvaluator<T> ev;
  MlpTape<T> edit_tape;
  GradientSet<T> grads;
};

struct RayLoss {
  double photometric = 0;
  double feature = 0;
  double depth = 0;
};

// Forward + backward for one group of rays.
template <typename T>
void process_rays(const TriPlaneField<T>& field, const LossInputs<T>& in, int first, int count, int n_in, int n_out,
                  WorkerState<T>& ws, GradientSet<T>* grads, std::vector<RayLoss>& losses) {
  const RayBatch<T>& b = *in.batch;
  const int n_total = static_cast<int>(b.size());
  const int d = field.config.sem_dim;
  const bool has_feat = !b.features.empty() && in.weights.feature > 0;
  const bool has_depth = !b.edited_depth.empty() && in.weights.lambda3 > 0;
  const int ch = 3 + (has_feat ? d : 0) + (has_depth ? 1 : 0);
  const int n_s = in.samples_per_ray;

  // Sample and cull.
  std::vector<Vec3> points;
  std::vector<int> ray_start(count + 1, 0);
  std::vector<T> t_list, delta_list;
  for (int r = 0; r < count; ++r) {
    const Ray& ray = b.rays[first + r];
    RaySamples rs;
    if (!b.jitter_seeds.empty()) {
      Rng rng(b.jitter_seeds[first + r]);
      rs = sample_ray(ray, ray.near, ray.far, n_s, &rng);
    } else {
      rs = sample_ray(ray, ray.near, ray.far, n_s);
    }
    for (int i = 0; i < n_s; ++i) {
      if (!field.bounds.contains(rs.points[i])) continue;
      points.push_back(rs.points[i]);
      t_list.push_back(static_cast<T>(rs.t[i]));
      delta_list.push_back(static_cast<T>(rs.delta[i]));
    }
    ray_start[r + 1] = static_cast<int>(points.size());
  }
  const int m = static_cast<int>(points.size());
  ws.ev.forward(field, points, grads != nullptr);

  // Residual edit on selected samples.
  RowMatrix<T> colors = ws.ev.color();
  std::vector<int> edit_rows;
  RowMatrix<T> edit_pre;  // c + r before clamping, selected rows only
  const EditTerm<T>* edit = in.edit;
  if (edit && m > 0) {
    for (int j = 0; j < m; ++j) {
      std::span<const T> f(ws.ev.f_sem().data() + static_cast<size_t>(j) * d, d);
      if (feature_selected(f, edit->selection)) edit_rows.push_back(j);
    }
    if (!edit_rows.empty()) {
      const bool feature = edit->kind == TokenKind::kFeatureResidual;
      const int xd = feature ? d : 3;
      RowMatrix<T> x(static_cast<Eigen::Index>(edit_rows.size()), xd);
      for (size_t k = 0; k < edit_rows.size(); ++k) {
        x.row(k) = feature ? RowMatrix<T>(ws.ev.f_sem().row(edit_rows[k])) : RowMatrix<T>(colors.row(edit_rows[k]));
      }
      RowMatrix<T> residual;
      mlp_forward(*edit->mlp, x, &residual, grads ? &ws.edit_tape : nullptr);
      edit_pre.resize(static_cast<Eigen::Index>(edit_rows.size()), 3);
      for (size_t k = 0; k < edit_rows.size(); ++k) {
        for (int c = 0; c < 3; ++c) {
          const T v = colors(edit_rows[k], c) + residual(k, c);
          edit_pre(k, c) = v;
          colors(edit_rows[k], c) = std::clamp(v, T(0), T(1));
        }
      }
    }
  }

  RowMatrix<T> d_color, d_fsem;
  std::vector<T> d_sigma;
  if (grads) {
    d_color = RowMatrix<T>::Zero(m, 3);
    if (has_feat) d_fsem = RowMatrix<T>::Zero(m, d);
    d_sigma.assign(m, T(0));
  }

  std::vector<T> values, bg(ch, T(0)), grad(ch), d_values;
  for (int c = 0; c < 3; ++c) bg[c] = static_cast<T>(in.background[c]);
  for (int r = 0; r < count; ++r) {
    const int ray = first + r;
    const int s0 = ray_start[r], s1 = ray_start[r + 1];
    const int ns = s1 - s0;
    std::span<const T> sig(ws.ev.sigma().data() + s0, ns);
    std::span<const T> del(delta_list.data() + s0, ns);
    CompositeWeights<T> w = composite_weights(sig, del);
    values.assign(static_cast<size_t>(ns) * ch, T(0));
    for (int i = 0; i < ns; ++i) {
      T* v = values.data() + static_cast<size_t>(i) * ch;
      for (int c = 0; c < 3; ++c) v[c] = colors(s0 + i, c);
      if (has_feat) {
        for (int c = 0; c < d; ++c) v[3 + c] = ws.ev.f_sem()(s0 + i, c);
      }
      if (has_depth) v[ch - 1] = t_list[s0 + i];
    }
    std::vector<T> out(ch, T(0));
    for (int i = 0; i < ns; ++i) {
      for (int c = 0; c < ch; ++c) out[c] += w.weights[i] * values[static_cast<size_t>(i) * ch + c];
    }
    for (int c = 0; c < 3; ++c) out[c] += w.residual() * bg[c];

    RayLoss& rl = losses[ray];
    const double inv_rgb = 1.0 / (3.0 * n_total);
    for (int c = 0; c < 3; ++c) {
      const double e = static_cast<double>(out[c]) - static_cast<double>(b.rgb[static_cast<size_t>(ray) * 3 + c]);
      rl.photometric += e * e * inv_rgb;
      grad[c] = static_cast<T>(2.0 * e * inv_rgb);
    }
    if (has_feat) {
      const double inv = 1.0 / (static_cast<double>(d) * n_total);
      for (int c = 0; c < d; ++c) {
        const double e = static_cast<double>(out[3 + c]) - static_cast<double>(b.features[static_cast<size_t>(ray) * d + c]);
        rl.feature += e * e * inv;
        grad[3 + c] = static_cast<T>(in.weights.feature * 2.0 * e * inv);
      }
    }
    if (has_depth) {
      const bool masked = b.mask[ray] != 0;
      const double target = masked ? b.edited_depth[ray] : b.original_depth[ray];
      const double inv = 1.0 / (masked ? n_in : n_out);
      const double e = static_cast<double>(out[ch - 1]) - target;
      rl.depth += e * e * inv;
      grad[ch - 1] = static_cast<T>(in.weights.lambda3 * 2.0 * e * inv);
    }
    if (!grads) continue;
    d_values.assign(static_cast<size_t>(ns) * ch, T(0));
    composite_backward<T>(del, w, values, ch, bg, grad, d_sigma.data() + s0, d_values.data());
    for (int i = 0; i < ns; ++i) {
      const T* dv = d_values.data() + static_cast<size_t>(i) * ch;
      for (int c = 0; c < 3; ++c) d_color(s0 + i, c) = dv[c];
      if (has_feat) {
        for (int c = 0; c < d; ++c) d_fsem(s0 + i, c) = dv[3 + c];
      }
    }
  }
  if (!grads || m == 0) return;

  const BlockSet active = grads->active;
  const bool field_active = active.has(Block::kPlanes) || active.has(Block::kGeom) || active.has(Block::kSem) ||
                            active.has(Block::kColor);
  if (!edit_rows.empty()) {
    const bool feature = edit->kind == TokenKind::kFeatureResidual;
    RowMatrix<T> dr(static_cast<Eigen::Index>(edit_rows.size()), 3);
    for (size_t k = 0; k < edit_rows.size(); ++k) {
      for (int c = 0; c < 3; ++c) {
        const T v = edit_pre(k, c);
        dr(k, c) = (v >= T(0) && v <= T(1)) ? d_color(edit_rows[k], c) : T(0);
      }
    }
    RowMatrix<T> dx;
    mlp_backward(*edit->mlp, ws.edit_tape, dr, active.has(Block::kEdit) ? &grads->edit : nullptr,
                 field_active ? &dx : nullptr);
    if (field_active) {
      if (feature && d_fsem.size() == 0) d_fsem = RowMatrix<T>::Zero(m, d);
      for (size_t k = 0; k < edit_rows.size(); ++k) {
        const int j = edit_rows[k];
        if (feature) {
          d_fsem.row(j) += dx.row(k);
          d_color.row(j) = dr.row(k);
        } else {
          d_color.row(j) = dr.row(k) + dx.row(k);
        }
      }
    }
  }
  if (field_active) {
    ws.ev.backward(field, d_sigma.data(), d_fsem.size() ? &d_fsem : nullptr, &d_color, grads);
  }
}

template <typename T>
double density_term(const TriPlaneField<T>& field, const DensityProbes<T>& probes, double weight,
                    GradientSet<T>* grads) {
  std::vector<Vec3> pts;
  std::vector<T> orig;
  for (size_t i = 0; i < probes.points.size(); ++i) {
    if (probes.inside[i] || !field.bounds.contains(probes.points[i])) continue;
    pts.push_back(probes.points[i]);
    orig.push_back(probes.sigma_orig[i]);
  }
  if (pts.empty()) return 0.0;
  FieldEvaluator<T> ev;
  const bool need_grad = grads && (grads->active.has(Block::kPlanes) || grads->active.has(Block::kGeom));
  ev.forward(field, pts, need_grad);
  const double inv = 1.0 / static_cast<double>(pts.size());
  double s = 0;
  std::vector<T> ds(pts.size());
  for (size_t i = 0; i < pts.size(); ++i) {
    const double e = static_cast<double>(ev.sigma()[i]) - static_cast<double>(orig[i]);
    s += e * e * inv;
    ds[i] = static_cast<T>(weight * 2.0 * e * inv);
  }
  if (need_grad) ev.backward(field, ds.data(), nullptr, nullptr, grads);
  return s;
}

}  // namespace

std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::kPretrain: return "pretrain";
    case Regime::kEditResidual: return "edit_residual";
    case Regime::kFinetune: return "finetune";
  }
  return "?";
}

Regime parse_regime(const std::string& name) {
  if (name == "pretrain") return Regime::kPretrain;
  if (name == "edit_residual" || name == "edit") return Regime::kEditResidual;
  if (name == "finetune") return Regime::kFinetune;
  fail(ErrorCode::kUsage, "unknown regime '" + name + "'");
}

void LossWeights::validate() const {
  for (double v : {lambda1, lambda2, lambda3, lambda4, feature}) {
    if (!(v >= 0) || !std::isfinite(v)) fail(ErrorCode::kUsage, "loss weights must be finite and >= 0");
  }
}

void TrainConfig::validate() const {
  if (iterations <= 0) fail(ErrorCode::kUsage, "iterations must be > 0");
  if (rays_per_batch <= 0) fail(ErrorCode::kUsage, "rays per batch must be > 0");
  if (!(learning_rate > 0)) fail(ErrorCode::kUsage, "learning rate must be > 0");
  if (samples_per_ray <= 0) fail(ErrorCode::kUsage, "samples per ray must be > 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0)) fail(ErrorCode::kUsage, "bad Adam settings");
  weights.validate();
  if (regime == Regime::kEditResidual && !(trainable == BlockSet::only(Block::kEdit))) {
    fail(ErrorCode::kUsage, "edit_residual trains the edit MLP only");
  }
  if (regime != Regime::kEditResidual && trainable.has(Block::kEdit)) {
    fail(ErrorCode::kUsage, "only edit_residual trains an edit MLP");
  }
}

TrainConfig default_config(Regime regime) {
  TrainConfig c;
  c.regime = regime;
  switch (regime) {
    case Regime::kPretrain:
      break;
    case Regime::kEditResidual:
      c.iterations = 500;
      c.rays_per_batch = 1024;
      c.learning_rate = 5e-3;
      c.plane_learning_rate = 0;
      c.trainable = BlockSet::only(Block::kEdit);
      c.jitter = false;
      break;
    case Regime::kFinetune:
      c.iterations = 1;
      c.rays_per_batch = 512;
      c.learning_rate = 2e-4;
      c.plane_learning_rate = 0;
      break;
  }
  return c;
}

template <typename T>
LossBreakdown compute_loss_and_gradients(const TriPlaneField<T>& field, const LossInputs<T>& in,
                                         GradientSet<T>* grads) {
  if (!in.batch || in.batch->size() == 0) fail(ErrorCode::kUsage, "loss: empty batch");
  const RayBatch<T>& b = *in.batch;
  const int n = static_cast<int>(b.size());
  const int d = field.config.sem_dim;
  if (b.rgb.size() != static_cast<size_t>(n) * 3) fail(ErrorCode::kUsage, "loss: rgb targets misaligned");
  if (!b.features.empty() && b.features.size() != static_cast<size_t>(n) * d) {
    fail(ErrorCode::kUsage, "loss: feature targets have " + std::to_string(b.features.size() / n) +
                                " channels, field has " + std::to_string(d));
  }
  if (!b.jitter_seeds.empty() && b.jitter_seeds.size() != static_cast<size_t>(n)) {
    fail(ErrorCode::kUsage, "loss: jitter seeds misaligned");
  }
  const bool has_depth = !b.edited_depth.empty() && in.weights.lambda3 > 0;
  int n_in = 0, n_out = 0;
  if (in.weights.lambda3 > 0 && (b.edited_depth.empty() || b.original_depth.empty() || b.mask.empty())) {
    if (!b.edited_depth.empty() || !b.original_depth.empty()) {
      fail(ErrorCode::kUsage, "loss: depth term needs edited depth, original depth and mask");
    }
  }
  if (has_depth) {
    if (b.edited_depth.size() != static_cast<size_t>(n) || b.original_depth.size() != static_cast<size_t>(n) ||
        b.mask.size() != static_cast<size_t>(n)) {
      fail(ErrorCode::kUsage, "loss: depth planes misaligned");
    }
    for (uint8_t v : b.mask) (v ? n_in : n_out)++;
  }
  if (in.edit && (!in.edit->mlp || in.edit->mlp->out_dim() != 3)) fail(ErrorCode::kUsage, "loss: bad edit MLP");

  if (grads) grads->set_zero();
  std::vector<RayLoss> losses(n);
  const int tasks = (n + kRaysPerTask - 1) / kRaysPerTask;
  const int workers = std::max(1, std::min(in.workers, tasks));
  std::vector<WorkerState<T>> ws(workers);
  if (grads && workers > 1) {
    for (auto& w : ws) w.grads = GradientSet<T>::zeros_like(field, in.edit ? in.edit->mlp : nullptr, grads->active);
  }
  parallel_for(workers, tasks, [&](int task, int worker) {
    const int first = task * kRaysPerTask;
    const int count = std::min(kRaysPerTask, n - first);
    GradientSet<T>* g = grads ? (workers > 1 ? &ws[worker].grads : grads) : nullptr;
    process_rays(field, in, first, count, n_in, n_out, ws[worker], g, losses);
  });
  if (grads && workers > 1) {
    for (auto& w : ws) grads->add(w.grads);
  }

  LossBreakdown out;
  for (const auto& rl : losses) {
    out.photometric += rl.photometric;
    out.feature += rl.feature;
    out.depth += rl.depth;
  }
  const auto& w = in.weights;
  const int res = field.config.resolution, feat = field.config.features;
  const bool planes_active = grads && grads->active.has(Block::kPlanes);
  if (w.lambda1 > 0) {
    out.l1 = loss_l1(field.planes);
    if (planes_active) loss_l1_grad(field.planes, static_cast<T>(w.lambda1), &grads->planes);
  }
  if (w.lambda2 > 0) {
    out.tv = loss_tv(field.planes, res, feat);
    if (planes_active) loss_tv_grad(field.planes, res, feat, static_cast<T>(w.lambda2), &grads->planes);
  }
  if (in.probes && w.lambda4 > 0) out.density = density_term(field, *in.probes, w.lambda4, grads);
  const bool has_feat = !b.features.empty() && w.feature > 0;
  out.total = out.photometric + (has_feat ? w.feature * out.feature : 0.0) + w.lambda1 * out.l1 + w.lambda2 * out.tv +
              (has_depth ? w.lambda3 * out.depth : 0.0) + w.lambda4 * out.density;
  if (grads) {
    if (auto bad = grads->first_nonfinite()) fail(ErrorCode::kNumerical, "non-finite gradient in " + *bad);
  }
  return out;
}

template <typename T>
DensityProbes<T> make_density_probes(const TriPlaneField<T>& original, const SelectionParams* selection, int count,
                                     uint64_t seed) {
  DensityProbes<T> p;
  const int k = std::max(1, static_cast<int>(std::lround(std::cbrt(static_cast<double>(count)))));
  Rng rng(seed);
  const Vec3 ext = original.bounds.extent();
  for (int z = 0; z < k; ++z) {
    for (int y = 0; y < k; ++y) {
      for (int x = 0; x < k; ++x) {
        const Vec3 u((x + rng.uniform()) / k, (y + rng.uniform()) / k, (z + rng.uniform()) / k);
        p.points.push_back(original.bounds.min + (u.array() * ext.array()).matrix());
      }
    }
  }
  FieldEvaluator<T> ev;
  ev.forward(original, p.points, false);
  const int d = original.config.sem_dim;
  p.sigma_orig.resize(p.points.size());
  p.inside.assign(p.points.size(), 0);
  for (size_t i = 0; i < p.points.size(); ++i) {
    p.sigma_orig[i] = ev.sigma()[i];
    if (selection && !selection->empty()) {
      p.inside[i] = feature_selected(std::span<const T>(ev.f_sem().data() + i * d, d), *selection);
    }
  }
  return p;
}

template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               std::span<const double> learning_rates, double beta1, double beta2, double eps, AdamState<T>* state) {
  if (params.size() != grads.size() || params.size() != learning_rates.size()) {
    fail(ErrorCode::kUsage, "adam: parameter/gradient lists differ");
  }
  if (state->m.empty()) {
    for (const auto& p : params) {
      state->m.emplace_back(p.size(), T(0));
      state->v.emplace_back(p.size(), T(0));
    }
  }
  if (state->m.size() != params.size()) fail(ErrorCode::kUsage, "adam: state does not match parameters");
  state->step += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state->step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state->step));
  for (size_t a = 0; a < params.size(); ++a) {
    auto p = params[a];
    auto g = grads[a];
    if (g.size() != p.size() || state->m[a].size() != p.size()) fail(ErrorCode::kUsage, "adam: shape mismatch");
    T* m = state->m[a].data();
    T* v = state->v[a].data();
    const double lr = learning_rates[a];
    for (size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = beta1 * m[i] + (1.0 - beta1) * gi;
      const double vi = beta2 * v[i] + (1.0 - beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    }
  }
}

namespace {

// Trainable arrays of a field (and optional edit MLP) with their gradient
// counterparts, in the GradientSet visiting order.
struct Binding {
  std::vector<std::span<float>> params;
  std::vector<std::span<const float>> grads;
  std::vector<double> lrs;
};

Binding bind(TriPlaneField<float>* field, Mlp<float>* edit, GradientSet<float>& grads, const TrainConfig& cfg) {
  Binding b;
  const double plane_lr = cfg.plane_learning_rate > 0 ? cfg.plane_learning_rate : cfg.learning_rate;
  if (field) {
    field->for_each_parameter([&](Block block, const std::string&, std::span<float> s) {
      if (!cfg.trainable.has(block)) return;
      b.params.push_back(s);
      b.lrs.push_back(block == Block::kPlanes ? plane_lr : cfg.learning_rate);
    });
  }
  if (edit && cfg.trainable.has(Block::kEdit)) {
    auto fn = [&](Block, const std::string&, std::span<float> s) {
      b.params.push_back(s);
      b.lrs.push_back(cfg.learning_rate);
    };
    detail::visit_mlp("edit", Block::kEdit, *edit, fn);
  }
  grads.for_each([&](Block, const std::string&, std::span<float> s) { b.grads.emplace_back(s.data(), s.size()); });
  if (b.grads.size() != b.params.size()) fail(ErrorCode::kState, "trainer: gradient layout does not match parameters");
  return b;
}

void emit(const TrainHooks& hooks, const ProgressEvent& ev, TrainResult& result) {
  if (hooks.metrics && (ev.iteration % std::max(1, hooks.metrics_every) == 0 || ev.iteration == ev.total)) {
    nlohmann::json j = {{"iter", ev.iteration},         {"total", ev.loss.total},   {"photometric", ev.loss.photometric},
                        {"feature", ev.loss.feature},   {"l1", ev.loss.l1},         {"tv", ev.loss.tv},
                        {"depth", ev.loss.depth},       {"density", ev.loss.density}, {"ms", ev.elapsed_ms}};
    *hooks.metrics << j.dump() << '\n';
  }
  if (hooks.progress && !hooks.progress(ev)) result.cancelled = true;
}

// Fills one batch entry from pixel `px` of `view`.
void push_pixel(RayBatch<float>& b, const TrainView& view, int x, int y, int sem_dim, bool features, bool depth,
                uint64_t jitter) {
  b.rays.push_back(generate_ray(view.camera, x, y));
  for (int c = 0; c < 3; ++c) b.rgb.push_back(view.rgb.at(x, y, c));
  if (features) {
    for (int c = 0; c < sem_dim; ++c) b.features.push_back(view.features.at(x, y, c));
  }
  if (depth) {
    b.edited_depth.push_back(view.edited_depth.at(x, y));
    b.original_depth.push_back(view.original_depth.at(x, y));
    b.mask.push_back(view.mask.at(x, y) > 0.5f);
  }
  if (jitter) b.jitter_seeds.push_back(jitter);
}

void check_views(std::span<const TrainView> views) {
  if (views.empty()) fail(ErrorCode::kUsage, "training needs at least one view");
  for (const auto& v : views) {
    v.camera.validate();
    if (v.rgb.width != v.camera.width() || v.rgb.height != v.camera.height() || v.rgb.channels != 3) {
      fail(ErrorCode::kData, "view '" + v.id + "': image does not match camera size");
    }
  }
}

// Rolls the field back to the last good copy and rethrows as a numerical error.
[[noreturn]] void diverged(TriPlaneField<float>* field, const TriPlaneField<float>& last_good, int good_iter, int iter,
                           const std::string& why) {
  *field = last_good;
  fail(ErrorCode::kNumerical, "training diverged at iteration " + std::to_string(iter) + " (" + why +
                                  "); parameters rolled back to iteration " + std::to_string(good_iter));
}

struct FieldLoop {
  TriPlaneField<float>* field;
  const TrainConfig& cfg;
  const TrainHooks& hooks;
  GradientSet<float> grads;
  Binding binding;
  AdamState<float> adam;
  TriPlaneField<float> last_good;
  int good_iter = 0;
  Clock::time_point t0 = Clock::now();

  FieldLoop(TriPlaneField<float>* f, const TrainConfig& c, const TrainHooks& h) : field(f), cfg(c), hooks(h) {
    grads = GradientSet<float>::zeros_like(*field, nullptr, cfg.trainable);
    binding = bind(field, nullptr, grads, cfg);
    last_good = *field;
  }

  // One optimizer step; returns false when cancelled.
  bool step(int iter, int total, const LossInputs<float>& in, TrainResult& result) {
    LossBreakdown loss;
    try {
      loss = compute_loss_and_gradients(*field, in, &grads);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumerical) throw;
      diverged(field, last_good, good_iter, iter, e.what());
    }
    if (!std::isfinite(loss.total)) diverged(field, last_good, good_iter, iter, "loss is not finite");
    adam_step<float>(binding.params, binding.grads, binding.lrs, cfg.beta1, cfg.beta2, cfg.eps, &adam);
    result.loss_trace.push_back(loss.total);
    result.iterations_run = iter;
    if (cfg.snapshot_every > 0 && iter % cfg.snapshot_every == 0) {
      last_good = *field;
      good_iter = iter;
    }
    if (hooks.snapshot && hooks.publish_every > 0 && iter % hooks.publish_every == 0) hooks.snapshot(*field, iter);
    emit(hooks, {iter, total, loss, ms_since(t0)}, result);
    return !result.cancelled;
  }
};

}  // namespace

TrainResult run_pretrain(TriPlaneField<float>* field, std::span<const TrainView> views, const TrainConfig& cfg,
                         const TrainHooks& hooks) {
  cfg.validate();
  check_views(views);
  const int d = field->config.sem_dim;
  const bool features = cfg.weights.feature > 0 && std::all_of(views.begin(), views.end(), [](const TrainView& v) {
                          return !v.features.empty();
                        });
  for (const auto& v : views) {
    if (features && (v.features.channels != d || !v.features.same_shape(Image(v.rgb.width, v.rgb.height, d)))) {
      fail(ErrorCode::kData, "view '" + v.id + "': feature image has " + std::to_string(v.features.channels) +
                                 " channels, field expects " + std::to_string(d));
    }
  }
  std::vector<size_t> prefix{0};
  for (const auto& v : views) prefix.push_back(prefix.back() + static_cast<size_t>(v.rgb.width) * v.rgb.height);

  TrainResult result;
  FieldLoop loop(field, cfg, hooks);
  Rng rng(cfg.seed);
  LossWeights w = cfg.weights;
  w.lambda3 = 0;
  w.lambda4 = 0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    RayBatch<float> batch;
    for (int r = 0; r < cfg.rays_per_batch; ++r) {
      const size_t idx = rng.below(prefix.back());
      const size_t v = std::upper_bound(prefix.begin(), prefix.end(), idx) - prefix.begin() - 1;
      const size_t local = idx - prefix[v];
      const int x = static_cast<int>(local % views[v].rgb.width), y = static_cast<int>(local / views[v].rgb.width);
      push_pixel(batch, views[v], x, y, d, features, false, cfg.jitter ? (rng.next() | 1) : 0);
    }
    LossInputs<float> in;
    in.batch = &batch;
    in.samples_per_ray = cfg.samples_per_ray;
    in.background = cfg.background;
    in.weights = w;
    in.workers = resolve_workers(cfg.workers);
    if (!loop.step(it, cfg.iterations, in, result)) break;
  }
  field->version += 1;
  result.elapsed_ms = ms_since(loop.t0);
  return result;
}

TrainResult run_finetune(TriPlaneField<float>* field, const TriPlaneField<float>& original,
                         const SelectionParams* selection, std::span<const TrainView> views_in, const TrainConfig& cfg,
                         int epochs, const TrainHooks& hooks) {
  cfg.validate();
  check_views(views_in);
  std::vector<TrainView> views(views_in.begin(), views_in.end());
  const bool depth = cfg.weights.lambda3 > 0;
  for (auto& v : views) {
    if (depth && v.edited_depth.empty()) {
      fail(ErrorCode::kData, "finetune: lambda3 > 0 needs an edited depth for view '" + v.id + "'");
    }
    if (depth && v.original_depth.empty()) {
      RenderOptions opt;
      opt.samples_per_ray = cfg.samples_per_ray;
      opt.workers = cfg.workers;
      v.original_depth = render_view(v.camera, original, opt).depth;
    }
    if (depth && v.mask.empty()) {
      v.mask = selection ? project_mask(v.camera, *selection, original, cfg.samples_per_ray, cfg.workers)
                         : Image(v.camera.width(), v.camera.height(), 1);
    }
  }
  std::vector<std::pair<int, int>> pixels;  // (view, pixel)
  for (size_t v = 0; v < views.size(); ++v) {
    for (int p = 0; p < views[v].rgb.width * views[v].rgb.height; ++p) pixels.emplace_back(static_cast<int>(v), p);
  }
  const int per_epoch = static_cast<int>((pixels.size() + cfg.rays_per_batch - 1) / cfg.rays_per_batch);
  const int total = epochs > 0 ? epochs * per_epoch : cfg.iterations;

  TrainResult result;
  FieldLoop loop(field, cfg, hooks);
  Rng rng(cfg.seed);
  size_t cursor = pixels.size();
  for (int it = 1; it <= total; ++it) {
    RayBatch<float> batch;
    for (int r = 0; r < cfg.rays_per_batch; ++r) {
      if (cursor == pixels.size()) {
        if (r > 0 && epochs > 0) break;  // epoch boundary ends the batch
        for (size_t i = pixels.size(); i > 1; --i) std::swap(pixels[i - 1], pixels[rng.below(i)]);
        cursor = 0;
      }
      const auto [v, p] = pixels[cursor++];
      const int wdt = views[v].rgb.width;
      push_pixel(batch, views[v], p % wdt, p / wdt, 0, false, depth, cfg.jitter ? (rng.next() | 1) : 0);
    }
    DensityProbes<float> probes;
    if (cfg.weights.lambda4 > 0) probes = make_density_probes(original, selection, cfg.density_probes, rng.next());
    LossInputs<float> in;
    in.batch = &batch;
    in.samples_per_ray = cfg.samples_per_ray;
    in.background = cfg.background;
    in.weights = cfg.weights;
    in.weights.feature = 0;
    in.probes = cfg.weights.lambda4 > 0 ? &probes : nullptr;
    in.workers = resolve_workers(cfg.workers);
    if (!loop.step(it, total, in, result)) break;
  }
  field->version += 1;
  result.elapsed_ms = ms_since(loop.t0);
  return result;
}

namespace {

// Frozen-field samples per context pixel, split into an edit-independent
// constant and the selected samples whose color the token changes.
struct EditCache {
  int x_dim = 0;
  std::vector<float> base;     // per pixel x 3
  std::vector<float> target;   // per pixel x 3
  std::vector<uint8_t> masked;  // per pixel 2D mask
  std::vector<uint32_t> offset;  // per pixel + 1
  std::vector<float> w;        // per sample
  std::vector<float> x;        // per sample x x_dim
  std::vector<float> c;        // per sample x 3 (color before the new token)

  size_t pixels() const { return offset.size() - 1; }
};

struct CachePart {
  std::vector<float> base, w, x, c, selw;
  std::vector<uint32_t> counts;
};

EditCache build_edit_cache(const TriPlaneField<float>& field, const EditToken& token, std::span<const TrainView> views,
                           std::span<const EditToken* const> prior, int samples_per_ray, const Rgb& background,
                           int workers, double min_weight, std::span<const PixelIndex> only = {},
                           int only_view = -1) {
  const int d = field.config.sem_dim;
  const bool feature = token.kind == TokenKind::kFeatureResidual;
  EditCache cache;
  cache.x_dim = feature ? d : 3;
  cache.offset.push_back(0);
  std::vector<float> selw_all;
  for (size_t vi = 0; vi < views.size(); ++vi) {
    if (only_view >= 0 && static_cast<int>(vi) != only_view) continue;
    const TrainView& view = views[vi];
    std::vector<PixelIndex> pixels;
    if (!only.empty()) {
      pixels.assign(only.begin(), only.end());
    } else {
      for (int y = 0; y < view.rgb.height; ++y) {
        for (int x = 0; x < view.rgb.width; ++x) pixels.push_back({x, y});
      }
    }
    std::vector<Ray> rays = generate_rays(view.camera, pixels);
    const int chunk = 64;
    const int tasks = (static_cast<int>(rays.size()) + chunk - 1) / chunk;
    std::vector<CachePart> parts(tasks);
    const int nw = std::max(1, std::min(resolve_workers(workers), tasks));
    std::vector<FieldEvaluator<float>> evs(nw);
    parallel_for(nw, tasks, [&](int task, int worker) {
      auto& ev = evs[worker];
      CachePart& part = parts[task];
      const int first = task * chunk;
      const int count = std::min(chunk, static_cast<int>(rays.size()) - first);
      std::vector<Vec3> pts;
      std::vector<float> del;
      std::vector<int> start{0};
      for (int r = 0; r < count; ++r) {
        const Ray& ray = rays[first + r];
        RaySamples rs = sample_ray(ray, ray.near, ray.far, samples_per_ray);
        for (int i = 0; i < samples_per_ray; ++i) {
          if (!field.bounds.contains(rs.points[i])) continue;
          pts.push_back(rs.points[i]);
          del.push_back(static_cast<float>(rs.delta[i]));
        }
        start.push_back(static_cast<int>(pts.size()));
      }
      ev.forward(field, pts, false);
      RowMatrix<float> colors = ev.color();
      if (!prior.empty() && !pts.empty()) apply_stack_batch(ev.f_sem(), &colors, prior);
      for (int r = 0; r < count; ++r) {
        double trans = 1.0, acc[3] = {0, 0, 0}, sel = 0;
        uint32_t kept = 0;
        for (int j = start[r]; j < start[r + 1]; ++j) {
          const double sigma = ev.sigma()[j];
          if (sigma <= 0) continue;
          const double keep = std::exp(-sigma * del[j]);
          const double wj = trans * (1.0 - keep);
          trans *= keep;
          std::span<const float> f(ev.f_sem().data() + static_cast<size_t>(j) * d, d);
          const bool selected = feature_selected(f, token.selection);
          if (selected) sel += wj;
          if (selected && wj >= min_weight && wj > 0) {
            part.w.push_back(static_cast<float>(wj));
            for (int c = 0; c < 3; ++c) part.c.push_back(colors(j, c));
            if (feature) {
              part.x.insert(part.x.end(), f.begin(), f.end());
            } else {
              for (int c = 0; c < 3; ++c) part.x.push_back(colors(j, c));
            }
            ++kept;
          } else {
            for (int c = 0; c < 3; ++c) acc[c] += wj * colors(j, c);
          }
        }
        for (int c = 0; c < 3; ++c) part.base.push_back(static_cast<float>(acc[c] + trans * background[c]));
        part.counts.push_back(kept);
        part.selw.push_back(static_cast<float>(sel));
      }
    });
    for (const auto& part : parts) {
      cache.base.insert(cache.base.end(), part.base.begin(), part.base.end());
      cache.w.insert(cache.w.end(), part.w.begin(), part.w.end());
      cache.x.insert(cache.x.end(), part.x.begin(), part.x.end());
      cache.c.insert(cache.c.end(), part.c.begin(), part.c.end());
      selw_all.insert(selw_all.end(), part.selw.begin(), part.selw.end());
      for (uint32_t k : part.counts) cache.offset.push_back(cache.offset.back() + k);
    }
    for (size_t i = 0; i < pixels.size(); ++i) {
      const auto& px = pixels[i];
      for (int c = 0; c < 3; ++c) cache.target.push_back(view.rgb.at(px.x, px.y, c));
      const bool m = view.mask.empty() ? selw_all[cache.masked.size()] >= 0.5f : view.mask.at(px.x, px.y) > 0.5f;
      cache.masked.push_back(m);
    }
  }
  return cache;
}

// Photometric loss of the cached pixels `idx`; accumulates the edit MLP
// gradient when `grad` is non-null.
double cached_loss(const EditCache& cache, const Mlp<float>& mlp, std::span<const uint32_t> idx, Mlp<float>* grad) {
  size_t rows = 0;
  for (uint32_t p : idx) rows += cache.offset[p + 1] - cache.offset[p];
  RowMatrix<float> x(static_cast<Eigen::Index>(rows), cache.x_dim);
  size_t r = 0;
  for (uint32_t p : idx) {
    for (uint32_t s = cache.offset[p]; s < cache.offset[p + 1]; ++s, ++r) {
      std::copy_n(cache.x.data() + static_cast<size_t>(s) * cache.x_dim, cache.x_dim, x.data() + r * cache.x_dim);
    }
  }
  RowMatrix<float> res;
  MlpTape<float> tape;
  if (rows > 0) mlp_forward(mlp, x, &res, grad ? &tape : nullptr);
  RowMatrix<float> dr = RowMatrix<float>::Zero(static_cast<Eigen::Index>(rows), 3);
  const double inv = 1.0 / (3.0 * idx.size());
  double loss = 0;
  r = 0;
  for (uint32_t p : idx) {
    const size_t r0 = r;
    double out[3];
    for (int c = 0; c < 3; ++c) out[c] = cache.base[static_cast<size_t>(p) * 3 + c];
    for (uint32_t s = cache.offset[p]; s < cache.offset[p + 1]; ++s, ++r) {
      for (int c = 0; c < 3; ++c) {
        const float v = cache.c[static_cast<size_t>(s) * 3 + c] + res(r, c);
        out[c] += cache.w[s] * std::clamp(v, 0.0f, 1.0f);
      }
    }
    double g[3];
    for (int c = 0; c < 3; ++c) {
      const double e = out[c] - cache.target[static_cast<size_t>(p) * 3 + c];
      loss += e * e * inv;
      g[c] = 2.0 * e * inv;
    }
    if (!grad) continue;
    r = r0;
    for (uint32_t s = cache.offset[p]; s < cache.offset[p + 1]; ++s, ++r) {
      for (int c = 0; c < 3; ++c) {
        const float v = cache.c[static_cast<size_t>(s) * 3 + c] + res(r, c);
        dr(r, c) = (v >= 0.0f && v <= 1.0f) ? static_cast<float>(cache.w[s] * g[c]) : 0.0f;
      }
    }
  }
  if (grad && rows > 0) mlp_backward(mlp, tape, std::move(dr), grad, static_cast<RowMatrix<float>*>(nullptr));
  return loss;
}

double masked_loss(const EditCache& cache, const Mlp<float>& mlp) {
  std::vector<uint32_t> idx;
  for (size_t p = 0; p < cache.pixels(); ++p) {
    if (cache.masked[p]) idx.push_back(static_cast<uint32_t>(p));
  }
  if (idx.empty()) return 0.0;
  return cached_loss(cache, mlp, idx, nullptr);
}

}  // namespace

TrainResult run_edit_residual(const TriPlaneField<float>& field, EditToken* token, std::span<const TrainView> views,
                              const TrainConfig& cfg, std::span<const EditToken* const> prior, const TrainHooks& hooks,
                              double min_weight) {
  cfg.validate();
  check_views(views);
  token->validate(field.config.sem_dim);
  const auto t0 = Clock::now();
  EditCache cache = build_edit_cache(field, *token, views, prior, cfg.samples_per_ray, cfg.background, cfg.workers,
                                     min_weight);
  TrainResult result;
  result.masked_initial = masked_loss(cache, token->mlp);
  Mlp<float> grad = token->mlp;
  AdamState<float> adam;
  std::vector<std::span<float>> params;
  std::vector<std::span<const float>> grads;
  token->mlp.for_each_array([&](std::span<float> s) { params.push_back(s); });
  grad.for_each_array([&](std::span<float> s) { grads.emplace_back(s.data(), s.size()); });
  std::vector<double> lrs(params.size(), cfg.learning_rate);
  Rng rng(cfg.seed);
  std::vector<uint32_t> idx(cfg.rays_per_batch);
  for (int it = 1; it <= cfg.iterations; ++it) {
    for (auto& i : idx) i = static_cast<uint32_t>(rng.below(cache.pixels()));
    grad.set_zero();
    LossBreakdown loss;
    loss.photometric = cached_loss(cache, token->mlp, idx, &grad);
    loss.total = loss.photometric;
    if (!std::isfinite(loss.total) || !grad.all_finite()) {
      fail(ErrorCode::kNumerical, "edit training diverged at iteration " + std::to_string(it));
    }
    adam_step<float>(params, grads, lrs, cfg.beta1, cfg.beta2, cfg.eps, &adam);
    result.loss_trace.push_back(loss.total);
    result.iterations_run = it;
    emit(hooks, {it, cfg.iterations, loss, ms_since(t0)}, result);
    if (result.cancelled) break;
  }
  result.masked_final = masked_loss(cache, token->mlp);
  result.elapsed_ms = ms_since(t0);
  return result;
}

EditCacheCheck compare_edit_paths(const TriPlaneField<float>& field, const EditToken& token,
                                  std::span<const TrainView> views, int samples_per_ray, int pixels, uint64_t seed) {
  if (views.empty()) fail(ErrorCode::kUsage, "compare_edit_paths: no views");
  Rng rng(seed);
  const TrainView& view = views[0];
  std::vector<PixelIndex> px;
  for (int i = 0; i < pixels; ++i) {
    px.push_back({static_cast<int>(rng.below(view.rgb.width)), static_cast<int>(rng.below(view.rgb.height))});
  }
  EditCache cache = build_edit_cache(field, token, views, {}, samples_per_ray, {0, 0, 0}, 1, 0.0, px, 0);
  std::vector<uint32_t> idx(px.size());
  std::iota(idx.begin(), idx.end(), 0u);
  Mlp<float> g_cached = token.mlp;
  g_cached.set_zero();
  EditCacheCheck out;
  out.cached.photometric = cached_loss(cache, token.mlp, idx, &g_cached);
  out.cached.total = out.cached.photometric;

  RayBatch<float> batch;
  for (const auto& p : px) push_pixel(batch, view, p.x, p.y, 0, false, false, 0);
  EditTerm<float> edit{&token.mlp, token.kind, token.selection};
  LossInputs<float> in;
  in.batch = &batch;
  in.samples_per_ray = samples_per_ray;
  in.edit = &edit;
  in.weights = LossWeights{0, 0, 0, 0, 0};
  GradientSet<float> g = GradientSet<float>::zeros_like(field, &token.mlp, BlockSet::only(Block::kEdit));
  out.generic = compute_loss_and_gradients(field, in, &g);

  std::vector<float> a, b;
  g_cached.for_each_array([&](std::span<const float> s) { a.insert(a.end(), s.begin(), s.end()); });
  g.edit.for_each_array([&](std::span<const float> s) { b.insert(b.end(), s.begin(), s.end()); });
  for (size_t i = 0; i < a.size(); ++i) {
    out.max_grad_diff = std::max(out.max_grad_diff, static_cast<double>(std::abs(a[i] - b[i])));
    out.max_grad = std::max(out.max_grad, static_cast<double>(std::abs(b[i])));
  }
  return out;
}

#define TRIEDIT_INSTANTIATE(T)                                                                                  \
  template LossBreakdown compute_loss_and_gradients<T>(const TriPlaneField<T>&, const LossInputs<T>&,          \
                                                       GradientSet<T>*);                                       \
  template DensityProbes<T> make_density_probes<T>(const TriPlaneField<T>&, const SelectionParams*, int,       \
                                                   uint64_t);                                                  \
  template void adam_step<T>(std::span<const std::span<T>>, std::span<const std::span<const T>>,               \
                             std::span<const double>, double, double, double, AdamState<T>*);
TRIEDIT_INSTANTIATE(float)
TRIEDIT_INSTANTIATE(double)
#undef TRIEDIT_INSTANTIATE

}  // namespace triedit
