// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/renderer.hpp"

#include <cmath>

#include "triedit/evaluator.hpp"
#include "triedit/parallel.hpp"

namespace triedit {
namespace {

constexpr int kRaysPerChunk = 64;

struct ChunkScratch {
  FieldEvaluator<float> evaluator;
  std::vector<Vec3> points;
  std::vector<int> slot;  // per ray sample: row in the evaluator batch, or -1 when culled
  std::vector<double> t, delta;
};

void render_chunk(std::span<const Ray> rays, int first, const TriPlaneField<float>& field,
                  const RenderOptions& opt, ChunkScratch& s, RenderBuffers& out) {
  const int n = opt.samples_per_ray;
  const int nr = static_cast<int>(rays.size());
  s.points.clear();
  s.slot.assign(static_cast<size_t>(nr) * n, -1);
  s.t.resize(static_cast<size_t>(nr) * n);
  s.delta.resize(static_cast<size_t>(nr) * n);
  for (int r = 0; r < nr; ++r) {
    RaySamples rs = sample_ray(rays[r], rays[r].near, rays[r].far, n);
    for (int i = 0; i < n; ++i) {
      const size_t k = static_cast<size_t>(r) * n + i;
      s.t[k] = rs.t[i];
      s.delta[k] = rs.delta[i];
      if (field.bounds.contains(rs.points[i])) {
        s.slot[k] = static_cast<int>(s.points.size());
        s.points.push_back(rs.points[i]);
      }
    }
  }
  s.evaluator.forward(field, s.points, false);
  const int m = static_cast<int>(s.points.size());
  const int d = field.config.sem_dim;

  const bool need_pred = opt.deletion != DeletionMode::kOff || opt.selection_weight;
  std::vector<uint8_t> pred;
  if (need_pred) {
    if (!opt.selection && !opt.baked) fail(ErrorCode::kUsage, "render: deletion/selection requires a selection");
    pred.resize(m);
    for (int j = 0; j < m; ++j) {
      if (opt.baked) {
        pred[j] = opt.baked->lookup(s.points[j]);
      } else {
        std::span<const float> f(s.evaluator.f_sem().data() + static_cast<size_t>(j) * d, d);
        pred[j] = feature_selected(f, *opt.selection);
      }
    }
  }

  const RowMatrix<float>* colors = &s.evaluator.color();
  RowMatrix<float> edited;
  if (!opt.tokens.empty() && m > 0) {
    edited = s.evaluator.color();
    apply_stack_batch(s.evaluator.f_sem(), &edited, std::span<const EditToken* const>(opt.tokens));
    colors = &edited;
  }

  for (int r = 0; r < nr; ++r) {
    const int ray = first + r;
    double trans = 1.0;
    double rgb[3] = {0, 0, 0};
    double depth = 0, alpha = 0, selw = 0;
    std::vector<double> feat(opt.features ? d : 0, 0.0);
    for (int i = 0; i < n; ++i) {
      const size_t k = static_cast<size_t>(r) * n + i;
      const int j = s.slot[k];
      if (j < 0) continue;
      double sigma = s.evaluator.sigma()[j];
      if (opt.deletion == DeletionMode::kSelected && pred[j]) sigma = 0;
      if (opt.deletion == DeletionMode::kUnselected && !pred[j]) sigma = 0;
      if (sigma <= 0) continue;
      const double keep = std::exp(-sigma * s.delta[k]);
      const double w = trans * (1.0 - keep);
      trans *= keep;
      for (int c = 0; c < 3; ++c) rgb[c] += w * (*colors)(j, c);
      if (opt.features) {
        const float* f = s.evaluator.f_sem().data() + static_cast<size_t>(j) * d;
        for (int c = 0; c < d; ++c) feat[c] += w * f[c];
      }
      depth += w * s.t[k];
      alpha += w;
      if (opt.selection_weight && pred[j]) selw += w;
    }
    for (int c = 0; c < 3; ++c) out.rgb[static_cast<size_t>(ray) * 3 + c] = static_cast<float>(rgb[c] + trans * opt.background[c]);
    if (opt.features) {
      for (int c = 0; c < d; ++c) out.features[static_cast<size_t>(ray) * d + c] = static_cast<float>(feat[c]);
    }
    out.depth[ray] = static_cast<float>(depth);
    out.alpha[ray] = static_cast<float>(alpha);
    if (opt.selection_weight) out.selected[ray] = static_cast<float>(selw);
  }
}

}  // namespace

RenderBuffers render_rays(std::span<const Ray> rays, const TriPlaneField<float>& field, const RenderOptions& opt) {
  if (opt.samples_per_ray < 1) fail(ErrorCode::kUsage, "render: samples_per_ray must be >= 1");
  RenderBuffers out;
  out.count = static_cast<int>(rays.size());
  out.sem_dim = field.config.sem_dim;
  out.rgb.resize(rays.size() * 3);
  if (opt.features) out.features.resize(rays.size() * out.sem_dim);
  out.depth.resize(rays.size());
  out.alpha.resize(rays.size());
  if (opt.selection_weight) out.selected.resize(rays.size());
  const int chunks = (out.count + kRaysPerChunk - 1) / kRaysPerChunk;
  const int workers = std::max(1, std::min(resolve_workers(opt.workers), chunks));
  std::vector<ChunkScratch> scratch(workers);
  parallel_for(workers, chunks, [&](int chunk, int worker) {
    const int first = chunk * kRaysPerChunk;
    const int count = std::min(kRaysPerChunk, out.count - first);
    render_chunk(rays.subspan(first, count), first, field, opt, scratch[worker], out);
  });
  return out;
}

RenderBuffers render_pixels(const Camera& camera, std::span<const PixelIndex> pixels,
                            const TriPlaneField<float>& field, const RenderOptions& options) {
  std::vector<Ray> rays = generate_rays(camera, pixels);
  return render_rays(rays, field, options);
}

RenderOutput render_view(const Camera& camera, const TriPlaneField<float>& field, const RenderOptions& options) {
  camera.validate();
  const int w = camera.width();
  const int h = camera.height();
  std::vector<PixelIndex> pixels;
  pixels.reserve(static_cast<size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) pixels.push_back({x, y});
  }
  RenderBuffers b = render_pixels(camera, pixels, field, options);
  RenderOutput out;
  out.rgb = Image(w, h, 3);
  out.rgb.pixels = std::move(b.rgb);
  if (options.features) {
    out.features = Image(w, h, b.sem_dim);
    out.features.pixels = std::move(b.features);
  }
  out.depth = Image(w, h, 1);
  out.depth.pixels = std::move(b.depth);
  out.alpha = Image(w, h, 1);
  out.alpha.pixels = std::move(b.alpha);
  if (options.selection_weight) {
    out.selected = Image(w, h, 1);
    out.selected.pixels = std::move(b.selected);
  }
  return out;
}

RenderOptions with_stack(RenderOptions options, const EditStack& stack) {
  options.tokens = stack.enabled();
  return options;
}

}  // namespace triedit
