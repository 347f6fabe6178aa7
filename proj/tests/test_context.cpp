// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "triedit/context.hpp"
#include "triedit/scene_io.hpp"

using namespace triedit;
using namespace triedit::testing;

namespace {

template <typename Fn>
ErrorCode error_code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kUsage;
}

struct SessionFixture {
  TriPlaneField<float> field = dense_test_field(31);
  std::vector<Camera> cameras;
  SelectionParams selection;

  SessionFixture() {
    SyntheticScene scene(tiny_spec(8, 10, 0));
    cameras = scene.cameras();
    selection.f_bar.assign(field.config.sem_dim, 0.0f);
    selection.thr = 1e30f;
  }

  ContextSession session(uint64_t seed = 5) const {
    ContextSettings s;
    s.epochs = 3;
    s.seed = seed;
    s.samples_per_ray = 8;
    return ContextSession(cameras, selection, s, 77);
  }
};

// Scripted editor step: hue-rotates the mosaic inside its mask.
ContextGrid edit_and_import(ContextSession* session, const TriPlaneField<float>& field) {
  ContextGrid grid = session->compose(field);
  Mosaic m = mosaic_of(grid);
  session->import(hue_rotate(m.rgb, m.mask, 90.0), grid.provenance, field.version);
  return grid;
}

}  // namespace

TEST_CASE("mosaic tiling round trip and layout") {
  std::vector<Image> tiles;
  for (int k = 0; k < 4; ++k) tiles.push_back(Image(3, 2, 1, static_cast<float>(k)));
  Image m = tile_mosaic(tiles);
  CHECK(m.width == 6);
  CHECK(m.height == 4);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) CHECK(m.at(x, y) == static_cast<float>((2 * y / 4) * 2 + (2 * x / 6)));
  }
  auto back = slice_mosaic(m, 3, 2);
  for (int k = 0; k < 4; ++k) CHECK(back[k].pixels == tiles[k].pixels);
  CHECK(error_code_of([&] { slice_mosaic(m, 4, 2); }) == ErrorCode::kData);
  tiles[2] = Image(2, 2, 1);
  CHECK_THROWS_AS(tile_mosaic(tiles), Error);
}

TEST_CASE("hue rotation oracle") {
  Image rgb(2, 1, 3);
  rgb.pixels = {0.9f, 0.5f, 0.1f, 0.2f, 0.4f, 0.6f};
  Image mask(2, 1, 1);
  mask.pixels = {1.0f, 0.0f};
  CHECK(hue_rotate(rgb, mask, 0.0).pixels == rgb.pixels);
  // 120 degrees about the gray axis cycles the channels.
  Image r = hue_rotate(rgb, mask, 120.0);
  CHECK(r.at(0, 0, 0) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(r.at(0, 0, 1) == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(r.at(0, 0, 2) == doctest::Approx(0.5).epsilon(1e-6));
  for (int c = 0; c < 3; ++c) CHECK(r.at(1, 0, c) == rgb.at(1, 0, c));
  // Gray is fixed at any angle and 360 degrees is the identity.
  Image gray(1, 1, 3, 0.3f), one(1, 1, 1, 1.0f);
  for (float v : hue_rotate(gray, one, 47.0).pixels) CHECK(v == doctest::Approx(0.3).epsilon(1e-6));
  Image full = hue_rotate(rgb, mask, 360.0);
  for (size_t i = 0; i < 3; ++i) CHECK(full.pixels[i] == doctest::Approx(rgb.pixels[i]).epsilon(1e-6));
}

TEST_CASE("camera picks: distinct, seeded and farthest first") {
  SessionFixture fx;
  std::vector<Vec3> pos;
  for (const auto& c : fx.cameras) pos.push_back(c.position());
  auto a = pick_context_cameras(pos, 0, 3, {});
  auto b = pick_context_cameras(pos, 0, 3, {});
  CHECK(a == b);
  CHECK(std::set<int>(a.begin(), a.end()).size() == 4u);
  // The second pick is the camera farthest from the first.
  double best = -1;
  int far = -1;
  for (int i = 0; i < static_cast<int>(pos.size()); ++i) {
    const double d = (pos[i] - pos[a[0]]).norm();
    if (d > best) {
      best = d;
      far = i;
    }
  }
  CHECK(a[1] == far);
  std::vector<int> hist{a[0], a[1], a[2], a[3]};
  auto next = pick_context_cameras(pos, 1, 3, hist);
  CHECK(next[0] == a[2]);
  CHECK(next[1] == a[3]);
  for (int k = 2; k < 4; ++k) CHECK(std::find(hist.begin(), hist.end(), next[k]) == hist.end());
  CHECK(next[2] != next[3]);
  CHECK(error_code_of([&] { pick_context_cameras(std::span<const Vec3>(pos).first(3), 0, 1, {}); }) ==
        ErrorCode::kState);
}

TEST_CASE("three epochs edit eight distinct views") {
  SessionFixture fx;
  ContextSession s = fx.session();
  std::vector<int> editable_counts;
  ContextGrid prev;
  for (int e = 0; e < 3; ++e) {
    ContextGrid grid = s.compose(fx.field);
    CHECK(grid.epoch == e);
    int editable = 0;
    for (int k = 0; k < 4; ++k) editable += grid.cells[k].role == CellRole::kEditableMasked;
    editable_counts.push_back(editable);
    if (e > 0) {
      // Guidance cells carry the stored edited images bitwise and no mask.
      const auto& ed = s.edited();
      CHECK(grid.cells[0].camera == ed[ed.size() - 2].camera);
      CHECK(grid.cells[1].camera == ed[ed.size() - 1].camera);
      CHECK(grid.cells[0].rgb.pixels == ed[ed.size() - 2].rgb.pixels);
      CHECK(grid.cells[1].rgb.pixels == ed[ed.size() - 1].rgb.pixels);
      for (float v : grid.cells[0].mask.pixels) CHECK(v == 0.0f);
    }
    Mosaic m = mosaic_of(grid);
    s.import(hue_rotate(m.rgb, m.mask, 90.0), grid.provenance, fx.field.version);
  }
  CHECK(editable_counts == std::vector<int>{4, 2, 2});
  CHECK(s.done());
  std::set<int> cams;
  for (const auto& e : s.edited()) cams.insert(e.camera);
  CHECK(s.edited().size() == 8u);
  CHECK(cams.size() == 8u);
  CHECK(error_code_of([&] { s.compose(fx.field); }) == ErrorCode::kState);
  CHECK(error_code_of([&] { s.import(Image(16, 16, 3), s.provenance(fx.field.version), fx.field.version); }) ==
        ErrorCode::kState);
  CHECK(edited_train_views(s).size() == 8u);
}

TEST_CASE("stale provenance is rejected without advancing") {
  SessionFixture fx;
  ContextSession s = fx.session();
  ContextGrid grid = s.compose(fx.field);
  Mosaic m = mosaic_of(grid);
  CHECK(error_code_of([&] { s.import(m.rgb, grid.provenance, fx.field.version + 1); }) == ErrorCode::kStale);
  CHECK(error_code_of([&] { s.import(m.rgb, "ctx-bogus", fx.field.version); }) == ErrorCode::kStale);
  CHECK(s.epoch() == 0);
  ContextSession other(fx.cameras, fx.selection, s.settings(), 78);
  CHECK(other.provenance(fx.field.version) != grid.provenance);
  CHECK(error_code_of([&] { s.import(Image(5, 5, 3), grid.provenance, fx.field.version); }) == ErrorCode::kData);
  s.import(m.rgb, grid.provenance, fx.field.version);
  CHECK(s.epoch() == 1);
  // The epoch 0 mosaic is stale once the session has moved on.
  CHECK(error_code_of([&] { s.import(m.rgb, grid.provenance, fx.field.version); }) == ErrorCode::kStale);
}

TEST_CASE("session save and load round trip") {
  SessionFixture fx;
  ContextSession s = fx.session();
  edit_and_import(&s, fx.field);
  TempDir dir("session");
  s.save(dir.path().string());
  ContextSession back = ContextSession::load(dir.path().string(), fx.cameras);
  CHECK(back.epoch() == 1);
  CHECK(back.nonce() == s.nonce());
  CHECK(back.selection() == s.selection());
  CHECK(back.history() == s.history());
  REQUIRE(back.edited().size() == s.edited().size());
  for (size_t i = 0; i < s.edited().size(); ++i) {
    CHECK(back.edited()[i].rgb.pixels == quantize_image8(s.edited()[i].rgb).pixels);
  }
  CHECK(back.provenance(fx.field.version) == s.provenance(fx.field.version));
  // Both continue identically.
  CHECK(mosaic_of(back.compose(fx.field)).mask.pixels == mosaic_of(s.compose(fx.field)).mask.pixels);
}

TEST_CASE("context export writes the mosaic and sidecar") {
  SessionFixture fx;
  ContextSession s = fx.session();
  ContextGrid grid = s.compose(fx.field);
  TempDir dir("export");
  export_context(grid, fx.cameras, dir.path().string());
  Image rgb = read_png8(dir.file("mosaic_rgb.png"));
  CHECK(rgb.width == 16);
  CHECK(rgb.pixels == quantize_image8(mosaic_of(grid).rgb).pixels);
  Image16 depth = read_png16(dir.file("mosaic_depth.png"));
  CHECK(depth.width == 16);
  ContextSidecar side = read_context_sidecar(dir.file("context.txt"));
  CHECK(side.provenance == grid.provenance);
  CHECK(side.cell_width == 8);
  for (int k = 0; k < 4; ++k) {
    CHECK(side.cameras[k] == grid.cells[k].camera);
    CHECK(side.roles[k] == CellRole::kEditableMasked);
  }
}

TEST_CASE("iteration budget formula") {
  // sum over j of ceil((4 + 2j) * P / B)
  CHECK(protocol_iteration_budget(1, 100, 64) == 7);
  CHECK(protocol_iteration_budget(3, 100, 64) == 7 + 10 + 13);
  CHECK(protocol_iteration_budget(2, 64, 64) == 4 + 6);
  CHECK(error_code_of([] { protocol_iteration_budget(0, 10, 10); }) == ErrorCode::kUsage);
}
