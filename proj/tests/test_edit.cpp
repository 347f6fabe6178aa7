// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "triedit/composite.hpp"
#include "triedit/edit_token.hpp"
#include "triedit/renderer.hpp"

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

SelectionParams everything(int dim) {
  SelectionParams s;
  s.f_bar.assign(dim, 0.0f);
  s.thr = 1e30f;
  return s;
}

// Token whose residual is the constant `offset`.
EditToken constant_token(TokenKind kind, int dim, Rgb offset, const std::string& id) {
  EditToken t = make_token(kind, dim, everything(dim), 1);
  for (auto& l : t.mlp.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  for (int c = 0; c < 3; ++c) t.mlp.layers.back().bias[c] = offset[c];
  t.id = id;
  return t;
}

EditToken random_token(TokenKind kind, int dim, uint64_t seed, double scale) {
  EditToken t = make_token(kind, dim, everything(dim), seed);
  Rng rng(seed + 100);
  for (auto& v : t.mlp.layers.back().weight.reshaped()) v = static_cast<float>(scale * rng.uniform(-1, 1));
  return t;
}

}  // namespace

TEST_CASE("token serialization round trip and size limits") {
  for (TokenKind kind : {TokenKind::kFeatureResidual, TokenKind::kColorResidual}) {
    EditToken t = random_token(kind, 16, 5, 0.1);
    t.label = "make it green";
    t.selection.thr = 0.37f;
    t.selection.field_version = 9;
    t.enabled = false;
    auto bytes = serialize_token(t);
    CHECK(bytes.size() <= t.byte_limit());
    EditToken back = deserialize_token(bytes);
    CHECK(back.id == t.id);
    CHECK(back.kind == t.kind);
    CHECK(back.label == t.label);
    CHECK(back.selection == t.selection);
    CHECK(back.enabled == t.enabled);
    CHECK(back.created_at == t.created_at);
    CHECK(serialize_token(back) == bytes);
    back.validate(16);
    CHECK(error_code_of([&] { back.validate(8); }) == ErrorCode::kData);
    auto cut = bytes;
    cut.pop_back();
    CHECK(error_code_of([&] { deserialize_token(cut); }) == ErrorCode::kData);
  }
  EditToken big = make_token(TokenKind::kColorResidual, 8, everything(8), 1);
  big.mlp = make_edit_mlp<float>(3, 200);
  CHECK(error_code_of([&] { serialize_token(big); }) == ErrorCode::kData);
  CHECK(parse_token_kind("feature") == TokenKind::kFeatureResidual);
  CHECK(parse_token_kind("color") == TokenKind::kColorResidual);
  CHECK(error_code_of([] { parse_token_kind("hue"); }) == ErrorCode::kUsage);
}

TEST_CASE("fresh tokens are the identity edit") {
  EditToken t = make_token(TokenKind::kFeatureResidual, 8, everything(8), 3);
  std::vector<float> base{0.3f, 0.6f, 0.9f}, f(8, 0.25f);
  std::vector<uint8_t> bits{1};
  const EditToken* ptr = &t;
  auto out = apply_stack<float>(base, f, bits, std::span<const EditToken* const>(&ptr, 1));
  for (int c = 0; c < 3; ++c) CHECK(out[c] == base[c]);
}

TEST_CASE("constant red residual hand case") {
  EditToken t = constant_token(TokenKind::kColorResidual, 4, {0.2f, 0.0f, 0.0f}, "red");
  const EditToken* ptr = &t;
  std::span<const EditToken* const> toks(&ptr, 1);
  std::vector<float> f(4, 0.0f);
  std::vector<uint8_t> on{1}, off{0};
  std::vector<float> base{0.5f, 0.5f, 0.5f};
  auto out = apply_stack<float>(base, f, on, toks);
  CHECK(out[0] == doctest::Approx(0.7f));
  CHECK(out[1] == 0.5f);
  CHECK(out[2] == 0.5f);
  std::vector<float> bright{0.9f, 0.1f, 0.0f};
  out = apply_stack<float>(bright, f, on, toks);
  CHECK(out[0] == 1.0f);
  out = apply_stack<float>(bright, f, off, toks);
  CHECK(out[0] == 0.9f);
  std::vector<uint8_t> two{1, 1};
  CHECK(error_code_of([&] { apply_stack<float>(base, f, two, toks); }) == ErrorCode::kUsage);
}

TEST_CASE("color tokens chain on the already edited color") {
  EditToken a = random_token(TokenKind::kColorResidual, 4, 1, 0.3);
  EditToken b = random_token(TokenKind::kColorResidual, 4, 2, 0.3);
  std::vector<const EditToken*> toks{&a, &b};
  std::vector<uint8_t> bits{1, 1};
  std::vector<double> f(4, 0.0);
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> base{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
    std::array<double, 3> ra{}, rb{};
    const Mlp<double> ma = a.mlp.cast<double>(), mb = b.mlp.cast<double>();
    ma.forward(base, ra);
    std::vector<double> mid{base[0] + ra[0], base[1] + ra[1], base[2] + ra[2]};
    mb.forward(mid, rb);
    auto out = apply_stack<double>(base, f, bits, toks);
    for (int c = 0; c < 3; ++c) CHECK(out[c] == doctest::Approx(std::clamp(mid[c] + rb[c], 0.0, 1.0)).epsilon(1e-12));
  }
}

TEST_CASE("feature tokens commute up to rounding") {
  const int dim = 8;
  EditToken a = random_token(TokenKind::kFeatureResidual, dim, 4, 0.05);
  EditToken b = random_token(TokenKind::kFeatureResidual, dim, 5, 0.05);
  std::vector<const EditToken*> ab{&a, &b}, ba{&b, &a};
  std::vector<uint8_t> bits{1, 1};
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    std::vector<float> base{0.4f, 0.5f, 0.6f}, f(dim);
    for (auto& v : f) v = static_cast<float>(rng.uniform(-1, 1));
    auto x = apply_stack<float>(base, f, bits, ab);
    auto y = apply_stack<float>(base, f, bits, ba);
    for (int c = 0; c < 3; ++c) CHECK(std::abs(x[c] - y[c]) <= 1e-6f);
  }
}

TEST_CASE("batched stack matches per sample application") {
  const int dim = 8;
  EditToken a = random_token(TokenKind::kFeatureResidual, dim, 7, 0.1);
  EditToken b = random_token(TokenKind::kColorResidual, dim, 8, 0.1);
  Rng rng(9);
  a.selection.f_bar.assign(dim, 0.0f);
  a.selection.thr = 2.0f;  // selects roughly half the samples below
  std::vector<const EditToken*> toks{&a, &b};
  const int n = 64;
  RowMatrix<double> f(n, dim), col(n, 3);
  for (auto& v : f.reshaped()) v = rng.uniform(-0.8, 0.8);
  for (auto& v : col.reshaped()) v = rng.uniform(0, 1);
  RowMatrix<double> edited = col;
  apply_stack_batch<double>(f, &edited, toks);
  int selected = 0;
  for (int i = 0; i < n; ++i) {
    std::span<const double> fi(f.data() + i * dim, dim);
    std::vector<uint8_t> bits{static_cast<uint8_t>(feature_selected(fi, a.selection)),
                              static_cast<uint8_t>(feature_selected(fi, b.selection))};
    selected += bits[0];
    std::vector<double> ci{col(i, 0), col(i, 1), col(i, 2)};
    auto want = apply_stack<double>(ci, fi, bits, toks);
    for (int c = 0; c < 3; ++c) CHECK(edited(i, c) == doctest::Approx(want[c]).epsilon(1e-12));
  }
  CHECK(selected > 0);
  CHECK(selected < n);
}

TEST_CASE("compositing with an empty stack equals plain compositing") {
  Rng rng(1);
  const int n = 12, dim = 4;
  std::vector<double> s(n), d(n), col(3 * n), f(dim * n);
  for (int i = 0; i < n; ++i) {
    s[i] = rng.uniform(0, 5);
    d[i] = rng.uniform(0.01, 0.2);
  }
  for (auto& v : col) v = rng.uniform();
  for (auto& v : f) v = rng.uniform();
  auto plain = composite<double>(s, d, col, 3);
  auto edited = composite_with_edit<double>(s, d, col, f, dim, {});
  for (int c = 0; c < 3; ++c) CHECK(edited[c] == plain.value[c]);
}

TEST_CASE("stack operations") {
  EditStack stack;
  stack.push(constant_token(TokenKind::kColorResidual, 4, {0.1f, 0, 0}, "a"));
  stack.push(constant_token(TokenKind::kColorResidual, 4, {0, 0.1f, 0}, "b"));
  stack.push(constant_token(TokenKind::kColorResidual, 4, {0, 0, 0.1f}, "c"));
  CHECK(error_code_of([&] { stack.push(constant_token(TokenKind::kColorResidual, 4, {}, "a")); }) ==
        ErrorCode::kConflict);
  stack.toggle("b");
  CHECK(stack.enabled().size() == 2u);
  stack.toggle("b");
  CHECK(stack.enabled().size() == 3u);
  stack.set_enabled("c", false);
  CHECK_FALSE(stack.find("c").enabled);
  stack.reorder({"c", "a", "b"});
  CHECK(stack.tokens()[0].id == "c");
  CHECK(error_code_of([&] { stack.reorder({"a", "b"}); }) == ErrorCode::kUsage);
  CHECK(error_code_of([&] { stack.reorder({"a", "a", "b"}); }) == ErrorCode::kUsage);
  CHECK(error_code_of([&] { stack.toggle("zz"); }) == ErrorCode::kNotFound);
  CHECK(error_code_of([&] { stack.remove("zz"); }) == ErrorCode::kNotFound);
  stack.remove("a");
  CHECK(stack.size() == 2u);

  auto bytes = serialize_stack(stack);
  EditStack back = deserialize_stack(bytes);
  CHECK(serialize_stack(back) == bytes);
  CHECK(back.tokens()[0].id == "c");
  CHECK_FALSE(back.tokens()[0].enabled);

  TempDir dir("stack");
  save_stack(dir.file("s.pnst"), stack);
  save_token(dir.file("t.pnet"), stack.tokens()[1]);
  CHECK(load_layers(dir.file("s.pnst")).size() == 2u);
  CHECK(load_layers(dir.file("t.pnet")).size() == 1u);
  CHECK(load_token(dir.file("t.pnet")).id == "b");
}

TEST_CASE("toggling layers in rendering") {
  FieldConfig c = tiny_field_config();
  TriPlaneField<double> fd = TriPlaneField<float>::create(c, Aabb{}, 2).cast<double>();
  Rng rng(2);
  randomize(&fd, rng);
  fd.geom.layers.back().bias[0] = 2.0;
  TriPlaneField<float> field = fd.cast<float>();
  Camera cam = Camera::look_at(Vec3(2.2, 1.4, 2.0), Vec3::Zero(), Vec3(0, 1, 0), Camera::from_fov(12, 12, 50), 0.5,
                               6.0);
  RenderOptions opt;
  opt.samples_per_ray = 16;
  const auto base = render_view(cam, field, opt).rgb.pixels;

  EditStack stack;
  EditToken a = random_token(TokenKind::kFeatureResidual, c.sem_dim, 11, 0.2);
  a.id = "a";
  EditToken b = random_token(TokenKind::kColorResidual, c.sem_dim, 12, 0.2);
  b.id = "b";
  stack.push(a);
  stack.push(b);
  const auto edited = render_view(cam, field, with_stack(opt, stack)).rgb.pixels;
  CHECK(edited != base);

  stack.toggle("a");
  stack.toggle("a");
  CHECK(render_view(cam, field, with_stack(opt, stack)).rgb.pixels == edited);

  stack.set_enabled("a", false);
  stack.set_enabled("b", false);
  CHECK(render_view(cam, field, with_stack(opt, stack)).rgb.pixels == base);

  // Removing an enabled layer equals disabling it.
  stack.set_enabled("b", true);
  const auto only_b = render_view(cam, field, with_stack(opt, stack)).rgb.pixels;
  EditStack removed = stack;
  removed.remove("a");
  CHECK(render_view(cam, field, with_stack(opt, removed)).rgb.pixels == only_b);
}
