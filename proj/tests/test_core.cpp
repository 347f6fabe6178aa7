// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "triedit/camera.hpp"
#include "triedit/image.hpp"
#include "triedit/keyvalue.hpp"
#include "triedit/mlp.hpp"

using namespace triedit;
using namespace triedit::testing;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kUsage;
}

}  // namespace

TEST_CASE("rng is reproducible and stays in range") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const uint64_t x = a.next();
    CHECK(x == b.next());
    (void)c.next();
  }
  CHECK(Rng(42).next() != Rng(43).next());
  Rng r(5);
  std::set<uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const uint64_t k = r.below(7);
    CHECK(k < 7);
    seen.insert(k);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("fnv1a matches published test vectors") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("psnr of known mse") {
  CHECK(psnr_from_mse(1e-2) == doctest::Approx(20.0));
  CHECK(psnr_from_mse(1e-3) == doctest::Approx(30.0));
  CHECK(std::isinf(psnr_from_mse(0.0)));
}

TEST_CASE("aabb ray intersection") {
  Aabb box;
  double t0 = 0, t1 = 0;
  REQUIRE(box.intersect(Vec3(-3, 0, 0), Vec3(1, 0, 0), &t0, &t1));
  CHECK(t0 == doctest::Approx(2.0));
  CHECK(t1 == doctest::Approx(4.0));
  CHECK_FALSE(box.intersect(Vec3(-3, 2, 0), Vec3(1, 0, 0), &t0, &t1));
  CHECK(box.normalized(Vec3(1, -1, 0)).isApprox(Vec3(1, 0, 0.5)));
}

TEST_CASE("key value documents round trip and report bad fields") {
  const std::string text =
      "# comment\n"
      "scene = demo\n"
      "bounds_min = -1 -1 -1\n"
      "\n"
      "[frame]\n"
      "id = a\n"
      "fx = 12.5\n"
      "[frame]\n"
      "id = b\n";
  KeyValueDocument doc = parse_key_value(text, "test.txt");
  CHECK(doc.header.get_string("scene") == "demo");
  CHECK(doc.header.get_doubles("bounds_min", 3) == std::vector<double>{-1, -1, -1});
  auto frames = doc.sections_named("frame");
  REQUIRE(frames.size() == 2);
  CHECK(frames[0]->get_double("fx") == 12.5);
  CHECK(frames[1]->get_string("id") == "b");
  KeyValueDocument again = parse_key_value(format_key_value(doc), "again");
  CHECK(format_key_value(again) == format_key_value(doc));

  CHECK(code_of([&] { frames[0]->get_double("id"); }) == ErrorCode::kData);
  CHECK(code_of([&] { frames[1]->get_string("fx"); }) == ErrorCode::kData);
  CHECK(code_of([&] { doc.header.get_doubles("bounds_min", 2); }) == ErrorCode::kData);
  try {
    frames[0]->get_double("id");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("id") != std::string::npos);
  }
  CHECK(code_of([] { parse_key_value("no equals sign\n", "x"); }) == ErrorCode::kData);
}

TEST_CASE("format_number round trips doubles") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-7, 123456789.0, 1e300}) {
    CHECK(std::stod(format_number(v)) == v);
  }
}

TEST_CASE("png round trips are exact on the 8-bit grid") {
  Image img(5, 3, 3);
  Rng rng(1);
  for (auto& v : img.pixels) v = static_cast<float>(rng.below(256)) / 255.0f;
  Image back = decode_png8(encode_png8(img));
  REQUIRE(back.same_shape(img));
  CHECK(max_abs_diff(back, img) == 0.0);

  Image gray(4, 4, 1, 0.5f);
  Image g2 = decode_png8(encode_png8(gray));
  CHECK(g2.channels == 1);
  CHECK(g2.at(1, 1) == doctest::Approx(128.0 / 255.0));

  Image16 d{3, 2, {0, 1, 2, 300, 65534, 65535}};
  Image16 d2 = decode_png16(encode_png16(d));
  CHECK(d2.pixels == d.pixels);
  std::vector<uint8_t> junk{1, 2, 3};
  CHECK(code_of([&] { decode_png8(junk); }) == ErrorCode::kData);
}

TEST_CASE("quantization and image metrics") {
  CHECK(quantize8(-1.0f) == 0);
  CHECK(quantize8(2.0f) == 255);
  CHECK(quantize8(0.5f) == 128);
  Image a(2, 1, 1), b(2, 1, 1), m(2, 1, 1);
  a.pixels = {0.0f, 1.0f};
  b.pixels = {0.5f, 1.0f};
  m.pixels = {1.0f, 0.0f};
  CHECK(mse(a, b) == doctest::Approx(0.125));
  CHECK(masked_mse(a, b, m) == doctest::Approx(0.25));
  CHECK(max_abs_diff(a, b) == doctest::Approx(0.5));
}

TEST_CASE("rays pass through pixel centers") {
  Intrinsics k{10.0, 10.0, 2.0, 2.0, 4, 4};
  Camera cam;
  cam.intrinsics = k;
  Ray r = generate_ray(cam, 1, 1);  // pixel center (1.5, 1.5)
  // Camera looks down -z with +y up; rows grow downward.
  const Vec3 expected = Vec3(-0.05, 0.05, -1.0).normalized();
  CHECK(r.direction.isApprox(expected, 1e-12));
  CHECK(r.direction.norm() == doctest::Approx(1.0));
}

TEST_CASE("look_at builds a rigid pose facing the target") {
  Intrinsics k = Camera::from_fov(32, 32, 40.0);
  Camera cam = Camera::look_at(Vec3(0, 0, 3), Vec3::Zero(), Vec3(0, 1, 0), k, 1.0, 5.0);
  cam.validate();
  CHECK((cam.rotation().transpose() * cam.rotation()).isIdentity(1e-12));
  Ray center = generate_ray(cam, 16, 16);
  CHECK(center.direction.dot(Vec3(0, 0, -1)) > 0.999);
  Camera bad = cam;
  bad.intrinsics.fx = 0;
  CHECK(code_of([&] { bad.validate(); }) == ErrorCode::kData);
}

TEST_CASE("stratified ray samples cover the interval in order") {
  Ray ray;
  ray.direction = Vec3(0, 0, -1);
  RaySamples mid = sample_ray(ray, 1.0, 3.0, 4);
  REQUIRE(mid.t.size() == 4);
  CHECK(mid.t[0] == doctest::Approx(1.25));
  CHECK(mid.t[3] == doctest::Approx(2.75));
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    RaySamples s = sample_ray(ray, 1.0, 3.0, 8, &rng);
    double total = 0;
    for (int i = 0; i < 8; ++i) {
      CHECK(s.t[i] >= 1.0 + 0.25 * i);
      CHECK(s.t[i] <= 1.0 + 0.25 * (i + 1));
      CHECK(s.delta[i] > 0);
      total += s.delta[i];
    }
    // Spacings run from the first sample to `far`.
    CHECK(s.t[0] + total == doctest::Approx(3.0));
  }
}

TEST_CASE("mlp forward matches a hand evaluation") {
  Mlp<double> m = Mlp<double>::zeros({2, 2, 1}, {Activation::kRelu, Activation::kSigmoid});
  m.layers[0].weight << 1, -1, 0.5, 2;
  m.layers[0].bias << 0.1, -3;
  m.layers[1].weight << 2, 4;
  m.layers[1].bias << -0.5;
  // hidden = relu([1*1 - 1*2 + 0.1, 0.5 + 4 - 3]) = [0, 1.5]; out = sigmoid(0 + 6 - 0.5)
  std::vector<double> x{1, 2}, y(1);
  m.forward(x, y);
  CHECK(y[0] == doctest::Approx(1.0 / (1.0 + std::exp(-5.5))));
  RowMatrix<double> xb(1, 2), yb;
  xb << 1, 2;
  mlp_forward<double>(m, xb, &yb, nullptr);
  CHECK(yb(0, 0) == y[0]);
}

TEST_CASE("mlp rows do not depend on their batch position") {
  Rng rng(2);
  Mlp<float> m = Mlp<float>::zeros({7, 13, 5}, {Activation::kLeakyRelu, Activation::kIdentity});
  m.init_kaiming(rng);
  RowMatrix<float> x(9, 7);
  for (auto& v : x.reshaped()) v = static_cast<float>(rng.normal());
  RowMatrix<float> y_all, y_one;
  mlp_forward<float>(m, x, &y_all, nullptr);
  for (int i = 0; i < 9; ++i) {
    RowMatrix<float> row = x.row(i);
    mlp_forward<float>(m, row, &y_one, nullptr);
    for (int c = 0; c < 5; ++c) CHECK(y_one(0, c) == y_all(i, c));
  }
}

TEST_CASE("mlp backward matches central differences") {
  Rng rng(11);
  for (Activation act : {Activation::kRelu, Activation::kLeakyRelu, Activation::kSigmoid, Activation::kIdentity}) {
    CAPTURE(activation_name(act));
    Mlp<double> m = Mlp<double>::zeros({3, 5, 2}, {act, Activation::kSigmoid});
    m.init_kaiming(rng);
    for (auto& l : m.layers) {
      for (auto& v : l.bias.reshaped()) v = rng.uniform(-0.3, 0.3);
    }
    RowMatrix<double> x(4, 3);
    for (auto& v : x.reshaped()) v = rng.normal();
    RowMatrix<double> dy(4, 2);
    for (auto& v : dy.reshaped()) v = rng.normal();
    auto objective = [&](const Mlp<double>& net, const RowMatrix<double>& in) {
      RowMatrix<double> y;
      mlp_forward<double>(net, in, &y, nullptr);
      return (y.array() * dy.array()).sum();
    };
    MlpTape<double> tape;
    RowMatrix<double> y;
    mlp_forward<double>(m, x, &y, &tape);
    Mlp<double> grad = Mlp<double>::zeros({3, 5, 2}, {act, Activation::kSigmoid});
    RowMatrix<double> dx;
    mlp_backward<double>(m, tape, dy, &grad, &dx);
    const double h = 1e-6;
    for (size_t l = 0; l < m.layers.size(); ++l) {
      for (Eigen::Index i = 0; i < m.layers[l].weight.size(); ++i) {
        Mlp<double> up = m, down = m;
        up.layers[l].weight.data()[i] += h;
        down.layers[l].weight.data()[i] -= h;
        const double fd = (objective(up, x) - objective(down, x)) / (2 * h);
        CHECK(grad.layers[l].weight.data()[i] == doctest::Approx(fd).epsilon(1e-6));
      }
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      RowMatrix<double> up = x, down = x;
      up.data()[i] += h;
      down.data()[i] -= h;
      const double fd = (objective(m, up) - objective(m, down)) / (2 * h);
      CHECK(dx.data()[i] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("kaiming init respects the fan-in bound") {
  Rng rng(4);
  Mlp<double> m = Mlp<double>::zeros({50, 20}, {Activation::kRelu});
  m.init_kaiming(rng);
  const double bound = std::sqrt(6.0 / 50.0);
  CHECK(m.layers[0].weight.cwiseAbs().maxCoeff() <= bound);
  CHECK(m.layers[0].weight.cwiseAbs().maxCoeff() > 0.8 * bound);
  CHECK(m.layers[0].bias.isZero());
}
