// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include <thread>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"
#include "triedit/context.hpp"
#include "triedit/image.hpp"
#include "triedit/renderer.hpp"
#include "triedit/scene_io.hpp"
#include "triedit/service.hpp"

#include "httplib.h"

using namespace triedit;
using namespace triedit::testing;
using json = nlohmann::json;

namespace {

std::string b64_decode(const std::string& in) {
  static const std::string kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  int bits = 0, acc = 0;
  for (char c : in) {
    if (c == '=') break;
    const auto pos = kAlphabet.find(c);
    REQUIRE(pos != std::string::npos);
    acc = (acc << 6) | static_cast<int>(pos);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xff));
    }
  }
  return out;
}

std::string b64_encode(const std::vector<uint8_t>& in) {
  static const char* kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const int v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    for (int s = 18; s >= 0; s -= 6) out.push_back(kAlphabet[(v >> s) & 63]);
  }
  if (i + 1 == in.size()) {
    const int v = in[i] << 16;
    out += {kAlphabet[(v >> 18) & 63], kAlphabet[(v >> 12) & 63], '=', '='};
  } else if (i + 2 == in.size()) {
    const int v = (in[i] << 16) | (in[i + 1] << 8);
    out += {kAlphabet[(v >> 18) & 63], kAlphabet[(v >> 12) & 63], kAlphabet[(v >> 6) & 63], '='};
  }
  return out;
}

Image png_field(const json& j, const std::string& key) {
  const std::string bytes = b64_decode(j.at(key).get<std::string>());
  return decode_png8(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size()));
}

struct ServiceFixture {
  TempDir dir{"service"};
  std::string manifest;
  std::string checkpoint;
  TriPlaneField<float> field = dense_test_field(41);

  ServiceFixture() {
    SyntheticScene scene(tiny_spec(12, 6, 1));
    scene.write_dataset(dir.path().string());
    manifest = dir.file("manifest.txt");
    checkpoint = dir.file("ck.pnck");
    save_checkpoint(checkpoint, field);
  }

  ServiceOptions options() const {
    ServiceOptions o;
    o.manifest = manifest;
    o.checkpoint = checkpoint;
    o.samples_per_ray = 16;
    o.workers = 1;
    o.seed = 3;
    o.nonce = 99;
    o.distance_probes = 2048;
    o.publish_every = 0;
    return o;
  }
};

struct Reply {
  int status;
  json body;
  HttpResponse raw;
};

Reply call(EditService& svc, const std::string& method, const std::string& path, const json& body = nullptr,
           std::map<std::string, std::string> headers = {}) {
  HttpRequest r;
  r.method = method;
  r.path = path;
  if (!body.is_null()) r.body = body.dump();
  r.headers = std::move(headers);
  HttpResponse resp = svc.handle(r);
  json j;
  if (resp.content_type == "application/json" && !resp.body.empty()) j = json::parse(resp.body);
  return {resp.status, j, resp};
}

void check_error(const Reply& r, int status, const std::string& code) {
  CHECK(r.status == status);
  if (r.body.contains("error")) {
    CHECK(r.body["error"]["code"] == code);
  } else {
    FAIL_CHECK("no error body: " << r.body.dump());
  }
}

// Select, export, hue-shift inside the mask and import one epoch.
void one_edited_epoch(EditService& svc) {
  REQUIRE(call(svc, "POST", "/select", {{"frame", "frame_000"}, {"rect", {3, 3, 6, 6}}}).status == 200);
  Reply ex = call(svc, "POST", "/context/export", {{"epochs", 2}, {"seed", 1}});
  REQUIRE(ex.status == 200);
  Image rgb = png_field(ex.body, "rgb");
  Image mask = png_field(ex.body, "mask");
  Reply im = call(svc, "POST", "/context/import",
                  {{"provenance", ex.body["provenance"]}, {"rgb", b64_encode(encode_png8(hue_rotate(rgb, mask, 90)))}});
  REQUIRE(im.status == 200);
}

}  // namespace

TEST_CASE("service scene, render and schema errors") {
  ServiceFixture fx;
  EditService svc(fx.options());
  Reply scene = call(svc, "GET", "/scene");
  CHECK(scene.status == 200);
  CHECK(scene.body["frames"].size() == 7u);
  CHECK(scene.body["selection"].is_null());
  CHECK(scene.body["active_version"] == fx.field.version);

  Reply r = call(svc, "POST", "/render", {{"frame", "frame_001"}, {"channels", {"rgb", "depth", "alpha"}}});
  REQUIRE(r.status == 200);
  Image img = png_field(r.body, "rgb");
  CHECK(img.width == 12);
  CHECK(img.channels == 3);
  CHECK(r.body.contains("depth"));
  // Same pixels as a local render of the same checkpoint.
  Dataset ds = load_dataset(fx.manifest);
  RenderOptions opt;
  opt.samples_per_ray = 16;
  CHECK(img.pixels == quantize_image8(render_view(ds.frame("frame_001").camera, fx.field, opt).rgb).pixels);

  const Camera& cam = ds.frame("frame_002").camera;
  json c2w = json::array();
  for (int i = 0; i < 4; ++i) {
    for (int k = 0; k < 4; ++k) c2w.push_back(cam.camera_to_world(i, k));
  }
  json camera = {{"width", 12},           {"height", 12},      {"fx", cam.intrinsics.fx}, {"fy", cam.intrinsics.fy},
                 {"near", cam.near},      {"far", cam.far},    {"camera_to_world", c2w}};
  Reply free_cam = call(svc, "POST", "/render", {{"camera", camera}});
  CHECK(free_cam.status == 200);

  check_error(call(svc, "POST", "/render", {{"frame", "frame_001"}, {"camera", camera}}), 422, "usage");
  check_error(call(svc, "POST", "/render", {{"frame", "nope"}}), 404, "not_found");
  check_error(call(svc, "POST", "/render", {{"frame", "frame_001"}, {"bogus", 1}}), 422, "usage");
  check_error(call(svc, "POST", "/render", {{"frame", "frame_001"}, {"channels", {"x"}}}), 422, "usage");
  check_error(call(svc, "POST", "/render", {{"frame", "frame_001"}, {"channels", {"mask"}}}), 409, "state");
  check_error(call(svc, "POST", "/render", {{"frame", "frame_001"}, {"deletion", "selected"}}), 409, "state");
  check_error(call(svc, "POST", "/render", {{"frame", "frame_001"}, {"samples_per_ray", 0}}), 422, "usage");
  camera["fx"] = -1;
  check_error(call(svc, "POST", "/render", {{"camera", camera}}), 422, "usage");
  HttpRequest bad{"POST", "/render", "{not json", {}};
  CHECK(svc.handle(bad).status == 422);
  check_error(call(svc, "GET", "/nowhere"), 404, "not_found");
  check_error(call(svc, "PUT", "/scene"), 404, "not_found");

  HttpRequest opts{"OPTIONS", "/render", "", {}};
  HttpResponse o = svc.handle(opts);
  CHECK(o.status == 204);
  CHECK(o.headers["Access-Control-Allow-Origin"] == "*");
}

TEST_CASE("service selection and context endpoints") {
  ServiceFixture fx;
  EditService svc(fx.options());
  check_error(call(svc, "PATCH", "/select", {{"thr", 0.5}}), 409, "state");
  check_error(call(svc, "POST", "/context/export", json::object()), 409, "state");
  check_error(call(svc, "POST", "/select", {{"frame", "frame_000"}}), 422, "usage");
  check_error(call(svc, "POST", "/select", {{"frame", "frame_000"}, {"rect", {0, 0, 0, 0}}}), 422, "usage");
  check_error(call(svc, "POST", "/select", {{"frame", "frame_000"}, {"rect", {1, 1, 2, 2}}, {"thr", -1}}), 422,
              "usage");

  Reply sel = call(svc, "POST", "/select", {{"frame", "frame_000"}, {"rect", {3, 3, 6, 6}}});
  REQUIRE(sel.status == 200);
  CHECK(sel.body["patch_pixels"] == 36);
  CHECK(sel.body["f_bar"].size() == static_cast<size_t>(fx.field.config.sem_dim));
  CHECK(sel.body["f_distance"]["samples"].get<int>() > 0);
  CHECK(sel.body["thr"] == sel.body["f_distance"]["suggested"]);
  CHECK(png_field(sel.body, "mask").width == 12);

  Image brush(12, 12, 1, 0.0f);
  for (int y = 2; y < 6; ++y) {
    for (int x = 2; x < 6; ++x) brush.at(x, y) = 1.0f;
  }
  Reply bsel = call(svc, "POST", "/select", {{"frame", "frame_000"}, {"bitmap", b64_encode(encode_png8(brush))}, {"thr", 0.5}});
  CHECK(bsel.status == 200);
  CHECK(bsel.body["patch_pixels"] == 16);
  Image small(5, 5, 1, 1.0f);
  check_error(call(svc, "POST", "/select", {{"frame", "frame_000"}, {"bitmap", b64_encode(encode_png8(small))}}), 422,
              "usage");

  Reply wide = call(svc, "PATCH", "/select", {{"thr", 1e6}, {"frame", "frame_000"}});
  Reply none = call(svc, "PATCH", "/select", {{"thr", 0.0}, {"frame", "frame_000"}});
  CHECK(wide.status == 200);
  CHECK(none.body["mask_pixels"] == 0);
  CHECK(wide.body["mask_pixels"].get<int>() >= none.body["mask_pixels"].get<int>());

  check_error(call(svc, "POST", "/context/import", {{"provenance", "x"}, {"rgb", ""}}), 409, "state");
  Reply ex = call(svc, "POST", "/context/export", {{"epochs", 2}});
  REQUIRE(ex.status == 200);
  CHECK(ex.body["cells"].size() == 4u);
  CHECK(ex.body["cell_width"] == 12);
  // Repeated export without restart returns the same grid.
  Reply again = call(svc, "POST", "/context/export", json::object());
  CHECK(again.body["provenance"] == ex.body["provenance"]);
  check_error(call(svc, "POST", "/context/export", {{"epochs", 3}}), 422, "usage");

  Image rgb = png_field(ex.body, "rgb");
  const std::string edited = b64_encode(encode_png8(hue_rotate(rgb, png_field(ex.body, "mask"), 90)));
  check_error(call(svc, "POST", "/context/import", {{"provenance", "ctx-0-e0-v1"}, {"rgb", edited}}), 410, "stale");
  check_error(call(svc, "POST", "/context/import", {{"provenance", ex.body["provenance"]}, {"rgb", "@@"}}), 422,
              "usage");
  Reply im = call(svc, "POST", "/context/import", {{"provenance", ex.body["provenance"]}, {"rgb", edited}});
  REQUIRE(im.status == 200);
  CHECK(im.body["epoch"] == 1);
  CHECK(im.body["edited_views"] == 4);
  // The old provenance is now stale.
  check_error(call(svc, "POST", "/context/import", {{"provenance", ex.body["provenance"]}, {"rgb", edited}}), 410,
              "stale");
  Reply ex1 = call(svc, "POST", "/context/export", json::object());
  CHECK(ex1.body["epoch"] == 1);
  CHECK(ex1.body["cells"][0]["role"] == "guidance_fixed");
  Reply im1 = call(svc, "POST", "/context/import",
                   {{"provenance", ex1.body["provenance"]}, {"rgb", b64_encode(encode_png8(png_field(ex1.body, "rgb")))}});
  CHECK(im1.body["done"] == true);
  check_error(call(svc, "POST", "/context/export", json::object()), 409, "state");
  CHECK(call(svc, "GET", "/scene").body["context"]["edited_views"] == 6);
}

TEST_CASE("service jobs, layers and snapshots") {
  ServiceFixture fx;
  EditService svc(fx.options());
  check_error(call(svc, "POST", "/jobs", {{"kind", "edit_residual"}}), 409, "state");
  check_error(call(svc, "POST", "/jobs", {{"kind", "dance"}}), 422, "usage");
  check_error(call(svc, "POST", "/jobs", {{"kind", "pretrain"}, {"config", {{"warp", 9}}}}), 422, "usage");
  check_error(call(svc, "GET", "/jobs/job-404"), 404, "not_found");
  one_edited_epoch(svc);

  // A long job blocks a second one until it is cancelled.
  Reply slow = call(svc, "POST", "/jobs", {{"kind", "pretrain"}, {"config", {{"iterations", 100000}, {"batch", 8}}}});
  REQUIRE(slow.status == 202);
  check_error(call(svc, "POST", "/jobs", {{"kind", "bake_mask"}}), 409, "conflict");
  const std::string slow_id = slow.body["id"];
  CHECK(call(svc, "DELETE", "/jobs/" + slow_id).status == 200);
  svc.wait_for_jobs();
  CHECK(call(svc, "GET", "/jobs/" + slow_id).body["state"] == "cancelled");
  CHECK(call(svc, "GET", "/scene").body["active_version"] == fx.field.version);

  Reply job = call(svc, "POST", "/jobs",
                   {{"kind", "edit_residual"}, {"config", {{"iterations", 20}, {"batch", 64}, {"label", "tint"}}}});
  REQUIRE(job.status == 202);
  svc.wait_for_jobs();
  Reply done = call(svc, "GET", "/jobs/" + job.body["id"].get<std::string>());
  CHECK(done.body["state"] == "done");
  CHECK(done.body["progress"]["iteration"] == 20);
  CHECK(done.body["result"]["bytes"].get<int>() <= static_cast<int>(kFeatureTokenByteLimit));
  const std::string tok = done.body["result"]["token"];

  Reply second = call(svc, "POST", "/jobs",
                      {{"kind", "edit_residual"}, {"config", {{"iterations", 5}, {"batch", 32}, {"token_kind", "color"}}}});
  REQUIRE(second.status == 202);
  svc.wait_for_jobs();
  Reply layers = call(svc, "GET", "/layers");
  REQUIRE(layers.body["layers"].size() == 2u);
  CHECK(layers.body["layers"][0]["label"] == "tint");
  CHECK(layers.body["layers"][1]["kind"] == "color_residual");
  const std::string tok2 = layers.body["layers"][1]["id"];

  Reply with = call(svc, "POST", "/render", {{"frame", "frame_000"}});
  Reply without = call(svc, "POST", "/render", {{"frame", "frame_000"}, {"use_stack", false}});
  CHECK(call(svc, "POST", "/layers/" + tok + "/toggle").body["enabled"] == false);
  CHECK(call(svc, "POST", "/layers/" + tok + "/toggle").body["enabled"] == true);
  CHECK(call(svc, "POST", "/render", {{"frame", "frame_000"}}).body["rgb"] == with.body["rgb"]);
  check_error(call(svc, "POST", "/layers/zz/toggle"), 404, "not_found");
  check_error(call(svc, "POST", "/layers/reorder", {{"order", {tok}}}), 422, "usage");
  check_error(call(svc, "POST", "/layers/reorder", {{"order", "x"}}), 422, "usage");
  CHECK(call(svc, "POST", "/layers/reorder", {{"order", {tok2, tok}}}).status == 200);
  CHECK(call(svc, "GET", "/layers").body["layers"][0]["id"] == tok2);
  CHECK(call(svc, "DELETE", "/layers/" + tok2).status == 200);
  CHECK(call(svc, "POST", "/layers/" + tok + "/toggle").status == 200);
  CHECK(call(svc, "POST", "/render", {{"frame", "frame_000"}}).body["rgb"] == without.body["rgb"]);
  check_error(call(svc, "DELETE", "/layers/" + tok2), 404, "not_found");

  Reply bake = call(svc, "POST", "/jobs", {{"kind", "bake_mask"}, {"config", {{"resolution", 16}}}});
  REQUIRE(bake.status == 202);
  svc.wait_for_jobs();
  CHECK(call(svc, "GET", "/scene").body["selection"]["baked"] == true);
  CHECK(call(svc, "POST", "/render", {{"frame", "frame_000"}, {"use_baked", true}, {"channels", {"mask"}}}).status ==
        200);

  Reply ft = call(svc, "POST", "/jobs", {{"kind", "finetune"}, {"config", {{"batch", 256}, {"lambda3", 0}}}});
  REQUIRE(ft.status == 202);
  svc.wait_for_jobs();
  Reply ftd = call(svc, "GET", "/jobs/" + ft.body["id"].get<std::string>());
  CHECK(ftd.body["state"] == "done");
  const uint64_t v = ftd.body["result"]["version"];
  CHECK(v == fx.field.version + 1);
  Reply scene = call(svc, "GET", "/scene");
  CHECK(scene.body["active_version"] == v);
  CHECK(scene.body["snapshots"].size() == 2u);

  Reply ck = call(svc, "GET", "/checkpoint/" + std::to_string(fx.field.version));
  CHECK(ck.raw.content_type == "application/octet-stream");
  const auto original = serialize_checkpoint(fx.field);
  CHECK(std::vector<uint8_t>(ck.raw.body.begin(), ck.raw.body.end()) == original);
  TriPlaneField<float> tuned = deserialize_checkpoint(
      std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(call(svc, "GET", "/checkpoint/" + std::to_string(v)).raw.body.data()),
                               call(svc, "GET", "/checkpoint/" + std::to_string(v)).raw.body.size()));
  CHECK(tuned.version == v);
  check_error(call(svc, "GET", "/checkpoint/abc"), 422, "usage");
  check_error(call(svc, "GET", "/checkpoint/12345"), 404, "not_found");
  CHECK(call(svc, "GET", "/jobs").body["jobs"].size() == 5u);
}

TEST_CASE("failed jobs report a numerical error") {
  ServiceFixture fx;
  EditService svc(fx.options());
  Reply job = call(svc, "POST", "/jobs",
                   {{"kind", "pretrain"}, {"config", {{"iterations", 200}, {"batch", 32}, {"learning_rate", 1e30}, {"plane_learning_rate", 1e30}}}});
  REQUIRE(job.status == 202);
  svc.wait_for_jobs();
  Reply r = call(svc, "GET", "/jobs/" + job.body["id"].get<std::string>());
  CHECK(r.body["state"] == "failed");
  CHECK(r.body["error"]["code"] == "numerical");
  // The active snapshot is untouched and still renders.
  CHECK(call(svc, "POST", "/render", {{"frame", "frame_000"}}).status == 200);
}

TEST_CASE("idempotency keys replay mutating requests") {
  ServiceFixture fx;
  EditService svc(fx.options());
  json body = {{"frame", "frame_000"}, {"rect", {3, 3, 6, 6}}};
  Reply a = call(svc, "POST", "/select", body, {{"Idempotency-Key", "k1"}});
  Reply b = call(svc, "POST", "/select", body, {{"Idempotency-Key", "k1"}});
  CHECK(a.status == 200);
  CHECK(b.raw.body == a.raw.body);
  CHECK(b.raw.headers["Idempotent-Replay"] == "true");
  json other = {{"frame", "frame_001"}, {"rect", {3, 3, 6, 6}}};
  check_error(call(svc, "POST", "/select", other, {{"Idempotency-Key", "k1"}}), 422, "usage");
}

TEST_CASE("random call sequences keep the service renderable") {
  ServiceFixture fx;
  EditService svc(fx.options());
  Rng rng(17);
  std::vector<std::string> frames{"frame_000", "frame_001", "frame_002", "frame_003"};
  json last_export;
  for (int step = 0; step < 60; ++step) {
    const std::string frame = frames[rng.below(frames.size())];
    Reply r{};
    switch (rng.below(9)) {
      case 0:
        r = call(svc, "POST", "/select", {{"frame", frame}, {"rect", {rng.below(8), rng.below(8), 1 + rng.below(6), 1 + rng.below(6)}}, {"thr", rng.uniform(0, 2)}});
        break;
      case 1:
        r = call(svc, "PATCH", "/select", {{"thr", rng.uniform(-0.5, 2)}});
        break;
      case 2:
        r = call(svc, "POST", "/context/export", {{"restart", rng.below(2) == 1}});
        if (r.status == 200) last_export = r.body;
        break;
      case 3:
        if (!last_export.is_null()) {
          r = call(svc, "POST", "/context/import", {{"provenance", last_export["provenance"]}, {"rgb", last_export["rgb"]}});
        }
        break;
      case 4:
        r = call(svc, "POST", "/jobs", {{"kind", "edit_residual"}, {"config", {{"iterations", 3}, {"batch", 16}}}});
        svc.wait_for_jobs();
        break;
      case 5: {
        Reply l = call(svc, "GET", "/layers");
        if (!l.body["layers"].empty()) {
          const std::string id = l.body["layers"][rng.below(l.body["layers"].size())]["id"];
          r = rng.below(2) ? call(svc, "POST", "/layers/" + id + "/toggle") : call(svc, "DELETE", "/layers/" + id);
        }
        break;
      }
      case 6:
        r = call(svc, "POST", "/jobs", {{"kind", "finetune"}, {"config", {{"batch", 512}, {"lambda3", 0}}}});
        svc.wait_for_jobs();
        break;
      case 7:
        r = call(svc, "POST", "/jobs", {{"kind", "bake_mask"}, {"config", {{"resolution", 8}}}});
        svc.wait_for_jobs();
        break;
      default:
        r = call(svc, "POST", "/render", {{"frame", frame}, {"deletion", rng.below(2) ? "selected" : "off"}});
        break;
    }
    // Every failure is a declared client error, never an internal one.
    if (r.status != 0 && r.status >= 400) CHECK_MESSAGE(r.status < 500, r.body.dump());
    Reply render = call(svc, "POST", "/render", {{"frame", frame}});
    REQUIRE_MESSAGE(render.status == 200, render.body.dump());
  }
  for (const auto& j : call(svc, "GET", "/jobs").body["jobs"]) CHECK(j["state"] != "failed");
}

TEST_CASE("service answers over a real socket") {
  ServiceFixture fx;
  ServiceOptions o = fx.options();
  o.cors_origin = "http://localhost:5173";
  EditService svc(o);
  const int port = svc.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread server([&] { svc.serve(); });
  httplib::Client client("127.0.0.1", port);
  auto res = client.Get("/scene");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Access-Control-Allow-Origin") == "http://localhost:5173");
  CHECK(json::parse(res->body)["frames"].size() == 7u);
  auto bad = client.Post("/render", R"({"frame": "missing"})", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 404);
  svc.stop();
  server.join();
}
