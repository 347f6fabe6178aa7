// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"
#include "triedit/context.hpp"
#include "triedit/edit_token.hpp"
#include "triedit/keyvalue.hpp"
#include "triedit/scene_io.hpp"
#include "triedit/service.hpp"

using namespace triedit;
using namespace triedit::testing;
using json = nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run_cli(const TempDir& dir, const std::string& args) {
  const std::string log = dir.file("cli.log");
  const std::string cmd = std::string("\"") + TRIEDIT_CLI + "\" --quiet --workers 1 " + args + " > \"" + log + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  r.output.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

// Tiny dataset plus a fast CLI checkpoint shared by the cases below.
struct CliFixture {
  TempDir dir{"cli"};
  std::string data;
  std::string ckpt;
  std::string shape = "--resolution 8 --features 4 --geom-hidden 8 --geo-features 6 --color-hidden 8";

  CliFixture() {
    data = dir.file("data");
    SyntheticSpec spec = tiny_spec(16, 6, 1);
    write_file_atomic(dir.file("spec.txt"), format_synthetic_spec(spec));
    REQUIRE(run_cli(dir, "synth --spec " + dir.file("spec.txt") + " --out " + data).code == 0);
    ckpt = dir.file("ck.pnck");
    CliResult r = run_cli(dir, "--seed 2 pretrain --data " + data + " --out " + ckpt + " --iters 150 --rays 64 --samples 16 " + shape);
    REQUIRE_MESSAGE(r.code == 0, r.output);
  }
};

}  // namespace

TEST_CASE("cli exit codes") {
  TempDir dir("cli-codes");
  CHECK(run_cli(dir, "").code == 2);
  CHECK(run_cli(dir, "frobnicate").code == 2);
  CHECK(run_cli(dir, "pretrain --data x").code == 2);
  CHECK(run_cli(dir, "synth --out " + dir.file("d") + " --bogus").code == 2);
  CHECK(run_cli(dir, "pretrain --data " + dir.file("none") + " --out " + dir.file("c.pnck")).code == 3);
  write_file_atomic(dir.file("bad.pnck"), "not a checkpoint");
  CHECK(run_cli(dir, "layers list " + dir.file("bad.pnck")).code == 3);
  CHECK(run_cli(dir, "--help").code == 0);
}

TEST_CASE("cli end to end: select, context round trip, edit, layers and render") {
  CliFixture fx;
  const auto& d = fx.dir;
  CHECK(run_cli(d, "pretrain --data " + fx.data + " --out " + d.file("x.pnck") + " --iters 0").code == 2);
  CHECK(run_cli(d, "pretrain --data " + fx.data + " --out " + d.file("x.pnck") + " --iters 1 --init " + fx.ckpt +
                       " --resolution 16").code == 2);

  // Record file next to the checkpoint.
  KeyValueDocument rec = read_key_value_file(fx.ckpt + ".run.txt");
  CHECK(rec.header.get_string("command") == "pretrain");
  CHECK(rec.header.get_string("seed") == "2");
  CHECK_FALSE(rec.header.get_string("config_hash").empty());

  const std::string sel = d.file("sel.txt");
  CliResult s = run_cli(d, "select --ckpt " + fx.ckpt + " --data " + fx.data + " --frame frame_000 --rect 4,4,8,8 --out " +
                               sel + " --mask-out " + d.file("mask.png") + " --samples 16 --probes 2048");
  REQUIRE_MESSAGE(s.code == 0, s.output);
  SelectionParams p = load_selection(sel);
  CHECK(p.f_bar.size() == 8u);
  CHECK(read_png8(d.file("mask.png")).width == 16);
  CHECK(run_cli(d, "select --ckpt " + fx.ckpt + " --data " + fx.data + " --frame frame_000 --rect 4,4 --out " + sel).code == 2);
  CHECK(run_cli(d, "select --ckpt " + fx.ckpt + " --data " + fx.data + " --frame nope --rect 1,1,2,2 --out " + d.file("s2.txt")).code == 3);

  const std::string session = d.file("session"), exp = d.file("exp");
  CliResult e = run_cli(d, "context export --ckpt " + fx.ckpt + " --data " + fx.data + " --sel " + sel + " --session " +
                               session + " --out " + exp + " --epochs 1 --nonce 5 --samples 16");
  REQUIRE_MESSAGE(e.code == 0, e.output);
  Image rgb = read_png8(exp + "/mosaic_rgb.png");
  Image mask = read_png8(exp + "/mosaic_mask.png");
  write_png8(d.file("edited.png"), hue_rotate(rgb, mask, 120.0));
  CliResult im = run_cli(d, "context import --ckpt " + fx.ckpt + " --data " + fx.data + " --session " + session +
                                " --context " + exp + " --edited " + d.file("edited.png"));
  REQUIRE_MESSAGE(im.code == 0, im.output);
  // Importing the same mosaic again is stale (the session advanced): exit 3.
  CHECK(run_cli(d, "context import --ckpt " + fx.ckpt + " --data " + fx.data + " --session " + session + " --context " +
                       exp + " --edited " + d.file("edited.png")).code == 3);

  const std::string tok = d.file("tint.pnet");
  CliResult ed = run_cli(d, "edit --ckpt " + fx.ckpt + " --data " + fx.data + " --context " + session + " --out " + tok +
                                " --iters 30 --batch 128 --samples 16 --label tint");
  REQUIRE_MESSAGE(ed.code == 0, ed.output);
  EditToken t = load_token(tok);
  CHECK(t.id == "tint");
  CHECK(t.label == "tint");
  CHECK(run_cli(d, "edit --ckpt " + fx.ckpt + " --data " + fx.data + " --context " + session + " --out " +
                       d.file("c.pnet") + " --kind color --layers " + tok + " --iters 10 --batch 64 --samples 16")
            .code == 0);
  CHECK(run_cli(d, "edit --ckpt " + fx.ckpt + " --data " + fx.data + " --context " + session + " --out " +
                       d.file("k.pnet") + " --kind hue").code == 2);

  const std::string stack = d.file("stack.pnst");
  REQUIRE(run_cli(d, "layers merge " + tok + " " + d.file("c.pnet") + " --out " + stack).code == 0);
  CliResult list = run_cli(d, "layers list " + stack);
  CHECK(list.output.find("tint") != std::string::npos);
  CHECK(list.output.find("color_residual") != std::string::npos);
  CHECK(run_cli(d, "layers toggle --stack " + stack + " --id tint").code == 0);
  CHECK_FALSE(load_stack(stack).find("tint").enabled);
  CHECK(run_cli(d, "layers toggle --stack " + stack + " --id missing").code == 3);
  CHECK(run_cli(d, "layers reorder --stack " + stack + " --order c,tint").code == 0);
  CHECK(load_stack(stack).tokens()[0].id == "c");
  CHECK(run_cli(d, "layers reorder --stack " + stack + " --order c").code == 2);

  const std::string base = d.file("base.png"), edited = d.file("edited_view.png"), off = d.file("off.png");
  const std::string common = "render --ckpt " + fx.ckpt + " --data " + fx.data + " --frame frame_001 --samples 16 --out ";
  REQUIRE(run_cli(d, common + base).code == 0);
  REQUIRE(run_cli(d, common + edited + " --layers " + tok).code == 0);
  CHECK(read_png8(base).pixels != read_png8(edited).pixels);
  REQUIRE(run_cli(d, "layers remove --stack " + stack + " --id c").code == 0);
  REQUIRE(run_cli(d, common + off + " --layers " + stack).code == 0);  // only "tint", disabled
  CHECK(read_png8(base).pixels == read_png8(off).pixels);
  CHECK(run_cli(d, common + d.file("m.png") + " --mask " + d.file("mm.png")).code == 2);
  CHECK(run_cli(d, common + d.file("del.png") + " --sel " + sel + " --deletion selected").code == 0);
  CHECK(run_cli(d, common + d.file("del.png") + " --sel " + sel + " --deletion maybe").code == 2);

  CliResult split = run_cli(d, "render --ckpt " + fx.ckpt + " --data " + fx.data + " --split holdout --samples 16 --out-dir " +
                                   d.file("holdout"));
  CHECK(split.code == 0);
  CHECK(split.output.find("mean psnr") != std::string::npos);

  CliResult ft = run_cli(d, "finetune --ckpt " + fx.ckpt + " --data " + fx.data + " --context " + session + " --out " +
                                d.file("ft.pnck") + " --epochs 1 --batch 256 --samples 16");
  REQUIRE_MESSAGE(ft.code == 0, ft.output);
  CHECK(load_checkpoint(d.file("ft.pnck")).version == load_checkpoint(fx.ckpt).version + 1);
}

TEST_CASE("cli and service produce byte-identical checkpoints") {
  CliFixture fx;
  const auto& d = fx.dir;
  const std::string out = d.file("cont.pnck");
  CliResult r = run_cli(d, "--seed 9 pretrain --data " + fx.data + " --out " + out + " --init " + fx.ckpt +
                               " --iters 40 --rays 32 --samples 16");
  REQUIRE_MESSAGE(r.code == 0, r.output);

  ServiceOptions o;
  o.manifest = fx.data + "/manifest.txt";
  o.checkpoint = fx.ckpt;
  o.samples_per_ray = 16;
  o.workers = 1;
  o.seed = 9;
  o.publish_every = 0;
  EditService svc(o);
  HttpRequest req{"POST", "/jobs", R"({"kind": "pretrain", "config": {"iterations": 40, "batch": 32}})", {}};
  REQUIRE(svc.handle(req).status == 202);
  svc.wait_for_jobs();
  const uint64_t v = load_checkpoint(fx.ckpt).version + 1;
  HttpResponse ck = svc.handle({"GET", "/checkpoint/" + std::to_string(v), "", {}});
  REQUIRE(ck.status == 200);
  const std::string cli_bytes = read_file(out);
  CHECK(ck.body.size() == cli_bytes.size());
  CHECK(ck.body == cli_bytes);
}
