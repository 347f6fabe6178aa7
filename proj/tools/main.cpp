// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "CLI11.hpp"
#include "triedit/context.hpp"
#include "triedit/edit_token.hpp"
#include "triedit/keyvalue.hpp"
#include "triedit/renderer.hpp"
#include "triedit/scene_io.hpp"
#include "triedit/selection.hpp"
#include "triedit/service.hpp"
#include "triedit/synthetic.hpp"
#include "triedit/train.hpp"

namespace fs = std::filesystem;
using namespace triedit;

namespace {

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUsage: return 2;
    case ErrorCode::kNumerical: return 4;
    default: return 3;
  }
}

struct Globals {
  int workers = 0;
  uint64_t seed = 0;
  bool quiet = false;
  std::string record;
};

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

/// Reproducibility record: command, seed, effective config and its hash,
/// library version and command-specific values. Written next to `out` as
/// <out>.run.txt unless --record names a path.
void write_record(const Globals& g, const CLI::App& cmd, const std::string& out,
                  const std::vector<std::pair<std::string, std::string>>& extra) {
  std::string path = g.record;
  if (path.empty()) {
    if (out.empty()) return;
    path = out + ".run.txt";
  }
  const std::string config = cmd.config_to_str(true, false);
  KeyValueDocument doc;
  std::string name = cmd.get_name();
  for (const CLI::App* p = cmd.get_parent(); p && p->get_parent(); p = p->get_parent()) {
    name = p->get_name() + " " + name;
  }
  doc.header.set("command", name);
  doc.header.set("triedit_version", TRIEDIT_VERSION);
  doc.header.set("seed", std::to_string(g.seed));
  doc.header.set("workers", std::to_string(g.workers));
  doc.header.set("config_hash", hex64(fnv1a(config)));
  for (const auto& [k, v] : extra) doc.header.set(k, v);
  KeyValueBlock cfg("config", path);
  std::istringstream lines(config);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || line.empty() || line[0] == '[' || line[0] == '#') continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  doc.sections.push_back(std::move(cfg));
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  write_file_atomic(path, format_key_value(doc));
}

std::string manifest_path(const std::string& data) {
  if (fs::is_directory(data)) return (fs::path(data) / "manifest.txt").string();
  return data;
}

void ensure_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

ProgressSink progress_printer(const Globals& g, const std::string& label) {
  if (g.quiet) return {};
  return [label](const ProgressEvent& e) {
    const int step = std::max(1, e.total / 20);
    if (e.iteration % step == 0 || e.iteration == e.total) {
      std::fprintf(stderr, "%s %d/%d loss %.6f (%.1fs)\n", label.c_str(), e.iteration, e.total, e.loss.total,
                   e.elapsed_ms / 1000.0);
    }
    return true;
  };
}

double holdout_report(const Dataset& ds, const TriPlaneField<float>& field, int samples, int workers,
                      std::vector<std::pair<std::string, std::string>>* record, const std::string& image_dir = {}) {
  RenderOptions opt;
  opt.samples_per_ray = samples;
  opt.workers = workers;
  double sum = 0;
  int n = 0;
  for (const Frame* f : ds.split(Split::kHoldout)) {
    RenderOutput out = render_view(f->camera, field, opt);
    const double p = psnr_from_mse(mse(quantize_image8(out.rgb), f->rgb));
    std::printf("holdout %s psnr %.3f\n", f->id.c_str(), p);
    if (record) record->push_back({"psnr." + f->id, format_number(p)});
    if (!image_dir.empty()) write_png8((fs::path(image_dir) / (f->id + ".png")).string(), out.rgb);
    sum += p;
    ++n;
  }
  const double mean = n ? sum / n : 0.0;
  if (n) std::printf("holdout mean psnr %.3f over %d views\n", mean, n);
  if (record && n) record->push_back({"holdout_psnr_mean", format_number(mean)});
  return mean;
}

std::vector<int> parse_ints(const std::string& text, size_t count, const std::string& flag) {
  std::vector<int> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorCode::kUsage, flag + ": '" + item + "' is not an integer");
    }
  }
  if (out.size() != count) fail(ErrorCode::kUsage, flag + ": expected " + std::to_string(count) + " integers");
  return out;
}

EditStack load_stacks(const std::vector<std::string>& paths) {
  EditStack stack;
  for (const auto& p : paths) {
    EditStack loaded = load_layers(p);
    for (const auto& t : loaded.tokens()) stack.push(t);
  }
  return stack;
}

double parse_hue_editor(const std::string& spec) {
  if (spec.rfind("hue:", 0) != 0) fail(ErrorCode::kUsage, "--editor: expected hue:<degrees>, got '" + spec + "'");
  try {
    return std::stod(spec.substr(4));
  } catch (const std::exception&) {
    fail(ErrorCode::kUsage, "--editor: bad angle in '" + spec + "'");
  }
}

std::vector<Camera> train_cameras(const Dataset& ds) {
  std::vector<Camera> cams;
  for (const Frame* f : ds.split(Split::kTrain)) cams.push_back(f->camera);
  return cams;
}

uint64_t fresh_nonce() {
  std::random_device rd;
  return (static_cast<uint64_t>(rd()) << 32) | rd();
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string spec;
  std::string out;
};

void run_synth(const Globals& g, const CLI::App& cmd, const SynthArgs& a) {
  SyntheticSpec spec = a.spec.empty() ? two_object_spec() : load_synthetic_spec(a.spec);
  SyntheticScene scene(spec);
  const auto t0 = std::chrono::steady_clock::now();
  Dataset ds = scene.write_dataset(a.out, g.workers);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  std::printf("wrote %zu frames (%zu train, %zu holdout) to %s\n", ds.frames.size(), ds.split(Split::kTrain).size(),
              ds.split(Split::kHoldout).size(), a.out.c_str());
  write_record(g, cmd, (fs::path(a.out) / "synth").string(),
               {{"manifest", (fs::path(a.out) / "manifest.txt").string()},
                {"spec_hash", hex64(fnv1a(format_synthetic_spec(spec)))},
                {"elapsed_ms", format_number(ms)}});
}

// ---------------------------------------------------------------- pretrain

struct PretrainArgs {
  std::string data;
  std::string out;
  std::string init;
  std::string metrics;
  int iters = 40000;
  int rays = 192;
  double lr = 5e-3;
  double plane_lr = 2e-2;
  double l1 = 1e-4;
  double tv = 1e-3;
  double feature_weight = 1.0;
  int samples = 128;
  bool no_jitter = false;
  int resolution = 256;
  int features = 32;
  std::string combine = "add";
  int geom_hidden = 64;
  int geo_features = 64;
  int color_hidden = 64;
  int sem_dim = 0;
  int publish_every = 0;
};

void run_pretrain_cmd(const Globals& g, const CLI::App& cmd, const PretrainArgs& a) {
  Dataset ds = load_dataset(manifest_path(a.data));
  TrainConfig cfg = default_config(Regime::kPretrain);
  cfg.iterations = a.iters;
  cfg.rays_per_batch = a.rays;
  cfg.learning_rate = a.lr;
  cfg.plane_learning_rate = a.plane_lr;
  cfg.weights.lambda1 = a.l1;
  cfg.weights.lambda2 = a.tv;
  cfg.weights.feature = a.feature_weight;
  cfg.samples_per_ray = a.samples;
  cfg.jitter = !a.no_jitter;
  cfg.seed = g.seed;
  cfg.workers = g.workers;
  cfg.validate();

  TriPlaneField<float> field;
  if (!a.init.empty()) {
    field = load_checkpoint(a.init);
  } else {
    FieldConfig fc;
    fc.resolution = a.resolution;
    fc.features = a.features;
    if (a.combine == "add") {
      fc.combine = CombineMode::kAdd;
    } else if (a.combine == "concat") {
      fc.combine = CombineMode::kConcat;
    } else {
      fail(ErrorCode::kUsage, "--combine must be add or concat");
    }
    fc.geom_hidden = a.geom_hidden;
    fc.geo_features = a.geo_features;
    fc.color_hidden = a.color_hidden;
    fc.sem_dim = a.sem_dim > 0 ? a.sem_dim : (ds.feature_dim > 0 ? ds.feature_dim : 64);
    field = TriPlaneField<float>::create(fc, ds.bounds, g.seed);
  }
  if (ds.feature_dim > 0 && field.config.sem_dim != ds.feature_dim) {
    fail(ErrorCode::kUsage, "D_sem " + std::to_string(field.config.sem_dim) + " does not match the dataset's " +
                                std::to_string(ds.feature_dim) + " feature channels");
  }
  std::ofstream metrics;
  TrainHooks hooks;
  if (!a.metrics.empty()) {
    ensure_parent(a.metrics);
    metrics.open(a.metrics);
    hooks.metrics = &metrics;
  }
  hooks.progress = progress_printer(g, "pretrain");
  if (a.publish_every > 0) {
    hooks.publish_every = a.publish_every;
    hooks.snapshot = [&](const TriPlaneField<float>& f, int iter) {
      save_checkpoint(a.out + ".it" + std::to_string(iter), f);
    };
  }
  const uint64_t in_version = field.version;
  TrainResult r = run_pretrain(&field, train_views(ds), cfg, hooks);
  std::vector<std::pair<std::string, std::string>> rec{
      {"data", manifest_path(a.data)},
      {"field_version_in", std::to_string(in_version)},
      {"field_version_out", std::to_string(field.version)},
      {"iterations", std::to_string(r.iterations_run)},
      {"final_loss", format_number(r.loss_trace.empty() ? 0.0 : r.loss_trace.back())},
      {"elapsed_ms", format_number(r.elapsed_ms)}};
  std::printf("pretrain %d iterations in %.1fs, final loss %.6f\n", r.iterations_run, r.elapsed_ms / 1000.0,
              r.loss_trace.empty() ? 0.0 : r.loss_trace.back());
  holdout_report(ds, field, a.samples, g.workers, &rec);
  ensure_parent(a.out);
  save_checkpoint(a.out, field);
  write_record(g, cmd, a.out, rec);
}

// ---------------------------------------------------------------- render

struct RenderArgs {
  std::string ckpt;
  std::string data;
  std::string frame;
  std::string camera;
  std::string split;
  std::string out;
  std::string out_dir;
  std::string depth;
  std::string mask;
  std::string alpha;
  std::vector<std::string> layers;
  std::string sel;
  std::string deletion = "off";
  int samples = 128;
};

void run_render(const Globals& g, const CLI::App& cmd, const RenderArgs& a) {
  TriPlaneField<float> field = load_checkpoint(a.ckpt);
  RenderOptions opt;
  opt.samples_per_ray = a.samples;
  opt.workers = g.workers;
  if (a.deletion == "off") {
    opt.deletion = DeletionMode::kOff;
  } else if (a.deletion == "selected") {
    opt.deletion = DeletionMode::kSelected;
  } else if (a.deletion == "unselected") {
    opt.deletion = DeletionMode::kUnselected;
  } else {
    fail(ErrorCode::kUsage, "--deletion must be off, selected or unselected");
  }
  if (!a.sel.empty()) opt.selection = load_selection(a.sel);
  if ((opt.deletion != DeletionMode::kOff || !a.mask.empty()) && !opt.selection) {
    fail(ErrorCode::kUsage, "--deletion and --mask need --sel");
  }
  opt.selection_weight = !a.mask.empty();
  EditStack stack = load_stacks(a.layers);
  opt = with_stack(opt, stack);
  std::vector<std::pair<std::string, std::string>> rec{{"ckpt", a.ckpt},
                                                       {"field_version", std::to_string(field.version)},
                                                       {"layers", std::to_string(stack.enabled().size())}};
  if (!a.split.empty()) {
    if (a.data.empty() || a.out_dir.empty()) fail(ErrorCode::kUsage, "--split needs --data and --out-dir");
    if (a.split != "holdout" && a.split != "train") fail(ErrorCode::kUsage, "--split must be train or holdout");
    Dataset ds = load_dataset(manifest_path(a.data));
    fs::create_directories(a.out_dir);
    double sum = 0;
    int n = 0;
    for (const Frame* f : ds.split(a.split == "train" ? Split::kTrain : Split::kHoldout)) {
      RenderOutput out = render_view(f->camera, field, opt);
      write_png8((fs::path(a.out_dir) / (f->id + ".png")).string(), out.rgb);
      const double p = psnr_from_mse(mse(quantize_image8(out.rgb), f->rgb));
      std::printf("%s %s psnr %.3f\n", a.split.c_str(), f->id.c_str(), p);
      rec.push_back({"psnr." + f->id, format_number(p)});
      sum += p;
      ++n;
    }
    if (n) {
      std::printf("%s mean psnr %.3f over %d views\n", a.split.c_str(), sum / n, n);
      rec.push_back({"psnr_mean", format_number(sum / n)});
    }
    write_record(g, cmd, (fs::path(a.out_dir) / "report").string(), rec);
    return;
  }
  Camera camera;
  if (!a.frame.empty()) {
    if (a.data.empty()) fail(ErrorCode::kUsage, "--frame needs --data");
    camera = load_dataset(manifest_path(a.data), false).frame(a.frame).camera;
  } else if (!a.camera.empty()) {
    camera = load_camera(a.camera);
  } else {
    fail(ErrorCode::kUsage, "give one of --frame, --camera or --split");
  }
  if (a.out.empty()) fail(ErrorCode::kUsage, "--out is required");
  RenderOutput out = render_view(camera, field, opt);
  ensure_parent(a.out);
  write_png8(a.out, out.rgb);
  if (!a.depth.empty()) write_png16(a.depth, encode_depth(out.depth, camera.near, camera.far));
  if (!a.alpha.empty()) write_png8(a.alpha, out.alpha);
  if (!a.mask.empty()) {
    Image m(camera.width(), camera.height(), 1);
    for (size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = out.selected.pixels[i] >= 0.5f ? 1.0f : 0.0f;
    write_png8(a.mask, m);
  }
  write_record(g, cmd, a.out, rec);
}

// ---------------------------------------------------------------- select

struct SelectArgs {
  std::string ckpt;
  std::string data;
  std::string frame;
  std::string rect;
  std::string bitmap;
  double thr = -1;
  std::string out;
  std::string mask_out;
  int probes = 8192;
  int samples = 128;
};

void run_select(const Globals& g, const CLI::App& cmd, const SelectArgs& a) {
  TriPlaneField<float> field = load_checkpoint(a.ckpt);
  const Dataset ds = load_dataset(manifest_path(a.data), false);
  const Frame& frame = ds.frame(a.frame);
  Patch patch;
  if (!a.rect.empty()) {
    auto r = parse_ints(a.rect, 4, "--rect");
    patch = Patch::rectangle(r[0], r[1], r[2], r[3], frame.camera.width(), frame.camera.height());
  } else {
    patch = Patch::from_bitmap(read_png8(a.bitmap));
  }
  SelectionParams sel;
  sel.f_bar = query_mean_feature(frame.camera, patch, field, a.samples, g.workers);
  sel.field_version = field.version;
  ThresholdCalibration cal = calibrate_threshold(sel.f_bar, field, a.probes, g.seed);
  std::printf("f_distance p01 %.6g p99 %.6g suggested %.6g (%zu dense probes)\n", cal.range.p01, cal.range.p99,
              cal.suggested, cal.samples);
  if (a.thr >= 0) {
    sel.thr = static_cast<float>(a.thr);
  } else {
    if (cal.samples == 0) fail(ErrorCode::kData, "no dense probe points to calibrate --thr; pass it explicitly");
    sel.thr = cal.suggested;
  }
  std::printf("selection thr %.6g over %zu patch pixels\n", sel.thr, patch.pixels.size());
  ensure_parent(a.out);
  save_selection(a.out, sel);
  if (!a.mask_out.empty()) write_png8(a.mask_out, project_mask(frame.camera, sel, field, a.samples, g.workers));
  write_record(g, cmd, a.out,
               {{"ckpt", a.ckpt},
                {"field_version", std::to_string(field.version)},
                {"thr", format_number(sel.thr)},
                {"f_distance_p01", format_number(cal.range.p01)},
                {"f_distance_p99", format_number(cal.range.p99)},
                {"suggested_thr", format_number(cal.suggested)}});
}

// ---------------------------------------------------------------- context

struct ContextArgs {
  std::string ckpt;
  std::string data;
  std::string sel;
  std::string session;
  std::string out;
  std::string context;
  std::string edited;
  std::string depth;
  int epochs = 3;
  uint64_t nonce = 0;
  int samples = 128;
};

ContextSession open_session(const Globals& g, const ContextArgs& a, const Dataset& ds, bool create) {
  if (fs::exists(fs::path(a.session) / "session.txt")) return ContextSession::load(a.session, train_cameras(ds));
  if (!create) fail(ErrorCode::kData, a.session + ": no context session; run context export first");
  if (a.sel.empty()) fail(ErrorCode::kUsage, "a new context session needs --sel");
  ContextSettings s;
  s.epochs = a.epochs;
  s.seed = g.seed;
  s.samples_per_ray = a.samples;
  s.workers = g.workers;
  return ContextSession(train_cameras(ds), load_selection(a.sel), s, a.nonce ? a.nonce : fresh_nonce());
}

void run_context_export(const Globals& g, const CLI::App& cmd, const ContextArgs& a) {
  TriPlaneField<float> field = load_checkpoint(a.ckpt);
  Dataset ds = load_dataset(manifest_path(a.data), false);
  ContextSession session = open_session(g, a, ds, true);
  ContextGrid grid = session.compose(field);
  export_context(grid, session.cameras(), a.out);
  session.save(a.session);
  std::printf("epoch %d/%d provenance %s\n", grid.epoch, session.settings().epochs, grid.provenance.c_str());
  const auto train = ds.split(Split::kTrain);
  for (int k = 0; k < 4; ++k) {
    std::printf("cell %d: %s (%s)\n", k, train[grid.cells[k].camera]->id.c_str(),
                std::string(cell_role_name(grid.cells[k].role)).c_str());
  }
  write_record(g, cmd, (fs::path(a.out) / "export").string(),
               {{"ckpt", a.ckpt}, {"field_version", std::to_string(field.version)}, {"provenance", grid.provenance}});
}

void run_context_import(const Globals& g, const CLI::App& cmd, const ContextArgs& a) {
  TriPlaneField<float> field = load_checkpoint(a.ckpt);
  Dataset ds = load_dataset(manifest_path(a.data), false);
  ContextSession session = open_session(g, a, ds, false);
  ContextSidecar side = read_context_sidecar((fs::path(a.context) / "context.txt").string());
  Image rgb = read_png8(a.edited.empty() ? (fs::path(a.context) / "mosaic_rgb.png").string() : a.edited);
  // Without an edited depth mosaic the exported render depth stands in.
  const std::string depth_path = a.depth.empty() ? (fs::path(a.context) / "mosaic_depth.png").string() : a.depth;
  std::optional<Image> depth;
  if (fs::exists(depth_path)) depth = decode_depth(read_png16(depth_path), side.near, side.far);
  session.import(rgb, side.provenance, field.version, depth ? &*depth : nullptr);
  session.save(a.session);
  std::printf("imported epoch %d; %zu edited views; next: %s\n", session.epoch() - 1, session.edited().size(),
              session.done() ? "edit or finetune" : "context export, edit or finetune");
  write_record(g, cmd, (fs::path(a.session) / ("import_e" + std::to_string(session.epoch() - 1))).string(),
               {{"provenance", side.provenance}, {"edited_views", std::to_string(session.edited().size())}});
}

// ---------------------------------------------------------------- edit

struct EditArgs {
  std::string ckpt;
  std::string data;
  std::string context;
  std::string sel;
  std::string kind = "feature";
  std::vector<std::string> layers;
  std::string out;
  std::string label;
  std::string id;
  std::string metrics;
  int iters = 500;
  int batch = 1024;
  double lr = 5e-3;
  int samples = 128;
};

void run_edit(const Globals& g, const CLI::App& cmd, const EditArgs& a) {
  TriPlaneField<float> field = load_checkpoint(a.ckpt);
  Dataset ds = load_dataset(manifest_path(a.data), false);
  ContextSession session = ContextSession::load(a.context, train_cameras(ds));
  if (session.edited().empty()) fail(ErrorCode::kData, a.context + ": no edited views imported yet");
  const SelectionParams sel = a.sel.empty() ? session.selection() : load_selection(a.sel);
  TrainConfig cfg = default_config(Regime::kEditResidual);
  cfg.iterations = a.iters;
  cfg.rays_per_batch = a.batch;
  cfg.learning_rate = a.lr;
  cfg.samples_per_ray = a.samples;
  cfg.seed = g.seed;
  cfg.workers = g.workers;
  cfg.validate();
  EditToken token = make_token(parse_token_kind(a.kind), field.config.sem_dim, sel, g.seed, a.label);
  token.id = a.id.empty() ? fs::path(a.out).stem().string() : a.id;
  EditStack prior = load_stacks(a.layers);
  std::vector<const EditToken*> prior_tokens = prior.enabled();
  std::ofstream metrics;
  TrainHooks hooks;
  if (!a.metrics.empty()) {
    ensure_parent(a.metrics);
    metrics.open(a.metrics);
    hooks.metrics = &metrics;
  }
  hooks.progress = progress_printer(g, "edit");
  auto views = edited_train_views(session);
  TrainResult r = run_edit_residual(field, &token, views, cfg, prior_tokens, hooks);
  ensure_parent(a.out);
  save_token(a.out, token);
  const size_t bytes = serialize_token(token).size();
  std::printf("edit %d iterations in %.1fs; masked loss %.6g -> %.6g; token %s, %zu bytes\n", r.iterations_run,
              r.elapsed_ms / 1000.0, r.masked_initial, r.masked_final, token.id.c_str(), bytes);
  write_record(g, cmd, a.out,
               {{"ckpt", a.ckpt},
                {"field_version", std::to_string(field.version)},
                {"token_id", token.id},
                {"token_bytes", std::to_string(bytes)},
                {"edited_views", std::to_string(views.size())},
                {"masked_initial", format_number(r.masked_initial)},
                {"masked_final", format_number(r.masked_final)},
                {"elapsed_ms", format_number(r.elapsed_ms)}});
}

// ---------------------------------------------------------------- finetune

struct FinetuneArgs {
  std::string ckpt;
  std::string data;
  std::string context;
  std::string sel;
  std::string out;
  std::string editor;
  std::string metrics;
  int epochs = 3;
  int round_epochs = 1;
  int batch = 512;
  double lr = 2e-4;
  double l1 = 1e-4;
  double tv = 1e-3;
  double lambda3 = 0.05;
  double lambda4 = 0.1;
  bool single_view = false;
  int budget = 0;
  int samples = 128;
  uint64_t nonce = 0;
};

void run_finetune_cmd(const Globals& g, const CLI::App& cmd, const FinetuneArgs& a) {
  TriPlaneField<float> field = load_checkpoint(a.ckpt);
  const TriPlaneField<float> original = field;
  Dataset ds = load_dataset(manifest_path(a.data), false);
  TrainConfig cfg = default_config(Regime::kFinetune);
  cfg.rays_per_batch = a.batch;
  cfg.learning_rate = a.lr;
  cfg.plane_learning_rate = a.lr;
  cfg.weights.lambda1 = a.l1;
  cfg.weights.lambda2 = a.tv;
  cfg.weights.lambda3 = a.lambda3;
  cfg.weights.lambda4 = a.lambda4;
  cfg.samples_per_ray = a.samples;
  cfg.seed = g.seed;
  cfg.workers = g.workers;
  cfg.validate();
  if (a.epochs < 1 || a.round_epochs < 1) fail(ErrorCode::kUsage, "--epochs and --round-epochs must be >= 1");
  std::ofstream metrics;
  TrainHooks hooks;
  if (!a.metrics.empty()) {
    ensure_parent(a.metrics);
    metrics.open(a.metrics);
    hooks.metrics = &metrics;
  }
  hooks.progress = progress_printer(g, "finetune");
  std::vector<std::pair<std::string, std::string>> rec{{"ckpt", a.ckpt},
                                                       {"field_version_in", std::to_string(original.version)}};
  const auto train = ds.split(Split::kTrain);
  if (a.editor.empty()) {
    if (a.single_view) fail(ErrorCode::kUsage, "--single-view needs --editor");
    ContextSession session = ContextSession::load(a.context, train_cameras(ds));
    if (session.edited().empty()) fail(ErrorCode::kData, a.context + ": no edited views imported yet");
    const SelectionParams& sel = session.selection();
    auto views = edited_train_views(session);
    TrainResult r = run_finetune(&field, original, sel.empty() ? nullptr : &sel, views, cfg, a.epochs, hooks);
    rec.push_back({"iterations", std::to_string(r.iterations_run)});
    rec.push_back({"edited_views", std::to_string(views.size())});
    std::printf("finetune %d iterations over %zu edited views in %.1fs\n", r.iterations_run, views.size(),
                r.elapsed_ms / 1000.0);
  } else {
    const double degrees = parse_hue_editor(a.editor);
    if (a.sel.empty()) fail(ErrorCode::kUsage, "--editor needs --sel");
    const SelectionParams sel = load_selection(a.sel);
    auto reference = std::make_shared<const TriPlaneField<float>>(original);
    std::vector<Camera> cams = train_cameras(ds);
    ViewEditor editor = reference_hue_editor(reference, cams, sel, degrees, a.samples, g.workers);
    const int pixels = cams[0].width() * cams[0].height();
    ProtocolReport report;
    if (a.single_view) {
      std::vector<Vec3> pos;
      for (const auto& c : cams) pos.push_back(c.position());
      const int cam = pick_context_cameras(pos, 0, g.seed, {})[0];
      const int budget = a.budget > 0 ? a.budget : protocol_iteration_budget(a.epochs, pixels, a.batch);
      report = run_single_view_baseline(&field, original, cams[cam], cam, sel, editor, cfg, budget, hooks);
      rec.push_back({"mode", "single_view"});
      rec.push_back({"budget", std::to_string(budget)});
    } else {
      if (a.context.empty()) fail(ErrorCode::kUsage, "--editor needs --context for the session state");
      ContextSettings s;
      s.epochs = a.epochs;
      s.seed = g.seed;
      s.samples_per_ray = a.samples;
      s.workers = g.workers;
      ContextSession session(cams, sel, s, a.nonce ? a.nonce : fresh_nonce());
      report = run_iterative_protocol(&field, original, &session, editor, cfg, a.round_epochs, hooks);
      session.save(a.context);
      rec.push_back({"mode", "iterative"});
    }
    std::string ids;
    for (int c : report.edited_cameras) ids += (ids.empty() ? "" : " ") + train[c]->id;
    rec.push_back({"edited_views", std::to_string(report.edited_cameras.size())});
    rec.push_back({"edited_frames", ids});
    rec.push_back({"iterations", std::to_string(report.iterations)});
    std::printf("%s: %zu edited views, %d iterations in %.1fs\n", a.single_view ? "single-view" : "protocol",
                report.edited_cameras.size(), report.iterations, report.elapsed_ms / 1000.0);
    // Novel-view error against the same editor applied to holdout cameras.
    std::vector<Camera> holdout;
    std::vector<std::string> holdout_ids;
    for (const Frame* f : ds.split(Split::kHoldout)) {
      holdout.push_back(f->camera);
      holdout_ids.push_back(f->id);
    }
    if (!holdout.empty()) {
      ViewEditor target = reference_hue_editor(reference, holdout, sel, degrees, a.samples, g.workers);
      RenderOptions opt;
      opt.samples_per_ray = a.samples;
      opt.workers = g.workers;
      double sum = 0;
      for (size_t i = 0; i < holdout.size(); ++i) {
        const double e = mse(render_view(holdout[i], field, opt).rgb, target(static_cast<int>(i)).rgb);
        std::printf("novel %s mse %.6g\n", holdout_ids[i].c_str(), e);
        rec.push_back({"novel_mse." + holdout_ids[i], format_number(e)});
        sum += e;
      }
      std::printf("novel mean mse %.6g\n", sum / holdout.size());
      rec.push_back({"novel_mse_mean", format_number(sum / holdout.size())});
    }
  }
  ensure_parent(a.out);
  save_checkpoint(a.out, field);
  rec.push_back({"field_version_out", std::to_string(field.version)});
  write_record(g, cmd, a.out, rec);
}

// ---------------------------------------------------------------- layers

struct LayersArgs {
  std::vector<std::string> inputs;
  std::string stack;
  std::string id;
  std::vector<std::string> order;
  std::string out;
};

void print_layers(const EditStack& stack) {
  for (const auto& t : stack.tokens()) {
    std::printf("%s\t%s\t%s\t%zu bytes\t%s\n", t.id.c_str(), std::string(token_kind_name(t.kind)).c_str(),
                t.enabled ? "on" : "off", serialize_token(t).size(), t.label.c_str());
  }
}

// ---------------------------------------------------------------- serve

struct ServeArgs {
  std::string ckpt;
  std::string data;
  std::string host = "127.0.0.1";
  int port = 8080;
  int samples = 128;
  uint64_t nonce = 0;
  std::string cors = "*";
};

// ---------------------------------------------------------------- import

struct ImportArgs {
  std::string transforms;
  std::string out;
  std::vector<double> bounds_min{-1, -1, -1};
  std::vector<double> bounds_max{1, 1, 1};
  double near = 2.0;
  double far = 6.0;
  int holdout_every = 8;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"triedit: tri-plane radiance field editing"};
  app.set_version_flag("--version", std::string(TRIEDIT_VERSION));
  app.require_subcommand(1);
  app.set_config("--config", "", "key = value config file; command-line flags win");
  Globals g;
  app.add_option("--workers", g.workers, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", g.seed, "Seed for initialization, sampling and camera picks");
  app.add_flag("--quiet", g.quiet, "No progress output");
  app.add_option("--record", g.record, "Reproducibility record path (default <out>.run.txt)");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate an analytic oracle dataset");
  c_synth->add_option("--spec", synth.spec, "Scene spec (default: two-object scene)")->check(CLI::ExistingFile);
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->callback([&] { run_synth(g, *c_synth, synth); });

  PretrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain", "Train the field on all posed views");
  c_pre->add_option("--data", pre.data, "Dataset directory or manifest")->required();
  c_pre->add_option("--out", pre.out, "Output checkpoint")->required();
  c_pre->add_option("--iters", pre.iters, "Iterations")->capture_default_str();
  c_pre->add_option("--rays", pre.rays, "Rays per batch")->capture_default_str();
  c_pre->add_option("--lr", pre.lr, "MLP learning rate")->capture_default_str();
  c_pre->add_option("--plane-lr", pre.plane_lr, "Plane learning rate")->capture_default_str();
  c_pre->add_option("--l1", pre.l1, "L1 weight on planes")->capture_default_str();
  c_pre->add_option("--tv", pre.tv, "TV weight on planes")->capture_default_str();
  c_pre->add_option("--feature-weight", pre.feature_weight, "Feature distillation weight")->capture_default_str();
  c_pre->add_option("--samples", pre.samples, "Samples per ray")->capture_default_str();
  c_pre->add_flag("--no-jitter", pre.no_jitter, "Bin midpoints instead of stratified jitter");
  c_pre->add_option("--metrics", pre.metrics, "NDJSON metrics output");
  c_pre->add_option("--publish-every", pre.publish_every, "Write <out>.it<N> snapshots every N iterations");
  auto* o_init = c_pre->add_option("--init", pre.init, "Continue from a checkpoint")->check(CLI::ExistingFile);
  for (auto* o : {c_pre->add_option("--resolution", pre.resolution, "Plane resolution R")->capture_default_str(),
                  c_pre->add_option("--features", pre.features, "Plane features F")->capture_default_str(),
                  c_pre->add_option("--combine", pre.combine, "add or concat")->capture_default_str(),
                  c_pre->add_option("--geom-hidden", pre.geom_hidden, "Geometry MLP width")->capture_default_str(),
                  c_pre->add_option("--geo-features", pre.geo_features, "Geometry features G")->capture_default_str(),
                  c_pre->add_option("--color-hidden", pre.color_hidden, "Color MLP width")->capture_default_str(),
                  c_pre->add_option("--sem-dim", pre.sem_dim, "D_sem (default: dataset feature_dim)")}) {
    o->excludes(o_init);
  }
  c_pre->callback([&] { run_pretrain_cmd(g, *c_pre, pre); });

  RenderArgs ren;
  auto* c_ren = app.add_subcommand("render", "Render a view, a camera file or a whole split");
  c_ren->add_option("--ckpt", ren.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_ren->add_option("--data", ren.data, "Dataset directory or manifest");
  auto* o_frame = c_ren->add_option("--frame", ren.frame, "Frame id from the manifest");
  auto* o_cam = c_ren->add_option("--camera", ren.camera, "Camera file")->check(CLI::ExistingFile);
  auto* o_split = c_ren->add_option("--split", ren.split, "Render a whole split (train|holdout) with a PSNR report");
  o_frame->excludes(o_cam)->excludes(o_split);
  o_cam->excludes(o_split);
  c_ren->add_option("--out", ren.out, "Output PNG");
  c_ren->add_option("--out-dir", ren.out_dir, "Output directory for --split");
  c_ren->add_option("--depth", ren.depth, "16-bit depth PNG output");
  c_ren->add_option("--mask", ren.mask, "Projected selection mask output (needs --sel)");
  c_ren->add_option("--alpha", ren.alpha, "Accumulated opacity output");
  c_ren->add_option("--layers", ren.layers, "Token or stack files, applied in order");
  c_ren->add_option("--sel", ren.sel, "Selection sidecar")->check(CLI::ExistingFile);
  c_ren->add_option("--deletion", ren.deletion, "off | selected | unselected")->capture_default_str();
  c_ren->add_option("--samples", ren.samples, "Samples per ray")->capture_default_str();
  c_ren->callback([&] { run_render(g, *c_ren, ren); });

  SelectArgs sel;
  auto* c_sel = app.add_subcommand("select", "Select an object from a 2D patch");
  c_sel->add_option("--ckpt", sel.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_sel->add_option("--data", sel.data, "Dataset directory or manifest")->required();
  c_sel->add_option("--frame", sel.frame, "Frame id")->required();
  auto* o_rect = c_sel->add_option("--rect", sel.rect, "Patch rectangle x,y,w,h");
  auto* o_bitmap = c_sel->add_option("--bitmap", sel.bitmap, "Patch brush bitmap PNG")->check(CLI::ExistingFile);
  o_rect->excludes(o_bitmap);
  c_sel->add_option("--thr", sel.thr, "Squared distance threshold (default: calibrated)");
  c_sel->add_option("--out", sel.out, "Selection sidecar output")->required();
  c_sel->add_option("--mask-out", sel.mask_out, "Projected mask PNG for the frame");
  c_sel->add_option("--probes", sel.probes, "Calibration probe count")->capture_default_str();
  c_sel->add_option("--samples", sel.samples, "Samples per ray")->capture_default_str();
  c_sel->callback([&] {
    if (sel.rect.empty() == sel.bitmap.empty()) fail(ErrorCode::kUsage, "give exactly one of --rect or --bitmap");
    run_select(g, *c_sel, sel);
  });

  ContextArgs ctx;
  auto* c_ctx = app.add_subcommand("context", "2x2 context mosaic round trip");
  c_ctx->require_subcommand(1);
  auto* c_exp = c_ctx->add_subcommand("export", "Write the current epoch's mosaic");
  c_exp->add_option("--ckpt", ctx.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_exp->add_option("--data", ctx.data, "Dataset directory or manifest")->required();
  c_exp->add_option("--sel", ctx.sel, "Selection sidecar (starts a new session)");
  c_exp->add_option("--session", ctx.session, "Session state directory")->required();
  c_exp->add_option("--out", ctx.out, "Mosaic output directory")->required();
  c_exp->add_option("--epochs", ctx.epochs, "Protocol epochs for a new session")->capture_default_str();
  c_exp->add_option("--nonce", ctx.nonce, "Session nonce for a new session (default random)");
  c_exp->add_option("--samples", ctx.samples, "Samples per ray")->capture_default_str();
  c_exp->callback([&] { run_context_export(g, *c_exp, ctx); });
  auto* c_imp = c_ctx->add_subcommand("import", "Store an edited mosaic");
  c_imp->add_option("--ckpt", ctx.ckpt, "Checkpoint the mosaic was exported from")->required();
  c_imp->add_option("--data", ctx.data, "Dataset directory or manifest")->required();
  c_imp->add_option("--session", ctx.session, "Session state directory")->required();
  c_imp->add_option("--context", ctx.context, "Exported mosaic directory (context.txt)")->required();
  c_imp->add_option("--edited", ctx.edited, "Edited mosaic PNG (default: <context>/mosaic_rgb.png)");
  c_imp->add_option("--depth", ctx.depth, "Edited 16-bit depth mosaic");
  c_imp->callback([&] { run_context_import(g, *c_imp, ctx); });

  EditArgs ed;
  auto* c_ed = app.add_subcommand("edit", "Train a residual edit token on the edited views");
  c_ed->add_option("--ckpt", ed.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_ed->add_option("--data", ed.data, "Dataset directory or manifest")->required();
  c_ed->add_option("--context", ed.context, "Context session directory")->required();
  c_ed->add_option("--sel", ed.sel, "Selection sidecar (default: the session's)");
  c_ed->add_option("--kind", ed.kind, "feature | color")->capture_default_str();
  c_ed->add_option("--layers", ed.layers, "Existing tokens applied before the new one");
  c_ed->add_option("--out", ed.out, "Token output")->required();
  c_ed->add_option("--label", ed.label, "Token label");
  c_ed->add_option("--id", ed.id, "Layer id (default: the --out file stem)");
  c_ed->add_option("--iters", ed.iters, "Iterations")->capture_default_str();
  c_ed->add_option("--batch", ed.batch, "Pixels per batch")->capture_default_str();
  c_ed->add_option("--lr", ed.lr, "Learning rate")->capture_default_str();
  c_ed->add_option("--samples", ed.samples, "Samples per ray")->capture_default_str();
  c_ed->add_option("--metrics", ed.metrics, "NDJSON metrics output");
  c_ed->callback([&] { run_edit(g, *c_ed, ed); });

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune the whole field on edited views");
  c_ft->add_option("--ckpt", ft.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_ft->add_option("--data", ft.data, "Dataset directory or manifest")->required();
  c_ft->add_option("--context", ft.context, "Context session directory");
  c_ft->add_option("--out", ft.out, "Output checkpoint")->required();
  c_ft->add_option("--epochs", ft.epochs,
                   "Passes over the edited views; with --editor, protocol epochs")
      ->capture_default_str();
  c_ft->add_option("--round-epochs", ft.round_epochs, "With --editor: passes per protocol round")
      ->capture_default_str();
  c_ft->add_option("--batch", ft.batch, "Rays per batch")->capture_default_str();
  c_ft->add_option("--lr", ft.lr, "Learning rate (all parameters)")->capture_default_str();
  c_ft->add_option("--l1", ft.l1, "L1 weight")->capture_default_str();
  c_ft->add_option("--tv", ft.tv, "TV weight")->capture_default_str();
  c_ft->add_option("--lambda3", ft.lambda3, "Depth weight")->capture_default_str();
  c_ft->add_option("--lambda4", ft.lambda4, "Density preservation weight")->capture_default_str();
  c_ft->add_option("--editor", ft.editor, "Scripted editor (hue:<degrees>) driving the whole protocol");
  c_ft->add_option("--sel", ft.sel, "Selection sidecar for --editor");
  c_ft->add_flag("--single-view", ft.single_view, "Ablation: edit one view only, same iteration budget");
  c_ft->add_option("--budget", ft.budget, "Iteration budget for --single-view (default: the protocol's)");
  c_ft->add_option("--nonce", ft.nonce, "Session nonce (default random)");
  c_ft->add_option("--samples", ft.samples, "Samples per ray")->capture_default_str();
  c_ft->add_option("--metrics", ft.metrics, "NDJSON metrics output");
  c_ft->callback([&] { run_finetune_cmd(g, *c_ft, ft); });

  LayersArgs lay;
  auto* c_lay = app.add_subcommand("layers", "Inspect and manage edit stacks");
  c_lay->require_subcommand(1);
  auto* c_list = c_lay->add_subcommand("list", "Print the tokens of stacks or token files");
  c_list->add_option("inputs", lay.inputs, "Token or stack files")->required()->check(CLI::ExistingFile);
  c_list->callback([&] { print_layers(load_stacks(lay.inputs)); });
  auto* c_tog = c_lay->add_subcommand("toggle", "Flip a token's enabled flag");
  c_tog->add_option("--stack", lay.stack, "Stack file")->required()->check(CLI::ExistingFile);
  c_tog->add_option("--id", lay.id, "Token id")->required();
  c_tog->add_option("--out", lay.out, "Output stack (default: in place)");
  c_tog->callback([&] {
    EditStack s = load_layers(lay.stack);
    s.toggle(lay.id);
    save_stack(lay.out.empty() ? lay.stack : lay.out, s);
    print_layers(s);
  });
  auto* c_rm = c_lay->add_subcommand("remove", "Drop a token");
  c_rm->add_option("--stack", lay.stack, "Stack file")->required()->check(CLI::ExistingFile);
  c_rm->add_option("--id", lay.id, "Token id")->required();
  c_rm->add_option("--out", lay.out, "Output stack (default: in place)");
  c_rm->callback([&] {
    EditStack s = load_layers(lay.stack);
    s.remove(lay.id);
    save_stack(lay.out.empty() ? lay.stack : lay.out, s);
    print_layers(s);
  });
  auto* c_reo = c_lay->add_subcommand("reorder", "Set the application order");
  c_reo->add_option("--stack", lay.stack, "Stack file")->required()->check(CLI::ExistingFile);
  c_reo->add_option("--order", lay.order, "Every token id, in the new order (comma separated)")->required()->delimiter(',');
  c_reo->add_option("--out", lay.out, "Output stack (default: in place)");
  c_reo->callback([&] {
    EditStack s = load_layers(lay.stack);
    s.reorder(lay.order);
    save_stack(lay.out.empty() ? lay.stack : lay.out, s);
    print_layers(s);
  });
  auto* c_merge = c_lay->add_subcommand("merge", "Concatenate tokens and stacks into one stack");
  c_merge->add_option("inputs", lay.inputs, "Token or stack files")->required()->check(CLI::ExistingFile);
  c_merge->add_option("--out", lay.out, "Output stack")->required();
  c_merge->callback([&] {
    EditStack s = load_stacks(lay.inputs);
    ensure_parent(lay.out);
    save_stack(lay.out, s);
    print_layers(s);
  });

  ServeArgs srv;
  auto* c_srv = app.add_subcommand("serve", "Run the HTTP editing service");
  c_srv->add_option("--ckpt", srv.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_srv->add_option("--data", srv.data, "Dataset directory or manifest")->required();
  c_srv->add_option("--host", srv.host, "Bind address")->capture_default_str();
  c_srv->add_option("--port", srv.port, "Port (0 = any free port)")->capture_default_str();
  c_srv->add_option("--samples", srv.samples, "Samples per ray")->capture_default_str();
  c_srv->add_option("--nonce", srv.nonce, "Context session nonce (default random)");
  c_srv->add_option("--cors-origin", srv.cors, "Access-Control-Allow-Origin value")->capture_default_str();
  c_srv->callback([&] {
    ServiceOptions o;
    o.manifest = manifest_path(srv.data);
    o.checkpoint = srv.ckpt;
    o.samples_per_ray = srv.samples;
    o.workers = g.workers;
    o.seed = g.seed;
    o.nonce = srv.nonce;
    o.cors_origin = srv.cors;
    EditService service(o);
    const int port = service.bind(srv.host, srv.port);
    std::printf("listening on http://%s:%d\n", srv.host.c_str(), port);
    std::fflush(stdout);
    service.serve();
  });

  ImportArgs imp;
  auto* c_imp_t = app.add_subcommand("import-transforms", "Convert a transforms.json capture into a manifest");
  c_imp_t->add_option("--transforms", imp.transforms, "transforms.json")->required()->check(CLI::ExistingFile);
  c_imp_t->add_option("--out", imp.out, "Manifest output")->required();
  c_imp_t->add_option("--bounds-min", imp.bounds_min, "Scene box minimum")->expected(3)->capture_default_str();
  c_imp_t->add_option("--bounds-max", imp.bounds_max, "Scene box maximum")->expected(3)->capture_default_str();
  c_imp_t->add_option("--near", imp.near, "Near plane")->capture_default_str();
  c_imp_t->add_option("--far", imp.far, "Far plane")->capture_default_str();
  c_imp_t->add_option("--holdout-every", imp.holdout_every, "Every n-th frame is holdout (0 = none)")
      ->capture_default_str();
  c_imp_t->callback([&] {
    TransformsOptions o;
    o.bounds.min = Vec3(imp.bounds_min[0], imp.bounds_min[1], imp.bounds_min[2]);
    o.bounds.max = Vec3(imp.bounds_max[0], imp.bounds_max[1], imp.bounds_max[2]);
    o.near = imp.near;
    o.far = imp.far;
    o.holdout_every = imp.holdout_every;
    std::printf("wrote %s\n", import_transforms(imp.transforms, imp.out, o).c_str());
    write_record(g, *c_imp_t, imp.out, {{"transforms", imp.transforms}});
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", std::string(error_code_name(e.code())).c_str(), e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
