// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/context.hpp"

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "triedit/keyvalue.hpp"
#include "triedit/renderer.hpp"
#include "triedit/scene_io.hpp"

namespace triedit {
namespace fs = std::filesystem;
namespace {

// Index of the candidate farthest (in min distance) from `chosen`; lowest
// index wins ties.
int farthest(std::span<const Vec3> positions, const std::vector<int>& candidates, const std::vector<int>& chosen) {
  int best = -1;
  double best_d = -1;
  for (int c : candidates) {
    double d = std::numeric_limits<double>::infinity();
    for (int k : chosen) d = std::min(d, (positions[c] - positions[k]).squaredNorm());
    if (d > best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::string edited_name(const EditedView& v) {
  return "edited_e" + std::to_string(v.epoch) + "_c" + std::to_string(v.camera) + ".png";
}

}  // namespace

std::string_view cell_role_name(CellRole role) {
  return role == CellRole::kGuidanceFixed ? "guidance_fixed" : "editable_masked";
}

Image tile_mosaic(std::span<const Image> tiles) {
  if (tiles.size() != 4) fail(ErrorCode::kUsage, "mosaic: exactly four tiles required");
  const int w = tiles[0].width, h = tiles[0].height, c = tiles[0].channels;
  for (const auto& t : tiles) {
    if (!t.same_shape(tiles[0])) fail(ErrorCode::kUsage, "mosaic: tiles differ in shape");
  }
  Image m(2 * w, 2 * h, c);
  for (int k = 0; k < 4; ++k) {
    const int ox = (k % 2) * w, oy = (k / 2) * h;
    for (int y = 0; y < h; ++y) {
      std::copy_n(&tiles[k].pixels[tiles[k].index(0, y)], static_cast<size_t>(w) * c, &m.pixels[m.index(ox, oy + y)]);
    }
  }
  return m;
}

std::array<Image, 4> slice_mosaic(const Image& mosaic, int cell_width, int cell_height) {
  if (mosaic.width != 2 * cell_width || mosaic.height != 2 * cell_height) {
    fail(ErrorCode::kData, "mosaic is " + std::to_string(mosaic.width) + "x" + std::to_string(mosaic.height) +
                               ", expected " + std::to_string(2 * cell_width) + "x" + std::to_string(2 * cell_height));
  }
  std::array<Image, 4> tiles;
  const int c = mosaic.channels;
  for (int k = 0; k < 4; ++k) {
    tiles[k] = Image(cell_width, cell_height, c);
    const int ox = (k % 2) * cell_width, oy = (k / 2) * cell_height;
    for (int y = 0; y < cell_height; ++y) {
      std::copy_n(&mosaic.pixels[mosaic.index(ox, oy + y)], static_cast<size_t>(cell_width) * c,
                  &tiles[k].pixels[tiles[k].index(0, y)]);
    }
  }
  return tiles;
}

Mosaic mosaic_of(const ContextGrid& grid) {
  std::array<Image, 4> rgb, mask, depth;
  for (int k = 0; k < 4; ++k) {
    rgb[k] = grid.cells[k].rgb;
    mask[k] = grid.cells[k].mask;
    depth[k] = grid.cells[k].depth;
  }
  return {tile_mosaic(rgb), tile_mosaic(mask), tile_mosaic(depth)};
}

std::array<int, 4> pick_context_cameras(std::span<const Vec3> positions, int epoch, uint64_t seed,
                                        std::span<const int> history) {
  const int n = static_cast<int>(positions.size());
  std::vector<int> chosen;
  std::vector<int> candidates;
  std::array<int, 4> out{};
  if (epoch == 0) {
    if (n < 4) fail(ErrorCode::kState, "context: at least 4 cameras required");
    Rng rng(seed);
    chosen.push_back(static_cast<int>(rng.below(n)));
    for (int i = 0; i < n; ++i) {
      if (i != chosen[0]) candidates.push_back(i);
    }
    while (chosen.size() < 4) {
      const int next = farthest(positions, candidates, chosen);
      chosen.push_back(next);
      candidates.erase(std::find(candidates.begin(), candidates.end(), next));
    }
    std::copy(chosen.begin(), chosen.end(), out.begin());
    return out;
  }
  if (history.size() < 2) fail(ErrorCode::kState, "context: epoch >= 1 needs two edited views");
  std::vector<int> edited(history.begin(), history.end());
  for (int i = 0; i < n; ++i) {
    if (std::find(edited.begin(), edited.end(), i) == edited.end()) candidates.push_back(i);
  }
  if (candidates.size() < 2) fail(ErrorCode::kState, "context: dataset exhausted, fewer than two unedited cameras");
  out[0] = history[history.size() - 2];
  out[1] = history[history.size() - 1];
  for (int k = 2; k < 4; ++k) {
    out[k] = farthest(positions, candidates, edited);
    edited.push_back(out[k]);
    candidates.erase(std::find(candidates.begin(), candidates.end(), out[k]));
  }
  return out;
}

ContextSession::ContextSession(std::vector<Camera> cameras, SelectionParams selection, ContextSettings settings,
                               uint64_t session_nonce)
    : cameras_(std::move(cameras)), selection_(std::move(selection)), settings_(settings), nonce_(session_nonce) {
  if (settings_.epochs < 1) fail(ErrorCode::kUsage, "context: epochs must be >= 1");
  if (cameras_.size() < 4) fail(ErrorCode::kState, "context: at least 4 cameras required");
  for (size_t i = 1; i < cameras_.size(); ++i) {
    if (cameras_[i].width() != cameras_[0].width() || cameras_[i].height() != cameras_[0].height()) {
      fail(ErrorCode::kData, "context: all cameras must share one image size");
    }
  }
}

std::vector<int> ContextSession::history() const {
  std::vector<int> h;
  for (const auto& e : edited_) h.push_back(e.camera);
  return h;
}

std::string ContextSession::provenance(uint64_t field_version) const {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "ctx-%016" PRIx64 "-e%d-v%" PRIu64, nonce_, epoch_, field_version);
  return buf;
}

ContextGrid ContextSession::compose(const TriPlaneField<float>& field) const {
  if (done()) fail(ErrorCode::kState, "context: protocol finished after " + std::to_string(epoch_) + " epochs");
  std::vector<Vec3> pos;
  for (const auto& c : cameras_) pos.push_back(c.position());
  const auto hist = history();
  const auto picks = pick_context_cameras(pos, epoch_, settings_.seed, hist);
  ContextGrid grid;
  grid.epoch = epoch_;
  grid.provenance = provenance(field.version);
  grid.cell_width = cameras_[0].width();
  grid.cell_height = cameras_[0].height();
  RenderOptions opt;
  opt.samples_per_ray = settings_.samples_per_ray;
  opt.workers = settings_.workers;
  opt.selection = selection_;
  opt.selection_weight = !selection_.empty();
  for (int k = 0; k < 4; ++k) {
    ContextCell& cell = grid.cells[k];
    cell.camera = picks[k];
    cell.role = epoch_ > 0 && k < 2 ? CellRole::kGuidanceFixed : CellRole::kEditableMasked;
    RenderOutput r = render_view(cameras_[cell.camera], field, opt);
    cell.depth = std::move(r.depth);
    cell.mask = Image(grid.cell_width, grid.cell_height, 1);
    if (cell.role == CellRole::kGuidanceFixed) {
      for (auto it = edited_.rbegin(); it != edited_.rend(); ++it) {
        if (it->camera == cell.camera) {
          cell.rgb = it->rgb;
          break;
        }
      }
    } else {
      cell.rgb = std::move(r.rgb);
      if (!selection_.empty()) {
        for (size_t i = 0; i < cell.mask.pixels.size(); ++i) cell.mask.pixels[i] = r.selected.pixels[i] >= 0.5f;
      }
    }
  }
  return grid;
}

void ContextSession::import(const Image& edited_mosaic, const std::string& prov, uint64_t field_version,
                            const Image* edited_depth) {
  if (done()) fail(ErrorCode::kState, "context: protocol already finished");
  const std::string expected = provenance(field_version);
  if (prov != expected) {
    fail(ErrorCode::kStale, "context: mosaic provenance '" + prov + "' does not match the live session '" + expected +
                                "'; export again");
  }
  if (edited_mosaic.channels != 3) fail(ErrorCode::kData, "context: edited mosaic must be RGB");
  auto tiles = slice_mosaic(edited_mosaic, cameras_[0].width(), cameras_[0].height());
  std::array<Image, 4> depth_tiles;
  if (edited_depth) {
    if (edited_depth->channels != 1) fail(ErrorCode::kData, "context: edited depth must be single channel");
    depth_tiles = slice_mosaic(*edited_depth, cameras_[0].width(), cameras_[0].height());
  }
  std::vector<Vec3> pos;
  for (const auto& c : cameras_) pos.push_back(c.position());
  const auto hist = history();
  const auto picks = pick_context_cameras(pos, epoch_, settings_.seed, hist);
  for (int k = epoch_ > 0 ? 2 : 0; k < 4; ++k) edited_.push_back({picks[k], epoch_, std::move(tiles[k]), std::move(depth_tiles[k])});
  ++epoch_;
}

void ContextSession::save(const std::string& dir) const {
  fs::create_directories(dir);
  KeyValueDocument doc;
  doc.header.set("nonce", std::to_string(nonce_));
  doc.header.set("epoch", std::to_string(epoch_));
  doc.header.set("epochs", std::to_string(settings_.epochs));
  doc.header.set("seed", std::to_string(settings_.seed));
  doc.header.set("samples_per_ray", std::to_string(settings_.samples_per_ray));
  doc.header.set("f_bar", format_numbers(std::vector<double>(selection_.f_bar.begin(), selection_.f_bar.end())));
  doc.header.set("thr", format_number(selection_.thr));
  doc.header.set("selection_version", std::to_string(selection_.field_version));
  for (const auto& e : edited_) {
    KeyValueBlock b("edited", "");
    b.set("camera", std::to_string(e.camera));
    b.set("epoch", std::to_string(e.epoch));
    b.set("image", edited_name(e));
    write_png8((fs::path(dir) / edited_name(e)).string(), e.rgb);
    if (!e.depth.empty()) {
      const Camera& cam = cameras_[e.camera];
      const std::string depth_name = "depth_" + edited_name(e);
      b.set("depth", depth_name);
      write_png16((fs::path(dir) / depth_name).string(), encode_depth(e.depth, cam.near, cam.far));
    }
    doc.sections.push_back(std::move(b));
  }
  write_file_atomic((fs::path(dir) / "session.txt").string(), format_key_value(doc));
}

ContextSession ContextSession::load(const std::string& dir, std::vector<Camera> cameras) {
  KeyValueDocument doc = read_key_value_file((fs::path(dir) / "session.txt").string());
  const auto& h = doc.header;
  ContextSettings s;
  s.epochs = static_cast<int>(h.get_int("epochs"));
  s.seed = static_cast<uint64_t>(h.get_int("seed"));
  s.samples_per_ray = static_cast<int>(h.get_int("samples_per_ray", s.samples_per_ray));
  SelectionParams sel;
  if (h.has("f_bar") && !h.get_string("f_bar").empty()) {
    for (double v : h.get_doubles("f_bar")) sel.f_bar.push_back(static_cast<float>(v));
  }
  sel.thr = static_cast<float>(h.get_double("thr", 0.0));
  sel.field_version = static_cast<uint64_t>(h.get_int("selection_version", 0));
  ContextSession session(std::move(cameras), sel, s, std::stoull(h.get_string("nonce")));
  session.epoch_ = static_cast<int>(h.get_int("epoch"));
  for (const KeyValueBlock* b : doc.sections_named("edited")) {
    EditedView e;
    e.camera = static_cast<int>(b->get_int("camera"));
    e.epoch = static_cast<int>(b->get_int("epoch"));
    if (e.camera < 0 || e.camera >= static_cast<int>(session.cameras_.size())) {
      fail(ErrorCode::kData, dir + ": edited view refers to unknown camera " + std::to_string(e.camera));
    }
    e.rgb = read_png8((fs::path(dir) / b->get_string("image")).string());
    if (b->has("depth")) {
      const Camera& cam = session.cameras_[e.camera];
      e.depth = decode_depth(read_png16((fs::path(dir) / b->get_string("depth")).string()), cam.near, cam.far);
    }
    session.edited_.push_back(std::move(e));
  }
  return session;
}

std::vector<TrainView> edited_train_views(const ContextSession& session) {
  std::vector<TrainView> views;
  for (const auto& e : session.edited()) {
    TrainView v;
    v.id = "edited_e" + std::to_string(e.epoch) + "_c" + std::to_string(e.camera);
    v.camera = session.cameras()[e.camera];
    v.rgb = e.rgb;
    v.edited_depth = e.depth;
    views.push_back(std::move(v));
  }
  return views;
}

void export_context(const ContextGrid& grid, const std::vector<Camera>& cameras, const std::string& dir) {
  fs::create_directories(dir);
  Mosaic m = mosaic_of(grid);
  double near = std::numeric_limits<double>::infinity(), far = 0;
  for (const auto& cell : grid.cells) {
    near = std::min(near, cameras[cell.camera].near);
    far = std::max(far, cameras[cell.camera].far);
  }
  write_png8((fs::path(dir) / "mosaic_rgb.png").string(), m.rgb);
  write_png8((fs::path(dir) / "mosaic_mask.png").string(), m.mask);
  write_png16((fs::path(dir) / "mosaic_depth.png").string(), encode_depth(m.depth, near, far));
  KeyValueDocument doc;
  doc.header.set("provenance", grid.provenance);
  doc.header.set("epoch", std::to_string(grid.epoch));
  doc.header.set("cell_width", std::to_string(grid.cell_width));
  doc.header.set("cell_height", std::to_string(grid.cell_height));
  doc.header.set("near", format_number(near));
  doc.header.set("far", format_number(far));
  doc.header.set("rgb", "mosaic_rgb.png");
  doc.header.set("mask", "mosaic_mask.png");
  doc.header.set("depth", "mosaic_depth.png");
  for (int k = 0; k < 4; ++k) {
    doc.header.set("cell" + std::to_string(k) + ".camera", std::to_string(grid.cells[k].camera));
    doc.header.set("cell" + std::to_string(k) + ".role", std::string(cell_role_name(grid.cells[k].role)));
  }
  write_file_atomic((fs::path(dir) / "context.txt").string(), format_key_value(doc));
}

Image hue_rotate(const Image& rgb, const Image& mask, double degrees) {
  if (rgb.channels != 3) fail(ErrorCode::kUsage, "hue_rotate: rgb image required");
  if (mask.width != rgb.width || mask.height != rgb.height || mask.channels != 1) {
    fail(ErrorCode::kUsage, "hue_rotate: mask must be single channel and match the image");
  }
  // Rotation about (1,1,1)/sqrt(3).
  const double a = degrees * M_PI / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  const double k = (1.0 - c) / 3.0, r = std::sqrt(1.0 / 3.0) * s;
  const double m[3][3] = {{c + k, k - r, k + r}, {k + r, c + k, k - r}, {k - r, k + r, c + k}};
  Image out = rgb;
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      if (mask.at(x, y) <= 0.5f) continue;
      for (int i = 0; i < 3; ++i) {
        double v = 0;
        for (int j = 0; j < 3; ++j) v += m[i][j] * rgb.at(x, y, j);
        out.at(x, y, i) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

ViewEditor reference_hue_editor(std::shared_ptr<const TriPlaneField<float>> reference, std::vector<Camera> cameras,
                                SelectionParams selection, double degrees, int samples_per_ray, int workers) {
  return [=](int camera) {
    if (camera < 0 || camera >= static_cast<int>(cameras.size())) fail(ErrorCode::kUsage, "editor: bad camera index");
    RenderOptions opt;
    opt.samples_per_ray = samples_per_ray;
    opt.workers = workers;
    opt.selection = selection;
    opt.selection_weight = true;
    RenderOutput r = render_view(cameras[camera], *reference, opt);
    Image mask(r.selected.width, r.selected.height, 1);
    for (size_t i = 0; i < mask.pixels.size(); ++i) mask.pixels[i] = r.selected.pixels[i] >= 0.5f;
    return EditedImage{hue_rotate(r.rgb, mask, degrees), std::move(r.depth)};
  };
}

ProtocolReport run_iterative_protocol(TriPlaneField<float>* field, const TriPlaneField<float>& original,
                                      ContextSession* session, const ViewEditor& editor, const TrainConfig& finetune,
                                      int round_epochs, const TrainHooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  ProtocolReport report;
  const SelectionParams& sel = session->selection();
  while (!session->done()) {
    ContextGrid grid = session->compose(*field);
    std::array<Image, 4> rgb, depth;
    for (int k = 0; k < 4; ++k) {
      const ContextCell& cell = grid.cells[k];
      if (cell.role == CellRole::kGuidanceFixed) {
        rgb[k] = cell.rgb;
        depth[k] = cell.depth;
        continue;
      }
      EditedImage e = editor(cell.camera);
      rgb[k] = std::move(e.rgb);
      depth[k] = e.depth.empty() ? cell.depth : std::move(e.depth);
      report.edited_cameras.push_back(cell.camera);
    }
    const Image depth_mosaic = tile_mosaic(depth);
    session->import(tile_mosaic(rgb), grid.provenance, field->version, &depth_mosaic);
    auto views = edited_train_views(*session);
    TrainResult r = run_finetune(field, original, sel.empty() ? nullptr : &sel, views, finetune, round_epochs, hooks);
    report.iterations += r.iterations_run;
    if (r.cancelled) break;
  }
  report.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

int protocol_iteration_budget(int epochs, int pixels_per_view, int batch) {
  if (epochs < 1 || pixels_per_view < 1 || batch < 1) fail(ErrorCode::kUsage, "budget: arguments must be positive");
  long long total = 0;
  for (int j = 0; j < epochs; ++j) {
    const long long pixels = static_cast<long long>(4 + 2 * j) * pixels_per_view;
    total += (pixels + batch - 1) / batch;
  }
  return static_cast<int>(total);
}

ProtocolReport run_single_view_baseline(TriPlaneField<float>* field, const TriPlaneField<float>& original,
                                        const Camera& camera, int camera_index, const SelectionParams& selection,
                                        const ViewEditor& editor, const TrainConfig& finetune, int budget_iterations,
                                        const TrainHooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  EditedImage e = editor(camera_index);
  TrainView v;
  v.id = "single_c" + std::to_string(camera_index);
  v.camera = camera;
  v.rgb = std::move(e.rgb);
  v.edited_depth = std::move(e.depth);
  const long long pixels = static_cast<long long>(camera.width()) * camera.height();
  const long long per_epoch = (pixels + finetune.rays_per_batch - 1) / finetune.rays_per_batch;
  const int epochs = static_cast<int>(std::max<long long>(1, (budget_iterations + per_epoch - 1) / per_epoch));
  std::vector<TrainView> views{std::move(v)};
  TrainResult r = run_finetune(field, original, selection.empty() ? nullptr : &selection, views, finetune, epochs, hooks);
  ProtocolReport report;
  report.edited_cameras = {camera_index};
  report.iterations = r.iterations_run;
  report.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

ContextSidecar read_context_sidecar(const std::string& path) {
  KeyValueDocument doc = read_key_value_file(path);
  const auto& h = doc.header;
  ContextSidecar s;
  s.provenance = h.get_string("provenance");
  s.epoch = static_cast<int>(h.get_int("epoch"));
  s.cell_width = static_cast<int>(h.get_int("cell_width"));
  s.cell_height = static_cast<int>(h.get_int("cell_height"));
  s.near = h.get_double("near");
  s.far = h.get_double("far");
  for (int k = 0; k < 4; ++k) {
    s.cameras[k] = static_cast<int>(h.get_int("cell" + std::to_string(k) + ".camera"));
    const std::string role = h.get_string("cell" + std::to_string(k) + ".role");
    s.roles[k] = role == "guidance_fixed" ? CellRole::kGuidanceFixed : CellRole::kEditableMasked;
  }
  return s;
}

}  // namespace triedit
