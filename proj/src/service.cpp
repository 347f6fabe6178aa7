// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/service.hpp"

#include <charconv>
#include <condition_variable>
#include <json.hpp>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <thread>

#include "triedit/context.hpp"
#include "triedit/renderer.hpp"
#include "triedit/scene_io.hpp"
#include "triedit/selection.hpp"
#include "triedit/train.hpp"

// After Eigen: the resolver headers pulled in here define a `_res` macro.
#include <httplib.h>

namespace triedit {
namespace {

using json = nlohmann::json;

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(std::span<const uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    for (int s = 18; s >= 0; s -= 6) out += kB64[(v >> s) & 63];
  }
  if (i < bytes.size()) {
    uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kB64[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text, const std::string& field) {
  std::array<int, 256> table;
  table.fill(-1);
  for (int i = 0; i < 64; ++i) table[static_cast<uint8_t>(kB64[i])] = i;
  std::vector<uint8_t> out;
  uint32_t acc = 0;
  int bits = 0;
  size_t pad = 0;
  for (char ch : text) {
    if (ch == '=') {
      ++pad;
      continue;
    }
    const int v = table[static_cast<uint8_t>(ch)];
    if (v < 0 || pad > 0) fail(ErrorCode::kUsage, "field '" + field + "' is not valid base64");
    acc = (acc << 6) | static_cast<uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<uint8_t>((acc >> bits) & 0xff));
    }
  }
  if (pad > 2) fail(ErrorCode::kUsage, "field '" + field + "' is not valid base64");
  return out;
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUsage:
    case ErrorCode::kData: return 422;
    case ErrorCode::kState:
    case ErrorCode::kConflict: return 409;
    case ErrorCode::kStale: return 410;
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kNumerical: return 500;
  }
  return 500;
}

HttpResponse json_response(int status, const json& body) {
  HttpResponse r;
  r.status = status;
  r.body = body.dump();
  return r;
}

HttpResponse error_response(ErrorCode code, const std::string& message) {
  return json_response(http_status(code), {{"error", {{"code", error_code_name(code)}, {"message", message}}}});
}

std::string png_b64(const Image& image) { return base64_encode(encode_png8(image)); }

/// Strict JSON object reader: unknown fields and wrong types are kUsage.
class Body {
 public:
  Body(const std::string& text, std::set<std::string> allowed) {
    if (text.empty()) {
      value_ = json::object();
    } else {
      try {
        value_ = json::parse(text);
      } catch (const json::parse_error& e) {
        fail(ErrorCode::kUsage, std::string("body is not valid JSON: ") + e.what());
      }
    }
    if (!value_.is_object()) fail(ErrorCode::kUsage, "body must be a JSON object");
    for (const auto& [key, _] : value_.items()) {
      if (!allowed.count(key)) fail(ErrorCode::kUsage, "unknown field '" + key + "'");
    }
  }
  explicit Body(json value) : value_(std::move(value)) {}

  bool has(const std::string& key) const { return value_.contains(key) && !value_[key].is_null(); }
  const json& raw(const std::string& key) const { return value_.at(key); }

  std::string str(const std::string& key) const {
    if (!has(key)) fail(ErrorCode::kUsage, "missing field '" + key + "'");
    if (!value_[key].is_string()) fail(ErrorCode::kUsage, "field '" + key + "' must be a string");
    return value_[key].get<std::string>();
  }
  std::string str(const std::string& key, const std::string& fallback) const { return has(key) ? str(key) : fallback; }
  double num(const std::string& key) const {
    if (!has(key)) fail(ErrorCode::kUsage, "missing field '" + key + "'");
    if (!value_[key].is_number()) fail(ErrorCode::kUsage, "field '" + key + "' must be a number");
    return value_[key].get<double>();
  }
  double num(const std::string& key, double fallback) const { return has(key) ? num(key) : fallback; }
  long long integer(const std::string& key, long long fallback) const {
    if (!has(key)) return fallback;
    if (!value_[key].is_number_integer()) fail(ErrorCode::kUsage, "field '" + key + "' must be an integer");
    return value_[key].get<long long>();
  }
  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    if (!value_[key].is_boolean()) fail(ErrorCode::kUsage, "field '" + key + "' must be a boolean");
    return value_[key].get<bool>();
  }
  std::vector<double> numbers(const std::string& key, size_t count) const {
    const json& v = value_.at(key);
    if (!v.is_array() || v.size() != count) {
      fail(ErrorCode::kUsage, "field '" + key + "' must be an array of " + std::to_string(count) + " numbers");
    }
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) fail(ErrorCode::kUsage, "field '" + key + "' must contain numbers only");
      out.push_back(e.get<double>());
    }
    return out;
  }

 private:
  json value_;
};

json loss_json(const LossBreakdown& l) {
  return {{"total", l.total},     {"photometric", l.photometric}, {"feature", l.feature}, {"l1", l.l1},
          {"tv", l.tv},           {"depth", l.depth},             {"density", l.density}};
}

DeletionMode parse_deletion(const std::string& s) {
  if (s == "off") return DeletionMode::kOff;
  if (s == "selected") return DeletionMode::kSelected;
  if (s == "unselected") return DeletionMode::kUnselected;
  fail(ErrorCode::kUsage, "deletion must be off, selected or unselected, got '" + s + "'");
}

struct Job {
  std::string id;
  std::string kind;
  std::string state = "queued";
  int iteration = 0;
  int total = 0;
  LossBreakdown loss;
  std::string error_code;
  std::string error_message;
  json result = json::object();
  std::atomic<bool> cancel{false};

  json to_json() const {
    json j = {{"id", id},
              {"kind", kind},
              {"state", state},
              {"progress", {{"iteration", iteration}, {"total", total}}},
              {"loss", loss_json(loss)},
              {"result", result}};
    if (!error_code.empty()) j["error"] = {{"code", error_code}, {"message", error_message}};
    return j;
  }
};

}  // namespace

struct EditService::State {
  ServiceOptions options;
  Dataset dataset;
  std::vector<TrainView> train;
  std::vector<Camera> context_cameras;
  std::vector<std::string> context_frames;
  uint64_t nonce = 0;

  std::mutex command;  // serializes mutations
  std::mutex mu;       // guards everything below
  std::condition_variable jobs_changed;
  std::map<uint64_t, std::shared_ptr<const TriPlaneField<float>>> snapshots;
  uint64_t active = 0;
  uint64_t next_version = 0;
  std::optional<SelectionParams> selection;
  ThresholdCalibration calibration;
  std::shared_ptr<const BakedMask> baked;
  EditStack stack;
  std::optional<ContextSession> context;
  double export_near = 0;
  double export_far = 0;
  std::map<std::string, std::shared_ptr<Job>> jobs;
  int job_counter = 0;
  std::thread worker;
  std::map<std::string, std::pair<std::string, HttpResponse>> replay;
  std::unique_ptr<httplib::Server> server;

  std::shared_ptr<const TriPlaneField<float>> field() {
    std::lock_guard lock(mu);
    return snapshots.at(active);
  }

  // Caller holds mu.
  uint64_t publish(TriPlaneField<float> field) {
    const uint64_t v = next_version++;
    field.version = v;
    snapshots[v] = std::make_shared<const TriPlaneField<float>>(std::move(field));
    active = v;
    while (static_cast<int>(snapshots.size()) > std::max(1, options.max_snapshots)) {
      auto it = snapshots.begin();
      if (it->first == active) ++it;
      snapshots.erase(it);
    }
    return v;
  }

  bool job_busy() const {
    for (const auto& [_, job] : jobs) {
      if (job->state == "queued" || job->state == "running") return true;
    }
    return false;
  }

  const Camera& frame_camera(const std::string& id) const { return dataset.frame(id).camera; }

  HttpResponse get_scene();
  HttpResponse render(const Body& body);
  HttpResponse select(const Body& body);
  HttpResponse patch_select(const Body& body);
  HttpResponse context_export(const Body& body);
  HttpResponse context_import(const Body& body);
  HttpResponse start_job(const Body& body);
  HttpResponse get_job(const std::string& id);
  HttpResponse list_jobs();
  HttpResponse cancel_job(const std::string& id);
  HttpResponse layers();
  HttpResponse toggle_layer(const std::string& id);
  HttpResponse reorder_layers(const Body& body);
  HttpResponse delete_layer(const std::string& id);
  HttpResponse checkpoint(const std::string& version);
  HttpResponse route(const HttpRequest& request);
  void run_job(std::shared_ptr<Job> job, json config);
};

EditService::EditService(ServiceOptions options) : state_(std::make_unique<State>()) {
  State& s = *state_;
  s.options = std::move(options);
  if (s.options.samples_per_ray <= 0) fail(ErrorCode::kUsage, "service: samples_per_ray must be positive");
  s.dataset = load_dataset(s.options.manifest);
  s.train = train_views(s.dataset);
  for (const Frame* f : s.dataset.split(Split::kTrain)) {
    s.context_cameras.push_back(f->camera);
    s.context_frames.push_back(f->id);
  }
  TriPlaneField<float> field = load_checkpoint(s.options.checkpoint);
  if (field.config.sem_dim != s.dataset.feature_dim && s.dataset.feature_dim > 0) {
    fail(ErrorCode::kData, "service: checkpoint D_sem " + std::to_string(field.config.sem_dim) +
                               " does not match the manifest feature_dim " + std::to_string(s.dataset.feature_dim));
  }
  const uint64_t v = field.version;
  s.next_version = v + 1;
  s.snapshots[v] = std::make_shared<const TriPlaneField<float>>(std::move(field));
  s.active = v;
  s.nonce = s.options.nonce != 0 ? s.options.nonce : (static_cast<uint64_t>(std::random_device{}()) << 32) | std::random_device{}();
}

EditService::~EditService() {
  stop();
  {
    std::lock_guard lock(state_->mu);
    for (auto& [_, job] : state_->jobs) job->cancel = true;
  }
  if (state_->worker.joinable()) state_->worker.join();
}

void EditService::wait_for_jobs() {
  std::unique_lock lock(state_->mu);
  state_->jobs_changed.wait(lock, [&] { return !state_->job_busy(); });
}

HttpResponse EditService::State::get_scene() {
  std::lock_guard lock(mu);
  json frames = json::array();
  for (const auto& f : dataset.frames) {
    frames.push_back({{"id", f.id},
                      {"split", f.split == Split::kTrain ? "train" : "holdout"},
                      {"width", f.camera.width()},
                      {"height", f.camera.height()}});
  }
  json versions = json::array();
  for (const auto& [v, _] : snapshots) versions.push_back(v);
  json j = {{"scene", dataset.name},
            {"feature_dim", dataset.feature_dim},
            {"bounds", {{"min", {dataset.bounds.min.x(), dataset.bounds.min.y(), dataset.bounds.min.z()}},
                        {"max", {dataset.bounds.max.x(), dataset.bounds.max.y(), dataset.bounds.max.z()}}}},
            {"frames", frames},
            {"snapshots", versions},
            {"active_version", active},
            {"layers", stack.size()},
            {"f_distance", nullptr},
            {"selection", nullptr},
            {"context", nullptr}};
  if (selection) {
    j["selection"] = {{"f_bar", selection->f_bar}, {"thr", selection->thr}, {"baked", baked != nullptr}};
    j["f_distance"] = {{"p01", calibration.range.p01},
                       {"p99", calibration.range.p99},
                       {"suggested", calibration.suggested},
                       {"samples", calibration.samples}};
  }
  if (context) {
    j["context"] = {{"epoch", context->epoch()},
                    {"epochs", context->settings().epochs},
                    {"done", context->done()},
                    {"edited_views", context->edited().size()}};
  }
  return json_response(200, j);
}

HttpResponse EditService::State::render(const Body& body) {
  Camera camera;
  if (body.has("frame") == body.has("camera")) fail(ErrorCode::kUsage, "render: give exactly one of frame or camera");
  if (body.has("frame")) {
    camera = frame_camera(body.str("frame"));
  } else {
    if (!body.raw("camera").is_object()) fail(ErrorCode::kUsage, "field 'camera' must be an object");
    Body c(body.raw("camera"));
    const auto m = c.numbers("camera_to_world", 16);
    for (int r = 0; r < 4; ++r) {
      for (int k = 0; k < 4; ++k) camera.camera_to_world(r, k) = m[r * 4 + k];
    }
    camera.intrinsics.width = static_cast<int>(c.integer("width", 0));
    camera.intrinsics.height = static_cast<int>(c.integer("height", 0));
    camera.intrinsics.fx = c.num("fx");
    camera.intrinsics.fy = c.num("fy");
    camera.intrinsics.cx = c.num("cx", camera.intrinsics.width / 2.0);
    camera.intrinsics.cy = c.num("cy", camera.intrinsics.height / 2.0);
    camera.near = c.num("near");
    camera.far = c.num("far");
    if (camera.width() <= 0 || camera.height() <= 0 || camera.width() > 4096 || camera.height() > 4096) {
      fail(ErrorCode::kUsage, "render: camera size must be within 1..4096");
    }
    try {
      camera.validate();
    } catch (const Error& e) {
      fail(ErrorCode::kUsage, e.what());
    }
  }
  std::set<std::string> channels{"rgb"};
  if (body.has("channels")) {
    channels.clear();
    const json& ch = body.raw("channels");
    if (!ch.is_array()) fail(ErrorCode::kUsage, "field 'channels' must be an array");
    for (const auto& c : ch) {
      if (!c.is_string()) fail(ErrorCode::kUsage, "channels must be strings");
      const std::string name = c.get<std::string>();
      if (name != "rgb" && name != "depth" && name != "mask" && name != "alpha") {
        fail(ErrorCode::kUsage, "unknown channel '" + name + "'");
      }
      channels.insert(name);
    }
  }
  const bool use_stack = body.boolean("use_stack", true);
  const DeletionMode deletion = parse_deletion(body.str("deletion", "off"));
  const bool use_baked = body.boolean("use_baked", false);
  const int spr = static_cast<int>(body.integer("samples_per_ray", options.samples_per_ray));
  if (spr <= 0 || spr > 4096) fail(ErrorCode::kUsage, "samples_per_ray must be within 1..4096");

  std::shared_ptr<const TriPlaneField<float>> snapshot;
  std::optional<SelectionParams> sel;
  std::shared_ptr<const BakedMask> bake;
  EditStack tokens;
  {
    std::lock_guard lock(mu);
    snapshot = snapshots.at(active);
    sel = selection;
    bake = baked;
    if (use_stack) tokens = stack;
  }
  if ((deletion != DeletionMode::kOff || channels.count("mask")) && !sel) {
    fail(ErrorCode::kState, "render: deletion and mask need a selection; POST /select first");
  }
  if (use_baked && !bake) fail(ErrorCode::kState, "render: no baked mask; run a bake_mask job first");
  RenderOptions opt;
  opt.samples_per_ray = spr;
  opt.workers = options.workers;
  opt.deletion = deletion;
  if (sel) opt.selection = *sel;
  if (use_baked) opt.baked = bake;
  opt.selection_weight = channels.count("mask") > 0;
  opt = with_stack(opt, tokens);
  RenderOutput out = render_view(camera, *snapshot, opt);
  json j = {{"version", snapshot->version}, {"width", camera.width()}, {"height", camera.height()}};
  if (channels.count("rgb")) j["rgb"] = png_b64(out.rgb);
  if (channels.count("alpha")) j["alpha"] = png_b64(out.alpha);
  if (channels.count("depth")) {
    j["depth"] = base64_encode(encode_png16(encode_depth(out.depth, camera.near, camera.far)));
    j["depth_near"] = camera.near;
    j["depth_far"] = camera.far;
  }
  if (channels.count("mask")) {
    Image m(camera.width(), camera.height(), 1);
    for (size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = out.selected.pixels[i] >= 0.5f ? 1.0f : 0.0f;
    j["mask"] = png_b64(m);
  }
  return json_response(200, j);
}

HttpResponse EditService::State::select(const Body& body) {
  const std::string frame_id = body.str("frame");
  const Frame& frame = dataset.frame(frame_id);
  if (body.has("rect") == body.has("bitmap")) fail(ErrorCode::kUsage, "select: give exactly one of rect or bitmap");
  Patch patch;
  if (body.has("rect")) {
    const auto r = body.numbers("rect", 4);
    patch = Patch::rectangle(static_cast<int>(r[0]), static_cast<int>(r[1]), static_cast<int>(r[2]),
                             static_cast<int>(r[3]), frame.camera.width(), frame.camera.height());
  } else {
    Image bitmap = decode_png8(base64_decode(body.str("bitmap"), "bitmap"));
    if (bitmap.width != frame.camera.width() || bitmap.height != frame.camera.height()) {
      fail(ErrorCode::kUsage, "select: bitmap size does not match frame " + frame_id);
    }
    if (bitmap.channels != 1) {
      Image gray(bitmap.width, bitmap.height, 1);
      for (int y = 0; y < bitmap.height; ++y) {
        for (int x = 0; x < bitmap.width; ++x) gray.at(x, y) = bitmap.at(x, y, 0);
      }
      bitmap = std::move(gray);
    }
    patch = Patch::from_bitmap(bitmap);
  }
  if (patch.pixels.empty()) fail(ErrorCode::kUsage, "select: patch is empty");
  auto snapshot = field();
  SelectionParams sel;
  sel.f_bar = query_mean_feature(frame.camera, patch, *snapshot, options.samples_per_ray, options.workers);
  sel.field_version = snapshot->version;
  ThresholdCalibration cal = calibrate_threshold(sel.f_bar, *snapshot, options.distance_probes, options.seed);
  if (body.has("thr")) {
    const double thr = body.num("thr");
    if (!(thr >= 0) || !std::isfinite(thr)) fail(ErrorCode::kUsage, "select: thr must be a finite value >= 0");
    sel.thr = static_cast<float>(thr);
  } else {
    if (cal.samples == 0) fail(ErrorCode::kState, "select: no dense probe points to calibrate thr; pass thr");
    sel.thr = cal.suggested;
  }
  Image mask = project_mask(frame.camera, sel, *snapshot, options.samples_per_ray, options.workers);
  size_t count = 0;
  for (float v : mask.pixels) count += v > 0.5f;
  {
    std::lock_guard lock(mu);
    selection = sel;
    calibration = cal;
    baked.reset();
    context.reset();
  }
  return json_response(200, {{"frame", frame_id},
                             {"patch_pixels", patch.pixels.size()},
                             {"f_bar", sel.f_bar},
                             {"thr", sel.thr},
                             {"field_version", sel.field_version},
                             {"f_distance",
                              {{"p01", cal.range.p01},
                               {"p99", cal.range.p99},
                               {"suggested", cal.suggested},
                               {"samples", cal.samples}}},
                             {"mask_pixels", count},
                             {"mask", png_b64(mask)}});
}

HttpResponse EditService::State::patch_select(const Body& body) {
  const double thr = body.num("thr");
  if (!(thr >= 0) || !std::isfinite(thr)) fail(ErrorCode::kUsage, "select: thr must be a finite value >= 0");
  const std::string frame_id = body.str("frame", "");
  SelectionParams sel;
  {
    std::lock_guard lock(mu);
    if (!selection) fail(ErrorCode::kState, "select: no selection to update; POST /select first");
    sel = *selection;
  }
  sel.thr = static_cast<float>(thr);
  json j = {{"f_bar", sel.f_bar}, {"thr", sel.thr}};
  if (!frame_id.empty()) {
    const Frame& frame = dataset.frame(frame_id);
    Image mask = project_mask(frame.camera, sel, *field(), options.samples_per_ray, options.workers);
    size_t count = 0;
    for (float v : mask.pixels) count += v > 0.5f;
    j["frame"] = frame_id;
    j["mask_pixels"] = count;
    j["mask"] = png_b64(mask);
  }
  {
    std::lock_guard lock(mu);
    selection = sel;
    baked.reset();
    context.reset();
  }
  return json_response(200, j);
}

HttpResponse EditService::State::context_export(const Body& body) {
  std::optional<ContextSession> session;
  std::shared_ptr<const TriPlaneField<float>> snapshot;
  {
    std::lock_guard lock(mu);
    if (!selection) fail(ErrorCode::kState, "context: no selection; POST /select first");
    snapshot = snapshots.at(active);
    session = context;
  }
  if (!session || body.boolean("restart", false)) {
    ContextSettings settings;
    settings.epochs = static_cast<int>(body.integer("epochs", 3));
    settings.seed = static_cast<uint64_t>(body.integer("seed", static_cast<long long>(options.seed)));
    settings.samples_per_ray = options.samples_per_ray;
    settings.workers = options.workers;
    SelectionParams sel;
    {
      std::lock_guard lock(mu);
      sel = *selection;
    }
    session.emplace(context_cameras, sel, settings, nonce);
  } else if (body.has("epochs") || body.has("seed")) {
    fail(ErrorCode::kUsage, "context: epochs and seed only apply when a session starts (pass restart=true)");
  }
  ContextGrid grid = session->compose(*snapshot);
  Mosaic m = mosaic_of(grid);
  double near = std::numeric_limits<double>::infinity(), far = 0;
  json cells = json::array();
  for (const auto& cell : grid.cells) {
    near = std::min(near, context_cameras[cell.camera].near);
    far = std::max(far, context_cameras[cell.camera].far);
    cells.push_back({{"camera", cell.camera}, {"frame", context_frames[cell.camera]}, {"role", cell_role_name(cell.role)}});
  }
  {
    std::lock_guard lock(mu);
    context = std::move(session);
    export_near = near;
    export_far = far;
  }
  return json_response(200, {{"epoch", grid.epoch},
                             {"provenance", grid.provenance},
                             {"cell_width", grid.cell_width},
                             {"cell_height", grid.cell_height},
                             {"cells", cells},
                             {"depth_near", near},
                             {"depth_far", far},
                             {"rgb", png_b64(m.rgb)},
                             {"mask", png_b64(m.mask)},
                             {"depth", base64_encode(encode_png16(encode_depth(m.depth, near, far)))}});
}

HttpResponse EditService::State::context_import(const Body& body) {
  double near, far;
  uint64_t version;
  {
    std::lock_guard lock(mu);
    if (!context) fail(ErrorCode::kState, "context: nothing exported yet; POST /context/export first");
    near = export_near;
    far = export_far;
    version = active;
  }
  const std::string provenance = body.str("provenance");
  Image rgb = decode_png8(base64_decode(body.str("rgb"), "rgb"));
  std::optional<Image> depth;
  if (body.has("depth")) depth = decode_depth(decode_png16(base64_decode(body.str("depth"), "depth")), near, far);
  std::lock_guard lock(mu);
  context->import(rgb, provenance, version, depth ? &*depth : nullptr);
  json next = json::array();
  if (!context->done()) next.push_back("context_export");
  next.push_back("edit_residual");
  next.push_back("finetune");
  return json_response(200, {{"epoch", context->epoch()},
                             {"done", context->done()},
                             {"edited_views", context->edited().size()},
                             {"next", next}});
}

HttpResponse EditService::State::start_job(const Body& body) {
  static const std::set<std::string> kinds{"pretrain", "edit_residual", "finetune", "bake_mask"};
  const std::string kind = body.str("kind");
  if (!kinds.count(kind)) fail(ErrorCode::kUsage, "unknown job kind '" + kind + "'");
  json config = body.has("config") ? body.raw("config") : json::object();
  if (!config.is_object()) fail(ErrorCode::kUsage, "field 'config' must be an object");
  static const std::set<std::string> keys{"iterations", "batch",   "learning_rate", "plane_learning_rate",
                                          "seed",       "lambda1", "lambda2",       "lambda3",
                                          "lambda4",    "feature", "epochs",        "samples_per_ray",
                                          "token_kind", "label",   "resolution",    "jitter"};
  for (const auto& [key, _] : config.items()) {
    if (!keys.count(key)) fail(ErrorCode::kUsage, "unknown config field '" + key + "'");
  }
  std::lock_guard lock(mu);
  if (job_busy()) fail(ErrorCode::kConflict, "a job is already queued or running");
  if ((kind == "edit_residual" || kind == "finetune") && (!context || context->edited().empty())) {
    fail(ErrorCode::kState, kind + ": no edited views; import an edited context first");
  }
  if ((kind == "edit_residual" || kind == "bake_mask") && !selection) {
    fail(ErrorCode::kState, kind + ": no selection; POST /select first");
  }
  auto job = std::make_shared<Job>();
  job->id = "job-" + std::to_string(++job_counter);
  job->kind = kind;
  jobs[job->id] = job;
  if (worker.joinable()) worker.join();
  worker = std::thread([this, job, config] { run_job(job, config); });
  return json_response(202, {{"id", job->id}, {"kind", kind}, {"state", job->state}});
}

void EditService::State::run_job(std::shared_ptr<Job> job, json config) {
  auto set_state = [&](const std::string& st) {
    std::lock_guard lock(mu);
    job->state = st;
    jobs_changed.notify_all();
  };
  set_state("running");
  try {
    Body c(config);
    std::shared_ptr<const TriPlaneField<float>> base;
    std::optional<SelectionParams> sel;
    std::optional<ContextSession> ctx;
    EditStack prior;
    {
      std::lock_guard lock(mu);
      base = snapshots.at(active);
      sel = selection;
      ctx = context;
      prior = stack;
    }
    const Regime regime = job->kind == "pretrain"   ? Regime::kPretrain
                          : job->kind == "finetune" ? Regime::kFinetune
                                                    : Regime::kEditResidual;
    TrainConfig tc = default_config(regime);
    tc.iterations = static_cast<int>(c.integer("iterations", tc.iterations));
    tc.rays_per_batch = static_cast<int>(c.integer("batch", tc.rays_per_batch));
    tc.learning_rate = c.num("learning_rate", tc.learning_rate);
    tc.plane_learning_rate = c.num("plane_learning_rate", tc.plane_learning_rate);
    tc.seed = static_cast<uint64_t>(c.integer("seed", static_cast<long long>(options.seed)));
    tc.samples_per_ray = static_cast<int>(c.integer("samples_per_ray", options.samples_per_ray));
    tc.weights.lambda1 = c.num("lambda1", tc.weights.lambda1);
    tc.weights.lambda2 = c.num("lambda2", tc.weights.lambda2);
    tc.weights.lambda3 = c.num("lambda3", tc.weights.lambda3);
    tc.weights.lambda4 = c.num("lambda4", tc.weights.lambda4);
    tc.weights.feature = c.num("feature", tc.weights.feature);
    tc.jitter = c.boolean("jitter", tc.jitter);
    tc.workers = options.workers;

    TrainHooks hooks;
    hooks.progress = [&](const ProgressEvent& e) {
      std::lock_guard lock(mu);
      job->iteration = std::max(job->iteration, e.iteration);
      job->total = e.total;
      job->loss = e.loss;
      return !job->cancel.load();
    };
    hooks.publish_every = options.publish_every;
    hooks.snapshot = [&](const TriPlaneField<float>& f, int) {
      std::lock_guard lock(mu);
      publish(f);
    };

    TrainResult result;
    if (job->kind == "bake_mask") {
      const int res = static_cast<int>(c.integer("resolution", 64));
      auto mask = std::make_shared<BakedMask>(bake_mask(*sel, res, *base));
      std::lock_guard lock(mu);
      if (selection == sel) baked = mask;
      job->result = {{"resolution", res}, {"occupied", mask->count()}};
      job->iteration = job->total = 1;
    } else if (job->kind == "pretrain") {
      TriPlaneField<float> f = *base;
      result = run_pretrain(&f, train, tc, hooks);
      if (!result.cancelled) {
        std::lock_guard lock(mu);
        job->result = {{"version", publish(std::move(f))}, {"iterations", result.iterations_run}};
      }
    } else if (job->kind == "finetune") {
      TriPlaneField<float> f = *base;
      const int epochs = static_cast<int>(c.integer("epochs", 1));
      auto views = edited_train_views(*ctx);
      const SelectionParams& csel = ctx->selection();
      result = run_finetune(&f, *base, csel.empty() ? nullptr : &csel, views, tc, epochs, hooks);
      if (!result.cancelled) {
        std::lock_guard lock(mu);
        job->result = {{"version", publish(std::move(f))}, {"iterations", result.iterations_run}};
      }
    } else {
      const TokenKind tk = parse_token_kind(c.str("token_kind", "feature"));
      EditToken token = make_token(tk, base->config.sem_dim, ctx->selection(), tc.seed, c.str("label", ""));
      token.id = job->id + "-" + token.id;
      auto views = edited_train_views(*ctx);
      std::vector<const EditToken*> prior_tokens = prior.enabled();
      result = run_edit_residual(*base, &token, views, tc, prior_tokens, hooks);
      if (!result.cancelled) {
        std::lock_guard lock(mu);
        job->result = {{"token", token.id},
                       {"bytes", serialize_token(token).size()},
                       {"masked_initial", result.masked_initial},
                       {"masked_final", result.masked_final}};
        stack.push(std::move(token));
      }
    }
    set_state(result.cancelled || job->cancel ? "cancelled" : "done");
  } catch (const Error& e) {
    std::lock_guard lock(mu);
    job->state = "failed";
    job->error_code = std::string(error_code_name(e.code()));
    job->error_message = e.what();
    jobs_changed.notify_all();
  } catch (const std::exception& e) {
    std::lock_guard lock(mu);
    job->state = "failed";
    job->error_code = "internal";
    job->error_message = e.what();
    jobs_changed.notify_all();
  }
}

HttpResponse EditService::State::get_job(const std::string& id) {
  std::lock_guard lock(mu);
  auto it = jobs.find(id);
  if (it == jobs.end()) fail(ErrorCode::kNotFound, "no job '" + id + "'");
  return json_response(200, it->second->to_json());
}

HttpResponse EditService::State::list_jobs() {
  std::lock_guard lock(mu);
  json j = json::array();
  for (const auto& [_, job] : jobs) j.push_back(job->to_json());
  return json_response(200, {{"jobs", j}});
}

HttpResponse EditService::State::cancel_job(const std::string& id) {
  std::lock_guard lock(mu);
  auto it = jobs.find(id);
  if (it == jobs.end()) fail(ErrorCode::kNotFound, "no job '" + id + "'");
  it->second->cancel = true;
  return json_response(200, it->second->to_json());
}

HttpResponse EditService::State::layers() {
  std::lock_guard lock(mu);
  json j = json::array();
  for (const auto& t : stack.tokens()) {
    j.push_back({{"id", t.id},
                 {"kind", token_kind_name(t.kind)},
                 {"enabled", t.enabled},
                 {"label", t.label},
                 {"created_at", t.created_at},
                 {"bytes", serialize_token(t).size()}});
  }
  return json_response(200, {{"layers", j}});
}

HttpResponse EditService::State::toggle_layer(const std::string& id) {
  std::lock_guard lock(mu);
  stack.toggle(id);
  return json_response(200, {{"id", id}, {"enabled", stack.find(id).enabled}});
}

HttpResponse EditService::State::reorder_layers(const Body& body) {
  const json& order = body.raw("order");
  if (!order.is_array()) fail(ErrorCode::kUsage, "field 'order' must be an array of layer ids");
  std::vector<std::string> ids;
  for (const auto& e : order) {
    if (!e.is_string()) fail(ErrorCode::kUsage, "field 'order' must be an array of layer ids");
    ids.push_back(e.get<std::string>());
  }
  std::lock_guard lock(mu);
  stack.reorder(ids);
  return json_response(200, {{"order", ids}});
}

HttpResponse EditService::State::delete_layer(const std::string& id) {
  std::lock_guard lock(mu);
  stack.remove(id);
  return json_response(200, {{"deleted", id}});
}

HttpResponse EditService::State::checkpoint(const std::string& version) {
  uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(version.data(), version.data() + version.size(), v);
  if (ec != std::errc() || ptr != version.data() + version.size()) {
    fail(ErrorCode::kUsage, "checkpoint version must be an unsigned integer");
  }
  std::shared_ptr<const TriPlaneField<float>> snapshot;
  {
    std::lock_guard lock(mu);
    auto it = snapshots.find(v);
    if (it == snapshots.end()) fail(ErrorCode::kNotFound, "no snapshot version " + version);
    snapshot = it->second;
  }
  auto bytes = serialize_checkpoint(*snapshot);
  HttpResponse r;
  r.content_type = "application/octet-stream";
  r.body.assign(bytes.begin(), bytes.end());
  return r;
}

HttpResponse EditService::State::route(const HttpRequest& req) {
  static const std::regex kJob("^/jobs/([A-Za-z0-9_.-]+)$");
  static const std::regex kLayerToggle("^/layers/([^/]+)/toggle$");
  static const std::regex kLayer("^/layers/([^/]+)$");
  static const std::regex kCheckpoint("^/checkpoint/([^/]+)$");
  const std::string& m = req.method;
  const std::string& p = req.path;
  std::smatch match;
  if (p == "/scene" && m == "GET") return get_scene();
  if (p == "/render" && m == "POST") {
    return render(Body(req.body, {"frame", "camera", "channels", "use_stack", "deletion", "use_baked",
                                  "samples_per_ray"}));
  }
  if (p == "/jobs" && m == "GET") return list_jobs();
  if (std::regex_match(p, match, kJob) && m == "GET") return get_job(match[1]);
  if (p == "/layers" && m == "GET") return layers();
  if (std::regex_match(p, match, kCheckpoint) && m == "GET") return checkpoint(match[1]);

  std::lock_guard command_lock(command);
  if (p == "/select" && m == "POST") return select(Body(req.body, {"frame", "rect", "bitmap", "thr"}));
  if (p == "/select" && m == "PATCH") return patch_select(Body(req.body, {"thr", "frame"}));
  if (p == "/context/export" && m == "POST") return context_export(Body(req.body, {"epochs", "seed", "restart"}));
  if (p == "/context/import" && m == "POST") return context_import(Body(req.body, {"provenance", "rgb", "depth"}));
  if (p == "/jobs" && m == "POST") return start_job(Body(req.body, {"kind", "config"}));
  if (std::regex_match(p, match, kJob) && m == "DELETE") return cancel_job(match[1]);
  if (p == "/layers/reorder" && m == "POST") return reorder_layers(Body(req.body, {"order"}));
  if (std::regex_match(p, match, kLayerToggle) && m == "POST") return toggle_layer(match[1]);
  if (std::regex_match(p, match, kLayer) && m == "DELETE") return delete_layer(match[1]);
  fail(ErrorCode::kNotFound, "no route for " + m + " " + p);
}

HttpResponse EditService::handle(const HttpRequest& request) {
  State& s = *state_;
  const bool mutating = request.method != "GET" && request.method != "OPTIONS";
  std::string key, fingerprint;
  if (auto it = request.headers.find("Idempotency-Key"); mutating && it != request.headers.end()) {
    key = it->second;
    fingerprint = request.method + " " + request.path + "\n" + request.body;
    std::lock_guard lock(s.mu);
    if (auto hit = s.replay.find(key); hit != s.replay.end()) {
      if (hit->second.first != fingerprint) {
        return error_response(ErrorCode::kUsage, "Idempotency-Key reused with a different request");
      }
      HttpResponse r = hit->second.second;
      r.headers["Idempotent-Replay"] = "true";
      return r;
    }
  }
  HttpResponse response;
  if (request.method == "OPTIONS") {
    response.status = 204;
    response.content_type.clear();
  } else {
    try {
      response = s.route(request);
    } catch (const Error& e) {
      response = error_response(e.code(), e.what());
    } catch (const std::exception& e) {
      response = json_response(500, {{"error", {{"code", "internal"}, {"message", e.what()}}}});
    }
  }
  response.headers["Access-Control-Allow-Origin"] = s.options.cors_origin;
  response.headers["Access-Control-Allow-Methods"] = "GET, POST, PATCH, DELETE, OPTIONS";
  response.headers["Access-Control-Allow-Headers"] = "Content-Type, Idempotency-Key";
  if (!key.empty() && response.status < 500) {
    std::lock_guard lock(s.mu);
    s.replay.emplace(key, std::make_pair(fingerprint, response));
  }
  return response;
}

int EditService::bind(const std::string& host, int port) {
  State& s = *state_;
  s.server = std::make_unique<httplib::Server>();
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    HttpRequest r;
    r.method = req.method;
    r.path = req.path;
    r.body = req.body;
    for (const auto& [k, v] : req.headers) r.headers[k] = v;
    HttpResponse out = handle(r);
    res.status = out.status;
    for (const auto& [k, v] : out.headers) res.set_header(k, v);
    if (!out.content_type.empty()) res.set_content(out.body, out.content_type);
  };
  const std::string all = ".*";
  s.server->Get(all, handler);
  s.server->Post(all, handler);
  s.server->Patch(all, handler);
  s.server->Delete(all, handler);
  s.server->Options(all, handler);
  if (port == 0) {
    const int bound = s.server->bind_to_any_port(host);
    if (bound < 0) fail(ErrorCode::kUsage, "serve: cannot bind " + host);
    return bound;
  }
  if (!s.server->bind_to_port(host, port)) fail(ErrorCode::kUsage, "serve: cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void EditService::serve() {
  if (!state_->server) fail(ErrorCode::kState, "serve: bind() first");
  state_->server->listen_after_bind();
}

void EditService::stop() {
  if (state_->server) state_->server->stop();
}

}  // namespace triedit
