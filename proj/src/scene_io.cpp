// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/scene_io.hpp"

#include <cmath>
#include <filesystem>

#include "json.hpp"
#include "triedit/binary_io.hpp"
#include "triedit/keyvalue.hpp"

namespace triedit {
namespace fs = std::filesystem;
namespace {

constexpr uint16_t kCheckpointVersion = 1;

std::string resolve(const std::string& root, const std::string& rel) {
  if (rel.empty()) return {};
  fs::path p(rel);
  return p.is_absolute() ? rel : (fs::path(root) / p).string();
}

void require_file(const std::string& path, const Frame& frame, const std::string& field) {
  if (!fs::exists(path)) fail(ErrorCode::kData, "frame '" + frame.id + "': " + field + " file not found: " + path);
}

void write_mlp_table(ByteWriter& w, const Mlp<float>& mlp) {
  w.put<uint32_t>(static_cast<uint32_t>(mlp.layers.size()));
  for (const auto& l : mlp.layers) {
    w.put<uint32_t>(static_cast<uint32_t>(l.in_dim()));
    w.put<uint32_t>(static_cast<uint32_t>(l.out_dim()));
    w.put<uint32_t>(static_cast<uint32_t>(l.activation));
  }
}

Mlp<float> read_mlp_table(ByteReader& r, const char* name) {
  const auto n = r.get<uint32_t>();
  if (n == 0 || n > 16) fail(ErrorCode::kData, std::string("checkpoint: bad layer count for ") + name);
  std::vector<int> dims;
  std::vector<Activation> acts;
  for (uint32_t l = 0; l < n; ++l) {
    const auto in = r.get<uint32_t>(), out = r.get<uint32_t>(), act = r.get<uint32_t>();
    if (in == 0 || out == 0 || in > 65536 || out > 65536 || act > 3) {
      fail(ErrorCode::kData, std::string("checkpoint: bad layer entry in ") + name);
    }
    if (l == 0) dims.push_back(static_cast<int>(in));
    if (static_cast<int>(in) != dims.back()) fail(ErrorCode::kData, std::string("checkpoint: ") + name + " layers do not chain");
    dims.push_back(static_cast<int>(out));
    acts.push_back(static_cast<Activation>(act));
  }
  return Mlp<float>::zeros(dims, acts);
}

std::string split_name(Split s) { return s == Split::kTrain ? "train" : "holdout"; }

}  // namespace

Camera parse_camera(const KeyValueBlock& b, const std::string& what) {
  Camera c;
  auto& k = c.intrinsics;
  k.width = static_cast<int>(b.get_int("width"));
  k.height = static_cast<int>(b.get_int("height"));
  if (k.width <= 0 || k.height <= 0) fail(ErrorCode::kData, what + ": width/height must be positive");
  k.fx = b.get_double("fx");
  k.fy = b.get_double("fy");
  k.cx = b.get_double("cx", 0.5 * k.width);
  k.cy = b.get_double("cy", 0.5 * k.height);
  c.near = b.get_double("near");
  c.far = b.get_double("far");
  auto m = b.get_doubles("camera_to_world", 16);
  for (int i = 0; i < 16; ++i) c.camera_to_world(i / 4, i % 4) = m[i];
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kData, what + ": " + e.what());
  }
  return c;
}

void format_camera(const Camera& c, KeyValueBlock* b) {
  const auto& k = c.intrinsics;
  b->set("width", std::to_string(k.width));
  b->set("height", std::to_string(k.height));
  b->set("fx", format_number(k.fx));
  b->set("fy", format_number(k.fy));
  b->set("cx", format_number(k.cx));
  b->set("cy", format_number(k.cy));
  b->set("near", format_number(c.near));
  b->set("far", format_number(c.far));
  std::vector<double> m;
  for (int i = 0; i < 16; ++i) m.push_back(c.camera_to_world(i / 4, i % 4));
  b->set("camera_to_world", format_numbers(m));
}

Camera load_camera(const std::string& path) {
  KeyValueDocument doc = read_key_value_file(path);
  return parse_camera(doc.header, path);
}

std::vector<const Frame*> Dataset::split(Split s) const {
  std::vector<const Frame*> out;
  for (const auto& f : frames) {
    if (f.split == s) out.push_back(&f);
  }
  return out;
}

const Frame& Dataset::frame(const std::string& id) const { return frames[frame_index(id)]; }

int Dataset::frame_index(const std::string& id) const {
  for (size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].id == id) return static_cast<int>(i);
  }
  // Numeric ids index the frame list.
  char* end = nullptr;
  const long v = std::strtol(id.c_str(), &end, 10);
  if (!id.empty() && *end == '\0' && v >= 0 && v < static_cast<long>(frames.size())) return static_cast<int>(v);
  fail(ErrorCode::kNotFound, "no frame '" + id + "' in dataset '" + name + "'");
}

Dataset load_dataset(const std::string& manifest_path, bool load_images) {
  KeyValueDocument doc = read_key_value_file(manifest_path);
  Dataset ds;
  ds.root = fs::path(manifest_path).parent_path().string();
  ds.name = doc.header.get_string("scene", fs::path(manifest_path).stem().string());
  auto bmin = doc.header.get_doubles("bounds_min", 3);
  auto bmax = doc.header.get_doubles("bounds_max", 3);
  ds.bounds.min = Vec3(bmin[0], bmin[1], bmin[2]);
  ds.bounds.max = Vec3(bmax[0], bmax[1], bmax[2]);
  if (!((ds.bounds.max - ds.bounds.min).array() > 0).all()) fail(ErrorCode::kData, manifest_path + ": empty bounds");
  ds.feature_dim = static_cast<int>(doc.header.get_int("feature_dim", 0));
  for (const KeyValueBlock* s : doc.sections_named("frame")) {
    Frame f;
    f.id = s->get_string("id");
    const std::string split = s->get_string("split", "train");
    if (split == "train") {
      f.split = Split::kTrain;
    } else if (split == "holdout") {
      f.split = Split::kHoldout;
    } else {
      fail(ErrorCode::kData, "frame '" + f.id + "': split must be train or holdout");
    }
    f.camera = parse_camera(*s, "frame '" + f.id + "'");
    const auto& k = f.camera.intrinsics;
    f.image_path = resolve(ds.root, s->get_string("image"));
    f.feature_path = resolve(ds.root, s->get_string("features", ""));
    f.depth_path = resolve(ds.root, s->get_string("depth", ""));
    require_file(f.image_path, f, "image");
    if (!f.feature_path.empty()) require_file(f.feature_path, f, "features");
    if (!f.depth_path.empty()) require_file(f.depth_path, f, "depth");
    if (load_images) {
      f.rgb = read_png8(f.image_path);
      if (f.rgb.channels == 1) {
        Image rgb(f.rgb.width, f.rgb.height, 3);
        for (size_t i = 0; i < f.rgb.pixels.size(); ++i) {
          for (int c = 0; c < 3; ++c) rgb.pixels[i * 3 + c] = f.rgb.pixels[i];
        }
        f.rgb = std::move(rgb);
      }
      if (f.rgb.width != k.width || f.rgb.height != k.height) {
        fail(ErrorCode::kData, "frame '" + f.id + "': image is " + std::to_string(f.rgb.width) + "x" +
                                   std::to_string(f.rgb.height) + ", manifest says " + std::to_string(k.width) + "x" +
                                   std::to_string(k.height));
      }
      if (!f.feature_path.empty()) {
        f.features = load_features(f.feature_path);
        if (f.features.width != k.width || f.features.height != k.height) {
          fail(ErrorCode::kData, "frame '" + f.id + "': feature raster size does not match the image");
        }
        if (ds.feature_dim == 0) ds.feature_dim = f.features.channels;
        if (f.features.channels != ds.feature_dim) {
          fail(ErrorCode::kData, "frame '" + f.id + "': feature raster has " + std::to_string(f.features.channels) +
                                     " channels, expected " + std::to_string(ds.feature_dim));
        }
      }
      if (!f.depth_path.empty()) {
        Image16 d16 = read_png16(f.depth_path);
        if (d16.width != k.width || d16.height != k.height) {
          fail(ErrorCode::kData, "frame '" + f.id + "': depth raster size does not match the image");
        }
        f.depth = decode_depth(d16, f.camera.near, f.camera.far);
      }
    }
    for (const auto& other : ds.frames) {
      if (other.id == f.id) fail(ErrorCode::kData, manifest_path + ": duplicate frame id '" + f.id + "'");
    }
    ds.frames.push_back(std::move(f));
  }
  if (ds.split(Split::kTrain).size() < 4) {
    fail(ErrorCode::kData, manifest_path + ": at least 4 train frames required, found " +
                               std::to_string(ds.split(Split::kTrain).size()));
  }
  return ds;
}

void save_manifest(const Dataset& ds, const std::string& manifest_path) {
  KeyValueDocument doc;
  const fs::path root = fs::path(manifest_path).parent_path();
  auto rel = [&](const std::string& p) { return p.empty() ? p : fs::relative(p, root.empty() ? "." : root).string(); };
  doc.header.set("scene", ds.name);
  doc.header.set("bounds_min", format_numbers({ds.bounds.min.x(), ds.bounds.min.y(), ds.bounds.min.z()}));
  doc.header.set("bounds_max", format_numbers({ds.bounds.max.x(), ds.bounds.max.y(), ds.bounds.max.z()}));
  if (ds.feature_dim > 0) doc.header.set("feature_dim", std::to_string(ds.feature_dim));
  for (const auto& f : ds.frames) {
    KeyValueBlock b("frame", manifest_path);
    b.set("id", f.id);
    b.set("split", split_name(f.split));
    b.set("image", rel(f.image_path));
    if (!f.feature_path.empty()) b.set("features", rel(f.feature_path));
    if (!f.depth_path.empty()) b.set("depth", rel(f.depth_path));
    format_camera(f.camera, &b);
    doc.sections.push_back(std::move(b));
  }
  write_file_atomic(manifest_path, format_key_value(doc));
}

std::vector<TrainView> train_views(const Dataset& ds, Split split) {
  std::vector<TrainView> out;
  for (const Frame* f : ds.split(split)) {
    TrainView v;
    v.id = f->id;
    v.camera = f->camera;
    v.rgb = f->rgb;
    v.features = f->features;
    out.push_back(std::move(v));
  }
  return out;
}

void save_features(const std::string& path, const Image& features) {
  ByteWriter w;
  w.put_magic("PNF1");
  w.put<uint32_t>(static_cast<uint32_t>(features.height));
  w.put<uint32_t>(static_cast<uint32_t>(features.width));
  w.put<uint32_t>(static_cast<uint32_t>(features.channels));
  w.put_floats(features.pixels);
  write_file_atomic(path, std::string(w.bytes().begin(), w.bytes().end()));
}

Image load_features(const std::string& path) {
  std::string bytes = read_file(path);
  ByteReader r(as_bytes(bytes), path);
  r.expect_magic("PNF1");
  const auto h = r.get<uint32_t>(), w = r.get<uint32_t>(), c = r.get<uint32_t>();
  if (h == 0 || w == 0 || c == 0 || h > 16384 || w > 16384 || c > 4096) fail(ErrorCode::kData, path + ": bad header");
  const uint64_t expect = uint64_t{h} * w * c * 4;
  if (r.remaining() != expect) {
    fail(ErrorCode::kData, path + ": payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                               std::to_string(expect));
  }
  Image img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  r.get_floats(img.pixels);
  return img;
}

Image16 encode_depth(const Image& depth, double near, double far) {
  Image16 out{depth.width, depth.height, std::vector<uint16_t>(depth.pixels.size())};
  for (size_t i = 0; i < depth.pixels.size(); ++i) {
    const double d = depth.pixels[i];
    if (!(d > 0)) continue;
    const double q = std::round(1.0 + (d - near) / (far - near) * 65534.0);
    out.pixels[i] = static_cast<uint16_t>(std::clamp(q, 1.0, 65535.0));
  }
  return out;
}

Image decode_depth(const Image16& depth, double near, double far) {
  Image out(depth.width, depth.height, 1);
  for (size_t i = 0; i < depth.pixels.size(); ++i) {
    const uint16_t v = depth.pixels[i];
    out.pixels[i] = v == 0 ? 0.0f : static_cast<float>(near + (v - 1) / 65534.0 * (far - near));
  }
  return out;
}

std::vector<uint8_t> serialize_checkpoint(const TriPlaneField<float>& field, const std::string& metrics) {
  field.validate();
  const auto& c = field.config;
  ByteWriter w;
  w.put_magic("PNCK");
  w.put<uint16_t>(kCheckpointVersion);
  w.put<uint32_t>(static_cast<uint32_t>(c.resolution));
  w.put<uint32_t>(static_cast<uint32_t>(c.features));
  w.put<uint8_t>(static_cast<uint8_t>(c.combine));
  w.put<uint32_t>(static_cast<uint32_t>(c.geo_features));
  w.put<uint32_t>(static_cast<uint32_t>(c.sem_dim));
  for (int a = 0; a < 3; ++a) w.put<double>(field.bounds.min[a]);
  for (int a = 0; a < 3; ++a) w.put<double>(field.bounds.max[a]);
  w.put<uint64_t>(field.version);
  w.put_string(metrics);
  for (const Mlp<float>* m : {&field.geom, &field.sem, &field.color, &field.edit_default}) write_mlp_table(w, *m);
  uint64_t count = 3 * field.plane_size();
  for (const Mlp<float>* m : {&field.geom, &field.sem, &field.color, &field.edit_default}) count += m->parameter_count();
  w.put<uint64_t>(count);
  for (const auto& p : field.planes) w.put_floats(p);
  for (const Mlp<float>* m : {&field.geom, &field.sem, &field.color, &field.edit_default}) {
    m->for_each_array([&](std::span<const float> s) { w.put_floats(s); });
  }
  return std::move(w.bytes());
}

TriPlaneField<float> deserialize_checkpoint(std::span<const uint8_t> bytes, std::string* metrics) {
  ByteReader r(bytes, "checkpoint");
  r.expect_magic("PNCK");
  if (r.get<uint16_t>() != kCheckpointVersion) fail(ErrorCode::kData, "checkpoint: unsupported version");
  TriPlaneField<float> f;
  auto& c = f.config;
  c.resolution = static_cast<int>(r.get<uint32_t>());
  c.features = static_cast<int>(r.get<uint32_t>());
  const auto combine = r.get<uint8_t>();
  if (combine > 1) fail(ErrorCode::kData, "checkpoint: unknown combine mode");
  c.combine = static_cast<CombineMode>(combine);
  c.geo_features = static_cast<int>(r.get<uint32_t>());
  c.sem_dim = static_cast<int>(r.get<uint32_t>());
  if (c.resolution < 2 || c.resolution > 8192 || c.features < 1 || c.features > 1024) {
    fail(ErrorCode::kData, "checkpoint: implausible plane shape");
  }
  for (int a = 0; a < 3; ++a) f.bounds.min[a] = r.get<double>();
  for (int a = 0; a < 3; ++a) f.bounds.max[a] = r.get<double>();
  f.version = r.get<uint64_t>();
  std::string m = r.get_string();
  if (metrics) *metrics = m;
  f.geom = read_mlp_table(r, "geom");
  f.sem = read_mlp_table(r, "sem");
  f.color = read_mlp_table(r, "color");
  f.edit_default = read_mlp_table(r, "edit");
  c.geom_hidden = f.geom.layers.size() > 1 ? f.geom.layers[0].out_dim() : 0;
  c.color_hidden = f.color.layers.size() > 1 ? f.color.layers[0].out_dim() : 0;
  c.edit_hidden = f.edit_default.layers.size() > 1 ? f.edit_default.layers[0].out_dim() : 0;
  const uint64_t plane = uint64_t(c.resolution) * c.resolution * c.features;
  uint64_t expect = 3 * plane;
  for (const Mlp<float>* mm : {&f.geom, &f.sem, &f.color, &f.edit_default}) expect += mm->parameter_count();
  const auto count = r.get<uint64_t>();
  if (count != expect || r.remaining() != expect * 4) {
    fail(ErrorCode::kData, "checkpoint: payload holds " + std::to_string(r.remaining() / 4) +
                               " floats (declared " + std::to_string(count) + "), header implies " +
                               std::to_string(expect));
  }
  for (auto& p : f.planes) {
    p.resize(plane);
    r.get_floats(p);
  }
  for (Mlp<float>* mm : {&f.geom, &f.sem, &f.color, &f.edit_default}) {
    mm->for_each_array([&](std::span<float> s) { r.get_floats(s); });
  }
  r.expect_end();
  f.validate();
  return f;
}

void save_checkpoint(const std::string& path, const TriPlaneField<float>& field, const std::string& metrics) {
  auto bytes = serialize_checkpoint(field, metrics);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

TriPlaneField<float> load_checkpoint(const std::string& path, std::string* metrics) {
  std::string bytes = read_file(path);
  try {
    return deserialize_checkpoint(as_bytes(bytes), metrics);
  } catch (const Error& e) {
    fail(e.code(), path + ": " + e.what());
  }
}

void save_selection(const std::string& path, const SelectionParams& sel) {
  KeyValueDocument doc;
  doc.header.set("f_bar", format_numbers(std::vector<double>(sel.f_bar.begin(), sel.f_bar.end())));
  doc.header.set("thr", format_number(sel.thr));
  doc.header.set("field_version", std::to_string(sel.field_version));
  write_file_atomic(path, format_key_value(doc));
}

SelectionParams load_selection(const std::string& path) {
  KeyValueDocument doc = read_key_value_file(path);
  SelectionParams sel;
  for (double v : doc.header.get_doubles("f_bar")) sel.f_bar.push_back(static_cast<float>(v));
  const double thr = doc.header.get_double("thr");
  if (!(thr >= 0)) fail(ErrorCode::kData, path + ": thr must be >= 0");
  sel.thr = static_cast<float>(thr);
  sel.field_version = static_cast<uint64_t>(doc.header.get_int("field_version", 0));
  if (sel.f_bar.empty()) fail(ErrorCode::kData, path + ": f_bar is empty");
  return sel;
}

std::string import_transforms(const std::string& transforms_path, const std::string& manifest_path,
                              const TransformsOptions& options) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(transforms_path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kData, transforms_path + ": " + e.what());
  }
  if (!j.contains("frames") || !j["frames"].is_array()) fail(ErrorCode::kData, transforms_path + ": missing frames[]");
  const fs::path root = fs::path(transforms_path).parent_path();
  Dataset ds;
  ds.name = root.filename().string();
  ds.bounds = options.bounds;
  int index = 0;
  for (const auto& jf : j["frames"]) {
    Frame f;
    f.id = "frame_" + std::to_string(index);
    std::string file = jf.at("file_path").get<std::string>();
    fs::path img = root / file;
    if (!img.has_extension()) img += ".png";
    f.image_path = img.string();
    require_file(f.image_path, f, "image");
    Image probe = read_png8(f.image_path);
    auto& k = f.camera.intrinsics;
    k.width = probe.width;
    k.height = probe.height;
    auto num = [&](const char* key) -> std::optional<double> {
      if (jf.contains(key)) return jf[key].get<double>();
      if (j.contains(key)) return j[key].get<double>();
      return std::nullopt;
    };
    if (auto fl = num("fl_x")) {
      k.fx = *fl;
      k.fy = num("fl_y").value_or(*fl);
    } else if (auto ax = num("camera_angle_x")) {
      k.fx = 0.5 * k.width / std::tan(0.5 * *ax);
      k.fy = k.fx;
    } else {
      fail(ErrorCode::kData, transforms_path + ": no focal length (fl_x or camera_angle_x)");
    }
    k.cx = num("cx").value_or(0.5 * k.width);
    k.cy = num("cy").value_or(0.5 * k.height);
    const auto& m = jf.at("transform_matrix");
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) f.camera.camera_to_world(r, c) = m.at(r).at(c).get<double>();
    }
    f.camera.near = options.near;
    f.camera.far = options.far;
    f.split = options.holdout_every > 0 && index % options.holdout_every == options.holdout_every - 1 ? Split::kHoldout
                                                                                                       : Split::kTrain;
    ds.frames.push_back(std::move(f));
    ++index;
  }
  save_manifest(ds, manifest_path);
  return manifest_path;
}

}  // namespace triedit
