// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dataset manifests, checkpoints, feature rasters, depth rasters and
// selection sidecars.
//
// Feature file: "PNF1" u32 height u32 width u32 channels, then float32
// little-endian, row-major, channels interleaved.
//
// Checkpoint file (little-endian):
//   "PNCK" u16 version
//   u32 R, u32 F, u8 combine, u32 geo_features, u32 sem_dim
//   f64 bounds_min[3], f64 bounds_max[3], u64 snapshot version
//   u32 metrics_len, metrics text
//   4 x MLP table (geom, sem, color, edit template):
//     u32 layers, then per layer u32 in, u32 out, u32 activation
//   u64 payload_floats, then float32 payload: plane_xy, plane_xz, plane_yz,
//   then each MLP layer by layer, weight (out x in, row-major) then bias.
// The payload count must equal the size implied by the header.

#include <optional>
#include <string>
#include <vector>

#include "triedit/camera.hpp"
#include "triedit/field.hpp"
#include "triedit/image.hpp"
#include "triedit/keyvalue.hpp"
#include "triedit/selection.hpp"
#include "triedit/train.hpp"

namespace triedit {

enum class Split { kTrain, kHoldout };

struct Frame {
  std::string id;
  Camera camera;
  Split split = Split::kTrain;
  std::string image_path;
  std::string feature_path;  // optional
  std::string depth_path;    // optional, 16-bit
  Image rgb;
  Image features;
  Image depth;
};

struct Dataset {
  std::string name;
  std::string root;
  Aabb bounds;
  int feature_dim = 0;
  std::vector<Frame> frames;

  std::vector<const Frame*> split(Split s) const;
  const Frame& frame(const std::string& id) const;
  int frame_index(const std::string& id) const;
};

/// Camera keys shared by manifest frames and standalone camera files:
/// width height fx fy [cx cy] near far camera_to_world (16 values, row-major).
Camera parse_camera(const KeyValueBlock& block, const std::string& what);
void format_camera(const Camera& camera, KeyValueBlock* block);
Camera load_camera(const std::string& path);

/// Parses and validates a manifest; with `load_images` every referenced file
/// is decoded. Errors name the offending frame and field.
Dataset load_dataset(const std::string& manifest_path, bool load_images = true);
/// Writes the manifest only (images must already be in place).
void save_manifest(const Dataset& dataset, const std::string& manifest_path);

std::vector<TrainView> train_views(const Dataset& dataset, Split split = Split::kTrain);

void save_features(const std::string& path, const Image& features);
Image load_features(const std::string& path);

/// Depth to 16 bits: 0 encodes "no surface" (depth <= 0); otherwise
/// 1 + round((d - near) / (far - near) * 65534), clamped to [1, 65535].
Image16 encode_depth(const Image& depth, double near, double far);
Image decode_depth(const Image16& depth, double near, double far);

std::vector<uint8_t> serialize_checkpoint(const TriPlaneField<float>& field, const std::string& metrics = {});
TriPlaneField<float> deserialize_checkpoint(std::span<const uint8_t> bytes, std::string* metrics = nullptr);
void save_checkpoint(const std::string& path, const TriPlaneField<float>& field, const std::string& metrics = {});
TriPlaneField<float> load_checkpoint(const std::string& path, std::string* metrics = nullptr);

/// Standalone selection sidecar (key = value text).
void save_selection(const std::string& path, const SelectionParams& sel);
SelectionParams load_selection(const std::string& path);

struct TransformsOptions {
  Aabb bounds;
  double near = 2.0;
  double far = 6.0;
  /// Every n-th frame goes to the holdout split (0 = none).
  int holdout_every = 8;
};

/// Converts a Blender/nerfstudio-style transforms.json (camera_angle_x or
/// fl_x/fl_y/cx/cy, frames[].file_path, frames[].transform_matrix) into a
/// manifest next to it. Returns the manifest path.
std::string import_transforms(const std::string& transforms_path, const std::string& manifest_path,
                              const TransformsOptions& options);

}  // namespace triedit
