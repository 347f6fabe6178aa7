// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// 2x2 multi-view context grids for external image editors.
//
// Mosaic layout: cell k sits at column k % 2, row k / 2, so mosaic pixel
// (x, y) belongs to cell (2y / H) * 2 + (2x / W) for a 2W' x 2H' mosaic.
// At epoch 0 all four cells are editable. At epoch j >= 1 cells a and b
// (0 and 1) hold the two most recently edited views as fixed guidance, with
// empty masks, and cells c and d (2 and 3) are fresh views.

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triedit/camera.hpp"
#include "triedit/field.hpp"
#include "triedit/image.hpp"
#include "triedit/selection.hpp"
#include "triedit/train.hpp"

namespace triedit {

enum class CellRole { kGuidanceFixed, kEditableMasked };

std::string_view cell_role_name(CellRole role);

struct ContextCell {
  int camera = -1;
  CellRole role = CellRole::kEditableMasked;
  Image rgb;
  Image mask;   // 0/1, single channel
  Image depth;  // distance along the ray
};

struct ContextGrid {
  int epoch = 0;
  std::array<ContextCell, 4> cells;
  std::string provenance;
  int cell_width = 0;
  int cell_height = 0;
};

struct Mosaic {
  Image rgb;
  Image mask;
  Image depth;
};

/// Concatenates equally sized tiles into a 2x2 mosaic.
Image tile_mosaic(std::span<const Image> tiles);
/// Inverse of tile_mosaic; throws kData when the mosaic is not 2W x 2H.
std::array<Image, 4> slice_mosaic(const Image& mosaic, int cell_width, int cell_height);
Mosaic mosaic_of(const ContextGrid& grid);

/// Epoch 0: farthest-point sampling over camera positions, first pick drawn
/// from `seed`. Epoch j >= 1: the last two entries of `history` followed by
/// the two unedited cameras farthest from every edited one.
std::array<int, 4> pick_context_cameras(std::span<const Vec3> positions, int epoch, uint64_t seed,
                                        std::span<const int> history);

struct ContextSettings {
  int epochs = 3;
  uint64_t seed = 0;
  int samples_per_ray = 128;
  int workers = 0;
};

/// One edited view recorded by the protocol.
struct EditedView {
  int camera = -1;
  int epoch = 0;
  Image rgb;
  Image depth;  // edited depth, empty when the editor supplied none
};

/// Single-writer state of the iterative protocol.
class ContextSession {
 public:
  ContextSession(std::vector<Camera> cameras, SelectionParams selection, ContextSettings settings,
                 uint64_t session_nonce);

  int epoch() const { return epoch_; }
  bool done() const { return epoch_ >= settings_.epochs; }
  const ContextSettings& settings() const { return settings_; }
  const SelectionParams& selection() const { return selection_; }
  const std::vector<Camera>& cameras() const { return cameras_; }
  const std::vector<EditedView>& edited() const { return edited_; }
  std::vector<int> history() const;
  uint64_t nonce() const { return nonce_; }

  /// Expected provenance for the current epoch against `field_version`.
  std::string provenance(uint64_t field_version) const;

  /// Renders the current epoch's grid. Throws kState when done.
  ContextGrid compose(const TriPlaneField<float>& field) const;

  /// Stores the editable cells of `edited_mosaic` (and of the optional depth
  /// mosaic, in ray distance units) and advances the epoch. Throws kStale
  /// when `provenance` does not match the live session and kState when done.
  void import(const Image& edited_mosaic, const std::string& provenance, uint64_t field_version,
              const Image* edited_depth = nullptr);

  /// Text state plus the edited images (edited_e<epoch>_c<camera>.png) in `dir`.
  void save(const std::string& dir) const;
  static ContextSession load(const std::string& dir, std::vector<Camera> cameras);

 private:
  std::vector<Camera> cameras_;
  SelectionParams selection_;
  ContextSettings settings_;
  uint64_t nonce_ = 0;
  int epoch_ = 0;
  std::vector<EditedView> edited_;
};

/// Edited views as training views (rgb, plus edited depth when present).
std::vector<TrainView> edited_train_views(const ContextSession& session);

/// Writes mosaic_rgb.png, mosaic_mask.png, mosaic_depth.png (16-bit,
/// normalized by near/far) and context.txt into `dir`.
void export_context(const ContextGrid& grid, const std::vector<Camera>& cameras, const std::string& dir);

/// Rotates hue by `degrees` about the gray axis where `mask` > 0.5, then
/// clamps to [0,1]. Used as a scripted stand-in for an external editor.
Image hue_rotate(const Image& rgb, const Image& mask, double degrees);

/// Supplies the edited image (and optional edited depth) for one camera.
struct EditedImage {
  Image rgb;
  Image depth;
};
using ViewEditor = std::function<EditedImage(int camera)>;

/// Editor that hue-rotates renders of a fixed reference field inside its
/// projected selection, so repeated requests for a view agree.
ViewEditor reference_hue_editor(std::shared_ptr<const TriPlaneField<float>> reference, std::vector<Camera> cameras,
                                SelectionParams selection, double degrees, int samples_per_ray, int workers);

struct ProtocolReport {
  std::vector<int> edited_cameras;  // in edit order
  int iterations = 0;
  double elapsed_ms = 0;
};

/// Runs the remaining epochs of `session`: compose, edit the editable cells
/// with `editor`, import, then fine-tune `field` for `round_epochs` passes
/// over every edited view so far. `original` anchors density preservation.
ProtocolReport run_iterative_protocol(TriPlaneField<float>* field, const TriPlaneField<float>& original,
                                      ContextSession* session, const ViewEditor& editor, const TrainConfig& finetune,
                                      int round_epochs = 1, const TrainHooks& hooks = {});

/// Iterations the iterative protocol spends for `epochs` rounds of one pass
/// each: sum over j of ceil((4 + 2j) * pixels_per_view / batch).
int protocol_iteration_budget(int epochs, int pixels_per_view, int batch);

/// Ablation baseline: edits only `camera` and fine-tunes on it for the
/// smallest number of passes reaching `budget_iterations`.
ProtocolReport run_single_view_baseline(TriPlaneField<float>* field, const TriPlaneField<float>& original,
                                        const Camera& camera, int camera_index, const SelectionParams& selection,
                                        const ViewEditor& editor, const TrainConfig& finetune, int budget_iterations,
                                        const TrainHooks& hooks = {});

struct ContextSidecar {
  std::string provenance;
  int epoch = 0;
  int cell_width = 0;
  int cell_height = 0;
  double near = 0;
  double far = 0;
  std::array<int, 4> cameras{};
  std::array<CellRole, 4> roles{};
};
ContextSidecar read_context_sidecar(const std::string& path);

}  // namespace triedit
