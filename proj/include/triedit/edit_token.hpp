// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Residual edit tokens: small MLPs that add a color offset to samples inside
// their selection. Feature tokens read the semantic feature f_sem; color
// tokens read the current (already edited) color, which makes them chainable
// color-to-color maps.
//
// Token file layout (little-endian):
//   "PNET" u16 version u8 kind u8 enabled i64 created_at
//   u32 id_len, id bytes
//   u32 layer_count, then per layer: u32 in, u32 out, u32 activation
//   float32 weights (row-major, out x in) and biases, layer by layer
//   u32 f_bar_len, float32 f_bar[], float32 thr, u64 field_version
//   u32 label_len, UTF-8 label

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "triedit/mlp.hpp"
#include "triedit/selection.hpp"

namespace triedit {

enum class TokenKind : uint8_t { kFeatureResidual = 0, kColorResidual = 1 };

inline constexpr size_t kFeatureTokenByteLimit = 36864;
inline constexpr size_t kColorTokenByteLimit = 4096;
inline constexpr int kFeatureTokenHidden = 48;
inline constexpr int kColorTokenHidden = 16;

std::string_view token_kind_name(TokenKind kind);
TokenKind parse_token_kind(const std::string& name);

struct EditToken {
  std::string id;
  TokenKind kind = TokenKind::kFeatureResidual;
  Mlp<float> mlp;
  SelectionParams selection;
  bool enabled = true;
  int64_t created_at = 0;
  std::string label;

  size_t byte_limit() const {
    return kind == TokenKind::kFeatureResidual ? kFeatureTokenByteLimit : kColorTokenByteLimit;
  }
  /// Throws kData when the MLP shape does not fit the kind (input D_sem or 3,
  /// output 3).
  void validate(int sem_dim) const;
};

/// Fresh token with Kaiming hidden layers and a zero output layer.
EditToken make_token(TokenKind kind, int sem_dim, const SelectionParams& selection, uint64_t seed,
                     std::string label = {});

std::vector<uint8_t> serialize_token(const EditToken& token);
EditToken deserialize_token(std::span<const uint8_t> bytes);
void save_token(const std::string& path, const EditToken& token);
EditToken load_token(const std::string& path);

/// Ordered, toggleable list of tokens. Application order is list order.
class EditStack {
 public:
  EditStack() = default;
  explicit EditStack(std::vector<EditToken> tokens) : tokens_(std::move(tokens)) {}

  const std::vector<EditToken>& tokens() const { return tokens_; }
  std::vector<EditToken>& tokens() { return tokens_; }
  bool empty() const { return tokens_.empty(); }
  size_t size() const { return tokens_.size(); }

  void push(EditToken token);
  /// Throws kNotFound for unknown ids.
  void toggle(const std::string& id);
  void set_enabled(const std::string& id, bool enabled);
  void remove(const std::string& id);
  /// `order` must be a permutation of the current ids.
  void reorder(const std::vector<std::string>& order);
  const EditToken& find(const std::string& id) const;
  std::vector<const EditToken*> enabled() const;

 private:
  std::vector<EditToken> tokens_;
};

/// Stack file: "PNST" u16 version u32 count, then per token u32 size + bytes.
std::vector<uint8_t> serialize_stack(const EditStack& stack);
EditStack deserialize_stack(std::span<const uint8_t> bytes);
void save_stack(const std::string& path, const EditStack& stack);
EditStack load_stack(const std::string& path);
/// Loads either a token file or a stack file.
EditStack load_layers(const std::string& path);

/// Applies the enabled tokens to one sample. `mask_bits[k]` is the selection
/// bit of tokens[k]; masked-out tokens are skipped. The result is clamped to
/// [0,1] after all residuals are added.
template <typename T>
std::array<T, 3> apply_stack(std::span<const T> base_color, std::span<const T> f_sem,
                             std::span<const uint8_t> mask_bits, std::span<const EditToken* const> tokens);

/// Batched form used by the renderer: edits `color` (n x 3) in place given
/// f_sem (n x D). Samples outside every token's selection are left untouched.
template <typename T>
void apply_stack_batch(const RowMatrix<T>& f_sem, RowMatrix<T>* color, std::span<const EditToken* const> tokens);

/// Composites base colors after per-sample stack application. Equivalent to composite() when no sample is masked.
template <typename T>
std::array<T, 3> composite_with_edit(std::span<const T> sigmas, std::span<const T> deltas,
                                     std::span<const T> base_colors, std::span<const T> f_sems, int sem_dim,
                                     std::span<const EditToken* const> tokens);

}  // namespace triedit
