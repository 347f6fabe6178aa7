// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/edit_token.hpp"

#include <algorithm>
#include <chrono>
#include <set>

#include "triedit/binary_io.hpp"
#include "triedit/composite.hpp"
#include "triedit/field.hpp"
#include "triedit/keyvalue.hpp"

namespace triedit {
namespace {

constexpr uint16_t kTokenVersion = 1;
constexpr uint16_t kStackVersion = 1;

void write_mlp(ByteWriter& w, const Mlp<float>& mlp) {
  w.put<uint32_t>(static_cast<uint32_t>(mlp.layers.size()));
  for (const auto& layer : mlp.layers) {
    w.put<uint32_t>(static_cast<uint32_t>(layer.in_dim()));
    w.put<uint32_t>(static_cast<uint32_t>(layer.out_dim()));
    w.put<uint32_t>(static_cast<uint32_t>(layer.activation));
  }
  mlp.for_each_array([&](std::span<const float> values) { w.put_floats(values); });
}

Mlp<float> read_mlp(ByteReader& r) {
  const auto n_layers = r.get<uint32_t>();
  if (n_layers == 0 || n_layers > 16) fail(ErrorCode::kData, r.what() + ": implausible layer count");
  std::vector<int> dims;
  std::vector<Activation> acts;
  for (uint32_t l = 0; l < n_layers; ++l) {
    const auto in = r.get<uint32_t>();
    const auto out = r.get<uint32_t>();
    const auto act = r.get<uint32_t>();
    if (in == 0 || out == 0 || in > 4096 || out > 4096 || act > 3) {
      fail(ErrorCode::kData, r.what() + ": bad layer table entry");
    }
    if (l == 0) {
      dims.push_back(static_cast<int>(in));
    } else if (static_cast<int>(in) != dims.back()) {
      fail(ErrorCode::kData, r.what() + ": layer dims do not chain");
    }
    dims.push_back(static_cast<int>(out));
    acts.push_back(static_cast<Activation>(act));
  }
  Mlp<float> mlp = Mlp<float>::zeros(dims, acts);
  mlp.for_each_array([&](std::span<float> values) { r.get_floats(values); });
  return mlp;
}

}  // namespace

std::string_view token_kind_name(TokenKind kind) {
  return kind == TokenKind::kFeatureResidual ? "feature_residual" : "color_residual";
}

TokenKind parse_token_kind(const std::string& name) {
  if (name == "feature" || name == "feature_residual") return TokenKind::kFeatureResidual;
  if (name == "color" || name == "color_residual") return TokenKind::kColorResidual;
  fail(ErrorCode::kUsage, "unknown token kind '" + name + "' (expected feature|color)");
}

void EditToken::validate(int sem_dim) const {
  const int expected_in = kind == TokenKind::kFeatureResidual ? sem_dim : 3;
  if (mlp.empty() || mlp.in_dim() != expected_in || mlp.out_dim() != 3) {
    fail(ErrorCode::kData, "token '" + id + "': MLP shape does not match its kind");
  }
  if (static_cast<int>(selection.f_bar.size()) != sem_dim) {
    fail(ErrorCode::kData, "token '" + id + "': selection feature dim does not match the field");
  }
}

EditToken make_token(TokenKind kind, int sem_dim, const SelectionParams& selection, uint64_t seed,
                     std::string label) {
  EditToken token;
  token.kind = kind;
  const bool feature = kind == TokenKind::kFeatureResidual;
  token.mlp = make_edit_mlp<float>(feature ? sem_dim : 3, feature ? kFeatureTokenHidden : kColorTokenHidden);
  Rng rng(seed);
  token.mlp.init_kaiming(rng);
  token.mlp.layers.back().weight.setZero();
  token.selection = selection;
  token.created_at = std::chrono::duration_cast<std::chrono::seconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
  token.id = "tok-" + std::to_string(seed & 0xffffffffu);
  token.label = std::move(label);
  return token;
}

std::vector<uint8_t> serialize_token(const EditToken& token) {
  ByteWriter w;
  w.put_magic("PNET");
  w.put<uint16_t>(kTokenVersion);
  w.put<uint8_t>(static_cast<uint8_t>(token.kind));
  w.put<uint8_t>(token.enabled ? 1 : 0);
  w.put<int64_t>(token.created_at);
  w.put_string(token.id);
  write_mlp(w, token.mlp);
  w.put<uint32_t>(static_cast<uint32_t>(token.selection.f_bar.size()));
  w.put_floats(token.selection.f_bar);
  w.put<float>(token.selection.thr);
  w.put<uint64_t>(token.selection.field_version);
  w.put_string(token.label);
  if (w.size() > token.byte_limit()) {
    fail(ErrorCode::kData, "token '" + token.id + "' serializes to " + std::to_string(w.size()) +
                               " bytes, above the " + std::to_string(token.byte_limit()) + "-byte limit");
  }
  return std::move(w.bytes());
}

EditToken deserialize_token(std::span<const uint8_t> bytes) {
  ByteReader r(bytes, "token");
  r.expect_magic("PNET");
  if (r.get<uint16_t>() != kTokenVersion) fail(ErrorCode::kData, "token: unsupported version");
  EditToken token;
  const auto kind = r.get<uint8_t>();
  if (kind > 1) fail(ErrorCode::kData, "token: unknown kind");
  token.kind = static_cast<TokenKind>(kind);
  token.enabled = r.get<uint8_t>() != 0;
  token.created_at = r.get<int64_t>();
  token.id = r.get_string(256);
  token.mlp = read_mlp(r);
  const auto dim = r.get<uint32_t>();
  if (dim > 4096) fail(ErrorCode::kData, "token: selection dim out of range");
  token.selection.f_bar.resize(dim);
  r.get_floats(token.selection.f_bar);
  token.selection.thr = r.get<float>();
  token.selection.field_version = r.get<uint64_t>();
  token.label = r.get_string(4096);
  r.expect_end();
  if (token.mlp.out_dim() != 3) fail(ErrorCode::kData, "token: output dim must be 3");
  if (token.kind == TokenKind::kColorResidual && token.mlp.in_dim() != 3) {
    fail(ErrorCode::kData, "token: color token input dim must be 3");
  }
  return token;
}

void save_token(const std::string& path, const EditToken& token) {
  auto bytes = serialize_token(token);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

EditToken load_token(const std::string& path) {
  std::string bytes = read_file(path);
  try {
    return deserialize_token(as_bytes(bytes));
  } catch (const Error& e) {
    fail(e.code(), path + ": " + e.what());
  }
}

void EditStack::push(EditToken token) {
  for (const auto& t : tokens_) {
    if (t.id == token.id) fail(ErrorCode::kConflict, "layer id '" + token.id + "' already present");
  }
  tokens_.push_back(std::move(token));
}

void EditStack::toggle(const std::string& id) {
  for (auto& t : tokens_) {
    if (t.id == id) {
      t.enabled = !t.enabled;
      return;
    }
  }
  fail(ErrorCode::kNotFound, "no layer with id '" + id + "'");
}

void EditStack::set_enabled(const std::string& id, bool enabled) {
  for (auto& t : tokens_) {
    if (t.id == id) {
      t.enabled = enabled;
      return;
    }
  }
  fail(ErrorCode::kNotFound, "no layer with id '" + id + "'");
}

void EditStack::remove(const std::string& id) {
  auto it = std::find_if(tokens_.begin(), tokens_.end(), [&](const EditToken& t) { return t.id == id; });
  if (it == tokens_.end()) fail(ErrorCode::kNotFound, "no layer with id '" + id + "'");
  tokens_.erase(it);
}

void EditStack::reorder(const std::vector<std::string>& order) {
  if (order.size() != tokens_.size() || std::set<std::string>(order.begin(), order.end()).size() != order.size()) {
    fail(ErrorCode::kUsage, "reorder: expected a permutation of the current layer ids");
  }
  std::vector<EditToken> next;
  next.reserve(tokens_.size());
  for (const auto& id : order) next.push_back(find(id));
  tokens_ = std::move(next);
}

const EditToken& EditStack::find(const std::string& id) const {
  for (const auto& t : tokens_) {
    if (t.id == id) return t;
  }
  fail(ErrorCode::kNotFound, "no layer with id '" + id + "'");
}

std::vector<const EditToken*> EditStack::enabled() const {
  std::vector<const EditToken*> out;
  for (const auto& t : tokens_) {
    if (t.enabled) out.push_back(&t);
  }
  return out;
}

std::vector<uint8_t> serialize_stack(const EditStack& stack) {
  ByteWriter w;
  w.put_magic("PNST");
  w.put<uint16_t>(kStackVersion);
  w.put<uint32_t>(static_cast<uint32_t>(stack.size()));
  for (const auto& token : stack.tokens()) {
    auto bytes = serialize_token(token);
    w.put<uint32_t>(static_cast<uint32_t>(bytes.size()));
    w.put_bytes(bytes);
  }
  return std::move(w.bytes());
}

EditStack deserialize_stack(std::span<const uint8_t> bytes) {
  ByteReader r(bytes, "layer stack");
  r.expect_magic("PNST");
  if (r.get<uint16_t>() != kStackVersion) fail(ErrorCode::kData, "layer stack: unsupported version");
  const auto count = r.get<uint32_t>();
  EditStack stack;
  for (uint32_t i = 0; i < count; ++i) {
    const auto size = r.get<uint32_t>();
    stack.push(deserialize_token(r.get_bytes(size)));
  }
  r.expect_end();
  return stack;
}

void save_stack(const std::string& path, const EditStack& stack) {
  auto bytes = serialize_stack(stack);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

EditStack load_stack(const std::string& path) {
  std::string bytes = read_file(path);
  try {
    return deserialize_stack(as_bytes(bytes));
  } catch (const Error& e) {
    fail(e.code(), path + ": " + e.what());
  }
}

EditStack load_layers(const std::string& path) {
  std::string bytes = read_file(path);
  if (bytes.size() >= 4 && bytes.compare(0, 4, "PNET") == 0) {
    EditStack stack;
    stack.push(load_token(path));
    return stack;
  }
  return load_stack(path);
}

template <typename T>
std::array<T, 3> apply_stack(std::span<const T> base_color, std::span<const T> f_sem,
                             std::span<const uint8_t> mask_bits, std::span<const EditToken* const> tokens) {
  if (mask_bits.size() != tokens.size()) fail(ErrorCode::kUsage, "apply_stack: one mask bit per token required");
  std::array<T, 3> c{base_color[0], base_color[1], base_color[2]};
  bool touched = false;
  for (size_t k = 0; k < tokens.size(); ++k) {
    const EditToken& tok = *tokens[k];
    if (!tok.enabled || !mask_bits[k]) continue;
    Mlp<T> mlp = tok.mlp.template cast<T>();
    const bool feature = tok.kind == TokenKind::kFeatureResidual;
    std::vector<T> x = feature ? std::vector<T>(f_sem.begin(), f_sem.end()) : std::vector<T>(c.begin(), c.end());
    if (static_cast<int>(x.size()) != mlp.in_dim()) fail(ErrorCode::kUsage, "apply_stack: token input dim mismatch");
    std::array<T, 3> r{};
    mlp.forward(x, r);
    for (int ch = 0; ch < 3; ++ch) c[ch] += r[ch];
    touched = true;
  }
  if (touched) {
    for (auto& v : c) v = std::clamp(v, T(0), T(1));
  }
  return c;
}

template <typename T>
void apply_stack_batch(const RowMatrix<T>& f_sem, RowMatrix<T>* color, std::span<const EditToken* const> tokens) {
  const int n = static_cast<int>(f_sem.rows());
  std::vector<uint8_t> touched(n, 0);
  bool any = false;
  for (const EditToken* tok : tokens) {
    if (!tok->enabled) continue;
    const bool feature = tok->kind == TokenKind::kFeatureResidual;
    if (tok->selection.f_bar.size() != static_cast<size_t>(f_sem.cols())) {
      fail(ErrorCode::kUsage, "edit stack: token '" + tok->id + "' selection dim does not match the field");
    }
    std::vector<int> rows;
    for (int i = 0; i < n; ++i) {
      std::span<const T> f(f_sem.data() + static_cast<size_t>(i) * f_sem.cols(), f_sem.cols());
      if (feature_selected(f, tok->selection)) rows.push_back(i);
    }
    if (rows.empty()) continue;
    const int in_dim = feature ? static_cast<int>(f_sem.cols()) : 3;
    if (tok->mlp.in_dim() != in_dim) fail(ErrorCode::kUsage, "edit stack: token '" + tok->id + "' input dim mismatch");
    RowMatrix<T> x(static_cast<Eigen::Index>(rows.size()), in_dim);
    for (size_t r = 0; r < rows.size(); ++r) {
      x.row(r) = feature ? RowMatrix<T>(f_sem.row(rows[r])) : RowMatrix<T>(color->row(rows[r]));
    }
    RowMatrix<T> residual;
    mlp_forward(tok->mlp.template cast<T>(), x, &residual, static_cast<MlpTape<T>*>(nullptr));
    for (size_t r = 0; r < rows.size(); ++r) {
      color->row(rows[r]) += residual.row(r);
      touched[rows[r]] = 1;
    }
    any = true;
  }
  if (!any) return;
  for (int i = 0; i < n; ++i) {
    if (!touched[i]) continue;
    for (int c = 0; c < 3; ++c) (*color)(i, c) = std::clamp((*color)(i, c), T(0), T(1));
  }
}

template <typename T>
std::array<T, 3> composite_with_edit(std::span<const T> sigmas, std::span<const T> deltas,
                                     std::span<const T> base_colors, std::span<const T> f_sems, int sem_dim,
                                     std::span<const EditToken* const> tokens) {
  const size_t n = sigmas.size();
  if (base_colors.size() != 3 * n || f_sems.size() != static_cast<size_t>(sem_dim) * n) {
    fail(ErrorCode::kUsage, "composite_with_edit: per-sample arrays misaligned");
  }
  RowMatrix<T> colors(static_cast<Eigen::Index>(n), 3);
  RowMatrix<T> feats(static_cast<Eigen::Index>(n), sem_dim);
  std::copy(base_colors.begin(), base_colors.end(), colors.data());
  std::copy(f_sems.begin(), f_sems.end(), feats.data());
  apply_stack_batch(feats, &colors, tokens);
  auto r = composite<T>(sigmas, deltas, std::span<const T>(colors.data(), 3 * n), 3);
  return {r.value[0], r.value[1], r.value[2]};
}

#define TRIEDIT_INSTANTIATE(T)                                                                                     \
  template std::array<T, 3> apply_stack<T>(std::span<const T>, std::span<const T>, std::span<const uint8_t>,      \
                                           std::span<const EditToken* const>);                                    \
  template void apply_stack_batch<T>(const RowMatrix<T>&, RowMatrix<T>*, std::span<const EditToken* const>);      \
  template std::array<T, 3> composite_with_edit<T>(std::span<const T>, std::span<const T>, std::span<const T>,    \
                                                   std::span<const T>, int, std::span<const EditToken* const>);
TRIEDIT_INSTANTIATE(float)
TRIEDIT_INSTANTIATE(double)
#undef TRIEDIT_INSTANTIATE

}  // namespace triedit
