// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// Line-oriented "key = value" text with optional [section] records. Used for
// dataset manifests, synthetic scene specs, config files and sidecars.

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace triedit {

class KeyValueBlock {
 public:
  KeyValueBlock() = default;
  KeyValueBlock(std::string name, std::string origin) : name_(std::move(name)), origin_(std::move(origin)) {}

  const std::string& name() const { return name_; }
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  std::optional<std::string> find(const std::string& key) const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Whitespace-separated numbers; `count` < 0 accepts any length.
  std::vector<double> get_doubles(const std::string& key, int count = -1) const;

 private:
  [[noreturn]] void bad(const std::string& key, const std::string& why) const;

  std::string name_;
  std::string origin_;
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct KeyValueDocument {
  KeyValueBlock header;
  std::vector<KeyValueBlock> sections;

  std::vector<const KeyValueBlock*> sections_named(const std::string& name) const;
};

/// Shortest round-trip text for numbers, space separated for lists.
std::string format_number(double v);
std::string format_numbers(const std::vector<double>& values);

KeyValueDocument parse_key_value(const std::string& text, const std::string& origin);
KeyValueDocument read_key_value_file(const std::string& path);
std::string format_key_value(const KeyValueDocument& doc);

/// Writes to a sibling temp file and renames over `path`.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace triedit
