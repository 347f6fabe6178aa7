// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/keyvalue.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "triedit/common.hpp"

namespace triedit {
namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& token, double* out) {
  const char* first = token.data();
  const char* last = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(first, last, *out);
  return ec == std::errc() && ptr == last;
}

}  // namespace

void KeyValueBlock::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

bool KeyValueBlock::has(const std::string& key) const { return find(key).has_value(); }

std::optional<std::string> KeyValueBlock::find(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

void KeyValueBlock::bad(const std::string& key, const std::string& why) const {
  std::string where = origin_;
  if (!name_.empty()) where += " [" + name_ + "]";
  fail(ErrorCode::kData, where + ": field '" + key + "' " + why);
}

std::string KeyValueBlock::get_string(const std::string& key) const {
  auto v = find(key);
  if (!v) bad(key, "is missing");
  return *v;
}

std::string KeyValueBlock::get_string(const std::string& key, const std::string& fallback) const {
  return find(key).value_or(fallback);
}

double KeyValueBlock::get_double(const std::string& key) const {
  double out = 0.0;
  if (!parse_double(trim(get_string(key)), &out)) bad(key, "is not a number");
  return out;
}

double KeyValueBlock::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

long long KeyValueBlock::get_int(const std::string& key) const {
  std::string s = trim(get_string(key));
  long long out = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size()) bad(key, "is not an integer");
  return out;
}

long long KeyValueBlock::get_int(const std::string& key, long long fallback) const {
  return has(key) ? get_int(key) : fallback;
}

bool KeyValueBlock::get_bool(const std::string& key, bool fallback) const {
  auto v = find(key);
  if (!v) return fallback;
  std::string s = trim(*v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  bad(key, "is not a boolean");
}

std::vector<double> KeyValueBlock::get_doubles(const std::string& key, int count) const {
  std::istringstream in(get_string(key));
  std::vector<double> values;
  std::string token;
  while (in >> token) {
    double v = 0.0;
    if (!parse_double(token, &v)) bad(key, "contains non-numeric token '" + token + "'");
    values.push_back(v);
  }
  if (count >= 0 && static_cast<int>(values.size()) != count) {
    bad(key, "expects " + std::to_string(count) + " numbers, got " + std::to_string(values.size()));
  }
  return values;
}

std::vector<const KeyValueBlock*> KeyValueDocument::sections_named(const std::string& name) const {
  std::vector<const KeyValueBlock*> out;
  for (const auto& s : sections) {
    if (s.name() == name) out.push_back(&s);
  }
  return out;
}

KeyValueDocument parse_key_value(const std::string& text, const std::string& origin) {
  KeyValueDocument doc;
  doc.header = KeyValueBlock("", origin);
  KeyValueBlock* current = &doc.header;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') fail(ErrorCode::kData, origin + ":" + std::to_string(line_no) + ": unterminated section");
      doc.sections.emplace_back(trim(t.substr(1, t.size() - 2)),
                                origin + ":" + std::to_string(line_no));
      current = &doc.sections.back();
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::kData, origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    current->set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return doc;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string format_numbers(const std::vector<double>& values) {
  std::string out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) out += ' ';
    out += format_number(values[i]);
  }
  return out;
}

KeyValueDocument read_key_value_file(const std::string& path) {
  return parse_key_value(read_file(path), path);
}

std::string format_key_value(const KeyValueDocument& doc) {
  std::ostringstream out;
  for (const auto& [k, v] : doc.header.entries()) out << k << " = " << v << "\n";
  for (const auto& s : doc.sections) {
    out << "\n[" << s.name() << "]\n";
    for (const auto& [k, v] : s.entries()) out << k << " = " << v << "\n";
  }
  return out.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kData, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::kData, "short write to " + tmp.string());
  }
  fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kData, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace triedit
