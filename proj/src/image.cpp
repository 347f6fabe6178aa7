// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "triedit/common.hpp"
#include "triedit/keyvalue.hpp"

namespace triedit {
namespace {

struct ReadCursor {
  std::span<const uint8_t> bytes;
  size_t offset = 0;
};

void png_read_callback(png_structp png, png_bytep out, png_size_t count) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + count > cursor->bytes.size()) png_error(png, "truncated PNG");
  std::memcpy(out, cursor->bytes.data() + cursor->offset, count);
  cursor->offset += count;
}

void png_write_callback(png_structp png, png_bytep data, png_size_t count) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + count);
}

void png_flush_callback(png_structp) {}

[[noreturn]] void png_error_callback(png_structp, png_const_charp message) {
  throw Error(ErrorCode::kData, std::string("png: ") + message);
}

void png_warning_callback(png_structp, png_const_charp) {}

std::vector<uint8_t> write_png_rows(int width, int height, int color_type, int bit_depth,
                                    const std::vector<std::vector<uint8_t>>& rows) {
  std::vector<uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_callback,
                                            png_warning_callback);
  png_infop info = png_create_info_struct(png);
  try {
    png_set_write_fn(png, &out, png_write_callback, png_flush_callback);
    png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (const auto& row : rows) png_write_row(png, row.data());
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

struct DecodedRows {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<std::vector<uint8_t>> rows;
};

DecodedRows read_png_rows(std::span<const uint8_t> bytes, bool want16) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    fail(ErrorCode::kData, "not a PNG stream");
  }
  ReadCursor cursor{bytes, 0};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_callback,
                                           png_warning_callback);
  png_infop info = png_create_info_struct(png);
  DecodedRows result;
  try {
    png_set_read_fn(png, &cursor, png_read_callback);
    png_read_info(png, info);
    int color_type = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (!want16 && depth == 16) png_set_strip_16(png);
    if (want16 && depth == 16) png_set_swap(png);  // host little-endian order
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    result.width = static_cast<int>(png_get_image_width(png, info));
    result.height = static_cast<int>(png_get_image_height(png, info));
    result.channels = png_get_channels(png, info);
    result.bit_depth = png_get_bit_depth(png, info);
    size_t rowbytes = png_get_rowbytes(png, info);
    result.rows.assign(result.height, std::vector<uint8_t>(rowbytes));
    for (auto& row : result.rows) png_read_row(png, row.data(), nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return result;
}

}  // namespace

uint8_t quantize8(float v) {
  if (!(v > 0.0f)) return 0;
  if (v >= 1.0f) return 255;
  return static_cast<uint8_t>(std::lround(v * 255.0f));
}

std::vector<uint8_t> encode_png8(const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    fail(ErrorCode::kUsage, "encode_png8 supports 1 or 3 channels");
  }
  std::vector<std::vector<uint8_t>> rows(image.height,
                                         std::vector<uint8_t>(static_cast<size_t>(image.width) * image.channels));
  for (int y = 0; y < image.height; ++y) {
    for (int i = 0; i < image.width * image.channels; ++i) {
      rows[y][i] = quantize8(image.pixels[static_cast<size_t>(y) * image.width * image.channels + i]);
    }
  }
  int type = image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  return write_png_rows(image.width, image.height, type, 8, rows);
}

std::vector<uint8_t> encode_png16(const Image16& image) {
  std::vector<std::vector<uint8_t>> rows(image.height, std::vector<uint8_t>(static_cast<size_t>(image.width) * 2));
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      uint16_t v = image.pixels[static_cast<size_t>(y) * image.width + x];
      rows[y][2 * x] = static_cast<uint8_t>(v >> 8);  // PNG is big-endian
      rows[y][2 * x + 1] = static_cast<uint8_t>(v & 0xff);
    }
  }
  return write_png_rows(image.width, image.height, PNG_COLOR_TYPE_GRAY, 16, rows);
}

Image decode_png8(std::span<const uint8_t> bytes) {
  DecodedRows rows = read_png_rows(bytes, false);
  Image image(rows.width, rows.height, rows.channels);
  for (int y = 0; y < rows.height; ++y) {
    for (int i = 0; i < rows.width * rows.channels; ++i) {
      image.pixels[static_cast<size_t>(y) * rows.width * rows.channels + i] = rows.rows[y][i] / 255.0f;
    }
  }
  return image;
}

Image16 decode_png16(std::span<const uint8_t> bytes) {
  DecodedRows rows = read_png_rows(bytes, true);
  if (rows.channels != 1 || rows.bit_depth != 16) fail(ErrorCode::kData, "expected 16-bit single-channel PNG");
  Image16 image{rows.width, rows.height, std::vector<uint16_t>(static_cast<size_t>(rows.width) * rows.height)};
  for (int y = 0; y < rows.height; ++y) {
    std::memcpy(image.pixels.data() + static_cast<size_t>(y) * rows.width, rows.rows[y].data(),
                static_cast<size_t>(rows.width) * 2);
  }
  return image;
}

void write_png8(const std::string& path, const Image& image) {
  auto bytes = encode_png8(image);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

void write_png16(const std::string& path, const Image16& image) {
  auto bytes = encode_png16(image);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Image read_png8(const std::string& path) {
  std::string bytes = read_file(path);
  try {
    return decode_png8({reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size()});
  } catch (const Error& e) {
    fail(ErrorCode::kData, path + ": " + e.what());
  }
}

Image16 read_png16(const std::string& path) {
  std::string bytes = read_file(path);
  try {
    return decode_png16({reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size()});
  } catch (const Error& e) {
    fail(ErrorCode::kData, path + ": " + e.what());
  }
}

Image quantize_image8(const Image& image) {
  Image out = image;
  for (float& v : out.pixels) v = quantize8(v) / 255.0f;
  return out;
}

double mse(const Image& a, const Image& b) {
  if (!a.same_shape(b)) fail(ErrorCode::kUsage, "mse: image shapes differ");
  double acc = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    acc += d * d;
  }
  return a.pixels.empty() ? 0.0 : acc / static_cast<double>(a.pixels.size());
}

double masked_mse(const Image& a, const Image& b, const Image& mask) {
  if (!a.same_shape(b) || mask.width != a.width || mask.height != a.height || mask.channels != 1) {
    fail(ErrorCode::kUsage, "masked_mse: shapes differ");
  }
  double acc = 0.0;
  size_t count = 0;
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      if (mask.at(x, y) <= 0.5f) continue;
      for (int c = 0; c < a.channels; ++c) {
        double d = static_cast<double>(a.at(x, y, c)) - b.at(x, y, c);
        acc += d * d;
        ++count;
      }
    }
  }
  return count == 0 ? 0.0 : acc / static_cast<double>(count);
}

double max_abs_diff(const Image& a, const Image& b) {
  if (!a.same_shape(b)) fail(ErrorCode::kUsage, "max_abs_diff: image shapes differ");
  double m = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.pixels[i]) - b.pixels[i]));
  }
  return m;
}

}  // namespace triedit
