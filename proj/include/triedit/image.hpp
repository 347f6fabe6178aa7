// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace triedit {

/// Interleaved float image, row-major, values nominally in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), pixels(static_cast<size_t>(w) * h * c, fill) {}

  bool empty() const { return pixels.empty(); }
  size_t index(int x, int y, int c = 0) const {
    return (static_cast<size_t>(y) * width + x) * channels + c;
  }
  float& at(int x, int y, int c = 0) { return pixels[index(x, y, c)]; }
  float at(int x, int y, int c = 0) const { return pixels[index(x, y, c)]; }
  std::span<float> pixel(int x, int y) { return {pixels.data() + index(x, y), static_cast<size_t>(channels)}; }
  std::span<const float> pixel(int x, int y) const {
    return {pixels.data() + index(x, y), static_cast<size_t>(channels)};
  }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

/// 16-bit single channel raster (depth exports).
struct Image16 {
  int width = 0;
  int height = 0;
  std::vector<uint16_t> pixels;
};

uint8_t quantize8(float v);

/// PNG with 1 (gray) or 3 (RGB) channels, 8 bits per sample.
std::vector<uint8_t> encode_png8(const Image& image);
std::vector<uint8_t> encode_png16(const Image16& image);
/// Decodes any 8-bit gray/RGB/RGBA PNG; alpha is dropped. Values are /255.
Image decode_png8(std::span<const uint8_t> bytes);
Image16 decode_png16(std::span<const uint8_t> bytes);

void write_png8(const std::string& path, const Image& image);
void write_png16(const std::string& path, const Image16& image);
Image read_png8(const std::string& path);
Image16 read_png16(const std::string& path);

/// Round trip through 8-bit quantization without touching disk.
Image quantize_image8(const Image& image);

double mse(const Image& a, const Image& b);
/// MSE restricted to pixels where mask > 0.5 (mask is single channel).
double masked_mse(const Image& a, const Image& b, const Image& mask);
double max_abs_diff(const Image& a, const Image& b);

}  // namespace triedit
