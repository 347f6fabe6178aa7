// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace triedit {

using Vec3 = Eigen::Vector3d;
using Rgb = std::array<float, 3>;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Failure categories. The CLI maps these onto process exit codes and the
/// service onto HTTP status codes.
enum class ErrorCode {
  kUsage,      // bad flags / bad request shape
  kData,       // malformed or missing files, schema violations
  kNumerical,  // non-finite values, divergence
  kState,      // operation not valid in the current state
  kNotFound,
  kConflict,   // e.g. a training job already running
  kStale,      // provenance mismatch
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

std::string_view error_code_name(ErrorCode code);

[[noreturn]] void fail(ErrorCode code, const std::string& message);

struct Aabb {
  Vec3 min = Vec3::Constant(-1.0);
  Vec3 max = Vec3::Constant(1.0);

  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
  Vec3 extent() const { return max - min; }
  Vec3 center() const { return 0.5 * (min + max); }
  /// Maps p into [0,1]^3.
  Vec3 normalized(const Vec3& p) const {
    return ((p - min).array() / extent().array()).matrix();
  }
  /// Ray/box overlap as a parametric interval; false when the ray misses.
  bool intersect(const Vec3& origin, const Vec3& dir, double* t0, double* t1) const;
};

/// Deterministic 64-bit generator. Unlike the std distributions, the derived
/// draws are bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ 0x9E3779B97F4A7C15ull) { next(); }
  uint64_t next();
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n);
  double normal();

 private:
  uint64_t state_;
};

/// FNV-1a, used for config hashes and session nonces.
uint64_t fnv1a(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ull);

double psnr_from_mse(double mse);

}  // namespace triedit
