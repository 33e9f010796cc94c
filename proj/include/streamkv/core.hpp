// Copyright 2026 The streamkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace streamkv {

// Malformed file or record (bad magic, wrong version, shape mismatch).
struct FormatError : std::runtime_error { using std::runtime_error::runtime_error; };
// Byte-level damage detected mid-stream (truncated frame, short record).
struct CorruptionError : std::runtime_error { using std::runtime_error::runtime_error; };
// Input that is syntactically fine but mathematically unusable (zero norm, empty list).
struct DegenerateInputError : std::runtime_error { using std::runtime_error::runtime_error; };
// Invalid configuration value or combination.
struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
// A caller broke a documented precondition.
struct ContractError : std::runtime_error { using std::runtime_error::runtime_error; };
// Underlying stream/file failure.
struct IoError : std::runtime_error { using std::runtime_error::runtime_error; };

/// Dense row-major float32 matrix. The pipeline stores everything in float;
/// reductions that feed decisions (means, norms, softmax sums) accumulate in
/// double.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* row(std::size_t r) { return data_.data() + r * cols_; }
  const float* row(std::size_t r) const { return data_.data() + r * cols_; }
  std::span<float> row_span(std::size_t r) { return {row(r), cols_}; }
  std::span<const float> row_span(std::size_t r) const { return {row(r), cols_}; }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }
  std::span<const float> flat() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  friend bool operator==(const Matrix&, const Matrix&) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ContractError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

inline double squared_norm(std::span<const float> a) {
  double acc = 0.0;
  for (float x : a) acc += double(x) * double(x);
  return acc;
}

inline double norm(std::span<const float> a) { return std::sqrt(squared_norm(a)); }

/// Cosine of two equally sized vectors; throws on a zero-norm operand.
inline double cosine(std::span<const float> a, std::span<const float> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine: zero-norm input");
  return dot(a, b) / (na * nb);
}

inline bool all_finite(std::span<const float> a) {
  for (float x : a)
    if (!std::isfinite(x)) return false;
  return true;
}

// FNV-1a over raw bytes; used to pin golden fixtures and determinism checks.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::span<const float> v,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a64(v.data(), v.size() * sizeof(float), seed);
}

}  // namespace streamkv
