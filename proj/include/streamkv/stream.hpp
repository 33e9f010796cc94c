// Copyright 2026 The streamkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "streamkv/core.hpp"
#include "streamkv/rng.hpp"

namespace streamkv {

static_assert(std::endian::native == std::endian::little,
              "stream format is little-endian and read/written verbatim");

constexpr std::array<char, 4> kStreamMagic = {'E', 'M', 'B', 'S'};
constexpr std::uint32_t kStreamVersion = 1;

/// Fixed 20-byte header of an embedding-stream file. All fields little-endian.
struct StreamHeader {
  std::uint32_t version = kStreamVersion;
  std::uint32_t patch_count = 0;       // P^2, token rows per frame
  std::uint32_t embed_dim = 0;         // D, columns per token row
  std::uint32_t frame_interval_ms = 0; // informational only

  std::size_t frame_floats() const {
    return std::size_t(patch_count) * embed_dim;
  }
  std::size_t frame_bytes() const { return frame_floats() * sizeof(float); }

  void validate() const {
    if (patch_count < 1 || embed_dim < 1)
      throw FormatError("stream header: patch_count and embed_dim must be >= 1");
  }
};

constexpr std::size_t kStreamHeaderBytes = 20;

/// One sampled frame: `patches` holds P^2 token rows of width D.
struct FrameEmbedding {
  std::int64_t index = 0;  // zero-based stream position
  Matrix patches;

  friend bool operator==(const FrameEmbedding&, const FrameEmbedding&) = default;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace detail

/// Incremental writer: header first, then frames in push order.
class StreamWriter {
public:
  StreamWriter(std::ostream& sink, const StreamHeader& header)
      : sink_(sink), header_(header) {
    header_.validate();
    sink_.write(kStreamMagic.data(), kStreamMagic.size());
    detail::put_u32(sink_, header_.version);
    detail::put_u32(sink_, header_.patch_count);
    detail::put_u32(sink_, header_.embed_dim);
    detail::put_u32(sink_, header_.frame_interval_ms);
    if (!sink_) throw IoError("stream write: header");
    bytes_ = kStreamHeaderBytes;
  }

  void write(const FrameEmbedding& frame) {
    if (frame.patches.rows() != header_.patch_count ||
        frame.patches.cols() != header_.embed_dim)
      throw FormatError("stream write: frame shape does not match header");
    sink_.write(reinterpret_cast<const char*>(frame.patches.data().data()),
                std::streamsize(header_.frame_bytes()));
    if (!sink_) throw IoError("stream write: frame payload");
    bytes_ += header_.frame_bytes();
    ++count_;
  }

  std::size_t bytes_written() const { return bytes_; }
  std::size_t frames_written() const { return count_; }

private:
  std::ostream& sink_;
  StreamHeader header_;
  std::size_t bytes_ = 0;
  std::size_t count_ = 0;
};

/// Writes a whole stream and returns the byte count
/// (20 + frames * P^2 * D * 4).
inline std::size_t write_stream(const StreamHeader& header,
                                std::span<const FrameEmbedding> frames,
                                std::ostream& sink) {
  StreamWriter w(sink, header);
  for (const auto& f : frames) w.write(f);
  return w.bytes_written();
}

/// Lazy frame reader; frames are pulled one at a time so arbitrarily long
/// streams never need to fit in memory. Not shareable across consumers.
class StreamReader {
public:
  explicit StreamReader(std::istream& source) : source_(source) {
    std::array<char, 4> magic{};
    source_.read(magic.data(), magic.size());
    if (source_.gcount() != std::streamsize(magic.size()) || magic != kStreamMagic)
      throw FormatError("stream read: bad magic");
    header_.version = detail::get_u32(source_);
    header_.patch_count = detail::get_u32(source_);
    header_.embed_dim = detail::get_u32(source_);
    header_.frame_interval_ms = detail::get_u32(source_);
    if (!source_) throw FormatError("stream read: truncated header");
    if (header_.version != kStreamVersion)
      throw FormatError("stream read: unsupported version " +
                        std::to_string(header_.version));
    header_.validate();
  }

  const StreamHeader& header() const { return header_; }

  /// Next frame in order, or nullopt at a clean end of stream. A partial
  /// trailing frame raises CorruptionError naming the frame index.
  std::optional<FrameEmbedding> next() {
    FrameEmbedding f;
    f.index = next_index_;
    f.patches = Matrix(header_.patch_count, header_.embed_dim);
    source_.read(reinterpret_cast<char*>(f.patches.data().data()),
                 std::streamsize(header_.frame_bytes()));
    const auto got = source_.gcount();
    if (got == 0) return std::nullopt;
    if (got != std::streamsize(header_.frame_bytes()))
      throw CorruptionError("stream read: truncated frame " +
                            std::to_string(next_index_));
    ++next_index_;
    return f;
  }

private:
  std::istream& source_;
  StreamHeader header_;
  std::int64_t next_index_ = 0;
};

/// Pull interface shared by file-backed and in-memory frame providers.
class FrameSource {
public:
  virtual ~FrameSource() = default;
  virtual const StreamHeader& header() const = 0;
  virtual std::optional<FrameEmbedding> next() = 0;
};

class FileFrameSource final : public FrameSource {
public:
  explicit FileFrameSource(const std::string& path)
      : file_(path, std::ios::binary) {
    if (!file_) throw IoError("cannot open stream file: " + path);
    reader_.emplace(file_);
  }
  const StreamHeader& header() const override { return reader_->header(); }
  std::optional<FrameEmbedding> next() override { return reader_->next(); }

private:
  std::ifstream file_;
  std::optional<StreamReader> reader_;
};

class MemoryFrameSource final : public FrameSource {
public:
  MemoryFrameSource(StreamHeader header, std::vector<FrameEmbedding> frames)
      : header_(header), frames_(std::move(frames)) {}
  const StreamHeader& header() const override { return header_; }
  std::optional<FrameEmbedding> next() override {
    if (pos_ >= frames_.size()) return std::nullopt;
    return frames_[pos_++];
  }

private:
  StreamHeader header_;
  std::vector<FrameEmbedding> frames_;
  std::size_t pos_ = 0;
};

/// A question arriving after `at_frame` has been processed. Tokens are
/// model-dimension embedding vectors; expected_segment is optional ground
/// truth for scoring.
struct QuestionEvent {
  std::int64_t at_frame = 0;
  std::vector<std::vector<float>> tokens;
  std::optional<std::int64_t> expected_segment;

  void validate() const {
    if (tokens.empty()) throw FormatError("question event: empty token list");
  }
};

/// Recipe for a deterministic synthetic stream: each planted segment holds
/// `length` frames built as a unit direction plus zero-mean noise whose
/// Frobenius norm is `noise_scale`. Consecutive directions are constructed so
/// adjacent-frame similarity across a planted boundary lands at
/// `boundary_drop`.
struct SyntheticSpec {
  struct PlantedSegment {
    std::size_t length = 0;
    std::uint64_t cluster_direction_seed = 0;
    double noise_scale = 0.0;
  };

  std::uint64_t seed = 0;
  std::uint32_t patch_count = 4;
  std::uint32_t embed_dim = 32;
  std::uint32_t frame_interval_ms = 2000;  // 0.5 fps by default
  double boundary_drop = 0.0;
  std::vector<PlantedSegment> segments;

  void validate() const {
    if (segments.empty()) throw ConfigError("synthetic spec: no segments");
    for (const auto& s : segments) {
      if (s.length < 1) throw ConfigError("synthetic spec: segment length < 1");
      if (s.noise_scale < 0.0)
        throw ConfigError("synthetic spec: negative noise scale");
    }
    if (boundary_drop < -1.0 || boundary_drop > 1.0)
      throw ConfigError("synthetic spec: boundary_drop outside [-1, 1]");
    if (patch_count < 1 || embed_dim < 1)
      throw ConfigError("synthetic spec: bad dimensions");
  }

  StreamHeader header() const {
    return StreamHeader{kStreamVersion, patch_count, embed_dim, frame_interval_ms};
  }

  std::size_t total_frames() const {
    std::size_t n = 0;
    for (const auto& s : segments) n += s.length;
    return n;
  }
};

namespace detail {

// Direction chain: each direction is a unit D-vector; direction j satisfies
// cos(d_{j-1}, d_j) == boundary_drop exactly and is orthogonal to all earlier
// directions otherwise. Once the D-dimensional basis is exhausted the chain
// falls back to plain random unit vectors.
inline std::vector<std::vector<double>> direction_chain(const SyntheticSpec& spec) {
  const std::size_t dim = spec.embed_dim;
  std::vector<std::vector<double>> dirs;
  std::vector<std::vector<double>> basis;  // orthonormal, spans dirs
  dirs.reserve(spec.segments.size());
  for (std::size_t j = 0; j < spec.segments.size(); ++j) {
    SplitMix64 rng(mix_seed(spec.segments[j].cluster_direction_seed, 0x646972));
    std::vector<double> g(dim);
    for (auto& x : g) x = rng.next_gaussian();
    if (j == 0 || basis.size() >= dim) {
      double n = 0;
      for (double x : g) n += x * x;
      n = std::sqrt(n);
      for (auto& x : g) x /= n;
      dirs.push_back(g);
    } else {
      // component of g orthogonal to everything seen so far
      for (const auto& b : basis) {
        double proj = 0;
        for (std::size_t i = 0; i < dim; ++i) proj += g[i] * b[i];
        for (std::size_t i = 0; i < dim; ++i) g[i] -= proj * b[i];
      }
      double n = 0;
      for (double x : g) n += x * x;
      n = std::sqrt(n);
      if (n < 1e-12) {  // basis numerically full; degrade to random
        for (auto& x : g) x = rng.next_gaussian();
        n = 0;
        for (double x : g) n += x * x;
        n = std::sqrt(n);
      }
      for (auto& x : g) x /= n;
      const auto& prev = dirs.back();
      const double a = spec.boundary_drop;
      const double b = std::sqrt(std::max(0.0, 1.0 - a * a));
      std::vector<double> d(dim);
      for (std::size_t i = 0; i < dim; ++i) d[i] = a * prev[i] + b * g[i];
      dirs.push_back(d);
    }
    if (basis.size() < dim) {
      // extend the orthonormal basis with the new direction's novel part
      std::vector<double> r = dirs.back();
      for (const auto& b : basis) {
        double proj = 0;
        for (std::size_t i = 0; i < dim; ++i) proj += r[i] * b[i];
        for (std::size_t i = 0; i < dim; ++i) r[i] -= proj * b[i];
      }
      double n = 0;
      for (double x : r) n += x * x;
      n = std::sqrt(n);
      if (n > 1e-12) {
        for (auto& x : r) x /= n;
        basis.push_back(std::move(r));
      }
    }
  }
  return dirs;
}

}  // namespace detail

/// Per-segment unit directions of a synthetic spec (the D-dimensional vector
/// every patch row of the segment is built from). Exposed so harnesses can
/// form needle questions and classification references.
inline std::vector<std::vector<float>> planted_directions(const SyntheticSpec& spec) {
  spec.validate();
  auto dirs = detail::direction_chain(spec);
  std::vector<std::vector<float>> out(dirs.size());
  for (std::size_t j = 0; j < dirs.size(); ++j)
    out[j].assign(dirs[j].begin(), dirs[j].end());
  return out;
}

/// [first_frame, last_frame] stream ranges of the planted segments.
inline std::vector<std::pair<std::int64_t, std::int64_t>> planted_ranges(
    const SyntheticSpec& spec) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  std::int64_t pos = 0;
  for (const auto& s : spec.segments) {
    out.emplace_back(pos, pos + std::int64_t(s.length) - 1);
    pos += std::int64_t(s.length);
  }
  return out;
}

/// Stream positions at which a new planted segment starts (excluding 0).
inline std::vector<std::int64_t> planted_boundaries(const SyntheticSpec& spec) {
  std::vector<std::int64_t> out;
  std::int64_t pos = 0;
  for (std::size_t j = 0; j < spec.segments.size(); ++j) {
    if (j > 0) out.push_back(pos);
    pos += std::int64_t(spec.segments[j].length);
  }
  return out;
}

/// Deterministic synthetic stream. Every patch row of a frame equals the
/// segment's unit direction scaled by 1/sqrt(P^2) (unit Frobenius norm per
/// frame) plus a noise matrix of Frobenius norm `noise_scale`.
inline std::vector<FrameEmbedding> gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto dirs = detail::direction_chain(spec);
  const std::size_t p2 = spec.patch_count;
  const std::size_t dim = spec.embed_dim;
  SplitMix64 noise_rng(mix_seed(spec.seed, 0x6e6f6973));

  std::vector<FrameEmbedding> frames;
  frames.reserve(spec.total_frames());
  std::int64_t pos = 0;
  const float row_scale = float(1.0 / std::sqrt(double(p2)));
  for (std::size_t j = 0; j < spec.segments.size(); ++j) {
    const auto& seg = spec.segments[j];
    for (std::size_t t = 0; t < seg.length; ++t) {
      FrameEmbedding f;
      f.index = pos++;
      f.patches = Matrix(p2, dim);
      for (std::size_t p = 0; p < p2; ++p) {
        float* row = f.patches.row(p);
        for (std::size_t i = 0; i < dim; ++i)
          row[i] = float(dirs[j][i]) * row_scale;
      }
      if (seg.noise_scale > 0.0) {
        Matrix noise(p2, dim);
        fill_gaussian(noise, noise_rng);
        const double fn = norm(noise.flat());
        if (fn > 0.0) {
          const float s = float(seg.noise_scale / fn);
          for (std::size_t i = 0; i < noise.size(); ++i)
            f.patches.data()[i] += noise.data()[i] * s;
        }
      }
      frames.push_back(std::move(f));
    }
  }
  return frames;
}

}  // namespace streamkv
