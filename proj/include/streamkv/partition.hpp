// Copyright 2026 The streamkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "streamkv/core.hpp"
#include "streamkv/stream.hpp"

namespace streamkv {

/// Boundary detection and length clamping parameters. Defaults follow the
/// desk-scale operating point: threshold 0.99, lengths clamped to [4, 64].
struct PartitionConfig {
  double threshold = 0.99;     // tau: boundary when adjacent similarity < tau
  std::size_t min_len = 4;     // m: exclusion window / minimum segment length
  std::size_t max_len = 64;    // M: maximum segment length
  bool merge_enabled = true;   // false: force-emit at M instead of merging

  void validate() const {
    if (min_len < 1 || max_len < min_len)
      throw ConfigError("partition config: need 1 <= min_len <= max_len");
    if (threshold < 0.0 || threshold > 1.0)
      throw ConfigError("partition config: threshold outside [0, 1]");
  }
};

enum class PartitionMode {
  kSemantic,  // similarity-driven boundaries
  kUniform,   // fixed max_len-sized chunks (baseline)
};

/// A closed run of frames. `frames` is the post-merge list (length T_i);
/// first/last_frame are raw stream positions, so concatenating emitted
/// segments' ranges reconstructs the stream exactly.
struct Segment {
  std::int64_t id = 0;
  std::int64_t first_frame = 0;
  std::int64_t last_frame = 0;
  std::vector<FrameEmbedding> frames;
  Matrix summary;  // elementwise mean of frames
  std::vector<std::pair<std::int64_t, std::int64_t>> merge_log;  // stream-index pairs
  bool short_final = false;  // end-of-stream segment below min_len

  std::size_t length() const { return frames.size(); }
};

/// Adjacent-frame similarity: cosine of the two patch matrices flattened to
/// vectors. Throws DegenerateInputError when either frame is all zero.
inline double frame_similarity(const FrameEmbedding& prev, const FrameEmbedding& cur) {
  if (!prev.patches.same_shape(cur.patches))
    throw ContractError("frame_similarity: shape mismatch");
  return cosine(prev.patches.flat(), cur.patches.flat());
}

/// Elementwise mean over a non-empty frame list (each spatial location
/// averaged); accumulates in double.
inline Matrix summarize(std::span<const FrameEmbedding> frames) {
  if (frames.empty()) throw DegenerateInputError("summarize: empty segment");
  const auto& first = frames.front().patches;
  std::vector<double> acc(first.size(), 0.0);
  for (const auto& f : frames) {
    if (!f.patches.same_shape(first))
      throw ContractError("summarize: inconsistent frame shapes");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f.patches.data()[i];
  }
  Matrix mean(first.rows(), first.cols());
  const double inv = 1.0 / double(frames.size());
  for (std::size_t i = 0; i < acc.size(); ++i)
    mean.data()[i] = float(acc[i] * inv);
  return mean;
}

namespace detail {

inline FrameEmbedding merge_pair(const FrameEmbedding& a, const FrameEmbedding& b) {
  FrameEmbedding m;
  m.index = a.index;  // merged frame keeps the earlier stream index
  m.patches = Matrix(a.patches.rows(), a.patches.cols());
  for (std::size_t i = 0; i < m.patches.size(); ++i)
    m.patches.data()[i] =
        float((double(a.patches.data()[i]) + double(b.patches.data()[i])) * 0.5);
  return m;
}

}  // namespace detail

/// While the list is longer than max_len, replaces the most similar adjacent
/// pair by its elementwise mean (ties broken toward the smaller index). Each
/// merge shortens the list by exactly one; merged pairs' stream indices are
/// appended to `log` when provided.
inline std::vector<FrameEmbedding> merge_to_max(
    std::vector<FrameEmbedding> frames, std::size_t max_len,
    std::vector<std::pair<std::int64_t, std::int64_t>>* log = nullptr) {
  if (frames.empty()) throw DegenerateInputError("merge_to_max: empty list");
  if (frames.size() <= max_len || max_len == 0) {
    if (max_len == 0) throw ConfigError("merge_to_max: max_len must be >= 1");
    return frames;
  }
  std::vector<double> sims(frames.size() - 1);
  for (std::size_t j = 0; j + 1 < frames.size(); ++j)
    sims[j] = frame_similarity(frames[j], frames[j + 1]);
  while (frames.size() > max_len) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < sims.size(); ++j)
      if (sims[j] > sims[best]) best = j;  // strict: ties keep the smaller j
    if (log)
      log->emplace_back(frames[best].index, frames[best + 1].index);
    frames[best] = detail::merge_pair(frames[best], frames[best + 1]);
    frames.erase(frames.begin() + std::ptrdiff_t(best) + 1);
    sims.erase(sims.begin() + std::ptrdiff_t(best));
    if (best > 0) sims[best - 1] = frame_similarity(frames[best - 1], frames[best]);
    if (best < sims.size())
      sims[best] = frame_similarity(frames[best], frames[best + 1]);
  }
  return frames;
}

/// Streaming segmenter. Frames are pushed in order; a Segment is returned
/// whenever a boundary closes one. The working buffer is merged online so it
/// never holds more than max_len frames.
///
/// Semantic mode: a boundary fires when adjacent similarity drops below the
/// threshold AND at least min_len raw frames accumulated since the previous
/// boundary (the exclusion window). The low-similarity frame starts the new
/// segment. Uniform mode ignores similarity and chops max_len-sized chunks.
class Partitioner {
public:
  explicit Partitioner(PartitionConfig config,
                       PartitionMode mode = PartitionMode::kSemantic)
      : config_(config), mode_(mode) {
    config_.validate();
  }

  const PartitionConfig& config() const { return config_; }

  std::optional<Segment> push(FrameEmbedding frame) {
    std::optional<Segment> emitted;
    if (open_ && last_raw_ && mode_ == PartitionMode::kSemantic) {
      const double s = frame_similarity(*last_raw_, frame);
      if (s < config_.threshold && raw_count_ >= config_.min_len) {
        emitted = close_segment(false);
        open_ = false;
      }
    }
    if (!open_) start_segment(frame.index);
    last_raw_ = frame;
    buffer_.push_back(std::move(frame));
    ++raw_count_;

    if (mode_ == PartitionMode::kUniform) {
      if (raw_count_ == config_.max_len) {
        emitted = close_segment(false);
        open_ = false;
      }
    } else if (buffer_.size() > config_.max_len) {
      if (config_.merge_enabled) {
        buffer_ = merge_to_max(std::move(buffer_), config_.max_len, &merge_log_);
      } else {
        // merging disabled: cap length by forcing a boundary at M
        FrameEmbedding overflow = std::move(buffer_.back());
        buffer_.pop_back();
        --raw_count_;
        emitted = close_segment(false);
        start_segment(overflow.index);
        buffer_.push_back(std::move(overflow));
        ++raw_count_;
      }
    }
    return emitted;
  }

  /// Flushes the trailing open segment at end of stream. A tail shorter than
  /// min_len is still emitted, flagged short_final.
  std::optional<Segment> finalize() {
    if (!open_ || buffer_.empty()) return std::nullopt;
    auto seg = close_segment(true);
    open_ = false;
    return seg;
  }

  std::size_t buffered() const { return buffer_.size(); }
  std::int64_t segments_emitted() const { return next_id_; }

private:
  void start_segment(std::int64_t first) {
    buffer_.clear();
    merge_log_.clear();
    raw_count_ = 0;
    first_frame_ = first;
    open_ = true;
  }

  Segment close_segment(bool final_flush) {
    Segment seg;
    seg.id = next_id_++;
    seg.first_frame = first_frame_;
    seg.last_frame = first_frame_ + std::int64_t(raw_count_) - 1;
    seg.frames = std::move(buffer_);
    seg.merge_log = std::move(merge_log_);
    seg.summary = summarize(seg.frames);
    seg.short_final = final_flush && raw_count_ < config_.min_len;
    buffer_.clear();
    merge_log_.clear();
    return seg;
  }

  PartitionConfig config_;
  PartitionMode mode_;
  std::vector<FrameEmbedding> buffer_;
  std::vector<std::pair<std::int64_t, std::int64_t>> merge_log_;
  std::optional<FrameEmbedding> last_raw_;
  std::size_t raw_count_ = 0;       // raw frames since the last boundary
  std::int64_t first_frame_ = 0;
  std::int64_t next_id_ = 0;
  bool open_ = false;
};

}  // namespace streamkv
