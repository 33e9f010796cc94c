// Copyright 2026 The streamkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "streamkv/attention.hpp"
#include "streamkv/select.hpp"

namespace streamkv {

/// Retained-block budget of one segment at compression ratio theta:
/// ceil((1 - theta) * frames). The small guard keeps double rounding from
/// inflating products that are exact integers (e.g. 0.4 * 5).
inline std::size_t retained_frame_budget(double theta, std::size_t frames) {
  if (theta < 0.0 || theta >= 1.0)
    throw ConfigError("compression ratio must lie in [0, 1)");
  return std::size_t(std::ceil((1.0 - theta) * double(frames) - 1e-9));
}

/// Compression parameters: the discard ratio and the per-layer guidance
/// criterion vectors (layer-l mean query of the guidance tokens).
struct CompressionConfig {
  double theta = 0.0;
  std::vector<std::vector<float>> guidance;  // [layer][D']
  bool adaptive = true;  // false: integer-uniform split across layers
};

struct SegmentCounts {
  std::int64_t segment = 0;
  std::size_t frames = 0;          // T_i (post-merge)
  std::size_t budget = 0;          // ceil((1-theta)T_i) * L
  std::size_t retained_frames = 0; // frame blocks kept, summed over layers
  std::size_t dropped_frames = 0;
  std::size_t summaries = 0;
};

struct LayerStats {
  std::size_t blocks = 0;
  std::size_t frame_blocks = 0;
  std::size_t summary_blocks = 0;
  std::uint64_t bytes = 0;
};

struct BankStats {
  std::vector<LayerStats> layers;
  std::size_t total_blocks = 0;
  std::uint64_t total_bytes = 0;
  std::vector<SegmentCounts> per_segment;
};

struct RetrievalResult {
  std::vector<std::vector<const KvBlock*>> blocks;  // per layer, temporal order
  BudgetAllocation allocation;
  bool empty_bank = false;
};

constexpr std::array<char, 4> kSpillMagic = {'K', 'V', 'B', 'K'};
constexpr std::uint32_t kSpillVersion = 1;

/// Per-layer, temporally ordered store of retained KV blocks. Blocks and
/// their representative keys stay index-aligned by construction (the key
/// lives inside the block). Single writer, shared readers: appends are
/// atomic per segment, retrievals see the bank before or after a segment,
/// never mid-append.
class KvBank {
public:
  explicit KvBank(std::size_t layers) : layers_(layers), blocks_(layers) {}

  std::size_t layer_count() const { return layers_; }

  /// Applies guidance-criterion compression to one encoded segment and
  /// appends the survivors: per layer the selected frame blocks in temporal
  /// order, then the summary block (summaries are never compression
  /// candidates). Returns the per-layer retained frame indices.
  std::vector<std::vector<std::size_t>> compress_and_append(
      EncodedSegment enc, const CompressionConfig& config) {
    if (enc.layers() != layers_)
      throw ContractError("compress_and_append: layer count mismatch");
    if (!enc.summary_blocks.empty() && enc.summary_blocks.size() != layers_)
      throw ContractError("compress_and_append: summary blocks incomplete");
    const std::size_t frames = enc.frame_count();
    for (const auto& lb : enc.frame_blocks)
      if (lb.size() != frames)
        throw ContractError("compress_and_append: ragged frame blocks");
    if (config.guidance.size() != layers_)
      throw ContractError("compress_and_append: one guidance vector per layer");

    const std::size_t per_layer_budget = retained_frame_budget(config.theta, frames);
    const std::size_t budget = per_layer_budget * layers_;

    std::vector<SelectionRange> ranges(layers_);
    for (std::size_t l = 0; l < layers_; ++l) {
      ranges[l].keys.reserve(frames);
      for (const auto& b : enc.frame_blocks[l])
        ranges[l].keys.emplace_back(b.rep_key);
    }
    const SelectionResult sel =
        config.adaptive ? select_kv(ranges, config.guidance, budget)
                        : select_uniform(ranges, config.guidance, budget);

    SegmentCounts counts;
    counts.segment = enc.segment_id;
    counts.frames = frames;
    counts.budget = budget;
    counts.summaries = enc.summary_blocks.size();

    std::unique_lock lock(mu_);
    for (std::size_t l = 0; l < layers_; ++l) {
      for (std::size_t idx : sel.indices[l]) {
        spill_block(enc.frame_blocks[l][idx]);
        blocks_[l].push_back(std::move(enc.frame_blocks[l][idx]));
        ++counts.retained_frames;
      }
      if (!enc.summary_blocks.empty()) {
        spill_block(enc.summary_blocks[l]);
        blocks_[l].push_back(std::move(enc.summary_blocks[l]));
      }
    }
    counts.dropped_frames = frames * layers_ - counts.retained_frames;
    per_segment_.push_back(counts);
    if (spill_) spill_->flush();
    return sel.indices;
  }

  /// Layer-adaptive retrieval: every stored block (frame and summary) is a
  /// candidate; the budget is frames_per_layer * L, saturating at the bank
  /// size. An empty bank yields an empty result flagged with a warning.
  RetrievalResult retrieve(const std::vector<std::vector<float>>& criteria,
                           std::size_t frames_per_layer,
                           bool adaptive = true) const {
    if (criteria.size() != layers_)
      throw ContractError("retrieve: one criterion per layer required");
    if (frames_per_layer < 1)
      throw ContractError("retrieve: frames_per_layer must be >= 1");
    std::shared_lock lock(mu_);
    RetrievalResult res;
    res.blocks.resize(layers_);
    std::size_t capacity = 0;
    for (const auto& lb : blocks_) capacity += lb.size();
    if (capacity == 0) {
      res.empty_bank = true;
      return res;
    }
    const std::size_t budget = std::min(frames_per_layer * layers_, capacity);
    std::vector<SelectionRange> ranges(layers_);
    for (std::size_t l = 0; l < layers_; ++l) {
      ranges[l].keys.reserve(blocks_[l].size());
      for (const auto& b : blocks_[l]) ranges[l].keys.emplace_back(b.rep_key);
    }
    const SelectionResult sel = adaptive ? select_kv(ranges, criteria, budget)
                                         : select_uniform(ranges, criteria, budget);
    for (std::size_t l = 0; l < layers_; ++l) {
      res.blocks[l].reserve(sel.indices[l].size());
      for (std::size_t idx : sel.indices[l])
        res.blocks[l].push_back(&blocks_[l][idx]);
    }
    res.allocation = sel.allocation;
    return res;
  }

  BankStats stats() const {
    std::shared_lock lock(mu_);
    BankStats s;
    s.layers.resize(layers_);
    for (std::size_t l = 0; l < layers_; ++l) {
      auto& ls = s.layers[l];
      for (const auto& b : blocks_[l]) {
        ++ls.blocks;
        if (b.is_summary)
          ++ls.summary_blocks;
        else
          ++ls.frame_blocks;
        ls.bytes += std::uint64_t(b.keys.size() + b.values.size() +
                                  b.rep_key.size()) *
                    sizeof(float);
      }
      s.total_blocks += ls.blocks;
      s.total_bytes += ls.bytes;
    }
    s.per_segment = per_segment_;
    return s;
  }

  const std::deque<KvBlock>& layer_blocks(std::size_t l) const { return blocks_[l]; }

  /// Opens an append-only on-disk mirror. Every block appended from now on is
  /// also written to the spill file (layout documented in the README).
  void attach_spill(const std::string& path) {
    std::unique_lock lock(mu_);
    spill_.emplace(path, std::ios::binary | std::ios::trunc);
    if (!*spill_) throw IoError("cannot open spill file: " + path);
    spill_header_written_ = false;
  }

  /// Reconstructs a bank (blocks only) from a spill file.
  static KvBank read_spill(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open spill file: " + path);
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (in.gcount() != 4 || magic != kSpillMagic)
      throw FormatError("spill read: bad magic");
    const auto u32 = [&in]() {
      std::uint32_t v = 0;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      if (!in) throw CorruptionError("spill read: truncated header");
      return v;
    };
    const std::uint32_t version = u32();
    if (version != kSpillVersion)
      throw FormatError("spill read: unsupported version");
    const std::uint32_t layers = u32();
    const std::uint32_t p2 = u32();
    const std::uint32_t dp = u32();
    KvBank bank(layers);
    std::size_t record = 0;
    while (true) {
      std::uint32_t layer = 0;
      in.read(reinterpret_cast<char*>(&layer), sizeof(layer));
      if (in.gcount() == 0) break;
      if (in.gcount() != sizeof(layer) || layer >= layers)
        throw CorruptionError("spill read: bad record " + std::to_string(record));
      KvBlock b;
      b.layer = layer;
      const auto i64 = [&in, record]() {
        std::int64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!in)
          throw CorruptionError("spill read: truncated record " +
                                std::to_string(record));
        return v;
      };
      b.segment = i64();
      b.frame_ordinal = i64();
      b.stream_pos = i64();
      b.is_summary = b.frame_ordinal < 0;
      b.keys = Matrix(p2, dp);
      b.values = Matrix(p2, dp);
      b.rep_key.resize(dp);
      const auto floats = [&in, record](float* dst, std::size_t n) {
        in.read(reinterpret_cast<char*>(dst), std::streamsize(n * sizeof(float)));
        if (!in)
          throw CorruptionError("spill read: truncated record " +
                                std::to_string(record));
      };
      floats(b.keys.data().data(), b.keys.size());
      floats(b.values.data().data(), b.values.size());
      floats(b.rep_key.data(), b.rep_key.size());
      bank.blocks_[layer].push_back(std::move(b));
      ++record;
    }
    return bank;
  }

private:
  void spill_block(const KvBlock& b) {
    if (!spill_) return;
    if (!spill_header_written_) {
      spill_->write(kSpillMagic.data(), kSpillMagic.size());
      const auto u32 = [this](std::uint32_t v) {
        spill_->write(reinterpret_cast<const char*>(&v), sizeof(v));
      };
      u32(kSpillVersion);
      u32(std::uint32_t(layers_));
      u32(std::uint32_t(b.keys.rows()));
      u32(std::uint32_t(b.keys.cols()));
      spill_header_written_ = true;
    }
    const std::uint32_t layer = std::uint32_t(b.layer);
    spill_->write(reinterpret_cast<const char*>(&layer), sizeof(layer));
    const auto i64 = [this](std::int64_t v) {
      spill_->write(reinterpret_cast<const char*>(&v), sizeof(v));
    };
    i64(b.segment);
    i64(b.is_summary ? -1 : b.frame_ordinal);
    i64(b.stream_pos);
    spill_->write(reinterpret_cast<const char*>(b.keys.data().data()),
                  std::streamsize(b.keys.size() * sizeof(float)));
    spill_->write(reinterpret_cast<const char*>(b.values.data().data()),
                  std::streamsize(b.values.size() * sizeof(float)));
    spill_->write(reinterpret_cast<const char*>(b.rep_key.data()),
                  std::streamsize(b.rep_key.size() * sizeof(float)));
    if (!*spill_) throw IoError("spill write failed");
  }

  std::size_t layers_;
  mutable std::shared_mutex mu_;
  std::vector<std::deque<KvBlock>> blocks_;
  std::vector<SegmentCounts> per_segment_;
  std::optional<std::ofstream> spill_;
  bool spill_header_written_ = false;
};

}  // namespace streamkv
