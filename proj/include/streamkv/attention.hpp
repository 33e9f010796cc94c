// Copyright 2026 The streamkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "streamkv/core.hpp"
#include "streamkv/partition.hpp"
#include "streamkv/rng.hpp"

namespace streamkv {

/// Toy attention-stack shape. D' = heads * head_dim is the concatenated
/// key/query width used for representative keys and criterion vectors.
struct StackConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t head_dim = 16;       // must be even (rotary pairing)
  std::size_t model_dim = 64;      // residual width
  std::size_t input_dim = 32;      // stream embedding width D
  std::size_t local_window = 512;  // W, max retained past KV rows per layer
  double rope_base = 10000.0;
  std::uint64_t seed = 42;
  bool causal = true;

  std::size_t proj_dim() const { return heads * head_dim; }  // D'

  void validate() const {
    if (layers < 1 || heads < 1 || head_dim < 1 || model_dim < 1 || input_dim < 1)
      throw ConfigError("stack config: dimensions must be >= 1");
    if (head_dim % 2 != 0)
      throw ConfigError("stack config: head_dim must be even for rotary pairing");
    if (rope_base <= 0.0) throw ConfigError("stack config: rope_base must be > 0");
  }
};

/// Per-layer, per-frame bundle of patch-level keys/values plus the block's
/// representative key (mean of the key rows, heads concatenated). Keys and
/// values are stored unrotated; rotary angles are applied transiently at
/// attention time from whatever positions the consumer assigns.
struct KvBlock {
  std::int64_t segment = 0;
  std::int64_t frame_ordinal = 0;  // position within the segment; -1 for summary
  bool is_summary = false;
  std::size_t layer = 0;
  std::int64_t stream_pos = 0;  // original frame index (summary: last frame's)
  Matrix keys;                  // P^2 x D'
  Matrix values;                // P^2 x D'
  std::vector<float> rep_key;   // D'
};

/// Row-level KV FIFO per layer, capped at `capacity` rows; eviction is
/// strictly oldest-first. Rows are unrotated; encode-time positions are
/// assigned window-relative (oldest row = 0) on every use.
class LocalWindow {
public:
  struct Row {
    std::vector<float> key;
    std::vector<float> value;
    std::int64_t stream_pos = 0;
  };

  LocalWindow(std::size_t layers, std::size_t capacity)
      : capacity_(capacity), layers_(layers) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size(std::size_t layer) const { return layers_[layer].size(); }
  const std::deque<Row>& rows(std::size_t layer) const { return layers_[layer]; }

  void push(std::size_t layer, Row row) {
    if (capacity_ == 0) return;
    auto& q = layers_[layer];
    q.push_back(std::move(row));
    if (q.size() > capacity_) q.pop_front();
  }

private:
  std::size_t capacity_;
  std::vector<std::deque<Row>> layers_;
};

/// Frozen random-weight stack: per layer one shared query/key projection, a
/// value projection and an output projection, plus one input projection in
/// front. Queries and keys share a projection so that cosine between
/// criterion queries and stored representative keys tracks content
/// similarity, which the untrained toy stack otherwise would not provide.
/// Immutable after construction and safe to share across threads.
class AttentionStack {
public:
  struct LayerWeights {
    Matrix wq;   // model_dim x D' (also used for keys)
    Matrix wv;   // model_dim x D'
    Matrix wo;   // D' x model_dim
  };

  explicit AttentionStack(const StackConfig& config) : config_(config) {
    config_.validate();
    // Draw order is fixed: input projection, then per layer W_QK, W_V, W_O.
    SplitMix64 rng(config_.seed);
    const float scale = float(1.0 / std::sqrt(double(config_.model_dim)));
    input_proj_ = Matrix(config_.input_dim, config_.model_dim);
    fill_gaussian(input_proj_, rng, scale);
    layers_.resize(config_.layers);
    for (auto& w : layers_) {
      w.wq = Matrix(config_.model_dim, config_.proj_dim());
      fill_gaussian(w.wq, rng, scale);
      w.wv = Matrix(config_.model_dim, config_.proj_dim());
      fill_gaussian(w.wv, rng, scale);
      w.wo = Matrix(config_.proj_dim(), config_.model_dim);
      fill_gaussian(w.wo, rng, scale);
    }
    const std::size_t half = config_.head_dim / 2;
    inv_freq_.resize(half);
    for (std::size_t k = 0; k < half; ++k)
      inv_freq_[k] = std::pow(config_.rope_base,
                              -2.0 * double(k) / double(config_.head_dim));
  }

  const StackConfig& config() const { return config_; }
  const Matrix& input_projection() const { return input_proj_; }
  const LayerWeights& layer(std::size_t l) const { return layers_[l]; }
  const Matrix& wk(std::size_t l) const { return layers_[l].wq; }  // tied to W_Q

  /// Rotates pairs (x_{2k}, x_{2k+1}) of every head by
  /// position * rope_base^(-2k/head_dim); norm-preserving, identity at 0.
  void rope_inplace(std::span<float> vec, std::int64_t position) const {
    const std::size_t half = config_.head_dim / 2;
    for (std::size_t h = 0; h < config_.heads; ++h) {
      float* head = vec.data() + h * config_.head_dim;
      for (std::size_t k = 0; k < half; ++k) {
        const double angle = double(position) * inv_freq_[k];
        const float c = float(std::cos(angle));
        const float s = float(std::sin(angle));
        const float x0 = head[2 * k];
        const float x1 = head[2 * k + 1];
        head[2 * k] = x0 * c - x1 * s;
        head[2 * k + 1] = x0 * s + x1 * c;
      }
    }
  }

  std::vector<float> rope(std::span<const float> vec, std::int64_t position) const {
    if (vec.size() != config_.proj_dim())
      throw ContractError("rope: vector width must be heads * head_dim");
    std::vector<float> out(vec.begin(), vec.end());
    rope_inplace(out, position);
    return out;
  }

  /// Projects input-dimension rows (P^2 x D) to the residual width.
  Matrix project_input(const Matrix& rows) const {
    if (rows.cols() != config_.input_dim)
      throw ContractError("project_input: row width != input_dim");
    return matmul(rows, input_proj_);
  }

  static Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ContractError("matmul: shape mismatch");
    Matrix y(a.rows(), b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
      const float* ar = a.row(r);
      float* yr = y.row(r);
      for (std::size_t i = 0; i < a.cols(); ++i) {
        const float av = ar[i];
        if (av == 0.0f) continue;
        const float* br = b.row(i);
        for (std::size_t j = 0; j < b.cols(); ++j) yr[j] += av * br[j];
      }
    }
    return y;
  }

private:
  StackConfig config_;
  Matrix input_proj_;
  std::vector<LayerWeights> layers_;
  std::vector<double> inv_freq_;
};

/// Per-layer output of encoding one segment: T_i frame blocks per layer plus
/// (unless disabled) one summary block per layer.
struct EncodedSegment {
  std::int64_t segment_id = 0;
  std::size_t patch_count = 0;
  std::vector<std::vector<KvBlock>> frame_blocks;  // [layer][frame]
  std::vector<KvBlock> summary_blocks;             // [layer]; empty if disabled

  std::size_t layers() const { return frame_blocks.size(); }
  std::size_t frame_count() const {
    return frame_blocks.empty() ? 0 : frame_blocks.front().size();
  }
};

namespace detail {

// One attention layer over `x` (rows x model_dim, updated in place through the
// residual + output projection). Rows attend to `past_k/past_v` rows (rotated
// at positions 0..past-1) plus earlier rows of x (rotated at past + row).
// Returns the new rows' unrotated keys and values via out parameters.
inline void attend_layer(const AttentionStack& stack, std::size_t layer,
                         Matrix& x, const Matrix& past_k, const Matrix& past_v,
                         Matrix* new_k_out, Matrix* new_v_out) {
  const auto& cfg = stack.config();
  const auto& w = stack.layer(layer);
  const std::size_t rows = x.rows();
  const std::size_t dp = cfg.proj_dim();
  const std::size_t past = past_k.rows();

  Matrix q = AttentionStack::matmul(x, w.wq);
  Matrix k = q;  // keys share the query projection
  Matrix v = AttentionStack::matmul(x, w.wv);

  // Rotated copies: past rows sit at positions [0, past), new rows continue.
  Matrix pk_rot = past_k;
  for (std::size_t r = 0; r < past; ++r)
    stack.rope_inplace(pk_rot.row_span(r), std::int64_t(r));
  Matrix k_rot = k;
  Matrix q_rot = q;
  for (std::size_t r = 0; r < rows; ++r) {
    stack.rope_inplace(k_rot.row_span(r), std::int64_t(past + r));
    stack.rope_inplace(q_rot.row_span(r), std::int64_t(past + r));
  }

  const float inv_sqrt_dh = float(1.0 / std::sqrt(double(cfg.head_dim)));
  Matrix attn(rows, dp);
  std::vector<float> logits;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t visible_new = cfg.causal ? r + 1 : rows;
    const std::size_t total = past + visible_new;
    logits.resize(total);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::size_t off = h * cfg.head_dim;
      const float* qh = q_rot.row(r) + off;
      float maxv = -std::numeric_limits<float>::infinity();
      for (std::size_t t = 0; t < total; ++t) {
        const float* kh = (t < past ? pk_rot.row(t) : k_rot.row(t - past)) + off;
        float acc = 0.0f;
        for (std::size_t i = 0; i < cfg.head_dim; ++i) acc += qh[i] * kh[i];
        acc *= inv_sqrt_dh;
        logits[t] = acc;
        if (acc > maxv) maxv = acc;
      }
      double denom = 0.0;
      for (std::size_t t = 0; t < total; ++t) {
        logits[t] = std::exp(logits[t] - maxv);
        denom += logits[t];
      }
      const float inv_denom = float(1.0 / denom);
      float* out = attn.row(r) + off;
      for (std::size_t t = 0; t < total; ++t) {
        const float wgt = logits[t] * inv_denom;
        const float* vh = (t < past ? past_v.row(t) : v.row(t - past)) + off;
        for (std::size_t i = 0; i < cfg.head_dim; ++i) out[i] += wgt * vh[i];
      }
    }
  }

  Matrix projected = AttentionStack::matmul(attn, w.wo);
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += projected.data()[i];

  if (new_k_out) *new_k_out = std::move(k);
  if (new_v_out) *new_v_out = std::move(v);
}

inline std::vector<float> mean_rows(const Matrix& m, std::size_t first,
                                    std::size_t count) {
  std::vector<double> acc(m.cols(), 0.0);
  for (std::size_t r = first; r < first + count; ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) acc[c] += m(r, c);
  std::vector<float> out(m.cols());
  for (std::size_t c = 0; c < m.cols(); ++c)
    out[c] = float(acc[c] / double(count));
  return out;
}

inline KvBlock make_block(const Matrix& k, const Matrix& v, std::size_t first_row,
                          std::size_t p2, std::int64_t segment,
                          std::int64_t ordinal, bool summary, std::size_t layer,
                          std::int64_t stream_pos) {
  KvBlock b;
  b.segment = segment;
  b.frame_ordinal = ordinal;
  b.is_summary = summary;
  b.layer = layer;
  b.stream_pos = stream_pos;
  b.keys = Matrix(p2, k.cols());
  b.values = Matrix(p2, v.cols());
  for (std::size_t r = 0; r < p2; ++r) {
    std::memcpy(b.keys.row(r), k.row(first_row + r), k.cols() * sizeof(float));
    std::memcpy(b.values.row(r), v.row(first_row + r), v.cols() * sizeof(float));
  }
  b.rep_key = mean_rows(k, first_row, p2);
  return b;
}

}  // namespace detail

/// Encodes one segment: X = [frames || summary] is projected to the residual
/// width and run through every layer; each new row attends to the in-window
/// past KV plus the preceding rows of X (positions are window-relative, the
/// oldest in-window row is 0). Emits one KV block per frame per layer plus
/// one summary block per layer, then appends the new rows' KV to the window
/// with oldest-first eviction.
inline EncodedSegment encode_segment(const AttentionStack& stack,
                                     LocalWindow& window, const Segment& segment,
                                     bool include_summary = true) {
  if (segment.frames.empty())
    throw DegenerateInputError("encode_segment: empty segment");
  const auto& cfg = stack.config();
  const std::size_t p2 = segment.frames.front().patches.rows();
  const std::size_t t_len = segment.frames.size();
  for (const auto& f : segment.frames)
    if (f.patches.rows() != p2 || f.patches.cols() != cfg.input_dim)
      throw ContractError("encode_segment: frame shape does not match stack config");

  const std::size_t extra = include_summary ? 1 : 0;
  Matrix input((t_len + extra) * p2, cfg.input_dim);
  for (std::size_t m = 0; m < t_len; ++m)
    for (std::size_t p = 0; p < p2; ++p)
      std::memcpy(input.row(m * p2 + p), segment.frames[m].patches.row(p),
                  cfg.input_dim * sizeof(float));
  if (include_summary) {
    if (!segment.summary.same_shape(segment.frames.front().patches))
      throw ContractError("encode_segment: summary shape mismatch");
    for (std::size_t p = 0; p < p2; ++p)
      std::memcpy(input.row(t_len * p2 + p), segment.summary.row(p),
                  cfg.input_dim * sizeof(float));
  }

  Matrix x = stack.project_input(input);

  EncodedSegment out;
  out.segment_id = segment.id;
  out.patch_count = p2;
  out.frame_blocks.resize(cfg.layers);
  if (include_summary) out.summary_blocks.reserve(cfg.layers);

  const std::int64_t summary_pos = segment.frames.back().index;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t past = window.size(l);
    Matrix past_k(past, cfg.proj_dim());
    Matrix past_v(past, cfg.proj_dim());
    {
      std::size_t r = 0;
      for (const auto& row : window.rows(l)) {
        std::memcpy(past_k.row(r), row.key.data(), cfg.proj_dim() * sizeof(float));
        std::memcpy(past_v.row(r), row.value.data(), cfg.proj_dim() * sizeof(float));
        ++r;
      }
    }
    Matrix new_k, new_v;
    detail::attend_layer(stack, l, x, past_k, past_v, &new_k, &new_v);

    out.frame_blocks[l].reserve(t_len);
    for (std::size_t m = 0; m < t_len; ++m)
      out.frame_blocks[l].push_back(detail::make_block(
          new_k, new_v, m * p2, p2, segment.id, std::int64_t(m), false, l,
          segment.frames[m].index));
    if (include_summary)
      out.summary_blocks.push_back(detail::make_block(
          new_k, new_v, t_len * p2, p2, segment.id, -1, true, l, summary_pos));

    for (std::size_t r = 0; r < new_k.rows(); ++r) {
      const std::size_t frame_of_row = r / p2;
      LocalWindow::Row row;
      row.key.assign(new_k.row(r), new_k.row(r) + cfg.proj_dim());
      row.value.assign(new_v.row(r), new_v.row(r) + cfg.proj_dim());
      row.stream_pos = frame_of_row < t_len ? segment.frames[frame_of_row].index
                                            : summary_pos;
      window.push(l, std::move(row));
    }
  }
  return out;
}

/// Runs model-dimension tokens through the stack (attending only to each
/// other, positions 0..N-1) and returns, per layer, the mean of that layer's
/// pre-rotation query vectors. This is how guidance and question criteria are
/// produced.
inline std::vector<std::vector<float>> criterion_from_tokens(
    const AttentionStack& stack, const std::vector<std::vector<float>>& tokens) {
  if (tokens.empty())
    throw DegenerateInputError("criterion_from_tokens: empty token list");
  const auto& cfg = stack.config();
  Matrix x(tokens.size(), cfg.model_dim);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    if (tokens[r].size() != cfg.model_dim)
      throw ContractError("criterion_from_tokens: token width != model_dim");
    std::memcpy(x.row(r), tokens[r].data(), cfg.model_dim * sizeof(float));
  }
  std::vector<std::vector<float>> criteria(cfg.layers);
  const Matrix empty_past(0, cfg.proj_dim());
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Matrix q = AttentionStack::matmul(x, stack.layer(l).wq);
    criteria[l] = detail::mean_rows(q, 0, q.rows());
    detail::attend_layer(stack, l, x, empty_past, empty_past, nullptr, nullptr);
  }
  return criteria;
}

/// Question answering over retrieved context (per-layer block lists sorted by
/// stream position). Context rows take consecutive rotary positions 0,1,2,...
/// at patch granularity in temporal order; the query tokens continue the
/// sequence. Returns the final-layer output rows (one per token).
inline std::vector<std::vector<float>> qa_attend(
    const AttentionStack& stack,
    const std::vector<std::vector<const KvBlock*>>& context,
    const std::vector<std::vector<float>>& tokens) {
  if (tokens.empty()) throw DegenerateInputError("qa_attend: empty token list");
  const auto& cfg = stack.config();
  if (context.size() != cfg.layers)
    throw ContractError("qa_attend: context must have one block list per layer");
  for (const auto& layer_blocks : context) {
    std::int64_t prev = std::numeric_limits<std::int64_t>::min();
    for (const auto* b : layer_blocks) {
      if (b->stream_pos < prev)
        throw ContractError("qa_attend: context blocks not in temporal order");
      prev = b->stream_pos;
    }
  }

  Matrix x(tokens.size(), cfg.model_dim);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    if (tokens[r].size() != cfg.model_dim)
      throw ContractError("qa_attend: token width != model_dim");
    std::memcpy(x.row(r), tokens[r].data(), cfg.model_dim * sizeof(float));
  }

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::size_t ctx_rows = 0;
    for (const auto* b : context[l]) ctx_rows += b->keys.rows();
    Matrix ck(ctx_rows, cfg.proj_dim());
    Matrix cv(ctx_rows, cfg.proj_dim());
    std::size_t r = 0;
    for (const auto* b : context[l]) {
      for (std::size_t br = 0; br < b->keys.rows(); ++br, ++r) {
        std::memcpy(ck.row(r), b->keys.row(br), cfg.proj_dim() * sizeof(float));
        std::memcpy(cv.row(r), b->values.row(br), cfg.proj_dim() * sizeof(float));
      }
    }
    detail::attend_layer(stack, l, x, ck, cv, nullptr, nullptr);
  }

  std::vector<std::vector<float>> out(tokens.size());
  for (std::size_t r = 0; r < x.rows(); ++r)
    out[r].assign(x.row(r), x.row(r) + cfg.model_dim);
  return out;
}

/// Keys a layer attends to per query token in qa_attend; the latency proxy.
inline std::size_t qa_attended_tokens(
    const std::vector<std::vector<const KvBlock*>>& context,
    std::size_t token_count) {
  std::size_t total = 0;
  for (const auto& layer_blocks : context) {
    std::size_t rows = 0;
    for (const auto* b : layer_blocks) rows += b->keys.rows();
    total += rows + token_count;
  }
  return total;
}

}  // namespace streamkv
