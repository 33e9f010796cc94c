// Copyright 2026 The streamkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "streamkv/core.hpp"

namespace streamkv {

/// One layer's ordered candidate representative keys. Candidate ids are the
/// positions in this list (temporal order).
struct SelectionRange {
  std::vector<std::span<const float>> keys;

  std::size_t size() const { return keys.size(); }
};

/// Scores, normalization and prefix sums of one layer, sorted by descending
/// normalized score with ties kept in temporal order.
struct PrioritySequence {
  std::vector<std::size_t> order;   // candidate ids, best first
  std::vector<double> probs;        // softmax masses in sorted order
  std::vector<double> cumulative;   // running sums, clamped to <= 1

  std::size_t size() const { return order.size(); }
};

struct ThresholdSearch {
  double p = 0.0;
  int iterations = 0;
  bool exact = false;  // true when the loop hit sum(K_l^p) == N
};

/// Per-layer selection counts chosen for one SelectKV call.
struct BudgetAllocation {
  std::vector<std::size_t> per_layer;  // K_l
  std::size_t total = 0;               // N; always equals sum(per_layer)
  double threshold = 0.0;              // resolved p
  int search_iterations = 0;
  std::size_t adjustments = 0;         // items added/removed after the search
};

struct SelectionResult {
  std::vector<std::vector<std::size_t>> indices;  // per layer, temporal order
  BudgetAllocation allocation;
};

/// Cosine of every candidate against the layer criterion, order-preserving.
/// Zero-norm candidates score -1 (compressible, not fatal); a zero-norm
/// criterion is an error.
inline std::vector<double> score_layer(const SelectionRange& range,
                                       std::span<const float> criterion) {
  const double cn = norm(criterion);
  if (cn == 0.0) throw DegenerateInputError("score_layer: zero-norm criterion");
  std::vector<double> sims;
  sims.reserve(range.size());
  for (const auto& key : range.keys) {
    if (key.size() != criterion.size())
      throw ContractError("score_layer: key width != criterion width");
    const double kn = norm(key);
    sims.push_back(kn == 0.0 ? -1.0 : dot(key, criterion) / (kn * cn));
  }
  return sims;
}

/// Softmax (max-subtracted) over the layer's scores, then a stable descending
/// sort; ties keep temporal order. Cumulative sums are clamped to <= 1.
inline PrioritySequence normalize_and_sort(std::span<const double> sims) {
  if (sims.empty())
    throw DegenerateInputError("normalize_and_sort: empty score list");
  double maxv = sims[0];
  for (double s : sims) {
    if (!std::isfinite(s))
      throw DegenerateInputError("normalize_and_sort: non-finite score");
    maxv = std::max(maxv, s);
  }
  std::vector<double> mass(sims.size());
  double denom = 0.0;
  for (std::size_t j = 0; j < sims.size(); ++j) {
    mass[j] = std::exp(sims[j] - maxv);
    denom += mass[j];
  }
  for (double& m : mass) m /= denom;

  PrioritySequence seq;
  seq.order.resize(sims.size());
  std::iota(seq.order.begin(), seq.order.end(), std::size_t(0));
  std::stable_sort(seq.order.begin(), seq.order.end(),
                   [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
  seq.probs.resize(sims.size());
  seq.cumulative.resize(sims.size());
  double run = 0.0;
  for (std::size_t j = 0; j < sims.size(); ++j) {
    seq.probs[j] = mass[seq.order[j]];
    run += seq.probs[j];
    seq.cumulative[j] = std::min(run, 1.0);
  }
  return seq;
}

/// Smallest prefix length whose cumulative mass reaches p; 0 when p <= 0 and
/// the full list when even the total falls short of p.
inline std::size_t prefix_budget(const PrioritySequence& seq, double p) {
  if (p <= 0.0) return 0;
  const auto it =
      std::lower_bound(seq.cumulative.begin(), seq.cumulative.end(), p);
  return std::size_t(it - seq.cumulative.begin()) +
         (it == seq.cumulative.end() ? 0 : 1);
}

namespace detail {

inline std::size_t total_prefix(const std::vector<PrioritySequence>& seqs,
                                double p) {
  std::size_t total = 0;
  for (const auto& s : seqs) total += prefix_budget(s, p);
  return total;
}

}  // namespace detail

/// Binary search for the global cumulative threshold: midpoint p of [p1, p2],
/// delta = sum(K_l^p) - N; return p when delta == 0, otherwise move p1 up
/// (delta < 0) or p2 down (delta > 0) until p2 - p1 <= epsilon. When the loop
/// exits without an exact hit the lower bracket is returned, so the resolved
/// allocation never exceeds the budget (N = 0 resolves to p = 0 with every
/// prefix empty).
inline ThresholdSearch find_threshold(const std::vector<PrioritySequence>& seqs,
                                      std::size_t budget, double epsilon = 1e-6) {
  if (epsilon <= 0.0) throw ConfigError("find_threshold: epsilon must be > 0");
  std::size_t capacity = 0;
  for (const auto& s : seqs) capacity += s.size();
  if (budget > capacity)
    throw ContractError("find_threshold: budget exceeds candidate count");

  ThresholdSearch res;
  double p1 = 0.0;
  double p2 = 1.0;
  while (p2 - p1 > epsilon) {
    ++res.iterations;
    const double p = (p1 + p2) * 0.5;
    const std::size_t total = detail::total_prefix(seqs, p);
    if (total == budget) {
      res.p = p;
      res.exact = true;
      return res;
    }
    if (total < budget)
      p1 = p;
    else
      p2 = p;
  }
  res.p = p1;
  res.exact = false;
  return res;
}

namespace detail {

// Deterministic exact-budget adjustment. Greedy by normalized score with
// reproducible tie-breaking: additions take the globally largest excluded
// score (ties to the smaller layer, whose boundary candidate has the earlier
// temporal id), removals the globally smallest included score (ties to the
// larger layer).
inline std::size_t adjust_to_budget(const std::vector<PrioritySequence>& seqs,
                                    std::vector<std::size_t>& counts,
                                    std::size_t budget) {
  std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t(0));
  std::size_t moves = 0;
  while (total < budget) {
    std::size_t pick = seqs.size();
    double pick_prob = 0.0;
    for (std::size_t l = 0; l < seqs.size(); ++l) {
      if (counts[l] >= seqs[l].size()) continue;
      const double prob = seqs[l].probs[counts[l]];
      if (pick == seqs.size() || prob > pick_prob) {
        pick = l;
        pick_prob = prob;
      }
    }
    ++counts[pick];
    ++total;
    ++moves;
  }
  while (total > budget) {
    std::size_t pick = seqs.size();
    double pick_prob = 0.0;
    for (std::size_t l = 0; l < seqs.size(); ++l) {
      if (counts[l] == 0) continue;
      const double prob = seqs[l].probs[counts[l] - 1];
      if (pick == seqs.size() || prob <= pick_prob) {
        pick = l;
        pick_prob = prob;
      }
    }
    --counts[pick];
    --total;
    ++moves;
  }
  return moves;
}

}  // namespace detail

/// Same as select_kv but starting from prepared priority sequences.
inline SelectionResult select_from_sequences(
    const std::vector<PrioritySequence>& seqs, std::size_t budget);

/// The unified selection function: score -> normalize/sort -> threshold
/// search -> exact-budget adjustment. Returns each layer's chosen candidate
/// ids in temporal order plus the resolved allocation.
inline SelectionResult select_kv(const std::vector<SelectionRange>& ranges,
                                 const std::vector<std::vector<float>>& criteria,
                                 std::size_t budget) {
  if (ranges.size() != criteria.size())
    throw ContractError("select_kv: one criterion per layer required");
  std::vector<PrioritySequence> seqs;
  seqs.reserve(ranges.size());
  for (std::size_t l = 0; l < ranges.size(); ++l) {
    const auto sims = score_layer(ranges[l], criteria[l]);
    seqs.push_back(normalize_and_sort(sims));
  }
  return select_from_sequences(seqs, budget);
}

inline SelectionResult select_from_sequences(
    const std::vector<PrioritySequence>& seqs, std::size_t budget) {
  // The public search default is 1e-6; internally the search runs much finer
  // so that cumulative plateaus narrower than 1e-6 cannot detach the result
  // from the enumeration oracle.
  constexpr double kSearchEpsilon = 1e-12;
  const ThresholdSearch search = find_threshold(seqs, budget, kSearchEpsilon);

  SelectionResult res;
  res.allocation.per_layer.resize(seqs.size());
  for (std::size_t l = 0; l < seqs.size(); ++l)
    res.allocation.per_layer[l] = prefix_budget(seqs[l], search.p);
  res.allocation.adjustments =
      detail::adjust_to_budget(seqs, res.allocation.per_layer, budget);
  res.allocation.total = budget;
  res.allocation.threshold = search.p;
  res.allocation.search_iterations = search.iterations;

  res.indices.resize(seqs.size());
  for (std::size_t l = 0; l < seqs.size(); ++l) {
    auto& ids = res.indices[l];
    ids.assign(seqs[l].order.begin(),
               seqs[l].order.begin() + std::ptrdiff_t(res.allocation.per_layer[l]));
    std::sort(ids.begin(), ids.end());
  }
  return res;
}

/// Integer split of N across layers (first N mod L layers get one extra),
/// capped at each layer's candidate count with deterministic redistribution.
inline std::vector<std::size_t> uniform_allocation(
    const std::vector<std::size_t>& sizes, std::size_t budget) {
  const std::size_t layers = sizes.size();
  if (layers == 0) throw ContractError("uniform_allocation: no layers");
  std::size_t capacity = 0;
  for (auto s : sizes) capacity += s;
  if (budget > capacity)
    throw ContractError("uniform_allocation: budget exceeds candidate count");
  std::vector<std::size_t> counts(layers);
  const std::size_t base = budget / layers;
  const std::size_t extra = budget % layers;
  std::size_t overflow = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    std::size_t want = base + (l < extra ? 1 : 0);
    if (want > sizes[l]) {
      overflow += want - sizes[l];
      want = sizes[l];
    }
    counts[l] = want;
  }
  while (overflow > 0) {
    bool placed = false;
    for (std::size_t l = 0; l < layers && overflow > 0; ++l) {
      if (counts[l] < sizes[l]) {
        ++counts[l];
        --overflow;
        placed = true;
      }
    }
    if (!placed) throw ContractError("uniform_allocation: no spare capacity");
  }
  return counts;
}

/// Uniform-budget variant of the selection function: same scoring and
/// sorting, but per-layer counts come from the integer split instead of the
/// threshold search.
inline SelectionResult select_uniform(const std::vector<SelectionRange>& ranges,
                                      const std::vector<std::vector<float>>& criteria,
                                      std::size_t budget) {
  if (ranges.size() != criteria.size())
    throw ContractError("select_uniform: one criterion per layer required");
  std::vector<PrioritySequence> seqs;
  std::vector<std::size_t> sizes;
  for (std::size_t l = 0; l < ranges.size(); ++l) {
    seqs.push_back(normalize_and_sort(score_layer(ranges[l], criteria[l])));
    sizes.push_back(ranges[l].size());
  }
  SelectionResult res;
  res.allocation.per_layer = uniform_allocation(sizes, budget);
  res.allocation.total = budget;
  res.indices.resize(seqs.size());
  for (std::size_t l = 0; l < seqs.size(); ++l) {
    auto& ids = res.indices[l];
    ids.assign(seqs[l].order.begin(),
               seqs[l].order.begin() + std::ptrdiff_t(res.allocation.per_layer[l]));
    std::sort(ids.begin(), ids.end());
  }
  return res;
}

/// Total normalized-score mass captured by an allocation (per-layer prefix
/// masses summed); the quantity the adaptive split is meant to increase.
inline double retained_mass(const std::vector<PrioritySequence>& seqs,
                            const std::vector<std::size_t>& counts) {
  double mass = 0.0;
  for (std::size_t l = 0; l < seqs.size(); ++l)
    for (std::size_t j = 0; j < counts[l]; ++j) mass += seqs[l].probs[j];
  return mass;
}

// ---------------------------------------------------------------------------
// Independent oracle: same contract as select_kv but the threshold comes from
// enumerating every distinct cumulative value instead of a binary search. The
// arithmetic pipeline (cosine, softmax, sort, prefix, adjustment) is written
// out separately on purpose; only the problem definition is shared.
// ---------------------------------------------------------------------------
inline SelectionResult oracle_select(const std::vector<SelectionRange>& ranges,
                                     const std::vector<std::vector<float>>& criteria,
                                     std::size_t budget) {
  if (ranges.size() != criteria.size())
    throw ContractError("oracle_select: one criterion per layer required");
  const std::size_t layers = ranges.size();

  struct OracleLayer {
    std::vector<std::size_t> order;
    std::vector<double> probs;
    std::vector<double> cumulative;
  };
  std::vector<OracleLayer> ls(layers);
  std::size_t capacity = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& range = ranges[l];
    const auto& crit = criteria[l];
    const double cn = norm(crit);
    if (cn == 0.0) throw DegenerateInputError("oracle_select: zero-norm criterion");
    std::vector<double> sims(range.size());
    for (std::size_t j = 0; j < range.size(); ++j) {
      const double kn = norm(range.keys[j]);
      sims[j] = kn == 0.0 ? -1.0 : dot(range.keys[j], crit) / (kn * cn);
    }
    double maxv = sims.empty() ? 0.0 : sims[0];
    for (double s : sims) maxv = std::max(maxv, s);
    std::vector<double> mass(sims.size());
    double denom = 0.0;
    for (std::size_t j = 0; j < sims.size(); ++j) {
      mass[j] = std::exp(sims[j] - maxv);
      denom += mass[j];
    }
    for (double& m : mass) m /= denom;
    auto& L = ls[l];
    L.order.resize(sims.size());
    std::iota(L.order.begin(), L.order.end(), std::size_t(0));
    std::stable_sort(L.order.begin(), L.order.end(),
                     [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
    L.probs.resize(sims.size());
    L.cumulative.resize(sims.size());
    double run = 0.0;
    for (std::size_t j = 0; j < sims.size(); ++j) {
      L.probs[j] = mass[L.order[j]];
      run += L.probs[j];
      L.cumulative[j] = std::min(run, 1.0);
    }
    capacity += range.size();
  }
  if (budget > capacity)
    throw ContractError("oracle_select: budget exceeds candidate count");

  // Candidate thresholds: zero plus every distinct cumulative value.
  std::vector<double> thresholds{0.0};
  for (const auto& L : ls)
    thresholds.insert(thresholds.end(), L.cumulative.begin(), L.cumulative.end());
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());

  const auto prefix_at = [](const OracleLayer& L, double t) -> std::size_t {
    if (t <= 0.0) return 0;
    std::size_t k = 0;
    while (k < L.cumulative.size() && L.cumulative[k] < t) ++k;
    return k < L.cumulative.size() ? k + 1 : L.cumulative.size();
  };

  // The allocation the search converges to from below: the largest enumerated
  // threshold whose prefix total still fits in the budget.
  double best_t = 0.0;
  bool found = false;
  for (double t : thresholds) {
    std::size_t total = 0;
    for (const auto& L : ls) total += prefix_at(L, t);
    if (total <= budget) {
      best_t = t;
      found = true;
    }
  }
  std::vector<std::size_t> counts(layers, 0);
  if (found)
    for (std::size_t l = 0; l < layers; ++l) counts[l] = prefix_at(ls[l], best_t);

  // Same deterministic adjustment rule as select_kv, written independently.
  std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t(0));
  std::size_t moves = 0;
  while (total < budget) {
    std::size_t pick = layers;
    double pick_prob = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
      if (counts[l] >= ls[l].probs.size()) continue;
      const double prob = ls[l].probs[counts[l]];
      if (pick == layers || prob > pick_prob) {
        pick = l;
        pick_prob = prob;
      }
    }
    ++counts[pick];
    ++total;
    ++moves;
  }
  while (total > budget) {
    std::size_t pick = layers;
    double pick_prob = 0.0;
    for (std::size_t l = 0; l < layers; ++l) {
      if (counts[l] == 0) continue;
      const double prob = ls[l].probs[counts[l] - 1];
      if (pick == layers || prob <= pick_prob) {
        pick = l;
        pick_prob = prob;
      }
    }
    --counts[pick];
    --total;
    ++moves;
  }

  SelectionResult res;
  res.allocation.per_layer = counts;
  res.allocation.total = budget;
  res.allocation.threshold = best_t;
  res.allocation.adjustments = moves;
  res.indices.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    auto& ids = res.indices[l];
    ids.assign(ls[l].order.begin(),
               ls[l].order.begin() + std::ptrdiff_t(counts[l]));
    std::sort(ids.begin(), ids.end());
  }
  return res;
}

}  // namespace streamkv
