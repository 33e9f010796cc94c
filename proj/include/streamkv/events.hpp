// Copyright 2026 The streamkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "streamkv/stream.hpp"

namespace streamkv {

// Event files are JSONL: one object per line,
// {"at_frame": int, "tokens": [[...], ...], "expected_segment": int|null}.

inline std::vector<QuestionEvent> load_events(std::istream& in) {
  std::vector<QuestionEvent> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("events line " + std::to_string(line_no) + ": " + e.what());
    }
    QuestionEvent ev;
    ev.at_frame = j.at("at_frame").get<std::int64_t>();
    ev.tokens = j.at("tokens").get<std::vector<std::vector<float>>>();
    if (j.contains("expected_segment") && !j["expected_segment"].is_null())
      ev.expected_segment = j["expected_segment"].get<std::int64_t>();
    ev.validate();
    events.push_back(std::move(ev));
  }
  return events;
}

inline void save_events(std::span<const QuestionEvent> events, std::ostream& out) {
  for (const auto& ev : events) {
    nlohmann::json j;
    j["at_frame"] = ev.at_frame;
    j["tokens"] = ev.tokens;
    if (ev.expected_segment)
      j["expected_segment"] = *ev.expected_segment;
    else
      j["expected_segment"] = nullptr;
    out << j.dump() << '\n';
  }
}

inline SyntheticSpec spec_from_json(const nlohmann::json& j) {
  SyntheticSpec spec;
  spec.seed = j.value("seed", std::uint64_t(0));
  spec.patch_count = j.value("patch_count", std::uint32_t(4));
  spec.embed_dim = j.value("embed_dim", std::uint32_t(32));
  spec.frame_interval_ms = j.value("frame_interval_ms", std::uint32_t(2000));
  spec.boundary_drop = j.value("boundary_drop", 0.0);
  for (const auto& s : j.at("segments")) {
    SyntheticSpec::PlantedSegment p;
    p.length = s.at("length").get<std::size_t>();
    p.cluster_direction_seed = s.at("cluster_direction_seed").get<std::uint64_t>();
    p.noise_scale = s.value("noise_scale", 0.0);
    const std::size_t repeat = s.value("repeat", std::size_t(1));
    for (std::size_t r = 0; r < repeat; ++r) {
      spec.segments.push_back(p);
      ++p.cluster_direction_seed;  // repeated entries get distinct directions
    }
  }
  spec.validate();
  return spec;
}

inline nlohmann::json spec_to_json(const SyntheticSpec& spec) {
  nlohmann::json j;
  j["seed"] = spec.seed;
  j["patch_count"] = spec.patch_count;
  j["embed_dim"] = spec.embed_dim;
  j["frame_interval_ms"] = spec.frame_interval_ms;
  j["boundary_drop"] = spec.boundary_drop;
  j["segments"] = nlohmann::json::array();
  for (const auto& s : spec.segments)
    j["segments"].push_back({{"length", s.length},
                             {"cluster_direction_seed", s.cluster_direction_seed},
                             {"noise_scale", s.noise_scale}});
  return j;
}

}  // namespace streamkv
