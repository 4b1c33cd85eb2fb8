#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "capblink/capsim.hpp"
#include "capblink/detector.hpp"
#include "capblink/eval.hpp"
#include "capblink/stream_io.hpp"

namespace capblink {

EventRecord to_record(const DetectedBlink& d);
LabelRecord to_label(const GroundTruthEvent& e);
std::vector<EventRecord> to_records(std::span<const DetectedBlink> d);
std::vector<LabelRecord> to_labels(std::span<const GroundTruthEvent> e);

// Runs a fresh detector over the whole stream, including the end-of-stream flush.
std::vector<DetectedBlink> detect_all(std::span<const Sample> samples, const DetectorConfig& cfg);

// simulate -> detect -> match for one scenario.
MatchResult evaluate_scenario(const ScenarioSpec& spec, const TankParams& tank, const DetectorConfig& cfg,
                              int64_t tol_ms = 300);

// One cell of the synthetic benchmark: a scenario preset rendered for one
// synthetic subject (electrode fit) at a fixed seed.
struct GridCell {
  std::string subject;
  Preset preset = Preset::intentional;
  double fit_scale = 1.0;
  uint64_t seed = 1;
};

// The committed 5 scenario x 8 subject grid. Subjects differ by electrode fit
// (0.6 to 1.2); noise, drift and artifacts follow the preset defaults.
std::vector<GridCell> benchmark_grid();

// Simulates, detects and matches every cell; scenarios are named after presets.
EvalReport run_grid(std::span<const GridCell> grid, const DetectorConfig& cfg, int64_t tol_ms = 300);

}  // namespace capblink
