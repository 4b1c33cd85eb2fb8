#include "capblink/pipeline.hpp"

namespace capblink {

EventRecord to_record(const DetectedBlink& d) { return {d.peak_t_ms, d.peak_v, d.theta_at_detect}; }

LabelRecord to_label(const GroundTruthEvent& e) {
  return {e.onset_ms, LabelSource::simulator, e.close_end_ms, e.open_end_ms};
}

std::vector<EventRecord> to_records(std::span<const DetectedBlink> d) {
  std::vector<EventRecord> out;
  out.reserve(d.size());
  for (const auto& x : d) out.push_back(to_record(x));
  return out;
}

std::vector<LabelRecord> to_labels(std::span<const GroundTruthEvent> e) {
  std::vector<LabelRecord> out;
  out.reserve(e.size());
  for (const auto& x : e) out.push_back(to_label(x));
  return out;
}

std::vector<DetectedBlink> detect_all(std::span<const Sample> samples, const DetectorConfig& cfg) {
  BlinkDetector det(cfg);
  std::vector<DetectedBlink> out;
  for (const auto& s : samples) {
    for (auto& d : det.process(s)) out.push_back(d);
  }
  for (auto& d : det.finish()) out.push_back(d);
  return out;
}

MatchResult evaluate_scenario(const ScenarioSpec& spec, const TankParams& tank, const DetectorConfig& cfg,
                              int64_t tol_ms) {
  auto cfg_at_rate = cfg;
  cfg_at_rate.rate_hz = spec.rate_hz;
  const auto sc = generate_scenario(spec, tank);
  const auto det = detect_all(sc.samples, cfg_at_rate);
  return match_events(to_labels(sc.truth), to_records(det), tol_ms);
}

std::vector<GridCell> benchmark_grid() {
  constexpr double fits[] = {1.0, 0.85, 0.6, 0.9, 0.7, 1.2, 0.8, 0.65};
  std::vector<GridCell> grid;
  for (const auto p : all_presets()) {
    for (int s = 0; s < 8; ++s) {
      grid.push_back({"S" + std::to_string(s + 1), p, fits[s], static_cast<uint64_t>(1000 + 10 * s + static_cast<int>(p))});
    }
  }
  return grid;
}

EvalReport run_grid(std::span<const GridCell> grid, const DetectorConfig& cfg, int64_t tol_ms) {
  std::vector<ReportEntry> entries;
  entries.reserve(grid.size());
  for (const auto& cell : grid) {
    auto spec = ScenarioSpec::for_preset(cell.preset);
    spec.seed = cell.seed;
    TankParams tank;
    tank.fit_scale = cell.fit_scale;
    entries.push_back(make_entry(cell.subject, std::string(to_string(cell.preset)),
                                 evaluate_scenario(spec, tank, cfg, tol_ms)));
  }
  return build_report(entries);
}

}  // namespace capblink
