#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "capblink/signal.hpp"

namespace capblink {

class ScenarioError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Eyelid trajectory of one blink: closing, closed plateau, opening.
struct BlinkKinematics {
  double t_close_ms = 100.0;
  double t_hold_ms = 50.0;
  double t_open_ms = 200.0;

  double span_ms() const { return t_close_ms + t_hold_ms + t_open_ms; }
  void validate() const;
};

// LC tank driven by the capacitance-to-digital converter. fit_scale models how
// close the frame sits to the eyelid; it multiplies the blink-induced change.
struct TankParams {
  double inductance_h = 18e-6;
  double c0_f = 33e-12;
  double dc_max_f = 60e-15;
  double fit_scale = 1.0;

  void validate() const;
};

enum class Preset { intentional, reading, talking, walking, driving };

std::string_view to_string(Preset p);
// Throws ScenarioError listing the valid names.
Preset parse_preset(std::string_view name);
std::span<const Preset> all_presets();

struct ScenarioSpec {
  Preset preset = Preset::intentional;
  int64_t duration_ms = 480000;
  double rate_hz = 60.0;

  // Blink schedule. A non-empty onsets_ms list is used verbatim; otherwise
  // blinks_per_min drives either an evenly spaced (lightly jittered) or a
  // Poisson schedule.
  double blinks_per_min = 10.0;
  bool regular_schedule = true;
  std::vector<int64_t> onsets_ms;
  // Minimum quiet time between the end of one blink and the next onset.
  int64_t min_gap_ms = 500;
  BlinkKinematics kinematics;
  // Share of blinks that stop short of full closure; their depth is drawn
  // uniformly from [0.02, 0.25] of a full blink.
  double partial_blink_fraction = 0.0;

  // Baseline wander: random walk (counts per sample) plus head-movement steps.
  double drift_sigma = 0.3;
  double head_moves_per_min = 2.0;
  double head_move_counts = 30.0;
  // White measurement noise, counts.
  double noise_sigma = 0.0;
  // Periodic motion artifact, counts and hertz.
  double artifact_counts = 0.0;
  double artifact_hz = 0.0;

  // Counter counts per hertz of frequency shift.
  double count_scale = 0.0755;
  bool quantize = true;
  uint64_t seed = 1;

  static ScenarioSpec for_preset(Preset p);
  // Zeroes every disturbance (noise, random walk, head moves, artifact) and
  // makes every blink complete.
  ScenarioSpec& without_noise();
  void validate() const;
};

struct GroundTruthEvent {
  int64_t onset_ms = 0;
  int64_t close_end_ms = 0;
  int64_t open_end_ms = 0;
  // Fraction of full eyelid travel reached (1 for a complete blink).
  double depth = 1.0;

  friend bool operator==(const GroundTruthEvent&, const GroundTruthEvent&) = default;
};

struct Scenario {
  std::vector<Sample> samples;
  std::vector<GroundTruthEvent> truth;
};

// Eyelid coverage in [0, 1]: raised-cosine rise over the closing phase, 1 while
// closed, raised-cosine fall over the opening phase, 0 elsewhere.
double blink_profile(double t_ms, double onset_ms, const BlinkKinematics& kin);

// C0 + fit_scale * dC_max * sum of depth-weighted blink profiles + drift_f.
double capacitance_at(double t_ms, std::span<const GroundTruthEvent> events, const BlinkKinematics& kin,
                      const TankParams& params, double drift_f = 0.0);

// 1 / (2 pi sqrt(L C)). Throws ScenarioError for non-positive inputs.
double frequency_from_capacitance(double capacitance_f, double inductance_h);

struct RenderOptions {
  double count_scale = 0.0755;
  double noise_sigma = 0.0;
  bool quantize = true;
  uint64_t seed = 1;
};

// raw[n] = (f_ref - f[n]) * count_scale + drift[n] + noise[n], optionally
// rounded to the nearest count. Frequency drops (capacitance rises) therefore
// show up as positive excursions. `drift_counts` may be empty.
std::vector<Sample> render_counts(std::span<const int64_t> t_ms, std::span<const double> f_trace,
                                  double f_ref, const RenderOptions& opt,
                                  std::span<const double> drift_counts = {});

// Integer sample timestamps for a stream of the given length and rate.
std::vector<int64_t> sample_times(int64_t duration_ms, double rate_hz);

// Blink schedule actually rendered for a spec (deterministic in spec.seed).
std::vector<GroundTruthEvent> schedule_blinks(const ScenarioSpec& spec);

Scenario generate_scenario(const ScenarioSpec& spec, const TankParams& params);

// Scenario documents: one `key = value` per line, `#` starts a comment. The
// `preset` key, when present, seeds every other field with that preset's
// defaults before the remaining keys apply. Unknown keys and malformed values
// raise ScenarioError naming the field.
struct ScenarioDocument {
  ScenarioSpec spec;
  TankParams tank;
};
ScenarioDocument parse_scenario_document(std::string_view text);
ScenarioDocument load_scenario_file(const std::string& path);
std::string format_scenario_document(const ScenarioDocument& doc);

}  // namespace capblink
