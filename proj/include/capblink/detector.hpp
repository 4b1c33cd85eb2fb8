#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "capblink/signal.hpp"

namespace capblink {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FixedThreshold {
  double theta = 0.0;  // counts
};

// theta = median(|v|) + k * MAD(|v|) over the last stats_window_ms, floored at
// theta_min. fallback_theta is used while the statistics buffer is empty.
struct AdaptiveThreshold {
  double k = 6.0;
  int64_t stats_window_ms = 5000;
  double theta_min = 1.0;
  double fallback_theta = 1.0;
};

using ThresholdMode = std::variant<FixedThreshold, AdaptiveThreshold>;

struct DetectorConfig {
  int64_t window_len_ms = 1000;
  int64_t hop_ms = 500;
  ThresholdMode threshold = AdaptiveThreshold{};
  int64_t refractory_ms = 200;
  int64_t dedup_merge_ms = 100;
  double alpha = 0.57;
  double rate_hz = 60.0;
  // Inter-sample spacing beyond (1 + gap_tolerance) nominal periods resets the
  // filter and differencer.
  double gap_tolerance = 0.2;

  bool adaptive() const { return std::holds_alternative<AdaptiveThreshold>(threshold); }
  double nominal_period_ms() const { return 1000.0 / rate_hz; }

  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct DetectedBlink {
  int64_t peak_t_ms = 0;
  double peak_v = 0.0;
  double theta_at_detect = 0.0;
  // Stream time of the sample whose arrival released this detection.
  int64_t emitted_t_ms = 0;
};

// Median and median-absolute-deviation of |v| over a trailing time window.
// Values are kept both in arrival order (for eviction) and sorted (for the
// order statistics), so each push costs O(n) with small constants.
class RobustStats {
 public:
  explicit RobustStats(int64_t window_ms = 5000);

  // Adds a value stamped t_ms and evicts everything at or before t_ms - window_ms.
  void push(int64_t t_ms, double value);
  void clear();

  bool empty() const { return sorted_.empty(); }
  std::size_t size() const { return sorted_.size(); }
  double median() const { return median_; }
  double mad() const { return mad_; }

 private:
  void refresh();

  int64_t window_ms_;
  std::deque<std::pair<int64_t, double>> arrivals_;
  std::vector<double> sorted_;
  double median_ = 0.0;
  double mad_ = 0.0;
};

// Returns nullopt while the buffer is empty (warming up); callers substitute
// their fallback threshold.
std::optional<double> adaptive_threshold(const RobustStats& stats, double k, double theta_min);

struct ScanContext {
  // Only points strictly later than this are considered.
  std::optional<int64_t> after_t_ms;
  // Most recent emitted peak; seeds the refractory rule.
  std::optional<int64_t> last_peak_t_ms;
};

// Local maxima of the window with v >= the point's own theta. A local maximum
// is strictly greater than its left neighbour and not less than its right one,
// so plateaus resolve to their earliest sample. Points without both neighbours
// inside the window and segment are not candidates. Successive results are at
// least refractory_ms apart. Negative excursions are never returned.
std::vector<DetectedBlink> detect_in_window(const Window& w, int64_t refractory_ms,
                                            const ScanContext& ctx = {});

// Same, but with a single threshold applied to every point.
std::vector<DetectedBlink> detect_in_window(const Window& w, double theta, int64_t refractory_ms);

// Drops candidates within dedup_merge_ms of an already-emitted peak (history is
// time-sorted and gains every survivor). Survivors come back sorted by peak time.
std::vector<DetectedBlink> dedup_merge(std::span<const DetectedBlink> candidates,
                                       std::vector<DetectedBlink>& history, int64_t dedup_merge_ms);

// Streaming blink detector: low-pass -> difference -> threshold statistics ->
// sliding windows -> peak scan -> dedup. Single writer; the object can be moved
// between threads but not shared.
class BlinkDetector {
 public:
  explicit BlinkDetector(DetectorConfig cfg);

  // Throws SignalError for a non-finite reading or a non-increasing timestamp.
  // State is untouched on error, so the detector remains usable.
  std::vector<DetectedBlink> process(const Sample& s);

  // End of stream: releases detections from windows that are complete by the
  // nominal sample period but have not been closed by a later sample.
  std::vector<DetectedBlink> finish();

  // Fixed mode only; applies to samples processed after the call.
  void set_fixed_theta(double theta);

  const DetectorConfig& config() const { return cfg_; }
  double current_theta() const { return current_theta_; }
  // Variation of the latest sample; empty for the first sample of a segment.
  std::optional<double> last_variation() const { return last_v_; }
  std::optional<double> last_filtered() const { return filter_.last(); }
  std::size_t emitted_count() const { return emitted_count_; }

 private:
  std::vector<DetectedBlink> scan(std::vector<Window> windows, int64_t emit_t_ms);

  DetectorConfig cfg_;
  LowPassFilter filter_;
  Differencer diff_;
  RobustStats stats_;
  WindowBuffer windows_;
  std::vector<DetectedBlink> history_;
  std::optional<int64_t> last_t_ms_;
  std::optional<int64_t> scanned_until_ms_;
  std::optional<double> last_v_;
  double current_theta_ = 0.0;
  uint32_t segment_ = 0;
  std::size_t emitted_count_ = 0;
};

}  // namespace capblink
