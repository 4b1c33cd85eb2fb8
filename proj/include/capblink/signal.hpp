#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace capblink {

// One timestamped raw reading. `raw` is in counter counts; larger values mean
// a lower oscillator frequency (eyelid closer to the electrode).
struct Sample {
  int64_t t_ms = 0;
  double raw = 0.0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

class SignalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Single-pole exponential smoother: y = alpha * x + (1 - alpha) * y_prev.
// The first sample after construction or reset() passes through unchanged.
class LowPassFilter {
 public:
  explicit LowPassFilter(double alpha = 0.57);

  double step(double x);
  void reset() { y_prev_.reset(); }

  double alpha() const { return alpha_; }
  std::optional<double> last() const { return y_prev_; }

 private:
  double alpha_;
  std::optional<double> y_prev_;
};

// First difference of consecutive filtered values. Yields nothing on the first
// call after construction or reset().
class Differencer {
 public:
  std::optional<double> step(double x);
  void reset() { x_prev_.reset(); }

 private:
  std::optional<double> x_prev_;
};

// A point of the variation stream as seen by the detector. `segment` changes
// whenever filter/difference state was reset by a sampling gap; points of
// different segments are never neighbours.
struct VariationPoint {
  int64_t t_ms = 0;
  double v = 0.0;
  double theta = 0.0;
  uint32_t segment = 0;

  friend bool operator==(const VariationPoint&, const VariationPoint&) = default;
};

// Half-open interval [start_ms, end_ms).
struct Window {
  int64_t start_ms = 0;
  int64_t end_ms = 0;
  std::vector<VariationPoint> values;
};

// Sliding-window segmentation over the variation stream. Windows are aligned
// to the first pushed timestamp and advance by hop_ms. A window is emitted as
// soon as a point at or past its end arrives; flush() closes out windows that
// are complete according to the nominal sample period, and tail() hands out
// the one window still open at end of stream, holding whatever points it got.
class WindowBuffer {
 public:
  WindowBuffer(int64_t window_len_ms = 1000, int64_t hop_ms = 500);

  std::vector<Window> push(const VariationPoint& p);
  std::vector<Window> flush(double nominal_period_ms);
  std::optional<Window> tail() const;

  int64_t window_len_ms() const { return window_len_ms_; }
  int64_t hop_ms() const { return hop_ms_; }

 private:
  void emit_until(int64_t t_ms, std::vector<Window>& out);

  int64_t window_len_ms_;
  int64_t hop_ms_;
  std::optional<int64_t> origin_ms_;
  std::optional<int64_t> last_t_ms_;
  int64_t next_start_ms_ = 0;
  std::deque<VariationPoint> pending_;
};

}  // namespace capblink
