#include "capblink/signal.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace capblink {

namespace {

// Floor division for possibly negative numerators.
int64_t floor_div(int64_t a, int64_t b) {
  int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

LowPassFilter::LowPassFilter(double alpha) : alpha_(alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw SignalError("low-pass alpha must be in (0, 1], got " + std::to_string(alpha));
  }
}

double LowPassFilter::step(double x) {
  if (!std::isfinite(x)) throw SignalError("low-pass input is not finite");
  const double y = y_prev_ ? alpha_ * x + (1.0 - alpha_) * *y_prev_ : x;
  y_prev_ = y;
  return y;
}

std::optional<double> Differencer::step(double x) {
  if (!std::isfinite(x)) throw SignalError("difference input is not finite");
  std::optional<double> v;
  if (x_prev_) v = x - *x_prev_;
  x_prev_ = x;
  return v;
}

WindowBuffer::WindowBuffer(int64_t window_len_ms, int64_t hop_ms)
    : window_len_ms_(window_len_ms), hop_ms_(hop_ms) {
  if (window_len_ms <= 0 || hop_ms <= 0 || hop_ms > window_len_ms) {
    throw SignalError("window requires 0 < hop_ms <= window_len_ms");
  }
}

std::vector<Window> WindowBuffer::push(const VariationPoint& p) {
  if (last_t_ms_ && p.t_ms <= *last_t_ms_) {
    throw SignalError("out-of-order timestamp t_ms=" + std::to_string(p.t_ms) +
                      " (previous t_ms=" + std::to_string(*last_t_ms_) + ")");
  }
  std::vector<Window> out;
  if (!origin_ms_) {
    origin_ms_ = p.t_ms;
    next_start_ms_ = p.t_ms;
  }
  emit_until(p.t_ms, out);
  pending_.push_back(p);
  last_t_ms_ = p.t_ms;
  return out;
}

std::vector<Window> WindowBuffer::flush(double nominal_period_ms) {
  std::vector<Window> out;
  if (!last_t_ms_) return out;
  const auto horizon =
      static_cast<int64_t>(std::floor(static_cast<double>(*last_t_ms_) + nominal_period_ms + 0.5));
  emit_until(horizon, out);
  return out;
}

std::optional<Window> WindowBuffer::tail() const {
  // Later windows would only hold a subset of these points.
  Window w{next_start_ms_, next_start_ms_ + window_len_ms_, {}};
  for (const auto& p : pending_) {
    if (p.t_ms >= next_start_ms_) w.values.push_back(p);
  }
  if (w.values.empty()) return std::nullopt;
  return w;
}

void WindowBuffer::emit_until(int64_t t_ms, std::vector<Window>& out) {
  const int64_t origin = origin_ms_.value_or(0);
  // First window start whose window still contains `t`.
  auto first_start_containing = [&](int64_t t) {
    return origin + hop_ms_ * (floor_div(t - window_len_ms_ - origin, hop_ms_) + 1);
  };

  while (next_start_ms_ + window_len_ms_ <= t_ms) {
    while (!pending_.empty() && pending_.front().t_ms < next_start_ms_) pending_.pop_front();
    if (pending_.empty()) {
      // Nothing buffered: skip the empty windows spanned by a gap.
      next_start_ms_ = std::max(next_start_ms_, first_start_containing(t_ms));
      break;
    }
    const int64_t end = next_start_ms_ + window_len_ms_;
    if (pending_.front().t_ms >= end) {
      next_start_ms_ = std::max(next_start_ms_ + hop_ms_, first_start_containing(pending_.front().t_ms));
      continue;
    }
    Window w{next_start_ms_, end, {}};
    for (const auto& p : pending_) {
      if (p.t_ms >= end) break;
      w.values.push_back(p);
    }
    out.push_back(std::move(w));
    next_start_ms_ += hop_ms_;
  }
}

}  // namespace capblink
