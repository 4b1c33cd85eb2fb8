#include "capblink/detector.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace capblink {

void DetectorConfig::validate() const {
  if (!(rate_hz > 0.0) || !std::isfinite(rate_hz)) throw ConfigError("rate_hz must be > 0");
  if (window_len_ms <= 0) throw ConfigError("window_len_ms must be > 0");
  if (hop_ms <= 0 || hop_ms > window_len_ms) throw ConfigError("hop_ms must be in (0, window_len_ms]");
  // Every interior sample has to sit strictly inside at least one window.
  if (static_cast<double>(window_len_ms - hop_ms) < 3.0 * nominal_period_ms()) {
    throw ConfigError("window_len_ms - hop_ms must cover at least three sample periods");
  }
  if (refractory_ms < 0) throw ConfigError("refractory_ms must be >= 0");
  if (dedup_merge_ms < 0) throw ConfigError("dedup_merge_ms must be >= 0");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in (0, 1]");
  if (!(gap_tolerance >= 0.0)) throw ConfigError("gap_tolerance must be >= 0");
  if (const auto* f = std::get_if<FixedThreshold>(&threshold)) {
    if (!(f->theta > 0.0) || !std::isfinite(f->theta)) throw ConfigError("theta must be > 0");
  } else {
    const auto& a = std::get<AdaptiveThreshold>(threshold);
    if (!(a.k > 0.0) || !std::isfinite(a.k)) throw ConfigError("k must be > 0");
    if (a.stats_window_ms <= 0) throw ConfigError("stats_window_ms must be > 0");
    if (!(a.theta_min > 0.0) || !std::isfinite(a.theta_min)) throw ConfigError("theta_min must be > 0");
    if (!(a.fallback_theta > 0.0) || !std::isfinite(a.fallback_theta)) {
      throw ConfigError("fallback_theta must be > 0");
    }
  }
}

// ---------------------------------------------------------------------------

RobustStats::RobustStats(int64_t window_ms) : window_ms_(window_ms) {
  if (window_ms <= 0) throw ConfigError("stats window must be > 0 ms");
}

void RobustStats::clear() {
  arrivals_.clear();
  sorted_.clear();
  median_ = mad_ = 0.0;
}

void RobustStats::push(int64_t t_ms, double value) {
  while (!arrivals_.empty() && arrivals_.front().first <= t_ms - window_ms_) {
    auto it = std::lower_bound(sorted_.begin(), sorted_.end(), arrivals_.front().second);
    sorted_.erase(it);
    arrivals_.pop_front();
  }
  arrivals_.emplace_back(t_ms, value);
  sorted_.insert(std::upper_bound(sorted_.begin(), sorted_.end(), value), value);
  refresh();
}

void RobustStats::refresh() {
  const std::size_t n = sorted_.size();
  if (n == 0) {
    median_ = mad_ = 0.0;
    return;
  }
  median_ = (n % 2 == 1) ? sorted_[n / 2] : 0.5 * (sorted_[n / 2 - 1] + sorted_[n / 2]);

  // Absolute deviations grow outward from the median on both sides of the
  // sorted array; merge the two runs up to the middle rank(s).
  const double m = median_;
  auto split = std::upper_bound(sorted_.begin(), sorted_.end(), m) - sorted_.begin();
  std::ptrdiff_t left = split - 1;
  std::size_t right = static_cast<std::size_t>(split);
  const std::size_t lo_rank = (n - 1) / 2;
  const std::size_t hi_rank = n / 2;
  double lo_val = 0.0;
  double dev = 0.0;
  for (std::size_t rank = 0; rank <= hi_rank; ++rank) {
    const bool take_left =
        right >= n || (left >= 0 && (m - sorted_[static_cast<std::size_t>(left)]) <= (sorted_[right] - m));
    if (take_left) {
      dev = m - sorted_[static_cast<std::size_t>(left--)];
    } else {
      dev = sorted_[right++] - m;
    }
    if (rank == lo_rank) lo_val = dev;
  }
  mad_ = 0.5 * (lo_val + dev);
}

std::optional<double> adaptive_threshold(const RobustStats& stats, double k, double theta_min) {
  if (stats.empty()) return std::nullopt;
  const double theta = stats.median() + k * stats.mad();
  if (!std::isfinite(theta)) return theta_min;
  return std::max(theta_min, theta);
}

// ---------------------------------------------------------------------------

std::vector<DetectedBlink> detect_in_window(const Window& w, int64_t refractory_ms,
                                            const ScanContext& ctx) {
  std::vector<DetectedBlink> out;
  const auto& pts = w.values;
  std::optional<int64_t> last = ctx.last_peak_t_ms;
  for (std::size_t i = 1; i + 1 < pts.size(); ++i) {
    const auto& p = pts[i];
    if (ctx.after_t_ms && p.t_ms <= *ctx.after_t_ms) continue;
    if (pts[i - 1].segment != p.segment || pts[i + 1].segment != p.segment) continue;
    if (!(p.v > pts[i - 1].v && p.v >= pts[i + 1].v)) continue;
    if (!(p.v >= p.theta) || !(p.theta > 0.0)) continue;
    if (last && p.t_ms - *last < refractory_ms) continue;
    out.push_back({p.t_ms, p.v, p.theta, 0});
    last = p.t_ms;
  }
  return out;
}

std::vector<DetectedBlink> detect_in_window(const Window& w, double theta, int64_t refractory_ms) {
  Window copy = w;
  for (auto& p : copy.values) p.theta = theta;
  return detect_in_window(copy, refractory_ms);
}

std::vector<DetectedBlink> dedup_merge(std::span<const DetectedBlink> candidates,
                                       std::vector<DetectedBlink>& history, int64_t dedup_merge_ms) {
  std::vector<DetectedBlink> sorted(candidates.begin(), candidates.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.peak_t_ms < b.peak_t_ms; });
  std::vector<DetectedBlink> out;
  for (const auto& c : sorted) {
    // Nearest emitted peaks on either side of the candidate.
    auto it = std::lower_bound(history.begin(), history.end(), c.peak_t_ms,
                               [](const DetectedBlink& h, int64_t t) { return h.peak_t_ms < t; });
    bool duplicate = false;
    if (it != history.end() && it->peak_t_ms - c.peak_t_ms <= dedup_merge_ms) duplicate = true;
    if (it != history.begin() && c.peak_t_ms - std::prev(it)->peak_t_ms <= dedup_merge_ms) duplicate = true;
    if (duplicate) continue;
    history.insert(it, c);
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

const DetectorConfig& validated(const DetectorConfig& cfg) {
  cfg.validate();
  return cfg;
}

int64_t stats_window(const DetectorConfig& cfg) {
  if (const auto* a = std::get_if<AdaptiveThreshold>(&cfg.threshold)) return a->stats_window_ms;
  return 1;
}

}  // namespace

BlinkDetector::BlinkDetector(DetectorConfig cfg)
    : cfg_(validated(cfg)),
      filter_(cfg_.alpha),
      stats_(stats_window(cfg_)),
      windows_(cfg_.window_len_ms, cfg_.hop_ms) {
  if (const auto* f = std::get_if<FixedThreshold>(&cfg_.threshold)) {
    current_theta_ = f->theta;
  } else {
    current_theta_ = std::get<AdaptiveThreshold>(cfg_.threshold).fallback_theta;
  }
}

void BlinkDetector::set_fixed_theta(double theta) {
  if (cfg_.adaptive()) throw ConfigError("detector is in adaptive mode; manual theta is not accepted");
  if (!(theta > 0.0) || !std::isfinite(theta)) throw ConfigError("theta must be > 0");
  std::get<FixedThreshold>(cfg_.threshold).theta = theta;
  current_theta_ = theta;
}

std::vector<DetectedBlink> BlinkDetector::process(const Sample& s) {
  if (!std::isfinite(s.raw)) {
    throw SignalError("non-finite reading at t_ms=" + std::to_string(s.t_ms));
  }
  if (last_t_ms_ && s.t_ms <= *last_t_ms_) {
    throw SignalError("out-of-order timestamp t_ms=" + std::to_string(s.t_ms) +
                      " (previous t_ms=" + std::to_string(*last_t_ms_) + ")");
  }

  if (last_t_ms_ &&
      static_cast<double>(s.t_ms - *last_t_ms_) > cfg_.nominal_period_ms() * (1.0 + cfg_.gap_tolerance)) {
    filter_.reset();
    diff_.reset();
    ++segment_;
  }
  last_t_ms_ = s.t_ms;

  const double y = filter_.step(s.raw);
  const auto v = diff_.step(y);
  last_v_ = v;
  if (!v) return {};

  if (const auto* a = std::get_if<AdaptiveThreshold>(&cfg_.threshold)) {
    stats_.push(s.t_ms, std::abs(*v));
    current_theta_ = adaptive_threshold(stats_, a->k, a->theta_min).value_or(a->fallback_theta);
  }

  return scan(windows_.push({s.t_ms, *v, current_theta_, segment_}), s.t_ms);
}

std::vector<DetectedBlink> BlinkDetector::finish() {
  auto windows = windows_.flush(cfg_.nominal_period_ms());
  // No more data is coming, so the last half-filled window is as complete as
  // it will ever be; without it a blink in the final second goes unreported.
  if (auto w = windows_.tail()) windows.push_back(std::move(*w));
  return scan(std::move(windows), last_t_ms_.value_or(0));
}

std::vector<DetectedBlink> BlinkDetector::scan(std::vector<Window> windows, int64_t emit_t_ms) {
  std::vector<DetectedBlink> out;
  for (const auto& w : windows) {
    ScanContext ctx{scanned_until_ms_,
                    history_.empty() ? std::nullopt : std::optional<int64_t>(history_.back().peak_t_ms)};
    for (;;) {
      auto candidates = detect_in_window(w, cfg_.refractory_ms, ctx);
      bool rescan = false;
      for (auto& c : candidates) {
        c.emitted_t_ms = emit_t_ms;
        const DetectedBlink one[] = {c};
        if (dedup_merge(one, history_, cfg_.dedup_merge_ms).empty()) {
          // A dropped candidate must not anchor the refractory rule.
          ctx.after_t_ms = c.peak_t_ms;
          rescan = true;
          break;
        }
        out.push_back(c);
        ctx.after_t_ms = c.peak_t_ms;
        ctx.last_peak_t_ms = c.peak_t_ms;
      }
      if (!rescan) break;
    }
    if (w.values.size() >= 2) {
      const int64_t decided = w.values[w.values.size() - 2].t_ms;
      if (!scanned_until_ms_ || decided > *scanned_until_ms_) scanned_until_ms_ = decided;
    }
  }
  // Only the tail of the history can still collide with future candidates.
  if (!history_.empty()) {
    const int64_t keep_from = history_.back().peak_t_ms - cfg_.dedup_merge_ms;
    auto first = std::find_if(history_.begin(), history_.end(),
                              [&](const DetectedBlink& h) { return h.peak_t_ms >= keep_from; });
    if (first != history_.begin() && first != history_.end()) {
      history_.erase(history_.begin(), first);
    }
  }
  emitted_count_ += out.size();
  return out;
}

}  // namespace capblink
