#include "capblink/capsim.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace capblink {

namespace {

// Independent random streams per simulator component, so that changing one
// disturbance leaves the others (and the blink schedule) untouched.
enum class Stream : uint64_t { schedule = 1, random_walk = 2, head_moves = 3, artifact = 4, noise = 5, depth = 6 };

std::mt19937_64 make_rng(uint64_t seed, Stream which) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(which)};
  return std::mt19937_64(seq);
}

double raised_cosine(double u) { return 0.5 * (1.0 - std::cos(std::numbers::pi * u)); }

constexpr std::array<Preset, 5> kPresets = {Preset::intentional, Preset::reading, Preset::talking,
                                            Preset::walking, Preset::driving};

}  // namespace

void BlinkKinematics::validate() const {
  if (!(t_close_ms > 0.0)) throw ScenarioError("t_close_ms must be > 0");
  if (!(t_hold_ms >= 0.0)) throw ScenarioError("t_hold_ms must be >= 0");
  if (!(t_open_ms > 0.0)) throw ScenarioError("t_open_ms must be > 0");
}

void TankParams::validate() const {
  if (!(inductance_h > 0.0)) throw ScenarioError("inductance_h must be > 0");
  if (!(c0_f > 0.0)) throw ScenarioError("c0_f must be > 0");
  if (!(dc_max_f > 0.0)) throw ScenarioError("dc_max_f must be > 0");
  if (!(fit_scale > 0.0)) throw ScenarioError("fit_scale must be > 0");
}

std::string_view to_string(Preset p) {
  switch (p) {
    case Preset::intentional: return "intentional";
    case Preset::reading: return "reading";
    case Preset::talking: return "talking";
    case Preset::walking: return "walking";
    case Preset::driving: return "driving";
  }
  return "?";
}

std::span<const Preset> all_presets() { return kPresets; }

Preset parse_preset(std::string_view name) {
  for (auto p : kPresets) {
    if (to_string(p) == name) return p;
  }
  throw ScenarioError("unknown preset '" + std::string(name) +
                      "'; valid presets: intentional, reading, talking, walking, driving");
}

// Involuntary blink rates and disturbance levels are simulator choices, not
// measured values; see README.
ScenarioSpec ScenarioSpec::for_preset(Preset p) {
  ScenarioSpec s;
  s.preset = p;
  s.noise_sigma = 0.35;
  switch (p) {
    case Preset::intentional:
      s.blinks_per_min = 10.0;
      s.regular_schedule = true;
      break;
    case Preset::reading:
      s.blinks_per_min = 8.0;
      s.regular_schedule = false;
      s.head_moves_per_min = 1.0;  // head mostly still over a page
      s.partial_blink_fraction = 0.06;
      break;
    case Preset::talking:
      s.blinks_per_min = 16.0;
      s.regular_schedule = false;
      s.partial_blink_fraction = 0.06;
      break;
    case Preset::walking:
      s.blinks_per_min = 18.0;
      s.regular_schedule = false;
      s.drift_sigma = 0.6;
      s.artifact_counts = 15.0;
      s.artifact_hz = 2.0;
      s.partial_blink_fraction = 0.06;
      break;
    case Preset::driving:
      s.blinks_per_min = 14.0;
      s.regular_schedule = false;
      s.artifact_counts = 5.0;
      s.artifact_hz = 8.0;
      s.partial_blink_fraction = 0.06;
      break;
  }
  return s;
}

ScenarioSpec& ScenarioSpec::without_noise() {
  drift_sigma = 0.0;
  head_moves_per_min = 0.0;
  noise_sigma = 0.0;
  artifact_counts = 0.0;
  partial_blink_fraction = 0.0;
  return *this;
}

void ScenarioSpec::validate() const {
  if (duration_ms < 0) throw ScenarioError("duration_ms must be >= 0");
  if (!(rate_hz > 0.0) || !std::isfinite(rate_hz)) throw ScenarioError("rate_hz must be > 0");
  if (!(blinks_per_min >= 0.0)) throw ScenarioError("blinks_per_min must be >= 0");
  if (!(partial_blink_fraction >= 0.0 && partial_blink_fraction <= 1.0)) {
    throw ScenarioError("partial_blink_fraction must be in [0, 1]");
  }
  if (min_gap_ms < 0) throw ScenarioError("min_gap_ms must be >= 0");
  kinematics.validate();
  if (!(drift_sigma >= 0.0)) throw ScenarioError("drift_sigma must be >= 0");
  if (!(head_moves_per_min >= 0.0)) throw ScenarioError("head_moves_per_min must be >= 0");
  if (!(head_move_counts >= 0.0)) throw ScenarioError("head_move_counts must be >= 0");
  if (!(noise_sigma >= 0.0)) throw ScenarioError("noise_sigma must be >= 0");
  if (!(artifact_counts >= 0.0)) throw ScenarioError("artifact_counts must be >= 0");
  if (!(artifact_hz >= 0.0)) throw ScenarioError("artifact_hz must be >= 0");
  if (!(count_scale > 0.0)) throw ScenarioError("count_scale must be > 0");
  for (std::size_t i = 0; i < onsets_ms.size(); ++i) {
    if (onsets_ms[i] < 0 || (duration_ms > 0 && onsets_ms[i] >= duration_ms)) {
      throw ScenarioError("onsets_ms: onset " + std::to_string(onsets_ms[i]) + " outside [0, duration_ms)");
    }
    if (i > 0 && static_cast<double>(onsets_ms[i] - onsets_ms[i - 1]) < kinematics.span_ms() + min_gap_ms) {
      throw ScenarioError("onsets_ms: onset " + std::to_string(onsets_ms[i]) + " overlaps the previous blink");
    }
  }
}

// ---------------------------------------------------------------------------

double blink_profile(double t_ms, double onset_ms, const BlinkKinematics& kin) {
  const double dt = t_ms - onset_ms;
  if (dt <= 0.0) return 0.0;
  if (dt < kin.t_close_ms) return raised_cosine(dt / kin.t_close_ms);
  const double opening = dt - kin.t_close_ms - kin.t_hold_ms;
  if (opening <= 0.0) return 1.0;
  if (opening < kin.t_open_ms) return 1.0 - raised_cosine(opening / kin.t_open_ms);
  return 0.0;
}

double capacitance_at(double t_ms, std::span<const GroundTruthEvent> events, const BlinkKinematics& kin,
                      const TankParams& params, double drift_f) {
  double coverage = 0.0;
  for (const auto& e : events) {
    if (t_ms > static_cast<double>(e.onset_ms) && t_ms < static_cast<double>(e.open_end_ms)) {
      coverage += e.depth * blink_profile(t_ms, static_cast<double>(e.onset_ms), kin);
    }
  }
  return params.c0_f + params.fit_scale * params.dc_max_f * coverage + drift_f;
}

double frequency_from_capacitance(double capacitance_f, double inductance_h) {
  if (!(capacitance_f > 0.0)) throw ScenarioError("capacitance must be > 0");
  if (!(inductance_h > 0.0)) throw ScenarioError("inductance must be > 0");
  return 1.0 / (2.0 * std::numbers::pi * std::sqrt(inductance_h * capacitance_f));
}

std::vector<Sample> render_counts(std::span<const int64_t> t_ms, std::span<const double> f_trace,
                                  double f_ref, const RenderOptions& opt,
                                  std::span<const double> drift_counts) {
  if (t_ms.size() != f_trace.size()) throw ScenarioError("render_counts: time/frequency length mismatch");
  if (!drift_counts.empty() && drift_counts.size() != f_trace.size()) {
    throw ScenarioError("render_counts: drift length mismatch");
  }
  if (!(opt.count_scale > 0.0)) throw ScenarioError("count_scale must be > 0");
  auto rng = make_rng(opt.seed, Stream::noise);
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<Sample> out;
  out.reserve(f_trace.size());
  for (std::size_t n = 0; n < f_trace.size(); ++n) {
    double raw = (f_ref - f_trace[n]) * opt.count_scale;
    if (!drift_counts.empty()) raw += drift_counts[n];
    if (opt.noise_sigma > 0.0) raw += opt.noise_sigma * noise(rng);
    if (opt.quantize) raw = std::round(raw);
    out.push_back({t_ms[n], raw + 0.0});  // + 0.0 folds -0 into 0
  }
  return out;
}

std::vector<int64_t> sample_times(int64_t duration_ms, double rate_hz) {
  std::vector<int64_t> t;
  const double period = 1000.0 / rate_hz;
  for (int64_t n = 0;; ++n) {
    const double exact = static_cast<double>(n) * period;
    if (exact >= static_cast<double>(duration_ms)) break;
    t.push_back(std::llround(exact));
  }
  return t;
}

namespace {

std::vector<GroundTruthEvent> schedule_onsets(const ScenarioSpec& spec) {
  const auto& kin = spec.kinematics;
  auto event_at = [&](int64_t onset) {
    const int64_t close_end = onset + std::llround(kin.t_close_ms);
    return GroundTruthEvent{onset, close_end, close_end + std::llround(kin.t_hold_ms + kin.t_open_ms)};
  };
  std::vector<GroundTruthEvent> out;
  const auto fits = [&](int64_t onset) {
    return static_cast<double>(onset) + kin.span_ms() <= static_cast<double>(spec.duration_ms);
  };

  if (!spec.onsets_ms.empty()) {
    for (auto onset : spec.onsets_ms) out.push_back(event_at(onset));
    return out;
  }
  if (spec.blinks_per_min <= 0.0 || spec.duration_ms <= 0) return out;

  auto rng = make_rng(spec.seed, Stream::schedule);
  const double mean_interval = 60000.0 / spec.blinks_per_min;
  const double busy = kin.span_ms() + static_cast<double>(spec.min_gap_ms);

  if (spec.regular_schedule) {
    // One blink per interval, centred, jittered by up to 15% of the interval
    // while keeping the minimum gap to the neighbours.
    const double jitter = std::max(0.0, std::min(0.15 * mean_interval, 0.5 * (mean_interval - busy)));
    std::uniform_real_distribution<double> u(-jitter, jitter);
    const auto count = static_cast<int64_t>(std::floor(static_cast<double>(spec.duration_ms) / mean_interval));
    for (int64_t k = 0; k < count; ++k) {
      const double centre = (static_cast<double>(k) + 0.5) * mean_interval - 0.5 * kin.span_ms();
      const int64_t onset = std::max<int64_t>(0, std::llround(centre + u(rng)));
      if (!fits(onset)) break;
      out.push_back(event_at(onset));
    }
    return out;
  }

  // Poisson arrivals with a dead time: onset-to-onset = busy + Exp(mean - busy).
  const double excess = std::max(1.0, mean_interval - busy);
  std::exponential_distribution<double> gap(1.0 / excess);
  double t = static_cast<double>(spec.min_gap_ms) + gap(rng);
  for (;;) {
    const int64_t onset = std::llround(t);
    if (!fits(onset)) break;
    out.push_back(event_at(onset));
    t += busy + gap(rng);
  }
  return out;
}

}  // namespace

std::vector<GroundTruthEvent> schedule_blinks(const ScenarioSpec& spec) {
  auto events = schedule_onsets(spec);
  if (spec.partial_blink_fraction > 0.0) {
    auto rng = make_rng(spec.seed, Stream::depth);
    std::bernoulli_distribution partial(spec.partial_blink_fraction);
    std::uniform_real_distribution<double> depth(0.02, 0.25);
    for (auto& e : events) {
      const bool is_partial = partial(rng);
      const double d = depth(rng);
      if (is_partial) e.depth = d;
    }
  }
  return events;
}

Scenario generate_scenario(const ScenarioSpec& spec, const TankParams& params) {
  spec.validate();
  params.validate();
  Scenario sc;
  sc.truth = schedule_blinks(spec);
  const auto times = sample_times(spec.duration_ms, spec.rate_hz);
  if (times.empty()) return sc;

  const double f_ref = frequency_from_capacitance(params.c0_f, params.inductance_h);
  std::vector<double> freq(times.size());
  {
    std::size_t first_live = 0;  // events ending before the current time are done
    for (std::size_t n = 0; n < times.size(); ++n) {
      const auto t = static_cast<double>(times[n]);
      while (first_live < sc.truth.size() && static_cast<double>(sc.truth[first_live].open_end_ms) <= t) {
        ++first_live;
      }
      std::size_t last_live = first_live;
      while (last_live < sc.truth.size() && static_cast<double>(sc.truth[last_live].onset_ms) < t) ++last_live;
      const std::span<const GroundTruthEvent> live(sc.truth.data() + first_live, last_live - first_live);
      freq[n] = frequency_from_capacitance(capacitance_at(t, live, spec.kinematics, params), params.inductance_h);
    }
  }

  std::vector<double> drift(times.size(), 0.0);
  if (spec.drift_sigma > 0.0) {
    auto rng = make_rng(spec.seed, Stream::random_walk);
    std::normal_distribution<double> step(0.0, spec.drift_sigma);
    double level = 0.0;
    for (std::size_t n = 1; n < times.size(); ++n) {
      level += step(rng);
      drift[n] += level;
    }
  }
  if (spec.head_moves_per_min > 0.0 && spec.head_move_counts > 0.0) {
    // Head movements: smooth baseline steps of random sign and size.
    auto rng = make_rng(spec.seed, Stream::head_moves);
    std::exponential_distribution<double> arrival(spec.head_moves_per_min / 60000.0);
    std::uniform_real_distribution<double> size(0.5, 1.0);
    std::uniform_real_distribution<double> ramp(100.0, 600.0);
    std::bernoulli_distribution upward(0.5);
    const auto end = static_cast<double>(spec.duration_ms);
    for (double t0 = arrival(rng); t0 < end; t0 += arrival(rng)) {
      const double amplitude = (upward(rng) ? 1.0 : -1.0) * spec.head_move_counts * size(rng);
      const double width = ramp(rng);
      for (std::size_t n = 0; n < times.size(); ++n) {
        const double u = (static_cast<double>(times[n]) - t0) / width;
        if (u <= 0.0) continue;
        drift[n] += amplitude * (u >= 1.0 ? 1.0 : raised_cosine(u));
      }
    }
  }
  if (spec.artifact_counts > 0.0 && spec.artifact_hz > 0.0) {
    auto rng = make_rng(spec.seed, Stream::artifact);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const double phi = phase(rng);
    for (std::size_t n = 0; n < times.size(); ++n) {
      const double seconds = static_cast<double>(times[n]) / 1000.0;
      drift[n] += spec.artifact_counts * std::sin(2.0 * std::numbers::pi * spec.artifact_hz * seconds + phi);
    }
  }

  RenderOptions opt{spec.count_scale, spec.noise_sigma, spec.quantize, spec.seed};
  sc.samples = render_counts(times, freq, f_ref, opt, drift);
  return sc;
}

// ---------------------------------------------------------------------------
// Scenario documents

namespace {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw ScenarioError("field '" + std::string(key) + "': cannot parse '" + std::string(text) + "'");
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ScenarioError("field '" + std::string(key) + "': expected true/false, got '" + std::string(text) + "'");
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

}  // namespace

ScenarioDocument parse_scenario_document(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ScenarioError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    entries.emplace_back(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
  }

  ScenarioDocument doc;
  for (const auto& [key, value] : entries) {
    if (key == "preset") doc.spec = ScenarioSpec::for_preset(parse_preset(value));
  }
  auto& s = doc.spec;
  auto& tank = doc.tank;
  for (const auto& [key, value] : entries) {
    const std::string_view v = value;
    if (key == "preset") continue;
    if (key == "duration_ms") s.duration_ms = parse_number<int64_t>(key, v);
    else if (key == "rate_hz") s.rate_hz = parse_number<double>(key, v);
    else if (key == "blinks_per_min") s.blinks_per_min = parse_number<double>(key, v);
    else if (key == "regular_schedule") s.regular_schedule = parse_bool(key, v);
    else if (key == "onsets_ms") {
      s.onsets_ms.clear();
      std::string_view rest = v;
      while (!rest.empty()) {
        const auto comma = rest.find(',');
        const auto item = trim(rest.substr(0, comma));
        if (!item.empty()) s.onsets_ms.push_back(parse_number<int64_t>(key, item));
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
      }
    }
    else if (key == "partial_blink_fraction") s.partial_blink_fraction = parse_number<double>(key, v);
    else if (key == "min_gap_ms") s.min_gap_ms = parse_number<int64_t>(key, v);
    else if (key == "t_close_ms") s.kinematics.t_close_ms = parse_number<double>(key, v);
    else if (key == "t_hold_ms") s.kinematics.t_hold_ms = parse_number<double>(key, v);
    else if (key == "t_open_ms") s.kinematics.t_open_ms = parse_number<double>(key, v);
    else if (key == "drift_sigma") s.drift_sigma = parse_number<double>(key, v);
    else if (key == "head_moves_per_min") s.head_moves_per_min = parse_number<double>(key, v);
    else if (key == "head_move_counts") s.head_move_counts = parse_number<double>(key, v);
    else if (key == "noise_sigma") s.noise_sigma = parse_number<double>(key, v);
    else if (key == "artifact_counts") s.artifact_counts = parse_number<double>(key, v);
    else if (key == "artifact_hz") s.artifact_hz = parse_number<double>(key, v);
    else if (key == "count_scale") s.count_scale = parse_number<double>(key, v);
    else if (key == "quantize") s.quantize = parse_bool(key, v);
    else if (key == "seed") s.seed = parse_number<uint64_t>(key, v);
    else if (key == "inductance_h") tank.inductance_h = parse_number<double>(key, v);
    else if (key == "c0_f") tank.c0_f = parse_number<double>(key, v);
    else if (key == "dc_max_f") tank.dc_max_f = parse_number<double>(key, v);
    else if (key == "fit_scale") tank.fit_scale = parse_number<double>(key, v);
    else throw ScenarioError("unknown field '" + key + "'");
  }
  s.validate();
  tank.validate();
  return doc;
}

ScenarioDocument load_scenario_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot open scenario file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario_document(ss.str());
}

std::string format_scenario_document(const ScenarioDocument& doc) {
  const auto& s = doc.spec;
  std::ostringstream os;
  os << "preset = " << to_string(s.preset) << '\n'
     << "duration_ms = " << s.duration_ms << '\n'
     << "rate_hz = " << format_double(s.rate_hz) << '\n'
     << "blinks_per_min = " << format_double(s.blinks_per_min) << '\n'
     << "regular_schedule = " << (s.regular_schedule ? "true" : "false") << '\n';
  if (!s.onsets_ms.empty()) {
    os << "onsets_ms = ";
    for (std::size_t i = 0; i < s.onsets_ms.size(); ++i) os << (i ? "," : "") << s.onsets_ms[i];
    os << '\n';
  }
  os << "partial_blink_fraction = " << format_double(s.partial_blink_fraction) << '\n'
     << "min_gap_ms = " << s.min_gap_ms << '\n'
     << "t_close_ms = " << format_double(s.kinematics.t_close_ms) << '\n'
     << "t_hold_ms = " << format_double(s.kinematics.t_hold_ms) << '\n'
     << "t_open_ms = " << format_double(s.kinematics.t_open_ms) << '\n'
     << "drift_sigma = " << format_double(s.drift_sigma) << '\n'
     << "head_moves_per_min = " << format_double(s.head_moves_per_min) << '\n'
     << "head_move_counts = " << format_double(s.head_move_counts) << '\n'
     << "noise_sigma = " << format_double(s.noise_sigma) << '\n'
     << "artifact_counts = " << format_double(s.artifact_counts) << '\n'
     << "artifact_hz = " << format_double(s.artifact_hz) << '\n'
     << "count_scale = " << format_double(s.count_scale) << '\n'
     << "quantize = " << (s.quantize ? "true" : "false") << '\n'
     << "seed = " << s.seed << '\n'
     << "inductance_h = " << format_double(doc.tank.inductance_h) << '\n'
     << "c0_f = " << format_double(doc.tank.c0_f) << '\n'
     << "dc_max_f = " << format_double(doc.tank.dc_max_f) << '\n'
     << "fit_scale = " << format_double(doc.tank.fit_scale) << '\n';
  return os.str();
}

}  // namespace capblink
