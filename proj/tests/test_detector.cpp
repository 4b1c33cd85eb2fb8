#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "capblink/capsim.hpp"
#include "capblink/detector.hpp"
#include "capblink/pipeline.hpp"
#include "oracle.hpp"

using namespace capblink;

namespace {

Window window_of(std::vector<std::pair<int64_t, double>> pts, double theta = 5.0) {
  Window w{0, 1000, {}};
  for (auto [t, v] : pts) w.values.push_back({t, v, theta, 0});
  return w;
}

// 60 Hz grid over [0, 1000) with zeros except the given spikes.
Window spiky_window(std::vector<std::pair<int64_t, double>> spikes) {
  std::vector<std::pair<int64_t, double>> pts;
  for (int i = 0; i < 60; ++i) {
    const int64_t t = std::llround(i * 1000.0 / 60.0);
    double v = 0.0;
    for (auto [ts, vs] : spikes) {
      if (std::llabs(ts - t) <= 8) v = vs;
    }
    pts.push_back({t, v});
  }
  return window_of(pts);
}

std::vector<oracle::Peak> as_peaks(const std::vector<DetectedBlink>& d) {
  std::vector<oracle::Peak> out;
  for (const auto& x : d) out.push_back({x.peak_t_ms, x.peak_v, x.theta_at_detect});
  return out;
}

DetectorConfig fixed(double theta) {
  DetectorConfig cfg;
  cfg.threshold = FixedThreshold{theta};
  return cfg;
}

// Random stream: a simulated scenario, optionally with holes punched in it.
std::vector<Sample> random_stream(uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto presets = all_presets();
  auto spec = ScenarioSpec::for_preset(presets[rng() % presets.size()]);
  spec.seed = seed;
  spec.duration_ms = 20000 + static_cast<int64_t>(rng() % 40000);
  spec.noise_sigma = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
  TankParams tank;
  tank.fit_scale = std::uniform_real_distribution<double>(0.5, 1.3)(rng);
  auto samples = generate_scenario(spec, tank).samples;
  if (rng() % 2) {
    std::vector<Sample> holed;
    std::size_t skip = 0;
    for (const auto& s : samples) {
      if (skip > 0) {
        --skip;
        continue;
      }
      if (rng() % 400 == 0) skip = 1 + rng() % 40;
      holed.push_back(s);
    }
    samples = std::move(holed);
  }
  return samples;
}

}  // namespace

TEST(DetectInWindow, AllZerosGiveNothing) {
  EXPECT_TRUE(detect_in_window(spiky_window({}), 5.0, 200).empty());
}

TEST(DetectInWindow, SingleSpike) {
  const auto d = detect_in_window(spiky_window({{400, 12.0}}), 5.0, 200);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].peak_t_ms, 400);
  EXPECT_EQ(d[0].peak_v, 12.0);
}

TEST(DetectInWindow, RefractorySuppressesSecondSpike) {
  const auto d = detect_in_window(spiky_window({{100, 10.0}, {217, 9.0}}), 5.0, 200);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].peak_t_ms, 100);
}

TEST(DetectInWindow, SpikesBeyondRefractoryBothCount) {
  const auto d = detect_in_window(spiky_window({{100, 10.0}, {400, 9.0}}), 5.0, 200);
  ASSERT_EQ(d.size(), 2u);
}

TEST(DetectInWindow, PlateauResolvesToEarliestSample) {
  const auto d = detect_in_window(window_of({{0, 0}, {17, 8}, {33, 8}, {50, 8}, {67, 0}}), 200);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].peak_t_ms, 17);
}

TEST(DetectInWindow, EdgePointsAreNotCandidates) {
  EXPECT_TRUE(detect_in_window(window_of({{0, 50}, {17, 1}, {33, 0}}), 200).empty());
  EXPECT_TRUE(detect_in_window(window_of({{0, 0}, {17, 1}, {33, 50}}), 200).empty());
}

TEST(DetectInWindow, NegativeExcursionsIgnored) {
  EXPECT_TRUE(detect_in_window(window_of({{0, 0}, {17, -40}, {33, 0}, {50, -3}, {67, 0}}), 200).empty());
}

TEST(DetectInWindow, NeighboursMustShareSegment) {
  Window w = window_of({{0, 0}, {17, 30}, {33, 0}});
  w.values[2].segment = 1;
  EXPECT_TRUE(detect_in_window(w, 200).empty());
}

TEST(DetectInWindow, ThetaIsInclusiveAndPerPoint) {
  Window w = window_of({{0, 0}, {17, 5}, {33, 0}, {300, 0}, {317, 5}, {333, 0}});
  w.values[4].theta = 6.0;
  const auto d = detect_in_window(w, 200);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].peak_t_ms, 17);
}

TEST(DetectInWindow, MatchesBruteForceOnRandomWindows) {
  // Oracle: for each index, is it a strict-left / weak-right maximum above
  // theta, then greedy refractory.
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> v(-10.0, 10.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::pair<int64_t, double>> pts;
    for (int i = 0; i < 60; ++i) pts.push_back({i * 17, std::round(v(rng))});
    const auto w = window_of(pts, 4.0);
    std::vector<int64_t> expected;
    for (std::size_t i = 1; i + 1 < pts.size(); ++i) {
      if (pts[i].second > pts[i - 1].second && pts[i].second >= pts[i + 1].second && pts[i].second >= 4.0 &&
          (expected.empty() || pts[i].first - expected.back() >= 200)) {
        expected.push_back(pts[i].first);
      }
    }
    std::vector<int64_t> got;
    for (const auto& d : detect_in_window(w, 200)) got.push_back(d.peak_t_ms);
    ASSERT_EQ(got, expected) << "trial " << trial;
  }
}

TEST(DedupMerge, OverlapSeenTwiceEmittedOnce) {
  std::vector<DetectedBlink> history;
  const DetectedBlink a{1000, 20.0, 5.0, 0};
  EXPECT_EQ(dedup_merge(std::vector{a}, history, 100).size(), 1u);
  EXPECT_TRUE(dedup_merge(std::vector{a}, history, 100).empty());
  EXPECT_EQ(history.size(), 1u);
}

TEST(DedupMerge, NinetyMsApartMerge) {
  std::vector<DetectedBlink> history;
  const auto out = dedup_merge(std::vector<DetectedBlink>{{1000, 9, 5, 0}, {1090, 9, 5, 0}}, history, 100);
  EXPECT_EQ(out.size(), 1u);
}

TEST(DedupMerge, BoundaryIsInclusive) {
  std::vector<DetectedBlink> history;
  EXPECT_EQ(dedup_merge(std::vector<DetectedBlink>{{1000, 9, 5, 0}, {1100, 9, 5, 0}}, history, 100).size(), 1u);
  history.clear();
  EXPECT_EQ(dedup_merge(std::vector<DetectedBlink>{{1000, 9, 5, 0}, {1101, 9, 5, 0}}, history, 100).size(), 2u);
}

TEST(DedupMerge, ThreeHundredMsApartStaySeparate) {
  std::vector<DetectedBlink> history;
  const auto out = dedup_merge(std::vector<DetectedBlink>{{1300, 9, 5, 0}, {1000, 9, 5, 0}}, history, 100);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].peak_t_ms, 1000);
  EXPECT_EQ(history.back().peak_t_ms, 1300);
}

TEST(AdaptiveThreshold, FloorEngagesOnZeros) {
  RobustStats s(5000);
  for (int i = 0; i < 10; ++i) s.push(i * 17, 0.0);
  EXPECT_EQ(adaptive_threshold(s, 6.0, 1.0), 1.0);
}

TEST(AdaptiveThreshold, HandComputedCases) {
  RobustStats a(5000);
  for (double x : {1, 1, 1, 1, 9}) a.push(0, x);
  EXPECT_EQ(a.median(), 1.0);
  EXPECT_EQ(a.mad(), 0.0);
  EXPECT_EQ(adaptive_threshold(a, 6.0, 1.0), 1.0);

  RobustStats b(5000);
  for (double x : {0, 2, 4, 6, 8}) b.push(0, x);
  EXPECT_EQ(b.median(), 4.0);
  EXPECT_EQ(b.mad(), 2.0);
  EXPECT_EQ(adaptive_threshold(b, 2.0, 1.0), 8.0);
}

TEST(AdaptiveThreshold, EmptyBufferIsWarmingUp) {
  RobustStats s(5000);
  EXPECT_FALSE(adaptive_threshold(s, 6.0, 1.0).has_value());
}

TEST(RobustStats, MatchesSortingOracleUnderEviction) {
  std::mt19937 rng(5);
  std::exponential_distribution<double> mag(0.3);
  RobustStats s(500);
  std::vector<std::pair<int64_t, double>> all;
  for (int i = 0; i < 2000; ++i) {
    const int64_t t = i * 7;
    const double x = std::round(mag(rng) * 4.0) / 4.0;  // ties are common
    s.push(t, x);
    all.push_back({t, x});
    std::vector<double> live;
    for (auto [tt, xx] : all) {
      if (tt > t - 500) live.push_back(xx);
    }
    ASSERT_EQ(s.size(), live.size());
    const double med = oracle::median_of(live);
    std::vector<double> dev;
    for (double y : live) dev.push_back(std::abs(y - med));
    ASSERT_EQ(s.median(), med) << i;
    ASSERT_EQ(s.mad(), oracle::median_of(dev)) << i;
  }
}

TEST(DetectorConfig, Validation) {
  DetectorConfig ok;
  EXPECT_NO_THROW(ok.validate());
  auto bad = ok;
  bad.hop_ms = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ok;
  bad.hop_ms = 990;  // overlap of 10 ms is under three 60 Hz periods
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ok;
  bad.alpha = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = fixed(0.0);
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ok;
  bad.rate_hz = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(BlinkDetector{bad}, ConfigError);
}

TEST(BlinkDetector, NoiselessIntentionalScenarioFindsEveryBlink) {
  auto spec = ScenarioSpec::for_preset(Preset::intentional).without_noise();
  const auto sc = generate_scenario(spec, TankParams{});
  ASSERT_EQ(sc.truth.size(), 80u);
  const auto det = detect_all(sc.samples, DetectorConfig{});
  ASSERT_EQ(det.size(), 80u);
  for (std::size_t i = 0; i < det.size(); ++i) {
    const double mid = sc.truth[i].onset_ms + 0.5 * (sc.truth[i].close_end_ms - sc.truth[i].onset_ms);
    EXPECT_LE(std::abs(det[i].peak_t_ms - mid), 50.0) << i;
  }
}

TEST(BlinkDetector, ConstantStreamGivesNothing) {
  for (const auto& cfg : {DetectorConfig{}, fixed(0.5)}) {
    BlinkDetector d(cfg);
    std::size_t n = 0;
    for (int i = 0; i < 3000; ++i) n += d.process({std::llround(i * 1000.0 / 60.0), 1234.0}).size();
    n += d.finish().size();
    EXPECT_EQ(n, 0u);
  }
}

TEST(BlinkDetector, DeterministicFromFreshState) {
  const auto s = random_stream(77);
  const auto a = as_peaks(detect_all(s, DetectorConfig{}));
  const auto b = as_peaks(detect_all(s, DetectorConfig{}));
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a.empty());
}

TEST(BlinkDetector, RejectsBadSampleWithoutDamage) {
  const auto s = random_stream(3);
  BlinkDetector d(DetectorConfig{});
  std::vector<DetectedBlink> got;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i == 500) {
      EXPECT_THROW(d.process({s[i - 1].t_ms, 0.0}), SignalError);
      EXPECT_THROW(d.process({s[i].t_ms, std::nan("")}), SignalError);
    }
    for (auto& x : d.process(s[i])) got.push_back(x);
  }
  for (auto& x : d.finish()) got.push_back(x);
  EXPECT_EQ(as_peaks(got), as_peaks(detect_all(s, DetectorConfig{})));
}

TEST(BlinkDetector, StreamingMatchesOfflineOracle) {
  for (uint64_t seed = 1; seed <= 12; ++seed) {
    const auto s = random_stream(seed);
    for (const auto& cfg : {DetectorConfig{}, fixed(8.0), fixed(40.0)}) {
      ASSERT_EQ(as_peaks(detect_all(s, cfg)), oracle::offline_detect(s, cfg)) << "seed " << seed;
    }
  }
}

TEST(BlinkDetector, OracleAgreesUnderOtherGeometries) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 12; ++trial) {
    auto cfg = fixed(std::uniform_real_distribution<double>(3.0, 30.0)(rng));
    if (trial % 2) cfg.threshold = AdaptiveThreshold{.k = std::uniform_real_distribution<double>(2.0, 8.0)(rng)};
    cfg.window_len_ms = 400 + static_cast<int64_t>(rng() % 1200);
    cfg.hop_ms = 50 + static_cast<int64_t>(rng() % static_cast<uint64_t>(cfg.window_len_ms - 100));
    cfg.refractory_ms = static_cast<int64_t>(rng() % 400);
    cfg.dedup_merge_ms = static_cast<int64_t>(rng() % 300);
    cfg.alpha = std::uniform_real_distribution<double>(0.2, 1.0)(rng);
    cfg.validate();
    const auto s = random_stream(1000 + trial);
    ASSERT_EQ(as_peaks(detect_all(s, cfg)), oracle::offline_detect(s, cfg)) << "trial " << trial;
  }
}

TEST(BlinkDetector, OffsetInvariant) {
  const auto s = random_stream(21);
  auto shifted = s;
  for (auto& x : shifted) x.raw += 10000.0;
  for (const auto& cfg : {DetectorConfig{}, fixed(20.0)}) {
    const auto a = detect_all(s, cfg);
    const auto b = detect_all(shifted, cfg);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].peak_t_ms, b[i].peak_t_ms);
      // the filter is linear, so v changes only by rounding
      EXPECT_NEAR(a[i].peak_v, b[i].peak_v, 1e-9);
    }
  }
}

TEST(BlinkDetector, DetectionsAreReleasedWithinWindowPlusHop) {
  const auto s = random_stream(5);
  BlinkDetector d(DetectorConfig{});
  for (const auto& x : s) {
    for (const auto& b : d.process(x)) {
      EXPECT_EQ(b.emitted_t_ms, x.t_ms);
      EXPECT_LE(b.emitted_t_ms - b.peak_t_ms, 1500);
    }
  }
}

TEST(BlinkDetector, FixedThetaChangeAppliesToLaterSamples) {
  auto spec = ScenarioSpec::for_preset(Preset::intentional).without_noise();
  const auto sc = generate_scenario(spec, TankParams{});
  BlinkDetector d(fixed(1000.0));
  std::vector<DetectedBlink> got;
  const int64_t switch_at = 240000;
  for (const auto& s : sc.samples) {
    if (s.t_ms == switch_at) d.set_fixed_theta(50.0);
    for (auto& x : d.process(s)) got.push_back(x);
  }
  for (auto& x : d.finish()) got.push_back(x);
  std::size_t after = 0;
  for (const auto& t : sc.truth) after += t.onset_ms > switch_at;
  EXPECT_EQ(got.size(), after);
  for (const auto& x : got) {
    EXPECT_GT(x.peak_t_ms, switch_at);
    EXPECT_EQ(x.theta_at_detect, 50.0);
  }
  EXPECT_EQ(d.current_theta(), 50.0);
}

TEST(BlinkDetector, ManualThetaRejectedInAdaptiveMode) {
  BlinkDetector a(DetectorConfig{});
  EXPECT_THROW(a.set_fixed_theta(10.0), ConfigError);
  BlinkDetector f(fixed(5.0));
  EXPECT_THROW(f.set_fixed_theta(0.0), ConfigError);
  EXPECT_THROW(f.set_fixed_theta(-1.0), ConfigError);
  EXPECT_EQ(f.current_theta(), 5.0);
}

TEST(BlinkDetector, AdaptiveThetaStaysPositive) {
  const auto s = random_stream(8);
  BlinkDetector d(DetectorConfig{});
  for (const auto& x : s) {
    d.process(x);
    ASSERT_GE(d.current_theta(), 1.0);
  }
}

TEST(BlinkDetector, GapResetsFilterState) {
  BlinkDetector d(fixed(5.0));
  d.process({0, 100.0});
  d.process({17, 100.0});
  EXPECT_TRUE(d.last_variation().has_value());
  d.process({5000, 900.0});  // far past the gap tolerance
  EXPECT_FALSE(d.last_variation().has_value());
  EXPECT_EQ(d.last_filtered(), 900.0);
}

TEST(BlinkDetector, BlinkInFinalSecondIsReported) {
  auto spec = ScenarioSpec::for_preset(Preset::intentional).without_noise();
  spec.duration_ms = 10000;
  spec.onsets_ms = {2000, 9450};
  const auto sc = generate_scenario(spec, TankParams{});
  const auto d = detect_all(sc.samples, fixed(50.0));
  ASSERT_EQ(d.size(), 2u);
  EXPECT_NEAR(static_cast<double>(d[1].peak_t_ms), 9500.0, 50.0);
  EXPECT_EQ(d[1].emitted_t_ms, sc.samples.back().t_ms);
}
