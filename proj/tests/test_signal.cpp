#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "capblink/signal.hpp"

using namespace capblink;

namespace {

std::vector<int64_t> times_60hz(std::size_t n, int64_t offset = 0) {
  std::vector<int64_t> t;
  for (std::size_t i = 0; i < n; ++i) t.push_back(offset + std::llround(static_cast<double>(i) * 1000.0 / 60.0));
  return t;
}

}  // namespace

TEST(LowPass, ConstantStreamIsPreserved) {
  LowPassFilter f(0.5);
  for (int i = 0; i < 20; ++i) EXPECT_DOUBLE_EQ(f.step(10.0), 10.0);
}

TEST(LowPass, AlphaOneIsIdentity) {
  LowPassFilter f(1.0);
  std::mt19937 rng(3);
  std::normal_distribution<double> d(0.0, 100.0);
  for (int i = 0; i < 100; ++i) {
    const double x = d(rng);
    EXPECT_EQ(f.step(x), x);
  }
}

TEST(LowPass, HandEvaluatedRecurrence) {
  LowPassFilter f(0.5);
  EXPECT_DOUBLE_EQ(f.step(0.0), 0.0);
  EXPECT_DOUBLE_EQ(f.step(8.0), 4.0);
  EXPECT_DOUBLE_EQ(f.step(0.0), 2.0);
}

TEST(LowPass, StepResponseMatchesClosedForm) {
  // From rest at 0, a unit step gives 1 - (1 - alpha)^n after n steps.
  const double alpha = 0.57;
  LowPassFilter f(alpha);
  f.step(0.0);
  for (int n = 1; n <= 30; ++n) EXPECT_NEAR(f.step(1.0), 1.0 - std::pow(1.0 - alpha, n), 1e-12);
}

TEST(LowPass, RejectsBadAlphaAndNonFiniteInput) {
  EXPECT_THROW(LowPassFilter(0.0), SignalError);
  EXPECT_THROW(LowPassFilter(1.5), SignalError);
  EXPECT_THROW(LowPassFilter(std::nan("")), SignalError);
  LowPassFilter f(0.5);
  f.step(1.0);
  EXPECT_THROW(f.step(std::numeric_limits<double>::infinity()), SignalError);
  EXPECT_THROW(f.step(std::nan("")), SignalError);
  // the failed input left no trace
  EXPECT_DOUBLE_EQ(f.step(1.0), 1.0);
}

TEST(LowPass, ResetPassesNextSampleThrough) {
  LowPassFilter f(0.3);
  f.step(100.0);
  f.reset();
  EXPECT_FALSE(f.last().has_value());
  EXPECT_DOUBLE_EQ(f.step(-7.0), -7.0);
}

TEST(Differencer, ConstantStreamGivesZero) {
  Differencer d;
  EXPECT_FALSE(d.step(5.0).has_value());
  EXPECT_EQ(d.step(5.0), 0.0);
  EXPECT_EQ(d.step(5.0), 0.0);
}

TEST(Differencer, DirectSubtraction) {
  Differencer d;
  EXPECT_FALSE(d.step(0.0).has_value());
  EXPECT_EQ(d.step(3.0), 3.0);
  EXPECT_EQ(d.step(1.0), -2.0);
}

TEST(Differencer, OffsetInvariant) {
  for (double c : {-1e6, -3.5, 0.0, 42.0, 1e7}) {
    Differencer d;
    EXPECT_FALSE(d.step(c + 0).has_value());
    EXPECT_EQ(d.step(c + 3), 3.0);
    EXPECT_EQ(d.step(c + 1), -2.0);
  }
}

TEST(Differencer, ResetYieldsNone) {
  Differencer d;
  d.step(1.0);
  d.step(2.0);
  d.reset();
  EXPECT_FALSE(d.step(10.0).has_value());
  EXPECT_EQ(d.step(11.0), 1.0);
}

TEST(WindowBuffer, NinetySamplesGiveTwoWindows) {
  WindowBuffer buf(1000, 500);
  std::vector<Window> got;
  for (auto t : times_60hz(90)) {
    for (auto& w : buf.push({t, 0.0, 1.0, 0})) got.push_back(std::move(w));
  }
  for (auto& w : buf.flush(1000.0 / 60.0)) got.push_back(std::move(w));
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[0].start_ms, 0);
  EXPECT_EQ(got[0].end_ms, 1000);
  EXPECT_EQ(got[1].start_ms, 500);
  EXPECT_EQ(got[1].end_ms, 1500);
  // [0, 1000) at 60 Hz holds samples 0..59
  EXPECT_EQ(got[0].values.size(), 60u);
  EXPECT_EQ(got[0].values.back().t_ms, 983);
}

TEST(WindowBuffer, FiftyNineSamplesGiveNone) {
  WindowBuffer buf(1000, 500);
  std::size_t n = 0;
  for (auto t : times_60hz(59)) n += buf.push({t, 0.0, 1.0, 0}).size();
  n += buf.flush(1000.0 / 60.0).size();
  EXPECT_EQ(n, 0u);
}

TEST(WindowBuffer, TailHoldsWhatTheLastOpenWindowGot) {
  WindowBuffer buf(1000, 500);
  for (auto t : times_60hz(90)) buf.push({t, 0.0, 1.0, 0});
  buf.flush(1000.0 / 60.0);
  const auto w = buf.tail();
  ASSERT_TRUE(w.has_value());
  EXPECT_EQ(w->start_ms, 1000);
  EXPECT_EQ(w->end_ms, 2000);
  EXPECT_EQ(w->values.size(), 30u);
  EXPECT_EQ(w->values.back().t_ms, 1483);
  EXPECT_FALSE(WindowBuffer(1000, 500).tail().has_value());
}

TEST(WindowBuffer, EightMinutesGive959Windows) {
  WindowBuffer buf(1000, 500);
  std::size_t n = 0;
  for (auto t : times_60hz(28800)) n += buf.push({t, 0.0, 1.0, 0}).size();
  n += buf.flush(1000.0 / 60.0).size();
  EXPECT_EQ(n, static_cast<std::size_t>((480000 - 1000) / 500 + 1));
}

TEST(WindowBuffer, AlignedToFirstTimestamp) {
  WindowBuffer buf(1000, 500);
  std::vector<Window> got;
  for (auto t : times_60hz(90, 12345)) {
    for (auto& w : buf.push({t, 0.0, 1.0, 0})) got.push_back(std::move(w));
  }
  ASSERT_FALSE(got.empty());
  EXPECT_EQ(got[0].start_ms, 12345);
  EXPECT_EQ(got[0].end_ms, 13345);
}

TEST(WindowBuffer, WindowEmittedWhenLaterSampleArrives) {
  WindowBuffer buf(1000, 500);
  EXPECT_TRUE(buf.push({0, 0.0, 1.0, 0}).empty());
  EXPECT_TRUE(buf.push({999, 0.0, 1.0, 0}).empty());
  const auto ws = buf.push({1000, 0.0, 1.0, 0});
  ASSERT_EQ(ws.size(), 1u);
  EXPECT_EQ(ws[0].values.size(), 2u);
}

TEST(WindowBuffer, EveryPointLandsInItsWindows) {
  // Membership property: a point at t belongs to exactly the emitted windows
  // with start <= t < end.
  WindowBuffer buf(1000, 500);
  std::vector<Window> got;
  const auto ts = times_60hz(600);
  for (auto t : ts) {
    for (auto& w : buf.push({t, static_cast<double>(t), 1.0, 0})) got.push_back(std::move(w));
  }
  for (auto& w : buf.flush(1000.0 / 60.0)) got.push_back(std::move(w));
  for (const auto& w : got) {
    std::size_t expected = 0;
    for (auto t : ts) expected += (t >= w.start_ms && t < w.end_ms);
    ASSERT_EQ(w.values.size(), expected);
    for (const auto& p : w.values) {
      EXPECT_GE(p.t_ms, w.start_ms);
      EXPECT_LT(p.t_ms, w.end_ms);
      EXPECT_EQ(p.v, static_cast<double>(p.t_ms));
    }
  }
}

TEST(WindowBuffer, SkipsEmptyWindowsAcrossGap) {
  WindowBuffer buf(1000, 500);
  std::vector<Window> got;
  for (auto t : times_60hz(120)) {
    for (auto& w : buf.push({t, 0.0, 1.0, 0})) got.push_back(std::move(w));
  }
  for (auto t : times_60hz(120, 60000)) {
    for (auto& w : buf.push({t, 0.0, 1.0, 1})) got.push_back(std::move(w));
  }
  for (auto& w : buf.flush(1000.0 / 60.0)) got.push_back(std::move(w));
  for (const auto& w : got) EXPECT_FALSE(w.values.empty());
  // starts stay on the original hop grid
  for (const auto& w : got) EXPECT_EQ(w.start_ms % 500, 0);
  EXPECT_EQ(got.back().end_ms, 62000);
}

TEST(WindowBuffer, RejectsOutOfOrderPoint) {
  WindowBuffer buf(1000, 500);
  buf.push({100, 0.0, 1.0, 0});
  EXPECT_THROW(buf.push({100, 0.0, 1.0, 0}), SignalError);
  EXPECT_THROW(buf.push({50, 0.0, 1.0, 0}), SignalError);
  EXPECT_NO_THROW(buf.push({117, 0.0, 1.0, 0}));
}

TEST(WindowBuffer, RejectsBadGeometry) {
  EXPECT_THROW(WindowBuffer(0, 500), SignalError);
  EXPECT_THROW(WindowBuffer(1000, 0), SignalError);
  EXPECT_THROW(WindowBuffer(1000, 1500), SignalError);
}
