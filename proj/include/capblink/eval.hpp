#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "capblink/stream_io.hpp"

namespace capblink {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MatchResult {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  // (truth onset_ms, detected peak_t_ms)
  std::vector<std::pair<int64_t, int64_t>> pairs;
};

// Point a detection is compared against: the middle of the closing phase when
// the label carries phase fields, the onset otherwise.
double truth_reference_ms(const LabelRecord& truth);

// Greedy chronological one-to-one matching. Each detection, in time order,
// takes the earliest unmatched truth whose reference lies within tol_ms.
// Because every detection's admissible truths form a contiguous run that moves
// forward with time, this attains the maximum matching cardinality.
// Throws EvalError if either list is not time-sorted.
MatchResult match_events(std::span<const LabelRecord> truth, std::span<const EventRecord> detections,
                         int64_t tol_ms);

struct PrecisionRecall {
  double precision = 1.0;
  double recall = 1.0;
};

// precision = tp / (tp + fp), recall = tp / (tp + fn). With no detections,
// precision is 1 when there was nothing to find and 0 otherwise; with no truth
// events, recall is 1.
PrecisionRecall precision_recall(const MatchResult& m);

struct ReportEntry {
  std::string subject;
  std::string scenario;
  PrecisionRecall score;
  std::optional<MatchResult> counts;
};

ReportEntry make_entry(std::string subject, std::string scenario, MatchResult m);

// Scenario rows by subject columns, each cell "precision/recall" in percent,
// with an averaged column per scenario and an averaged row per subject.
struct EvalReport {
  std::vector<std::string> subjects;   // first-seen order
  std::vector<std::string> scenarios;  // first-seen order
  std::map<std::pair<std::string, std::string>, ReportEntry> cells;  // (subject, scenario)
  std::map<std::string, PrecisionRecall> scenario_average;  // over subjects
  std::map<std::string, PrecisionRecall> subject_average;   // over scenarios
  PrecisionRecall overall;                                   // over all filled cells

  std::string render_table() const;
  // capstream-style machine-readable form (kind=report).
  void write(std::ostream& out) const;
};

// Throws EvalError for an empty input or a repeated (subject, scenario) cell.
EvalReport build_report(std::span<const ReportEntry> entries);

// Integer percent as printed in reports.
int percent(double fraction);

}  // namespace capblink
