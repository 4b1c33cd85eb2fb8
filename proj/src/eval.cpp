#include "capblink/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace capblink {

double truth_reference_ms(const LabelRecord& truth) {
  if (truth.close_end_ms) {
    return static_cast<double>(truth.onset_ms) + 0.5 * static_cast<double>(*truth.close_end_ms - truth.onset_ms);
  }
  return static_cast<double>(truth.onset_ms);
}

MatchResult match_events(std::span<const LabelRecord> truth, std::span<const EventRecord> detections,
                         int64_t tol_ms) {
  if (tol_ms < 0) throw EvalError("tolerance must be >= 0");
  for (std::size_t i = 1; i < truth.size(); ++i) {
    if (truth[i].onset_ms < truth[i - 1].onset_ms) {
      throw EvalError("truth events not sorted at index " + std::to_string(i));
    }
  }
  for (std::size_t i = 1; i < detections.size(); ++i) {
    if (detections[i].peak_t_ms < detections[i - 1].peak_t_ms) {
      throw EvalError("detections not sorted at index " + std::to_string(i));
    }
  }

  std::vector<double> ref(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) ref[i] = truth_reference_ms(truth[i]);
  // Phase-bearing and bare labels may mix; the greedy scan needs references in
  // order, so walk an index sorted by reference.
  std::vector<std::size_t> order(truth.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ref[a] < ref[b]; });

  MatchResult m;
  std::vector<bool> used(truth.size(), false);
  const auto tol = static_cast<double>(tol_ms);
  std::size_t lo = 0;  // first truth (in reference order) that can still match
  for (const auto& d : detections) {
    const auto t = static_cast<double>(d.peak_t_ms);
    while (lo < order.size() && (used[order[lo]] || ref[order[lo]] < t - tol)) ++lo;
    for (std::size_t k = lo; k < order.size() && ref[order[k]] <= t + tol; ++k) {
      if (!used[order[k]]) {
        used[order[k]] = true;
        m.pairs.emplace_back(truth[order[k]].onset_ms, d.peak_t_ms);
        break;
      }
    }
  }
  m.tp = m.pairs.size();
  m.fp = detections.size() - m.tp;
  m.fn = truth.size() - m.tp;
  return m;
}

PrecisionRecall precision_recall(const MatchResult& m) {
  PrecisionRecall pr;
  if (m.tp + m.fp > 0) {
    pr.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  } else {
    pr.precision = m.fn == 0 ? 1.0 : 0.0;
  }
  pr.recall = (m.tp + m.fn > 0) ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 1.0;
  return pr;
}

ReportEntry make_entry(std::string subject, std::string scenario, MatchResult m) {
  const auto pr = precision_recall(m);
  return {std::move(subject), std::move(scenario), pr, std::move(m)};
}

int percent(double fraction) { return static_cast<int>(std::lround(fraction * 100.0)); }

namespace {

PrecisionRecall mean_of(const std::vector<PrecisionRecall>& v) {
  PrecisionRecall out{0.0, 0.0};
  for (const auto& pr : v) {
    out.precision += pr.precision;
    out.recall += pr.recall;
  }
  out.precision /= static_cast<double>(v.size());
  out.recall /= static_cast<double>(v.size());
  return out;
}

std::string cell_text(const PrecisionRecall& pr) {
  return std::to_string(percent(pr.precision)) + "/" + std::to_string(percent(pr.recall));
}

}  // namespace

EvalReport build_report(std::span<const ReportEntry> entries) {
  if (entries.empty()) throw EvalError("cannot build a report from zero results");
  EvalReport r;
  for (const auto& e : entries) {
    const auto key = std::make_pair(e.subject, e.scenario);
    if (r.cells.count(key)) throw EvalError("duplicate cell (" + e.subject + ", " + e.scenario + ")");
    if (std::find(r.subjects.begin(), r.subjects.end(), e.subject) == r.subjects.end()) {
      r.subjects.push_back(e.subject);
    }
    if (std::find(r.scenarios.begin(), r.scenarios.end(), e.scenario) == r.scenarios.end()) {
      r.scenarios.push_back(e.scenario);
    }
    r.cells.emplace(key, e);
  }

  std::vector<PrecisionRecall> all;
  for (const auto& sc : r.scenarios) {
    std::vector<PrecisionRecall> row;
    for (const auto& sub : r.subjects) {
      if (auto it = r.cells.find({sub, sc}); it != r.cells.end()) row.push_back(it->second.score);
    }
    r.scenario_average[sc] = mean_of(row);
  }
  for (const auto& sub : r.subjects) {
    std::vector<PrecisionRecall> col;
    for (const auto& sc : r.scenarios) {
      if (auto it = r.cells.find({sub, sc}); it != r.cells.end()) col.push_back(it->second.score);
    }
    r.subject_average[sub] = mean_of(col);
  }
  for (const auto& [key, e] : r.cells) all.push_back(e.score);
  r.overall = mean_of(all);
  return r;
}

std::string EvalReport::render_table() const {
  std::size_t first_width = std::string("Averaged").size();
  for (const auto& sc : scenarios) first_width = std::max(first_width, sc.size());
  std::size_t col_width = std::string("Averaged").size();
  for (const auto& sub : subjects) col_width = std::max(col_width, sub.size());
  col_width = std::max<std::size_t>(col_width, 7);

  std::ostringstream os;
  auto cell = [&](const std::string& text) { os << " | " << std::setw(static_cast<int>(col_width)) << text; };
  os << std::left << std::setw(static_cast<int>(first_width)) << "" << std::right;
  for (const auto& sub : subjects) cell(sub);
  cell("Averaged");
  os << '\n';
  for (const auto& sc : scenarios) {
    os << std::left << std::setw(static_cast<int>(first_width)) << sc << std::right;
    for (const auto& sub : subjects) {
      auto it = cells.find({sub, sc});
      cell(it == cells.end() ? "-" : cell_text(it->second.score));
    }
    cell(cell_text(scenario_average.at(sc)));
    os << '\n';
  }
  os << std::left << std::setw(static_cast<int>(first_width)) << "Averaged" << std::right;
  for (const auto& sub : subjects) cell(cell_text(subject_average.at(sub)));
  cell(cell_text(overall));
  os << '\n';
  return os.str();
}

void EvalReport::write(std::ostream& out) const {
  out << "capstream v1 rate_hz=0 kind=report\n";
  auto line = [&](std::string_view kind, const std::string& sub, const std::string& sc,
                  const std::optional<MatchResult>& m, const PrecisionRecall& pr) {
    out << kind << '\t' << sub << '\t' << sc << '\t';
    if (m) {
      out << m->tp << '\t' << m->fp << '\t' << m->fn;
    } else {
      out << "-\t-\t-";
    }
    out << '\t' << format_real(pr.precision) << '\t' << format_real(pr.recall) << '\n';
  };
  for (const auto& sc : scenarios) {
    for (const auto& sub : subjects) {
      if (auto it = cells.find({sub, sc}); it != cells.end()) line("cell", sub, sc, it->second.counts, it->second.score);
    }
  }
  for (const auto& sc : scenarios) line("scenario_average", "*", sc, std::nullopt, scenario_average.at(sc));
  for (const auto& sub : subjects) line("subject_average", sub, "*", std::nullopt, subject_average.at(sub));
  line("overall", "*", "*", std::nullopt, overall);
}

}  // namespace capblink
