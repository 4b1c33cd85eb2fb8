#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "capblink/signal.hpp"

namespace capblink {

// capstream v1: a header line
//
//   capstream v1 rate_hz=<n> kind=<samples|labels|events|report>
//
// followed by one TAB-separated record per line, every line '\n'-terminated.
// Lines starting with '#' are annotations (e.g. threshold changes logged by a
// live session) and carry no record.
//
//   samples  t_ms  raw
//   labels   onset_ms  source  [close_end_ms  open_end_ms]
//   events   peak_t_ms  peak_v  theta
//
// Reals are written in shortest round-trip form, so write -> read is exact.

enum class StreamKind { samples, labels, events, report };

std::string_view to_string(StreamKind k);

struct StreamHeader {
  double rate_hz = 60.0;
  StreamKind kind = StreamKind::samples;
};

enum class LabelSource { simulator, human };

std::string_view to_string(LabelSource s);

struct LabelRecord {
  int64_t onset_ms = 0;
  LabelSource source = LabelSource::simulator;
  std::optional<int64_t> close_end_ms;
  std::optional<int64_t> open_end_ms;

  friend bool operator==(const LabelRecord&, const LabelRecord&) = default;
};

struct EventRecord {
  int64_t peak_t_ms = 0;
  double peak_v = 0.0;
  double theta = 0.0;

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& source, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Formatting helpers shared with the report writer.
std::string format_real(double v);

template <class Record>
struct RecordTraits;

template <>
struct RecordTraits<Sample> {
  static constexpr StreamKind kind = StreamKind::samples;
  static std::string format(const Sample& r);
  static Sample parse(std::string_view line);  // throws std::invalid_argument
  static bool in_order(const Sample& prev, const Sample& next) { return next.t_ms > prev.t_ms; }
  static int64_t stamp(const Sample& r) { return r.t_ms; }
};

template <>
struct RecordTraits<LabelRecord> {
  static constexpr StreamKind kind = StreamKind::labels;
  static std::string format(const LabelRecord& r);
  static LabelRecord parse(std::string_view line);
  static bool in_order(const LabelRecord& prev, const LabelRecord& next) {
    return next.onset_ms >= prev.onset_ms;
  }
  static int64_t stamp(const LabelRecord& r) { return r.onset_ms; }
};

template <>
struct RecordTraits<EventRecord> {
  static constexpr StreamKind kind = StreamKind::events;
  static std::string format(const EventRecord& r);
  static EventRecord parse(std::string_view line);
  static bool in_order(const EventRecord& prev, const EventRecord& next) {
    return next.peak_t_ms >= prev.peak_t_ms;
  }
  static int64_t stamp(const EventRecord& r) { return r.peak_t_ms; }
};

std::string format_header(const StreamHeader& h);

// Writes a header on construction and validates record order. Owns the file
// when constructed from a path.
template <class Record>
class StreamWriter {
 public:
  StreamWriter(std::ostream& out, double rate_hz);
  StreamWriter(const std::string& path, double rate_hz);

  void write(const Record& r);
  void annotate(std::string_view text);
  void flush();
  std::size_t count() const { return count_; }

 private:
  std::unique_ptr<std::ostream> owned_;
  std::ostream* out_;
  std::string name_;
  std::optional<Record> last_;
  std::size_t count_ = 0;
};

// Pulls records one at a time. After any error the reader is failed and every
// later next() rethrows the same error.
template <class Record>
class StreamReader {
 public:
  StreamReader(std::istream& in, std::string source_name = "<stream>");
  explicit StreamReader(const std::string& path);

  const StreamHeader& header() const { return header_; }
  std::optional<Record> next();
  std::size_t line() const { return line_; }

 private:
  void read_header();
  [[noreturn]] void fail(std::size_t line, const std::string& what);

  std::unique_ptr<std::istream> owned_;
  std::istream* in_;
  std::string name_;
  StreamHeader header_;
  std::size_t line_ = 0;
  std::optional<Record> last_;
  std::optional<FormatError> error_;
};

template <class Record>
std::size_t write_stream(std::ostream& out, double rate_hz, std::span<const Record> records) {
  StreamWriter<Record> w(out, rate_hz);
  for (const auto& r : records) w.write(r);
  w.flush();
  return w.count();
}

template <class Record>
std::size_t write_stream(const std::string& path, double rate_hz, std::span<const Record> records) {
  StreamWriter<Record> w(path, rate_hz);
  for (const auto& r : records) w.write(r);
  w.flush();
  return w.count();
}

template <class Record>
struct StreamContents {
  StreamHeader header;
  std::vector<Record> records;
};

template <class Record>
StreamContents<Record> read_stream(std::istream& in, std::string source_name = "<stream>") {
  StreamReader<Record> r(in, std::move(source_name));
  StreamContents<Record> out{r.header(), {}};
  while (auto rec = r.next()) out.records.push_back(*rec);
  return out;
}

template <class Record>
StreamContents<Record> read_stream(const std::string& path) {
  StreamReader<Record> r(path);
  StreamContents<Record> out{r.header(), {}};
  while (auto rec = r.next()) out.records.push_back(*rec);
  return out;
}

extern template class StreamWriter<Sample>;
extern template class StreamWriter<LabelRecord>;
extern template class StreamWriter<EventRecord>;
extern template class StreamReader<Sample>;
extern template class StreamReader<LabelRecord>;
extern template class StreamReader<EventRecord>;

// ---------------------------------------------------------------------------
// Replay

// Pacing factor for replay; unpaced() delivers as fast as the consumer takes.
class ReplaySpeed {
 public:
  static ReplaySpeed unpaced() { return ReplaySpeed(0.0); }
  static ReplaySpeed factor(double f);
  // "max" or a positive number.
  static ReplaySpeed parse(std::string_view text);

  bool is_unpaced() const { return factor_ == 0.0; }
  double value() const { return factor_; }

 private:
  explicit ReplaySpeed(double f) : factor_(f) {}
  double factor_;
};

using SampleSource = std::function<std::optional<Sample>()>;

SampleSource source_from(std::shared_ptr<StreamReader<Sample>> reader);
SampleSource source_from(std::vector<Sample> samples);

struct TimedSample {
  Sample sample;
  std::chrono::steady_clock::time_point due;
};

// Maps stream time onto the wall clock: a sample is due at
// start + (t_ms - first t_ms) / speed. The clock starts on the first next().
class Replayer {
 public:
  Replayer(SampleSource source, ReplaySpeed speed);

  // Next sample with its due time; does not sleep.
  std::optional<TimedSample> next();

 private:
  SampleSource source_;
  ReplaySpeed speed_;
  std::optional<int64_t> t0_ms_;
  std::chrono::steady_clock::time_point start_;
};

// Sleeps until each sample is due and hands it to `sink` in source order.
// Returns the number of samples delivered.
std::size_t replay(SampleSource source, ReplaySpeed speed, const std::function<void(const Sample&)>& sink);

}  // namespace capblink
