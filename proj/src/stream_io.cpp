#include "capblink/stream_io.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

namespace capblink {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  for (;;) {
    const auto tab = line.find('\t');
    out.push_back(line.substr(0, tab));
    if (tab == std::string_view::npos) break;
    line = line.substr(tab + 1);
  }
  return out;
}

template <class T>
T parse_field(std::string_view text, const char* what) {
  T value{};
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), last, value);
  if (text.empty() || ec != std::errc() || ptr != last) {
    throw std::invalid_argument(std::string("bad ") + what + " '" + std::string(text) + "'");
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw std::invalid_argument(std::string("non-finite ") + what);
  }
  return value;
}

void expect_fields(const std::vector<std::string_view>& f, std::size_t n) {
  if (f.size() != n) {
    throw std::invalid_argument("expected " + std::to_string(n) + " fields, found " + std::to_string(f.size()));
  }
}

}  // namespace

std::string_view to_string(StreamKind k) {
  switch (k) {
    case StreamKind::samples: return "samples";
    case StreamKind::labels: return "labels";
    case StreamKind::events: return "events";
    case StreamKind::report: return "report";
  }
  return "?";
}

std::string_view to_string(LabelSource s) { return s == LabelSource::human ? "human" : "simulator"; }

FormatError::FormatError(const std::string& source, std::size_t line, const std::string& what)
    : std::runtime_error(source + ": line " + std::to_string(line) + ": " + what), line_(line) {}

std::string format_real(double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

std::string format_header(const StreamHeader& h) {
  return "capstream v1 rate_hz=" + format_real(h.rate_hz) + " kind=" + std::string(to_string(h.kind));
}

std::string RecordTraits<Sample>::format(const Sample& r) {
  return std::to_string(r.t_ms) + '\t' + format_real(r.raw);
}

Sample RecordTraits<Sample>::parse(std::string_view line) {
  const auto f = split_tabs(line);
  expect_fields(f, 2);
  return {parse_field<int64_t>(f[0], "t_ms"), parse_field<double>(f[1], "raw")};
}

std::string RecordTraits<LabelRecord>::format(const LabelRecord& r) {
  std::string s = std::to_string(r.onset_ms) + '\t' + std::string(to_string(r.source));
  if (r.close_end_ms && r.open_end_ms) {
    s += '\t' + std::to_string(*r.close_end_ms) + '\t' + std::to_string(*r.open_end_ms);
  }
  return s;
}

LabelRecord RecordTraits<LabelRecord>::parse(std::string_view line) {
  const auto f = split_tabs(line);
  if (f.size() != 2 && f.size() != 4) {
    throw std::invalid_argument("expected 2 or 4 fields, found " + std::to_string(f.size()));
  }
  LabelRecord r;
  r.onset_ms = parse_field<int64_t>(f[0], "onset_ms");
  if (f[1] == "simulator") r.source = LabelSource::simulator;
  else if (f[1] == "human") r.source = LabelSource::human;
  else throw std::invalid_argument("bad source '" + std::string(f[1]) + "'");
  if (f.size() == 4) {
    r.close_end_ms = parse_field<int64_t>(f[2], "close_end_ms");
    r.open_end_ms = parse_field<int64_t>(f[3], "open_end_ms");
  }
  return r;
}

std::string RecordTraits<EventRecord>::format(const EventRecord& r) {
  return std::to_string(r.peak_t_ms) + '\t' + format_real(r.peak_v) + '\t' + format_real(r.theta);
}

EventRecord RecordTraits<EventRecord>::parse(std::string_view line) {
  const auto f = split_tabs(line);
  expect_fields(f, 3);
  return {parse_field<int64_t>(f[0], "peak_t_ms"), parse_field<double>(f[1], "peak_v"),
          parse_field<double>(f[2], "theta")};
}

// ---------------------------------------------------------------------------

template <class Record>
StreamWriter<Record>::StreamWriter(std::ostream& out, double rate_hz) : out_(&out), name_("<stream>") {
  *out_ << format_header({rate_hz, RecordTraits<Record>::kind}) << '\n';
}

template <class Record>
StreamWriter<Record>::StreamWriter(const std::string& path, double rate_hz)
    : owned_(std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc)),
      out_(owned_.get()),
      name_(path) {
  if (!*out_) throw FormatError(path, 0, "cannot open for writing");
  *out_ << format_header({rate_hz, RecordTraits<Record>::kind}) << '\n';
}

template <class Record>
void StreamWriter<Record>::write(const Record& r) {
  if (last_ && !RecordTraits<Record>::in_order(*last_, r)) {
    throw FormatError(name_, count_ + 2,
                      "record out of order at t_ms=" + std::to_string(RecordTraits<Record>::stamp(r)));
  }
  *out_ << RecordTraits<Record>::format(r) << '\n';
  if (!*out_) throw FormatError(name_, count_ + 2, "write failed");
  last_ = r;
  ++count_;
}

template <class Record>
void StreamWriter<Record>::annotate(std::string_view text) {
  *out_ << '#' << text << '\n';
}

template <class Record>
void StreamWriter<Record>::flush() {
  out_->flush();
  if (!*out_) throw FormatError(name_, count_ + 1, "write failed");
}

// ---------------------------------------------------------------------------

template <class Record>
StreamReader<Record>::StreamReader(std::istream& in, std::string source_name)
    : in_(&in), name_(std::move(source_name)) {
  read_header();
}

template <class Record>
StreamReader<Record>::StreamReader(const std::string& path)
    : owned_(std::make_unique<std::ifstream>(path, std::ios::binary)), in_(owned_.get()), name_(path) {
  if (!*in_) throw FormatError(path, 0, "cannot open for reading");
  read_header();
}

template <class Record>
void StreamReader<Record>::fail(std::size_t line, const std::string& what) {
  error_.emplace(name_, line, what);
  throw *error_;
}

template <class Record>
void StreamReader<Record>::read_header() {
  std::string line;
  line_ = 1;
  if (!std::getline(*in_, line)) fail(1, "missing header");
  if (in_->eof()) fail(1, "truncated header (missing newline)");
  std::istringstream ss(line);
  std::string magic, version, rate, kind;
  ss >> magic >> version >> rate >> kind;
  std::string extra;
  if (magic != "capstream" || (ss >> extra)) fail(1, "not a capstream header: '" + line + "'");
  if (version != "v1") fail(1, "unsupported format version '" + version + "' (expected v1)");
  if (rate.rfind("rate_hz=", 0) != 0) fail(1, "header lacks rate_hz");
  try {
    header_.rate_hz = parse_field<double>(std::string_view(rate).substr(8), "rate_hz");
  } catch (const std::invalid_argument& e) {
    fail(1, e.what());
  }
  if (!(header_.rate_hz > 0.0)) fail(1, "rate_hz must be > 0");
  const std::string expected = "kind=" + std::string(to_string(RecordTraits<Record>::kind));
  if (kind != expected) fail(1, "expected " + expected + ", found '" + kind + "'");
  header_.kind = RecordTraits<Record>::kind;
}

template <class Record>
std::optional<Record> StreamReader<Record>::next() {
  if (error_) throw *error_;
  std::string line;
  for (;;) {
    if (!std::getline(*in_, line)) {
      if (in_->bad()) fail(line_ + 1, "read error");
      return std::nullopt;
    }
    ++line_;
    if (in_->eof()) fail(line_, "truncated record (missing newline)");
    if (!line.empty() && line.front() == '#') continue;
    break;
  }
  Record r;
  try {
    r = RecordTraits<Record>::parse(line);
  } catch (const std::invalid_argument& e) {
    fail(line_, e.what());
  }
  if (last_ && !RecordTraits<Record>::in_order(*last_, r)) {
    fail(line_, "timestamp " + std::to_string(RecordTraits<Record>::stamp(r)) + " out of order (previous " +
                    std::to_string(RecordTraits<Record>::stamp(*last_)) + ")");
  }
  last_ = r;
  return r;
}

template class StreamWriter<Sample>;
template class StreamWriter<LabelRecord>;
template class StreamWriter<EventRecord>;
template class StreamReader<Sample>;
template class StreamReader<LabelRecord>;
template class StreamReader<EventRecord>;

// ---------------------------------------------------------------------------

ReplaySpeed ReplaySpeed::factor(double f) {
  if (!(f > 0.0) || !std::isfinite(f)) throw std::invalid_argument("replay speed must be > 0 or 'max'");
  return ReplaySpeed(f);
}

ReplaySpeed ReplaySpeed::parse(std::string_view text) {
  if (text == "max") return unpaced();
  double f = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), f);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    throw std::invalid_argument("replay speed must be > 0 or 'max', got '" + std::string(text) + "'");
  }
  return factor(f);
}

SampleSource source_from(std::shared_ptr<StreamReader<Sample>> reader) {
  return [reader = std::move(reader)]() { return reader->next(); };
}

SampleSource source_from(std::vector<Sample> samples) {
  return [samples = std::move(samples), i = std::size_t{0}]() mutable -> std::optional<Sample> {
    if (i >= samples.size()) return std::nullopt;
    return samples[i++];
  };
}

Replayer::Replayer(SampleSource source, ReplaySpeed speed) : source_(std::move(source)), speed_(speed) {}

std::optional<TimedSample> Replayer::next() {
  auto s = source_();
  if (!s) return std::nullopt;
  const auto now = std::chrono::steady_clock::now();
  if (!t0_ms_) {
    t0_ms_ = s->t_ms;
    start_ = now;
  }
  if (speed_.is_unpaced()) return TimedSample{*s, now};
  const double offset_ms = static_cast<double>(s->t_ms - *t0_ms_) / speed_.value();
  const auto due = start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                std::chrono::duration<double, std::milli>(offset_ms));
  return TimedSample{*s, due};
}

std::size_t replay(SampleSource source, ReplaySpeed speed, const std::function<void(const Sample&)>& sink) {
  Replayer r(std::move(source), speed);
  std::size_t n = 0;
  while (auto ts = r.next()) {
    if (!speed.is_unpaced()) std::this_thread::sleep_until(ts->due);
    sink(ts->sample);
    ++n;
  }
  return n;
}

}  // namespace capblink
