// capblink: simulate, detect, evaluate, replay and serve capacitive blink data.
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>
#include <thread>

#include "capblink/gateway.hpp"
#include "capblink/pipeline.hpp"

namespace fs = std::filesystem;
using namespace capblink;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Detector flags shared by detect, eval --grid, serve and sweep.
struct DetectorFlags {
  double theta = 0.0;
  double k = 6.0;
  int64_t window_ms = 1000;
  int64_t hop_ms = 500;
  double alpha = 0.57;
  double rate_hz = 0.0;
  CLI::Option* theta_opt = nullptr;
  CLI::Option* rate_opt = nullptr;

  void add(CLI::App* app, bool with_threshold = true, bool with_rate = true) {
    if (with_threshold) {
      theta_opt = app->add_option("--theta", theta, "fixed threshold in counts (default: adaptive)");
      app->add_option("--adaptive-k", k, "adaptive threshold multiplier on MAD")
          ->capture_default_str()
          ->excludes(theta_opt);
    }
    app->add_option("--window-ms", window_ms, "analysis window length")->capture_default_str();
    app->add_option("--hop-ms", hop_ms, "window hop")->capture_default_str();
    app->add_option("--alpha", alpha, "low-pass smoothing factor (1 disables)")->capture_default_str();
    if (with_rate) {
      rate_opt = app->add_option("--rate-hz", rate_hz, "nominal sample rate (default: from the input header)");
    }
  }

  DetectorConfig build(double header_rate) const {
    DetectorConfig cfg;
    cfg.window_len_ms = window_ms;
    cfg.hop_ms = hop_ms;
    cfg.alpha = alpha;
    cfg.rate_hz = (rate_opt && rate_opt->count()) ? rate_hz : header_rate;
    if (theta_opt && theta_opt->count()) {
      cfg.threshold = FixedThreshold{theta};
    } else {
      cfg.threshold = AdaptiveThreshold{.k = k};
    }
    cfg.validate();
    return cfg;
  }
};

std::string describe(const DetectorConfig& cfg) {
  std::string s = "mode=";
  if (const auto* f = std::get_if<FixedThreshold>(&cfg.threshold)) {
    s += "fixed theta=" + format_real(f->theta);
  } else {
    s += "adaptive k=" + format_real(std::get<AdaptiveThreshold>(cfg.threshold).k);
  }
  s += " window_ms=" + std::to_string(cfg.window_len_ms) + " hop_ms=" + std::to_string(cfg.hop_ms) +
       " alpha=" + format_real(cfg.alpha) + " rate_hz=" + format_real(cfg.rate_hz);
  return s;
}

uint64_t resolve_seed(const CLI::Option* opt, uint64_t flag_value) {
  if (opt->count()) return flag_value;
  if (const char* env = std::getenv("CAPBLINK_SEED"); env && *env) {
    uint64_t v = 0;
    const std::string_view text(env);
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
      throw UsageError("CAPBLINK_SEED must be a non-negative integer, got '" + std::string(text) + "'");
    }
    return v;
  }
  return 1;
}

// <dir>/<stem>.<ext> next to `path`.
std::string sibling(const std::string& path, const std::string& ext) {
  fs::path p(path);
  return (p.parent_path() / p.stem()).string() + ext;
}

void require_readable(const std::string& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw FormatError(path, 0, "no such file");
}

// ---------------------------------------------------------------------------
// scenario selection shared by simulate and serve

struct ScenarioFlags {
  std::string preset = "intentional";
  std::string scenario_file;
  uint64_t seed = 1;
  int64_t duration_ms = 0;
  double rate_hz = 0.0;
  double fit_scale = 0.0;
  bool clean = false;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* preset_opt = nullptr;
  CLI::Option* duration_opt = nullptr;
  CLI::Option* rate_opt = nullptr;
  CLI::Option* fit_opt = nullptr;

  void add(CLI::App* app) {
    preset_opt = app->add_option("--preset", preset,
                                 "scenario preset: intentional, reading, talking, walking, driving");
    app->add_option("--scenario", scenario_file, "scenario file (key = value lines)")->excludes(preset_opt);
    seed_opt = app->add_option("--seed", seed, "RNG seed (fallback: $CAPBLINK_SEED, then 1)");
    duration_opt = app->add_option("--duration-ms", duration_ms, "scenario length");
    rate_opt = app->add_option("--rate-hz", rate_hz, "sample rate");
    fit_opt = app->add_option("--fit-scale", fit_scale, "electrode fit factor");
    app->add_flag("--clean", clean, "no noise, drift, head moves, artifacts or partial blinks");
  }

  ScenarioDocument build() const {
    ScenarioDocument doc;
    if (!scenario_file.empty()) {
      doc = load_scenario_file(scenario_file);  // data error on a bad file
    } else {
      try {
        doc.spec = ScenarioSpec::for_preset(parse_preset(preset));
      } catch (const ScenarioError& e) {
        throw UsageError(e.what());
      }
    }
    if (seed_opt->count() || scenario_file.empty()) doc.spec.seed = resolve_seed(seed_opt, seed);
    if (duration_opt->count()) doc.spec.duration_ms = duration_ms;
    if (rate_opt->count()) doc.spec.rate_hz = rate_hz;
    if (fit_opt->count()) doc.tank.fit_scale = fit_scale;
    if (clean) doc.spec.without_noise();
    try {
      doc.spec.validate();
    } catch (const ScenarioError& e) {
      throw UsageError(e.what());
    }
    return doc;
  }
};

// ---------------------------------------------------------------------------

int cmd_simulate(const ScenarioFlags& flags, const std::string& out) {
  const auto doc = flags.build();
  const auto sc = generate_scenario(doc.spec, doc.tank);
  const auto labels = to_labels(sc.truth);
  write_stream<Sample>(out + ".samples", doc.spec.rate_hz, sc.samples);
  write_stream<LabelRecord>(out + ".labels", doc.spec.rate_hz, labels);
  std::cout << sc.truth.size() << " truth events, " << sc.samples.size() << " samples (preset "
            << to_string(doc.spec.preset) << ", seed " << doc.spec.seed << ") -> " << out << ".samples, " << out
            << ".labels\n";
  return 0;
}

int cmd_detect(const std::string& in, std::string out, const std::string& trace_path, const DetectorFlags& flags) {
  require_readable(in);
  StreamReader<Sample> reader(in);
  const auto cfg = flags.build(reader.header().rate_hz);
  if (out.empty()) out = sibling(in, ".events");

  BlinkDetector det(cfg);
  StreamWriter<EventRecord> events(out, cfg.rate_hz);
  std::unique_ptr<std::ofstream> trace;
  if (!trace_path.empty()) {
    trace = std::make_unique<std::ofstream>(trace_path);
    if (!*trace) throw FormatError(trace_path, 0, "cannot open for writing");
    *trace << "#t_ms\traw\tfiltered\tv\ttheta\n";
  }
  std::size_t samples = 0;
  auto write_all = [&](const std::vector<DetectedBlink>& ds) {
    for (const auto& d : ds) events.write(to_record(d));
  };
  while (auto s = reader.next()) {
    write_all(det.process(*s));
    ++samples;
    if (trace) {
      const auto v = det.last_variation();
      *trace << s->t_ms << '\t' << format_real(s->raw) << '\t' << format_real(*det.last_filtered()) << '\t'
             << (v ? format_real(*v) : std::string("nan")) << '\t' << format_real(det.current_theta()) << '\n';
    }
  }
  write_all(det.finish());
  events.flush();
  std::cout << "events=" << events.count() << " samples=" << samples << ' ' << describe(cfg)
            << " final_theta=" << format_real(det.current_theta()) << " -> " << out << '\n';
  return 0;
}

struct ManifestLine {
  std::string subject, scenario, events, labels;
};

std::vector<ManifestLine> read_manifest(const std::string& path) {
  require_readable(path);
  std::ifstream in(path);
  const auto base = fs::path(path).parent_path();
  std::vector<ManifestLine> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    for (;;) {
      const auto tab = line.find('\t', pos);
      f.push_back(line.substr(pos, tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (f.size() != 4) throw FormatError(path, n, "expected subject<TAB>scenario<TAB>events<TAB>labels");
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };
    out.push_back({f[0], f[1], resolve(f[2]), resolve(f[3])});
  }
  if (out.empty()) throw FormatError(path, n, "manifest lists no results");
  return out;
}

MatchResult match_files(const std::string& events_path, const std::string& labels_path, int64_t tol_ms) {
  require_readable(events_path);
  require_readable(labels_path);
  const auto events = read_stream<EventRecord>(events_path);
  const auto labels = read_stream<LabelRecord>(labels_path);
  return match_events(labels.records, events.records, tol_ms);
}

void print_report(const EvalReport& r, const std::string& out) {
  std::cout << r.render_table();
  std::cout << "overall precision=" << format_real(r.overall.precision) << " recall=" << format_real(r.overall.recall)
            << '\n';
  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError(out, 0, "cannot open for writing");
    r.write(f);
    if (!f.flush()) throw FormatError(out, 0, "write failed");
    std::cout << "report -> " << out << '\n';
  }
}

int cmd_eval(const std::vector<std::string>& files, const std::string& manifest, bool grid, int64_t tol_ms,
             std::string out, const DetectorFlags& flags) {
  const int modes = (!files.empty()) + (!manifest.empty()) + grid;
  if (modes != 1) throw UsageError("eval takes EVENTS LABELS, --manifest FILE or --grid (exactly one)");
  if (tol_ms < 0) throw UsageError("--tol-ms must be >= 0");

  if (grid) {
    const auto cfg = flags.build(60.0);
    const auto cells = benchmark_grid();
    std::cout << "grid: " << cells.size() << " cells, " << describe(cfg) << " tol_ms=" << tol_ms << '\n';
    print_report(run_grid(cells, cfg, tol_ms), out);
    return 0;
  }

  std::vector<ReportEntry> entries;
  if (!manifest.empty()) {
    for (const auto& m : read_manifest(manifest)) {
      entries.push_back(make_entry(m.subject, m.scenario, match_files(m.events, m.labels, tol_ms)));
    }
    if (out.empty()) out = sibling(manifest, ".report");
  } else {
    if (files.size() != 2) throw UsageError("eval needs both EVENTS and LABELS");
    auto m = match_files(files[0], files[1], tol_ms);
    std::cout << "tp=" << m.tp << " fp=" << m.fp << " fn=" << m.fn << " tol_ms=" << tol_ms << '\n';
    entries.push_back(make_entry("subject", fs::path(files[0]).stem().string(), std::move(m)));
    if (out.empty()) out = sibling(files[0], ".report");
  }
  print_report(build_report(entries), out);
  return 0;
}

int cmd_replay(const std::string& in, const std::string& speed_text, const std::string& out) {
  require_readable(in);
  ReplaySpeed speed = ReplaySpeed::unpaced();
  try {
    speed = ReplaySpeed::parse(speed_text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  auto reader = std::make_shared<StreamReader<Sample>>(in);
  std::unique_ptr<StreamWriter<Sample>> file;
  std::unique_ptr<StreamWriter<Sample>> console;
  StreamWriter<Sample>* writer;
  if (out.empty() || out == "-") {
    console = std::make_unique<StreamWriter<Sample>>(std::cout, reader->header().rate_hz);
    writer = console.get();
  } else {
    file = std::make_unique<StreamWriter<Sample>>(out, reader->header().rate_hz);
    writer = file.get();
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto n = replay(source_from(reader), speed, [&](const Sample& s) {
    writer->write(s);
    if (!speed.is_unpaced()) writer->flush();
  });
  writer->flush();
  const std::chrono::duration<double> took = std::chrono::steady_clock::now() - t0;
  std::cerr << "replayed " << n << " samples in " << took.count() << " s\n";
  return 0;
}

std::atomic<bool> g_interrupted{false};

extern "C" void on_signal(int) { g_interrupted = true; }

int cmd_serve(const std::string& in, const ScenarioFlags& scenario, const DetectorFlags& flags,
              const std::string& listen, const std::string& speed_text, const std::string& out,
              std::size_t wait_clients, int64_t linger_ms, std::size_t queue_limit) {
  GatewayOptions opt;
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos) throw UsageError("--listen must be HOST:PORT, got '" + listen + "'");
  opt.host = listen.substr(0, colon);
  unsigned port = 0;
  const auto port_text = std::string_view(listen).substr(colon + 1);
  auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
  if (ec != std::errc() || ptr != port_text.data() + port_text.size() || port > 65535) {
    throw UsageError("bad port in --listen '" + listen + "'");
  }
  opt.port = static_cast<uint16_t>(port);
  try {
    opt.speed = ReplaySpeed::parse(speed_text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  opt.session_prefix = out;
  opt.wait_for_clients = wait_clients;
  opt.linger = std::chrono::milliseconds(linger_ms);
  opt.client_queue_limit = queue_limit;

  SampleSource source;
  double rate = 60.0;
  if (!in.empty()) {
    require_readable(in);
    auto reader = std::make_shared<StreamReader<Sample>>(in);
    rate = reader->header().rate_hz;
    source = source_from(reader);
  } else {
    const auto doc = scenario.build();
    rate = doc.spec.rate_hz;
    source = source_from(generate_scenario(doc.spec, doc.tank).samples);
  }
  const auto cfg = flags.build(rate);

  Gateway gw(cfg, opt);
  std::cout << "listening on ws://" << opt.host << ':' << gw.port() << "  " << describe(cfg) << std::endl;

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::atomic<bool> done{false};
  std::thread watcher([&] {
    while (!done) {
      if (g_interrupted) {
        gw.stop();
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
  });
  SessionSummary sum;
  try {
    sum = gw.run(std::move(source));
  } catch (...) {
    done = true;
    watcher.join();
    throw;
  }
  done = true;
  watcher.join();
  std::cout << "session " << sum.session_id << ": samples=" << sum.samples << " detections=" << sum.detections
            << " labels=" << sum.labels << " theta_changes=" << sum.theta_changes
            << " rejected=" << sum.rejected_controls << " clients=" << sum.clients
            << " dropped_frames=" << sum.dropped_frames << " final_theta=" << format_real(sum.final_theta) << '\n'
            << "  " << sum.samples_path << "\n  " << sum.events_path << "\n  " << sum.labels_path << '\n';
  return 0;
}

std::vector<double> parse_range(const std::string& text, const char* flag) {
  std::vector<double> parts;
  std::size_t pos = 0;
  for (;;) {
    const auto c = text.find(':', pos);
    const auto piece = std::string_view(text).substr(pos, c == std::string::npos ? std::string::npos : c - pos);
    double v = 0;
    auto [ptr, ec] = std::from_chars(piece.data(), piece.data() + piece.size(), v);
    if (piece.empty() || ec != std::errc() || ptr != piece.data() + piece.size()) {
      throw UsageError(std::string(flag) + " must be START:STOP:STEP, got '" + text + "'");
    }
    parts.push_back(v);
    if (c == std::string::npos) break;
    pos = c + 1;
  }
  if (parts.size() == 1) parts = {parts[0], parts[0], 1.0};
  if (parts.size() != 3) throw UsageError(std::string(flag) + " must be START:STOP:STEP, got '" + text + "'");
  const double a = parts[0], b = parts[1], step = parts[2];
  if (!(step > 0.0) || !(a <= b)) throw UsageError(std::string(flag) + " range '" + text + "' is empty");
  std::vector<double> out;
  for (std::size_t i = 0;; ++i) {
    const double v = a + static_cast<double>(i) * step;
    if (v > b + 1e-9 * step) break;
    out.push_back(v);
  }
  return out;
}

int cmd_sweep(const std::vector<std::string>& files, const std::string& theta_range, const std::string& k_range,
              int64_t tol_ms, const std::string& out, const DetectorFlags& flags) {
  if (theta_range.empty() == k_range.empty()) throw UsageError("sweep needs exactly one of --theta-range, --k-range");
  if (tol_ms < 0) throw UsageError("--tol-ms must be >= 0");
  const bool by_theta = !theta_range.empty();
  const auto values = by_theta ? parse_range(theta_range, "--theta-range") : parse_range(k_range, "--k-range");

  require_readable(files[0]);
  require_readable(files[1]);
  const auto samples = read_stream<Sample>(files[0]);
  const auto labels = read_stream<LabelRecord>(files[1]).records;
  const auto base = flags.build(samples.header.rate_hz);

  // Settings are independent; run them concurrently.
  std::vector<std::future<MatchResult>> jobs;
  for (const double v : values) {
    auto cfg = base;
    if (by_theta) {
      cfg.threshold = FixedThreshold{v};
    } else {
      cfg.threshold = AdaptiveThreshold{.k = v};
    }
    cfg.validate();
    jobs.push_back(std::async(std::launch::async, [&samples, &labels, cfg, tol_ms] {
      return match_events(labels, to_records(detect_all(samples.records, cfg)), tol_ms);
    }));
  }

  std::ofstream file;
  if (!out.empty()) {
    file.open(out, std::ios::trunc);
    if (!file) throw FormatError(out, 0, "cannot open for writing");
  }
  const char* name = by_theta ? "theta" : "k";
  std::cout << name << "\ttp\tfp\tfn\tprecision\trecall\n";
  if (file) file << '#' << name << "\ttp\tfp\tfn\tprecision\trecall\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto m = jobs[i].get();
    const auto pr = precision_recall(m);
    std::ostringstream row;
    row << format_real(values[i]) << '\t' << m.tp << '\t' << m.fp << '\t' << m.fn << '\t' << format_real(pr.precision)
        << '\t' << format_real(pr.recall) << '\n';
    std::cout << row.str();
    if (file) file << row.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capblink: capacitive eye-blink detection toolkit"};
  app.require_subcommand(1, 1);

  ScenarioFlags sim_flags;
  std::string sim_out;
  auto* sim = app.add_subcommand("simulate", "render a synthetic scenario to <out>.samples and <out>.labels");
  sim_flags.add(sim);
  sim->add_option("--out", sim_out, "output prefix")->required();

  DetectorFlags det_flags;
  std::string det_in, det_out, det_trace;
  auto* det = app.add_subcommand("detect", "detect blinks in a samples file");
  det->add_option("samples", det_in, "input samples file")->required();
  det->add_option("--out", det_out, "events file (default: <input stem>.events)");
  det->add_option("--trace", det_trace, "also write a per-sample t_ms/raw/filtered/v/theta table");
  det_flags.add(det);

  DetectorFlags eval_flags;
  std::vector<std::string> eval_files;
  std::string eval_manifest, eval_out;
  bool eval_grid = false;
  int64_t eval_tol = 300;
  auto* ev = app.add_subcommand("eval", "match detections against labels and report precision/recall");
  ev->add_option("files", eval_files, "EVENTS LABELS")->expected(0, 2);
  ev->add_option("--manifest", eval_manifest, "lines of subject<TAB>scenario<TAB>events<TAB>labels");
  ev->add_flag("--grid", eval_grid, "simulate and score the built-in 5 scenario x 8 subject benchmark");
  ev->add_option("--tol-ms", eval_tol, "matching tolerance")->capture_default_str();
  ev->add_option("--out", eval_out, "report file");
  eval_flags.add(ev);

  std::string rep_in, rep_speed = "1", rep_out;
  auto* rep = app.add_subcommand("replay", "replay a samples file in (scaled) real time");
  rep->add_option("samples", rep_in, "input samples file")->required();
  rep->add_option("--speed", rep_speed, "speed factor or 'max'")->capture_default_str();
  rep->add_option("--out", rep_out, "output file (default: stdout)");

  ScenarioFlags srv_scenario;
  DetectorFlags srv_flags;
  std::string srv_in, srv_listen = "127.0.0.1:8765", srv_speed = "1", srv_out = "session";
  std::size_t srv_wait = 0, srv_queue = 64;
  int64_t srv_linger = 0;
  auto* srv = app.add_subcommand("serve", "run a live session over websocket");
  srv->add_option("samples", srv_in, "samples file to stream (default: simulate --preset)");
  srv->add_option("--listen", srv_listen, "HOST:PORT")->capture_default_str();
  srv->add_option("--speed", srv_speed, "speed factor or 'max'")->capture_default_str();
  srv->add_option("--out", srv_out, "session file prefix")->capture_default_str();
  srv->add_option("--wait-clients", srv_wait, "hold the stream until this many clients joined (10 s max)");
  srv->add_option("--linger-ms", srv_linger, "keep taking labels this long after the stream ends");
  srv->add_option("--queue-limit", srv_queue, "per-client sample batch backlog before dropping")
      ->capture_default_str();
  // --rate-hz is shared: it sets the simulated rate and the detector rate.
  srv_scenario.add(srv);
  srv_flags.add(srv, true, false);

  DetectorFlags sw_flags;
  std::vector<std::string> sw_files;
  std::string sw_theta, sw_k, sw_out;
  int64_t sw_tol = 300;
  auto* sw = app.add_subcommand("sweep", "precision/recall over a range of thresholds");
  sw->add_option("files", sw_files, "SAMPLES LABELS")->expected(2)->required();
  sw->add_option("--theta-range", sw_theta, "START:STOP:STEP fixed thresholds");
  sw->add_option("--k-range", sw_k, "START:STOP:STEP adaptive multipliers");
  sw->add_option("--tol-ms", sw_tol, "matching tolerance")->capture_default_str();
  sw->add_option("--out", sw_out, "also write the table here");
  sw_flags.add(sw, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*sim) return cmd_simulate(sim_flags, sim_out);
    if (*det) return cmd_detect(det_in, det_out, det_trace, det_flags);
    if (*ev) return cmd_eval(eval_files, eval_manifest, eval_grid, eval_tol, eval_out, eval_flags);
    if (*rep) return cmd_replay(rep_in, rep_speed, rep_out);
    if (*srv) {
      return cmd_serve(srv_in, srv_scenario, srv_flags, srv_listen, srv_speed, srv_out, srv_wait, srv_linger,
                       srv_queue);
    }
    if (*sw) return cmd_sweep(sw_files, sw_theta, sw_k, sw_tol, sw_out, sw_flags);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
