#include "capblink/gateway.hpp"

#include <algorithm>
#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <random>
#include <thread>

#include "capblink/pipeline.hpp"

namespace capblink {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;
using json = nlohmann::json;

namespace {

std::shared_ptr<const std::string> encode(const json& j) { return std::make_shared<const std::string>(j.dump()); }

std::string random_session_id() {
  std::random_device rd;
  const uint64_t id = (uint64_t{rd()} << 32) | rd();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(id));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

OutboundQueue::OutboundQueue(std::size_t bulk_limit)
    : bulk_limit_(std::max<std::size_t>(bulk_limit, 1)), hard_limit_(4 * bulk_limit_ + 64) {}

bool OutboundQueue::push(Outbound m) {
  if (m.bulk) ++bulk_queued_;
  frames_.push_back(std::move(m));
  while (bulk_queued_ > bulk_limit_) {
    auto it = std::find_if(frames_.begin(), frames_.end(), [](const Outbound& f) { return f.bulk; });
    if (gap_count_ == 0) gap_first_ = it->seq;
    gap_last_ = it->seq;
    ++gap_count_;
    ++dropped_total_;
    --bulk_queued_;
    frames_.erase(it);
  }
  return frames_.size() <= hard_limit_;
}

std::optional<Outbound> OutboundQueue::pop() {
  // Every dropped frame was queued after everything already sent, so the gap
  // notice fits right before the first remaining frame newer than the drops.
  if (gap_count_ > 0 && (frames_.empty() || frames_.front().seq > gap_last_)) {
    json j{{"kind", "gap"},
           {"seq", gap_last_},
           {"dropped", gap_count_},
           {"first_seq", gap_first_},
           {"last_seq", gap_last_}};
    gap_count_ = 0;
    return Outbound{gap_last_, encode(j), false};
  }
  if (frames_.empty()) return std::nullopt;
  Outbound m = std::move(frames_.front());
  frames_.pop_front();
  if (m.bulk) --bulk_queued_;
  return m;
}

// ---------------------------------------------------------------------------

namespace {

struct Control {
  uint64_t client = 0;
  json msg;
};

}  // namespace

struct Gateway::Impl {
  class Connection;

  Impl(DetectorConfig c, GatewayOptions o);

  // hub (io thread and ingest thread; guarded by mu)
  void join(const std::shared_ptr<Connection>& c);
  void leave(uint64_t id);
  void on_text(uint64_t id, const std::string& text);
  void broadcast(json j, bool bulk = false);
  void send_to(uint64_t id, json j);
  void enqueue_locked(const std::shared_ptr<Connection>& c, Outbound m);
  void close_all();
  void do_accept();

  // ingest thread
  void apply_controls();
  void apply(const Control& c);
  void wait_until(std::chrono::steady_clock::time_point due);
  void ingest(const Sample& s);
  void emit(const std::vector<DetectedBlink>& dets);
  void flush_batch();

  DetectorConfig cfg;
  GatewayOptions opt;
  BlinkDetector detector;

  net::io_context ioc;
  tcp::acceptor acceptor;
  std::thread io_thread;

  std::mutex mu;
  std::condition_variable cv;
  uint64_t seq = 0;
  uint64_t next_client = 1;
  std::map<uint64_t, std::shared_ptr<Connection>> clients;
  std::size_t joined_total = 0;
  std::size_t dropped_frames = 0;
  std::deque<Control> controls;
  bool closing = false;
  std::atomic<bool> stop_requested{false};
  bool ran = false;
  // snapshot for hello
  std::string session_id = random_session_id();
  double theta_snapshot = 0.0;
  std::optional<int64_t> stream_t_snapshot;

  // ingest-only state
  std::unique_ptr<StreamWriter<Sample>> samples_out;
  std::unique_ptr<StreamWriter<EventRecord>> events_out;
  std::unique_ptr<StreamWriter<LabelRecord>> labels_out;
  json batch = json::array();
  std::optional<int64_t> first_t;
  std::optional<int64_t> last_t;
  std::optional<int64_t> last_label_t;
  SessionSummary summary;
};

class Gateway::Impl::Connection : public std::enable_shared_from_this<Connection> {
 public:
  Connection(Impl& hub, uint64_t id, tcp::socket socket) : hub_(hub), id(id), ws_(std::move(socket)) {}

  void start() {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->hub_.join(self);
      self->read();
    });
  }

  // Posted by the hub whenever the queue gains frames and no write is running.
  void write_next() {
    std::optional<Outbound> m;
    bool do_close = false;
    {
      std::lock_guard lk(hub_.mu);
      m = queue.pop();
      if (!m) {
        writing = false;
        if (close_after_drain && !close_sent) do_close = close_sent = true;
      }
    }
    if (m) {
      in_flight_ = m->text;
      ws_.async_write(net::buffer(*in_flight_), [self = shared_from_this()](beast::error_code ec, std::size_t) {
        if (ec) return self->drop();
        self->write_next();
      });
    } else if (do_close) {
      ws_.async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {});
    }
  }

  void drop() {
    beast::error_code ignored;
    beast::get_lowest_layer(ws_).socket().close(ignored);
    hub_.leave(id);
  }

  Impl& hub_;
  const uint64_t id;
  // guarded by hub_.mu
  OutboundQueue queue;
  bool open = false;
  bool writing = false;
  bool close_after_drain = false;
  bool close_sent = false;

 private:
  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->drop();
      const auto text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->hub_.on_text(self->id, text);
      self->read();
    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  std::shared_ptr<const std::string> in_flight_;
};

Gateway::Impl::Impl(DetectorConfig c, GatewayOptions o)
    : cfg(std::move(c)), opt(std::move(o)), detector(cfg), acceptor(ioc) {
  if (opt.batch_max == 0) throw GatewayError("batch_max must be >= 1");
  theta_snapshot = detector.current_theta();
  beast::error_code ec;
  const auto addr = net::ip::make_address(opt.host, ec);
  if (ec) throw GatewayError("bad listen address '" + opt.host + "': " + ec.message());
  const tcp::endpoint ep(addr, opt.port);
  acceptor.open(ep.protocol(), ec);
  if (!ec) acceptor.set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) acceptor.bind(ep, ec);
  if (!ec) acceptor.listen(net::socket_base::max_listen_connections, ec);
  if (ec) {
    throw GatewayError("cannot listen on " + opt.host + ":" + std::to_string(opt.port) + ": " + ec.message());
  }
}

void Gateway::Impl::do_accept() {
  acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;  // acceptor closed
    std::shared_ptr<Connection> c;
    {
      std::lock_guard lk(mu);
      if (closing) return;
      c = std::make_shared<Connection>(*this, next_client++, std::move(socket));
      c->queue = OutboundQueue(opt.client_queue_limit);
      clients.emplace(c->id, c);
    }
    c->start();
    do_accept();
  });
}

void Gateway::Impl::join(const std::shared_ptr<Connection>& c) {
  std::lock_guard lk(mu);
  if (!clients.count(c->id)) return;
  c->open = true;
  ++joined_total;
  json hello{{"kind", "hello"},
             {"v", kProtocolVersion},
             {"session_id", session_id},
             {"rate_hz", cfg.rate_hz},
             {"mode", cfg.adaptive() ? "adaptive" : "fixed"},
             {"theta", theta_snapshot},
             {"window_ms", cfg.window_len_ms},
             {"hop_ms", cfg.hop_ms},
             {"stream_t_ms", stream_t_snapshot ? json(*stream_t_snapshot) : json(nullptr)}};
  hello["seq"] = ++seq;
  enqueue_locked(c, {seq, encode(hello), false});
  if (closing) c->close_after_drain = true;
  cv.notify_all();
}

void Gateway::Impl::leave(uint64_t id) {
  std::lock_guard lk(mu);
  auto it = clients.find(id);
  if (it == clients.end()) return;
  dropped_frames += it->second->queue.dropped_total();
  clients.erase(it);
  cv.notify_all();
}

void Gateway::Impl::enqueue_locked(const std::shared_ptr<Connection>& c, Outbound m) {
  if (!c->open) return;
  if (!c->queue.push(std::move(m))) {
    // Hopelessly behind even on must-deliver frames: cut it loose.
    c->open = false;
    net::post(ioc, [c] { c->drop(); });
    return;
  }
  if (!c->writing) {
    c->writing = true;
    net::post(ioc, [c] { c->write_next(); });
  }
}

void Gateway::Impl::broadcast(json j, bool bulk) {
  std::lock_guard lk(mu);
  j["seq"] = ++seq;
  const Outbound m{seq, encode(j), bulk};
  for (auto& [id, c] : clients) enqueue_locked(c, m);
}

void Gateway::Impl::send_to(uint64_t id, json j) {
  std::lock_guard lk(mu);
  auto it = clients.find(id);
  if (it == clients.end()) return;
  j["seq"] = ++seq;
  enqueue_locked(it->second, {seq, encode(j), false});
}

void Gateway::Impl::on_text(uint64_t id, const std::string& text) {
  auto reject = [&](const std::string& reason, const json& in_reply_to, const json& req_id) {
    send_to(id, {{"kind", "error"}, {"reason", reason}, {"in_reply_to", in_reply_to}, {"req_id", req_id}});
  };
  json msg = json::parse(text, nullptr, false);
  if (msg.is_discarded() || !msg.is_object()) return reject("malformed message: not a JSON object", nullptr, nullptr);
  const json req_id = msg.contains("req_id") ? msg["req_id"] : json(nullptr);
  if (!msg.contains("kind") || !msg["kind"].is_string()) return reject("message lacks a string 'kind'", nullptr, req_id);
  const auto kind = msg["kind"].get<std::string>();
  if (kind == "set_theta") {
    if (!msg.contains("theta") || !msg["theta"].is_number()) return reject("set_theta needs a numeric 'theta'", kind, req_id);
  } else if (kind == "label_mark") {
    if (!msg.contains("t_ms") || !msg["t_ms"].is_number_integer()) {
      return reject("label_mark needs an integer 't_ms'", kind, req_id);
    }
  } else {
    return reject("unknown or server-only kind '" + kind + "'", kind, req_id);
  }
  std::lock_guard lk(mu);
  controls.push_back({id, std::move(msg)});
  cv.notify_all();
}

void Gateway::Impl::close_all() {
  std::unique_lock lk(mu);
  closing = true;
  for (auto& [id, c] : clients) {
    c->close_after_drain = true;
    if (c->open && !c->writing) {
      c->writing = true;
      net::post(ioc, [c = c] { c->write_next(); });
    }
  }
  // Give clients a moment to take their last frames and the close handshake.
  cv.wait_for(lk, std::chrono::seconds(3), [&] { return clients.empty(); });
}

// ---------------------------------------------------------------------------
// ingest thread

void Gateway::Impl::apply_controls() {
  std::deque<Control> todo;
  {
    std::lock_guard lk(mu);
    todo.swap(controls);
  }
  for (const auto& c : todo) apply(c);
}

void Gateway::Impl::apply(const Control& c) {
  const auto kind = c.msg.at("kind").get<std::string>();
  const json req_id = c.msg.contains("req_id") ? c.msg.at("req_id") : json(nullptr);
  auto reject = [&](const std::string& reason) {
    ++summary.rejected_controls;
    send_to(c.client, {{"kind", "error"}, {"reason", reason}, {"in_reply_to", kind}, {"req_id", req_id}});
  };

  if (kind == "set_theta") {
    const double theta = c.msg.at("theta").get<double>();
    if (cfg.adaptive()) return reject("threshold is adaptive; manual theta is not accepted");
    if (!(theta > 0.0) || !std::isfinite(theta)) return reject("theta must be > 0");
    flush_batch();  // batches already sent carry the old theta
    detector.set_fixed_theta(theta);
    ++summary.theta_changes;
    events_out->annotate("theta_update t_ms=" + (last_t ? std::to_string(*last_t) : std::string("-")) +
                         " theta=" + format_real(theta));
    events_out->flush();
    {
      std::lock_guard lk(mu);
      theta_snapshot = theta;
    }
    broadcast({{"kind", "theta_update"}, {"theta", theta}, {"t_ms", last_t ? json(*last_t) : json(nullptr)}});
    return;
  }

  // label_mark
  const auto t = c.msg.at("t_ms").get<int64_t>();
  if (!first_t) return reject("no samples yet; label has no stream time to attach to");
  if (t < *first_t) return reject("label t_ms=" + std::to_string(t) + " is before session start");
  const auto upper = *last_t + static_cast<int64_t>(std::ceil(cfg.nominal_period_ms()));
  if (t > upper) return reject("label t_ms=" + std::to_string(t) + " is after the latest sample");
  if (last_label_t && t < *last_label_t) {
    return reject("label t_ms=" + std::to_string(t) + " is earlier than the previous label (" +
                  std::to_string(*last_label_t) + ")");
  }
  labels_out->write({t, LabelSource::human, std::nullopt, std::nullopt});
  labels_out->flush();
  last_label_t = t;
  const auto index = summary.labels++;
  send_to(c.client, {{"kind", "label_ack"}, {"t_ms", t}, {"label_index", index}, {"req_id", req_id}});
}

void Gateway::Impl::wait_until(std::chrono::steady_clock::time_point due) {
  std::unique_lock lk(mu);
  while (!stop_requested) {
    cv.wait_until(lk, due, [&] { return !controls.empty() || stop_requested; });
    if (controls.empty()) {
      if (std::chrono::steady_clock::now() >= due) return;
      continue;
    }
    lk.unlock();
    apply_controls();
    lk.lock();
  }
}

void Gateway::Impl::flush_batch() {
  if (batch.empty()) return;
  json j{{"kind", "sample_batch"}, {"samples", std::move(batch)}, {"theta", detector.current_theta()}};
  batch = json::array();
  {
    std::lock_guard lk(mu);
    stream_t_snapshot = last_t;
    if (cfg.adaptive()) theta_snapshot = detector.current_theta();
  }
  broadcast(std::move(j), true);
}

void Gateway::Impl::emit(const std::vector<DetectedBlink>& dets) {
  if (dets.empty()) return;
  flush_batch();
  for (const auto& d : dets) {
    events_out->write(to_record(d));
    ++summary.detections;
  }
  events_out->flush();
  for (const auto& d : dets) {
    broadcast({{"kind", "detection"},
               {"peak_t_ms", d.peak_t_ms},
               {"peak_v", d.peak_v},
               {"theta", d.theta_at_detect},
               {"emitted_t_ms", d.emitted_t_ms}});
  }
}

void Gateway::Impl::ingest(const Sample& s) {
  auto dets = detector.process(s);  // throws before anything is recorded
  samples_out->write(s);
  ++summary.samples;
  if (!first_t) first_t = s.t_ms;
  last_t = s.t_ms;
  const auto v = detector.last_variation();
  batch.push_back({{"t_ms", s.t_ms},
                   {"raw", s.raw},
                   {"v", v ? json(*v) : json(nullptr)},
                   {"theta", detector.current_theta()}});
  if (!dets.empty()) {
    emit(dets);
  } else if (batch.size() >= opt.batch_max) {
    flush_batch();
  }
}

// ---------------------------------------------------------------------------

Gateway::Gateway(DetectorConfig cfg, GatewayOptions opt)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(opt))) {
  impl_->do_accept();
  impl_->io_thread = std::thread([this] { impl_->ioc.run(); });
}

Gateway::~Gateway() {
  {
    std::lock_guard lk(impl_->mu);
    impl_->closing = true;
  }
  impl_->ioc.stop();
  if (impl_->io_thread.joinable()) impl_->io_thread.join();
  beast::error_code ignored;
  impl_->acceptor.close(ignored);
}

uint16_t Gateway::port() const { return impl_->acceptor.local_endpoint().port(); }

void Gateway::stop() {
  impl_->stop_requested = true;
  std::lock_guard lk(impl_->mu);
  impl_->cv.notify_all();
}

SessionSummary Gateway::run(SampleSource source) {
  auto& s = *impl_;
  if (s.ran) throw GatewayError("a gateway runs one session only");
  s.ran = true;
  const auto& prefix = s.opt.session_prefix;
  s.summary = {};
  s.summary.session_id = s.session_id;
  s.summary.samples_path = prefix + ".samples";
  s.summary.events_path = prefix + ".events";
  s.summary.labels_path = prefix + ".labels";
  try {
    s.samples_out = std::make_unique<StreamWriter<Sample>>(s.summary.samples_path, s.cfg.rate_hz);
    s.events_out = std::make_unique<StreamWriter<EventRecord>>(s.summary.events_path, s.cfg.rate_hz);
    s.labels_out = std::make_unique<StreamWriter<LabelRecord>>(s.summary.labels_path, s.cfg.rate_hz);
  } catch (const FormatError& e) {
    throw GatewayError(std::string("cannot create session files: ") + e.what());
  }

  if (s.opt.wait_for_clients > 0) {
    std::unique_lock lk(s.mu);
    s.cv.wait_for(lk, s.opt.wait_timeout,
                  [&] { return s.joined_total >= s.opt.wait_for_clients || s.stop_requested; });
  }

  std::exception_ptr failure;
  try {
    Replayer replayer(std::move(source), s.opt.speed);
    while (!s.stop_requested) {
      auto ts = replayer.next();
      if (!ts) break;
      if (!s.opt.speed.is_unpaced()) s.wait_until(ts->due);
      if (s.stop_requested) break;
      s.apply_controls();
      s.ingest(ts->sample);
    }
    s.emit(s.detector.finish());
    s.flush_batch();
    if (s.opt.linger.count() > 0) s.wait_until(std::chrono::steady_clock::now() + s.opt.linger);
    s.apply_controls();
  } catch (...) {
    failure = std::current_exception();
    s.flush_batch();
    std::string reason = "session aborted";
    try {
      throw;
    } catch (const std::exception& e) {
      reason += std::string(": ") + e.what();
    } catch (...) {
    }
    s.broadcast({{"kind", "error"}, {"reason", reason}, {"in_reply_to", nullptr}, {"req_id", nullptr}});
  }

  s.broadcast({{"kind", "end"}, {"samples", s.summary.samples}, {"detections", s.summary.detections}});
  s.samples_out->flush();
  s.events_out->flush();
  s.labels_out->flush();
  s.close_all();
  {
    std::lock_guard lk(s.mu);
    s.summary.clients = s.joined_total;
    s.summary.dropped_frames = s.dropped_frames;
    for (const auto& [id, c] : s.clients) s.summary.dropped_frames += c->queue.dropped_total();
  }
  s.summary.final_theta = s.detector.current_theta();
  if (failure) std::rethrow_exception(failure);
  return s.summary;
}

}  // namespace capblink
