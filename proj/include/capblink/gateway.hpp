#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include "capblink/detector.hpp"
#include "capblink/stream_io.hpp"

namespace capblink {

// Live session server. Clients speak JSON text frames over a websocket; every
// server message carries a "seq" that is strictly increasing on each
// connection (one global counter, so a client sees a subsequence of it).
//
// server -> client
//   hello         v, session_id, rate_hz, mode ("fixed"|"adaptive"), theta,
//                 window_ms, hop_ms, stream_t_ms (null before the first sample)
//   sample_batch  samples: [{t_ms, raw, v (null at a segment start), theta}], theta
//   detection     peak_t_ms, peak_v, theta, emitted_t_ms
//   theta_update  theta, t_ms (stream time the change took effect)
//   label_ack     t_ms, label_index, req_id
//   error         reason, in_reply_to, req_id
//   gap           dropped, first_seq, last_seq (sample batches this client missed)
//   end           samples, detections (session finished; the server closes next)
//
// client -> server
//   set_theta     theta, req_id (optional, echoed in the reply)
//   label_mark    t_ms (stream clock), req_id (optional)
inline constexpr int kProtocolVersion = 1;

class GatewayError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One outbound frame. `bulk` frames (sample batches) may be dropped for a slow
// client; everything else is always delivered.
struct Outbound {
  uint64_t seq = 0;
  std::shared_ptr<const std::string> text;
  bool bulk = false;
};

// Per-client send queue with drop-oldest for bulk frames. When frames were
// dropped, pop() hands out a gap notice before the first later frame, stamped
// with the seq of the last dropped frame so ordering stays strictly increasing.
class OutboundQueue {
 public:
  explicit OutboundQueue(std::size_t bulk_limit = 64);

  // Returns false when the queue is over its hard limit even after dropping
  // every bulk frame; the caller should disconnect the client.
  bool push(Outbound m);
  std::optional<Outbound> pop();

  bool empty() const { return frames_.empty() && gap_count_ == 0; }
  std::size_t size() const { return frames_.size(); }
  std::size_t dropped_total() const { return dropped_total_; }

 private:
  std::size_t bulk_limit_;
  std::size_t hard_limit_;
  std::deque<Outbound> frames_;
  std::size_t bulk_queued_ = 0;
  std::size_t gap_count_ = 0;
  uint64_t gap_first_ = 0;
  uint64_t gap_last_ = 0;
  std::size_t dropped_total_ = 0;
};

struct GatewayOptions {
  std::string host = "127.0.0.1";
  uint16_t port = 0;  // 0 picks a free port; see Gateway::port()
  // Session files go to <prefix>.samples, <prefix>.events, <prefix>.labels.
  std::string session_prefix = "session";
  ReplaySpeed speed = ReplaySpeed::factor(1.0);
  std::size_t batch_max = 6;
  std::size_t client_queue_limit = 64;
  // Hold the first sample until this many clients have joined (or the timeout passes).
  std::size_t wait_for_clients = 0;
  std::chrono::milliseconds wait_timeout{10000};
  // Keep accepting control messages this long after the source ends.
  std::chrono::milliseconds linger{0};
};

struct SessionSummary {
  std::string session_id;
  std::size_t samples = 0;
  std::size_t detections = 0;
  std::size_t labels = 0;
  std::size_t theta_changes = 0;
  std::size_t rejected_controls = 0;
  std::size_t clients = 0;  // connections accepted over the session
  std::size_t dropped_frames = 0;
  double final_theta = 0.0;
  std::string samples_path;
  std::string events_path;
  std::string labels_path;
};

class Gateway {
 public:
  // Binds the listening socket; throws GatewayError if that fails.
  Gateway(DetectorConfig cfg, GatewayOptions opt);
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  uint16_t port() const;

  // Streams `source` through the detector, broadcasting and recording as it
  // goes, then closes every client. Blocks until done. Read or signal errors
  // from the source end the session and are rethrown after the files are
  // flushed and clients closed.
  SessionSummary run(SampleSource source);

  // Ends the session early as if the source had run dry. Safe from any thread
  // (including a signal-watching one).
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace capblink
