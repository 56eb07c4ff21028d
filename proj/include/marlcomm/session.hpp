#pragma once

#include "marlcomm/env.hpp"
#include "marlcomm/textgame.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace marlcomm {

// ---------------------------------------------------------------------------
// Interactive text-game sessions: a host plays full episodes where each seat
// is either a built-in oracle or an external client speaking newline-
// delimited JSON over a transport. One session per connection; the session
// itself is single-threaded and applies per-seat reply timeouts.
//
// Protocol (one JSON object per line):
//   host -> client  {"type":"hello","env":...,"agents":[...],"seats":[ids],
//                    "episodes":N}
//                   {"type":"start","episode":e}
//                   {"type":"obs","episode":e,"round":t,"agent":i,"text":...}
//                   {"type":"feedback","episode":e,"round":t,"agent":i,
//                    "text":...}      (reply parsed but action was invalid)
//                   {"type":"error","text":...}  (line was not a valid act)
//                   {"type":"end","episode":e,"success":b,"score":s,
//                    "length":L}
//                   {"type":"done","episodes":N}
//   client -> host  {"type":"act","text":"Action selection: ... Message to
//                    Team: \"...\""}
//
// After "obs" the seat may retry through feedback/error exchanges; the round
// does not advance for that seat until a valid action arrives, the retry
// budget is spent, or the timeout fires, after which the host plays the
// default action (stay / inspect) with an empty message.
// ---------------------------------------------------------------------------

class LineTransport {
 public:
  virtual ~LineTransport() = default;

  // Blocks up to timeout_ms for a full line (without the newline);
  // std::nullopt on timeout or end of stream.
  virtual std::optional<std::string> read_line(int timeout_ms) = 0;
  // False when the peer is gone; the session then stops writing.
  virtual bool write_line(const std::string& line) = 0;
};

// Reads and writes file descriptors (optionally owning them). Used for both
// stdio serving (fds 0/1) and accepted TCP connections.
class FdTransport : public LineTransport {
 public:
  FdTransport(int read_fd, int write_fd, bool owned);
  ~FdTransport() override;

  std::optional<std::string> read_line(int timeout_ms) override;
  bool write_line(const std::string& line) override;

 private:
  int read_fd_;
  int write_fd_;
  bool owned_;
  bool dead_ = false;
  std::string buffer_;
};

// In-process transport for tests: every host line is handed to the responder,
// whose returned lines are queued as the client's replies.
class ScriptedTransport : public LineTransport {
 public:
  using Responder =
      std::function<std::vector<std::string>(const std::string& host_line)>;
  explicit ScriptedTransport(Responder responder);

  std::optional<std::string> read_line(int timeout_ms) override;
  bool write_line(const std::string& line) override;

  const std::vector<std::string>& host_lines() const { return host_lines_; }

 private:
  Responder responder_;
  std::vector<std::string> host_lines_;
  std::vector<std::string> queue_;
};

// Listening TCP socket on 127.0.0.1; port 0 picks an ephemeral port.
class TcpListener {
 public:
  explicit TcpListener(int port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  int port() const { return port_; }
  // nullptr on timeout.
  std::unique_ptr<LineTransport> accept(int timeout_ms);

 private:
  int fd_;
  int port_;
};

// Connects to a local listener (client side, used by tests and tools).
std::unique_ptr<LineTransport> tcp_connect(const std::string& host, int port,
                                           int timeout_ms);

// ---------------------------------------------------------------------------
// Session host
// ---------------------------------------------------------------------------

enum class SeatKind { Oracle, External };

struct SessionOptions {
  std::uint64_t seed = 0;
  int n_episodes = 1;
  int timeout_ms = 30000;
  // Invalid replies tolerated per seat per round before the default action.
  int max_retries = 3;
  // When non-empty, a JSONL transcript (header, one line per agent-round,
  // end line per episode) is written here.
  std::string transcript_path;
};

struct SessionStats {
  int episodes = 0;
  std::vector<int> lengths;
  std::vector<bool> successes;
  std::vector<double> scores;

  double mean_length() const;
  double success_rate() const;
};

// Plays opt.n_episodes with the given seat assignment (one entry per agent).
// The transport may be null when every seat is an oracle. Episode e draws
// its environment stream from rng_stream(seed, "session", e).
SessionStats run_session(const Environment& env,
                         const std::vector<SeatKind>& seats,
                         LineTransport* transport, const SessionOptions& opt);

// Re-plays a transcript against a fresh environment and checks that every
// rendered observation, action, and episode outcome matches; throws
// MarlError naming the offending line otherwise.
void verify_transcript(const Environment& env, const std::string& path);

}  // namespace marlcomm
