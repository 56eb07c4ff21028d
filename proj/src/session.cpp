#include "marlcomm/session.hpp"

#include <json.hpp>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <fstream>
#include <numeric>

namespace marlcomm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Transports
// ---------------------------------------------------------------------------

namespace {

void ignore_sigpipe() {
  static const bool once = [] {
    std::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)once;
}

int now_ms() {
  using namespace std::chrono;
  return static_cast<int>(
      duration_cast<milliseconds>(steady_clock::now().time_since_epoch())
          .count());
}

}  // namespace

FdTransport::FdTransport(int read_fd, int write_fd, bool owned)
    : read_fd_(read_fd), write_fd_(write_fd), owned_(owned) {
  ignore_sigpipe();
}

FdTransport::~FdTransport() {
  if (owned_) {
    ::close(read_fd_);
    if (write_fd_ != read_fd_) ::close(write_fd_);
  }
}

std::optional<std::string> FdTransport::read_line(int timeout_ms) {
  const int deadline = now_ms() + timeout_ms;
  for (;;) {
    const std::size_t nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    if (dead_) return std::nullopt;
    const int remaining = deadline - now_ms();
    if (remaining <= 0) return std::nullopt;
    pollfd pfd{read_fd_, POLLIN, 0};
    const int pr = ::poll(&pfd, 1, remaining);
    if (pr < 0) {
      if (errno == EINTR) continue;
      dead_ = true;
      return std::nullopt;
    }
    if (pr == 0) return std::nullopt;  // timeout
    char chunk[4096];
    const ssize_t n = ::read(read_fd_, chunk, sizeof(chunk));
    if (n <= 0) {
      dead_ = true;  // EOF or error; drain what is buffered, then stop
      if (buffer_.empty()) return std::nullopt;
      continue;
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

bool FdTransport::write_line(const std::string& line) {
  if (dead_) return false;
  std::string out = line + "\n";
  std::size_t off = 0;
  while (off < out.size()) {
    const ssize_t n = ::write(write_fd_, out.data() + off, out.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      dead_ = true;
      return false;
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

ScriptedTransport::ScriptedTransport(Responder responder)
    : responder_(std::move(responder)) {}

std::optional<std::string> ScriptedTransport::read_line(int) {
  if (queue_.empty()) return std::nullopt;
  std::string line = std::move(queue_.front());
  queue_.erase(queue_.begin());
  return line;
}

bool ScriptedTransport::write_line(const std::string& line) {
  host_lines_.push_back(line);
  if (responder_) {
    for (auto& reply : responder_(line)) queue_.push_back(std::move(reply));
  }
  return true;
}

TcpListener::TcpListener(int port) {
  ignore_sigpipe();
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  require(fd_ >= 0, "socket() failed");
  const int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  require(::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0,
          "bind() failed on port " + std::to_string(port));
  require(::listen(fd_, 8) == 0, "listen() failed");
  socklen_t len = sizeof(addr);
  require(::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len) == 0,
          "getsockname() failed");
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() { ::close(fd_); }

std::unique_ptr<LineTransport> TcpListener::accept(int timeout_ms) {
  pollfd pfd{fd_, POLLIN, 0};
  const int pr = ::poll(&pfd, 1, timeout_ms);
  if (pr <= 0) return nullptr;
  const int cfd = ::accept(fd_, nullptr, nullptr);
  if (cfd < 0) return nullptr;
  return std::make_unique<FdTransport>(cfd, cfd, true);
}

std::unique_ptr<LineTransport> tcp_connect(const std::string& host, int port,
                                           int timeout_ms) {
  ignore_sigpipe();
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  require(fd >= 0, "socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  require(::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1,
          "bad address: " + host);
  (void)timeout_ms;  // loopback connects immediately or fails
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw MarlError("connect() to " + host + ":" + std::to_string(port) +
                    " failed: " + std::strerror(errno));
  }
  return std::make_unique<FdTransport>(fd, fd, true);
}

// ---------------------------------------------------------------------------
// Session host
// ---------------------------------------------------------------------------

double SessionStats::mean_length() const {
  if (lengths.empty()) return 0.0;
  return std::accumulate(lengths.begin(), lengths.end(), 0.0) /
         static_cast<double>(lengths.size());
}

double SessionStats::success_rate() const {
  if (successes.empty()) return 0.0;
  double s = 0.0;
  for (bool b : successes) s += b ? 1.0 : 0.0;
  return s / static_cast<double>(successes.size());
}

namespace {

int default_action(const Environment& env) {
  // A harmless placeholder when a seat times out: stay put (PP) or inspect
  // (USAR; at worst it draws a "no bomb" feedback and changes nothing).
  if (env.kind() == EnvKind::PredatorPrey) return 4;
  return static_cast<int>(env.usar_config().room_labels.size());
}

struct ExternalReply {
  int action = 0;
  std::string message;
  std::string raw;  // the accepted reply text, empty when defaulted
};

ExternalReply exchange(const Environment& env, const EnvState& state,
                       int agent, int episode, LineTransport& tp,
                       const std::string& obs_text,
                       const SessionOptions& opt) {
  json obs{{"type", "obs"},
           {"episode", episode},
           {"round", state.t},
           {"agent", agent},
           {"text", obs_text}};
  tp.write_line(obs.dump());
  for (int attempt = 0; attempt < opt.max_retries; ++attempt) {
    auto line = tp.read_line(opt.timeout_ms);
    if (!line) break;  // timeout or closed stream
    json j = json::parse(*line, nullptr, false);
    if (j.is_discarded() || !j.is_object() ||
        j.value("type", std::string{}) != "act" || !j.contains("text") ||
        !j["text"].is_string()) {
      tp.write_line(json{{"type", "error"},
                         {"text",
                          "expected {\"type\":\"act\",\"text\":\"...\"}"}}
                        .dump());
      continue;
    }
    const std::string text = j["text"].get<std::string>();
    ParseOutcome po = parse_reply(text, env, state, agent);
    if (!po.ok) {
      tp.write_line(json{{"type", "feedback"},
                         {"episode", episode},
                         {"round", state.t},
                         {"agent", agent},
                         {"text", po.feedback}}
                        .dump());
      continue;
    }
    return {po.action, po.message, text};
  }
  return {default_action(env), "", ""};
}

}  // namespace

SessionStats run_session(const Environment& env,
                         const std::vector<SeatKind>& seats,
                         LineTransport* transport, const SessionOptions& opt) {
  const int n = env.n_agents();
  require(static_cast<int>(seats.size()) == n,
          "run_session: need one seat per agent");
  require(opt.n_episodes >= 1, "run_session: need at least one episode");
  bool any_external = false;
  for (SeatKind k : seats) any_external |= (k == SeatKind::External);
  require(!any_external || transport != nullptr,
          "run_session: external seats need a transport");

  std::ofstream transcript;
  if (!opt.transcript_path.empty()) {
    transcript.open(opt.transcript_path);
    require(transcript.good(),
            "cannot write transcript: " + opt.transcript_path);
  }
  auto tline = [&](const json& j) {
    if (transcript.is_open()) transcript << j.dump() << "\n";
  };

  std::vector<std::string> agent_names;
  std::vector<int> external_ids;
  for (int i = 0; i < n; ++i) {
    agent_names.push_back(env.kind() == EnvKind::Usar
                              ? env.usar_config()
                                    .agent_names[static_cast<std::size_t>(i)]
                              : "predator" + std::to_string(i));
    if (seats[static_cast<std::size_t>(i)] == SeatKind::External) {
      external_ids.push_back(i);
    }
  }
  if (transport) {
    transport->write_line(json{{"type", "hello"},
                               {"env", env.tag()},
                               {"agents", agent_names},
                               {"seats", external_ids},
                               {"episodes", opt.n_episodes}}
                              .dump());
  }
  {
    std::vector<std::string> kinds;
    for (SeatKind k : seats) {
      kinds.push_back(k == SeatKind::Oracle ? "oracle" : "external");
    }
    tline(json{{"type", "header"},
               {"env", env.tag()},
               {"seed", opt.seed},
               {"episodes", opt.n_episodes},
               {"seats", kinds}});
  }

  SessionStats stats;
  for (int ep = 0; ep < opt.n_episodes; ++ep) {
    RngStream rng =
        rng_stream(opt.seed, "session", static_cast<std::uint64_t>(ep));
    EnvState state = env.reset(rng);
    std::vector<OracleAgent> oracles;
    oracles.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) oracles.emplace_back(env, i);
    std::vector<std::vector<std::string>> inboxes(static_cast<std::size_t>(n));
    if (transport) {
      transport->write_line(json{{"type", "start"}, {"episode", ep}}.dump());
    }

    double score = 0.0;
    while (!env.finished(state)) {
      std::vector<int> joint(static_cast<std::size_t>(n));
      std::vector<std::string> said(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        const std::string obs_text = render(env, state, i, inboxes[iu]);
        std::string reply;
        if (seats[iu] == SeatKind::Oracle) {
          OracleDecision d = oracles[iu].act(state, inboxes[iu]);
          joint[iu] = d.action;
          said[iu] = d.message;
          reply = format_reply(env, d.action, d.message);
        } else {
          ExternalReply r =
              exchange(env, state, i, ep, *transport, obs_text, opt);
          joint[iu] = r.action;
          said[iu] = r.message;
          reply = r.raw;
        }
        tline(json{{"type", "round"},
                   {"episode", ep},
                   {"round", state.t},
                   {"agent", i},
                   {"obs", obs_text},
                   {"reply", reply},
                   {"action", joint[iu]},
                   {"message", said[iu]}});
      }
      StepResult sr = env.step(state, joint);
      for (double r : sr.rewards) score += r;
      state = std::move(sr.state);
      for (int i = 0; i < n; ++i) {
        auto& inbox = inboxes[static_cast<std::size_t>(i)];
        inbox.clear();
        for (int j = 0; j < n; ++j) {
          if (j != i) inbox.push_back(said[static_cast<std::size_t>(j)]);
        }
      }
    }

    const bool success = env.success(state);
    if (env.kind() == EnvKind::Usar) score = state.usar.score;
    stats.episodes += 1;
    stats.lengths.push_back(state.t);
    stats.successes.push_back(success);
    stats.scores.push_back(score);
    const json end{{"type", "end"},
                   {"episode", ep},
                   {"success", success},
                   {"score", score},
                   {"length", state.t}};
    if (transport) transport->write_line(end.dump());
    tline(end);
  }
  if (transport) {
    transport->write_line(
        json{{"type", "done"}, {"episodes", opt.n_episodes}}.dump());
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Transcript replay
// ---------------------------------------------------------------------------

void verify_transcript(const Environment& env, const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open transcript: " + path);
  const int n = env.n_agents();

  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw MarlError(path + ":" + std::to_string(lineno) + ": " + msg);
  };
  auto next = [&](json& out) -> bool {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      out = json::parse(line, nullptr, false);
      if (out.is_discarded()) fail("malformed JSON");
      return true;
    }
    return false;
  };

  json j;
  require(next(j), path + ": empty transcript");
  if (j.value("type", std::string{}) != "header") fail("expected header line");
  if (j.value("env", std::string{}) != env.tag()) {
    fail("transcript env \"" + j.value("env", std::string{}) +
         "\" does not match " + env.tag());
  }
  const std::uint64_t seed = j.at("seed").get<std::uint64_t>();
  const int episodes = j.at("episodes").get<int>();

  for (int ep = 0; ep < episodes; ++ep) {
    RngStream rng = rng_stream(seed, "session", static_cast<std::uint64_t>(ep));
    EnvState state = env.reset(rng);
    std::vector<std::vector<std::string>> inboxes(static_cast<std::size_t>(n));
    double score = 0.0;

    while (!env.finished(state)) {
      std::vector<int> joint(static_cast<std::size_t>(n));
      std::vector<std::string> said(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        if (!next(j)) fail("transcript ended mid-episode");
        if (j.value("type", std::string{}) != "round") {
          fail("expected a round line");
        }
        if (j.at("episode").get<int>() != ep ||
            j.at("round").get<int>() != state.t ||
            j.at("agent").get<int>() != i) {
          fail("round line out of order (expected episode " +
               std::to_string(ep) + " round " + std::to_string(state.t) +
               " agent " + std::to_string(i) + ")");
        }
        const auto iu = static_cast<std::size_t>(i);
        const std::string expect = render(env, state, i, inboxes[iu]);
        if (j.at("obs").get<std::string>() != expect) {
          fail("recorded observation does not match replay");
        }
        joint[iu] = j.at("action").get<int>();
        if (joint[iu] < 0 || joint[iu] >= env.n_actions()) {
          fail("action out of range");
        }
        said[iu] = j.at("message").get<std::string>();
      }
      StepResult sr = env.step(state, joint);
      for (double r : sr.rewards) score += r;
      state = std::move(sr.state);
      for (int i = 0; i < n; ++i) {
        auto& inbox = inboxes[static_cast<std::size_t>(i)];
        inbox.clear();
        for (int k = 0; k < n; ++k) {
          if (k != i) inbox.push_back(said[static_cast<std::size_t>(k)]);
        }
      }
    }

    if (env.kind() == EnvKind::Usar) score = state.usar.score;
    if (!next(j)) fail("missing end line");
    if (j.value("type", std::string{}) != "end") fail("expected end line");
    if (j.at("episode").get<int>() != ep) fail("end line for wrong episode");
    if (j.at("success").get<bool>() != env.success(state)) {
      fail("recorded success flag does not match replay");
    }
    if (j.at("length").get<int>() != state.t) {
      fail("recorded length does not match replay");
    }
    if (j.at("score").get<double>() != score) {
      fail("recorded score does not match replay");
    }
  }
}

}  // namespace marlcomm
