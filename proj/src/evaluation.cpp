#include "marlcomm/evaluation.hpp"

#include "marlcomm/agent.hpp"
#include "marlcomm/nn.hpp"
#include "marlcomm/session.hpp"
#include "marlcomm/textgame.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace marlcomm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Tokenization and BLEU
// ---------------------------------------------------------------------------

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

// n-grams joined with an unprintable separator so distinct token splits
// cannot collide.
std::unordered_map<std::string, int> ngram_counts(
    const std::vector<std::string>& tokens, int n) {
  std::unordered_map<std::string, int> counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size();
       ++i) {
    std::string key;
    for (int k = 0; k < n; ++k) {
      if (k) key += '\x1f';
      key += tokens[i + static_cast<std::size_t>(k)];
    }
    counts[key] += 1;
  }
  return counts;
}

double safe_cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace

double bleu(const std::string& candidate, const std::string& reference) {
  const std::vector<std::string> cand = tokenize(candidate);
  const std::vector<std::string> ref = tokenize(reference);
  if (cand.empty() || ref.empty()) return 0.0;

  double log_sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const auto total =
        static_cast<long>(cand.size()) - n + 1;  // candidate n-grams
    if (total <= 0) continue;  // order longer than the sentence: neutral
    const auto cc = ngram_counts(cand, n);
    const auto rc = ngram_counts(ref, n);
    long matches = 0;
    for (const auto& [gram, count] : cc) {
      auto it = rc.find(gram);
      if (it != rc.end()) matches += std::min(count, it->second);
    }
    const double p =
        matches > 0 ? static_cast<double>(matches) / static_cast<double>(total)
                    : 1.0 / static_cast<double>(total + 1);  // add-one floor
    log_sum += 0.25 * std::log(p);
  }
  const double bp =
      cand.size() >= ref.size()
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref.size()) /
                               static_cast<double>(cand.size()));
  return bp * std::exp(log_sum);
}

// ---------------------------------------------------------------------------
// Spearman and topographic similarity
// ---------------------------------------------------------------------------

namespace {

// Fractional ranks, average on ties (1-based; the base cancels in Pearson).
std::vector<double> ranks_of(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && v[order[j]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
    i = j;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(const std::vector<double>& x,
                               const std::vector<double>& y) {
  require(x.size() == y.size(), "spearman: length mismatch");
  require(x.size() >= 2, "spearman: need at least two samples");
  const std::vector<double> rx = ranks_of(x);
  const std::vector<double> ry = ranks_of(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = rx[i] - mx, dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;  // constant ranks
  return sxy / std::sqrt(sxx * syy);
}

std::optional<double> topo_similarity(
    const std::vector<Vector>& comms, const std::vector<Vector>& positions,
    const TopoOptions& opt,
    const std::function<double(const Vector&, const Vector&)>&
        state_distance) {
  require(comms.size() == positions.size(),
          "topo_similarity: comm/position count mismatch");
  const std::size_t n = comms.size();
  if (n < 2) return std::nullopt;
  auto dist = state_distance
                  ? state_distance
                  : [](const Vector& a, const Vector& b) {
                      return (a - b).norm();
                    };

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  const std::size_t all = n * (n - 1) / 2;
  if (all <= opt.max_pairs) {
    pairs.reserve(all);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    }
  } else {
    // Uniform subsample without replacement under a fixed stream.
    RngStream rng = rng_stream(opt.seed, "topo-pairs");
    std::unordered_set<std::uint64_t> seen;
    pairs.reserve(opt.max_pairs);
    std::size_t attempts = 0;
    while (pairs.size() < opt.max_pairs && attempts < 40 * opt.max_pairs) {
      ++attempts;
      std::size_t i = static_cast<std::size_t>(rng.uniform_int(n));
      std::size_t j = static_cast<std::size_t>(rng.uniform_int(n));
      if (i == j) continue;
      if (i > j) std::swap(i, j);
      const std::uint64_t key = static_cast<std::uint64_t>(i) * n + j;
      if (seen.insert(key).second) pairs.emplace_back(i, j);
    }
  }

  std::vector<double> sim, d;
  sim.reserve(pairs.size());
  d.reserve(pairs.size());
  for (const auto& [i, j] : pairs) {
    sim.push_back(safe_cosine(comms[i], comms[j]));
    d.push_back(dist(positions[i], positions[j]));
  }
  const std::optional<double> rho = spearman(sim, d);
  if (!rho) return std::nullopt;
  return -*rho;
}

std::optional<double> topo_similarity(const std::vector<EpisodeTrace>& traces,
                                      const Environment& env,
                                      const TopoOptions& opt) {
  std::vector<Vector> comms, positions;
  for (const auto& ep : traces) {
    for (const auto& step : ep.steps) {
      for (const auto& rec : step) {
        comms.push_back(rec.comm);
        positions.push_back(rec.position);
      }
    }
  }
  if (env.kind() == EnvKind::Usar) {
    return topo_similarity(comms, positions, opt,
                           [&env](const Vector& a, const Vector& b) {
                             return static_cast<double>(env.room_distance(
                                 static_cast<int>(a[0]),
                                 static_cast<int>(b[0])));
                           });
  }
  return topo_similarity(comms, positions, opt);
}

// ---------------------------------------------------------------------------
// DBSCAN and PCA
// ---------------------------------------------------------------------------

std::vector<int> dbscan(const std::vector<Vector>& points, double eps,
                        int min_pts) {
  require(eps > 0.0, "dbscan: eps must be positive");
  require(min_pts >= 1, "dbscan: min_pts must be at least 1");
  const std::size_t n = points.size();
  constexpr int kUnvisited = -2;
  std::vector<int> labels(n, kUnvisited);
  auto region = [&](std::size_t i) {
    std::vector<std::size_t> nb;
    for (std::size_t j = 0; j < n; ++j) {
      if ((points[i] - points[j]).norm() <= eps) nb.push_back(j);
    }
    return nb;  // ascending index order, includes i itself
  };

  int next_cluster = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != kUnvisited) continue;
    std::vector<std::size_t> nb = region(i);
    if (nb.size() < static_cast<std::size_t>(min_pts)) {
      labels[i] = kNoiseLabel;  // may become a border point later
      continue;
    }
    const int cluster = next_cluster++;
    labels[i] = cluster;
    std::vector<std::size_t> queue = std::move(nb);
    for (std::size_t q = 0; q < queue.size(); ++q) {
      const std::size_t p = queue[q];
      if (labels[p] == kNoiseLabel) labels[p] = cluster;  // border point
      if (labels[p] != kUnvisited) continue;
      labels[p] = cluster;
      std::vector<std::size_t> nb2 = region(p);
      if (nb2.size() >= static_cast<std::size_t>(min_pts)) {
        for (std::size_t x : nb2) {
          if (labels[x] == kUnvisited || labels[x] == kNoiseLabel) {
            queue.push_back(x);
          }
        }
      }
    }
  }
  return labels;
}

double suggest_eps(const std::vector<Vector>& points, int k) {
  const std::size_t n = points.size();
  if (n < 2 || k < 1) return 0.0;
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k),
                                               n - 1);
  std::vector<double> kth;
  kth.reserve(n);
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) d.push_back((points[i] - points[j]).norm());
    }
    std::nth_element(d.begin(), d.begin() + static_cast<long>(kk - 1),
                     d.end());
    kth.push_back(d[kk - 1]);
  }
  std::nth_element(kth.begin(), kth.begin() + static_cast<long>((n - 1) / 2),
                   kth.end());
  return kth[(n - 1) / 2];
}

std::vector<std::array<double, 2>> pca2(const std::vector<Vector>& points) {
  const std::size_t n = points.size();
  require(n >= 2, "pca2: need at least two points");
  const Index d = points[0].size();
  for (const auto& p : points) {
    require(p.size() == d, "pca2: dimension mismatch");
  }

  Vector mean = Vector::Zero(d);
  for (const auto& p : points) mean += p;
  mean /= static_cast<double>(n);
  std::vector<Vector> centered;
  centered.reserve(n);
  Matrix cov = Matrix::Zero(d, d);
  for (const auto& p : points) {
    centered.push_back(p - mean);
    cov += centered.back() * centered.back().transpose();
  }
  cov /= static_cast<double>(n - 1);

  auto top_axis = [&](const Matrix& m,
                      std::uint64_t axis) -> std::pair<double, Vector> {
    RngStream rng = rng_stream(0, "pca2", axis);
    Vector v(d);
    for (Index i = 0; i < d; ++i) v[i] = rng.normal();
    if (v.norm() <= 0) v[0] = 1.0;
    v.normalize();
    // Iterate until the direction itself stabilizes; the Rayleigh quotient
    // converges quadratically faster than the vector and would stop too soon.
    for (int iter = 0; iter < 5000; ++iter) {
      Vector w = m * v;
      const double nw = w.norm();
      if (nw < 1e-300) return {0.0, Vector::Zero(d)};
      w /= nw;
      const double drift = std::min((w - v).norm(), (w + v).norm());
      v = w;
      if (drift <= 1e-15) break;
    }
    const double lambda = v.dot(m * v);
    for (Index i = 0; i < d; ++i) {
      if (std::abs(v[i]) > 1e-12) {
        if (v[i] < 0) v = -v;
        break;
      }
    }
    return {lambda, v};
  };

  auto [l1, v1] = top_axis(cov, 0);
  std::vector<std::array<double, 2>> coords(n, {0.0, 0.0});
  if (l1 <= 0.0) return coords;  // no variance at all
  const Matrix deflated = cov - l1 * (v1 * v1.transpose());
  auto [l2, v2] = top_axis(deflated, 1);
  const bool rank1 = l2 <= 1e-12 * l1;
  for (std::size_t i = 0; i < n; ++i) {
    coords[i][0] = centered[i].dot(v1);
    coords[i][1] = rank1 ? 0.0 : centered[i].dot(v2);
  }
  return coords;
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

std::optional<AlignmentStats> alignment(const std::vector<EpisodeTrace>& traces,
                                        const GroundingDataset& ds) {
  require(!ds.empty(), "alignment: empty dataset");
  AlignmentStats stats;
  double cos_sum = 0.0, bleu_sum = 0.0;
  for (const auto& ep : traces) {
    for (const auto& step : ep.steps) {
      for (const auto& rec : step) {
        const GroundingEntry* hit = ds.lookup(rec.obs, rec.action);
        if (!hit) continue;
        require(rec.comm.size() == ds.dim(),
                "alignment: comm dimension does not match the dataset");
        cos_sum += safe_cosine(rec.comm, hit->embedding);
        bleu_sum += bleu(ds.translate(rec.comm).message, hit->message);
        stats.grounded_steps += 1;
      }
    }
  }
  if (stats.grounded_steps == 0) return std::nullopt;
  stats.mean_cosine = cos_sum / static_cast<double>(stats.grounded_steps);
  stats.mean_bleu = bleu_sum / static_cast<double>(stats.grounded_steps);
  return stats;
}

// ---------------------------------------------------------------------------
// Team evaluation
// ---------------------------------------------------------------------------

TeamSpec TeamSpec::parse(const std::string& spec) {
  TeamSpec team;
  std::stringstream ss(spec);
  std::string token;
  while (std::getline(ss, token, ',')) {
    // Trim surrounding whitespace.
    const auto a = token.find_first_not_of(" \t");
    const auto b = token.find_last_not_of(" \t");
    token = a == std::string::npos ? "" : token.substr(a, b - a + 1);
    require(!token.empty(), "team spec: empty seat");
    Seat seat;
    if (token == "oracle") {
      seat.kind = Seat::Kind::Oracle;
    } else if (token == "external") {
      seat.kind = Seat::Kind::External;
    } else {
      seat.kind = Seat::Kind::Policy;
      seat.checkpoint = token;
    }
    team.seats.push_back(std::move(seat));
  }
  require(!team.seats.empty(), "team spec: no seats");
  return team;
}

double EvalReport::mean_length() const {
  if (episodes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : episodes) s += e.length;
  return s / static_cast<double>(episodes.size());
}

double EvalReport::sd_length() const {
  if (episodes.size() < 2) return 0.0;
  const double m = mean_length();
  double s = 0.0;
  for (const auto& e : episodes) s += (e.length - m) * (e.length - m);
  return std::sqrt(s / static_cast<double>(episodes.size() - 1));
}

double EvalReport::success_rate() const {
  if (episodes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : episodes) s += e.success ? 1.0 : 0.0;
  return s / static_cast<double>(episodes.size());
}

double EvalReport::mean_score() const {
  if (episodes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : episodes) s += e.score;
  return s / static_cast<double>(episodes.size());
}

namespace {

// "local:<dim>:<seed>" fingerprints can be rebuilt; anything else cannot.
std::unique_ptr<EmbeddingProvider> provider_from_fingerprint(
    const std::string& fp) {
  if (fp.rfind("local:", 0) != 0) return nullptr;
  const std::size_t mid = fp.find(':', 6);
  if (mid == std::string::npos) return nullptr;
  try {
    const Index dim = std::stol(fp.substr(6, mid - 6));
    const std::uint64_t seed = std::stoull(fp.substr(mid + 1));
    return std::make_unique<LocalEmbeddingProvider>(dim, seed);
  } catch (const std::exception&) {
    return nullptr;
  }
}

int eval_default_action(const Environment& env) {
  if (env.kind() == EnvKind::PredatorPrey) return 4;  // stay
  return static_cast<int>(env.usar_config().room_labels.size());  // inspect
}

std::string seat_label(const TeamSpec::Seat& seat,
                       const std::map<std::string, Checkpoint>& ckpts) {
  switch (seat.kind) {
    case TeamSpec::Seat::Kind::Oracle:
      return "oracle";
    case TeamSpec::Seat::Kind::External:
      return "external";
    case TeamSpec::Seat::Kind::Policy:
      return to_string(ckpts.at(seat.checkpoint).config.variant);
  }
  return "?";
}

}  // namespace

EvalReport evaluate(const Environment& env, const TeamSpec& team,
                    const GroundingDataset* ds, const EvalOptions& opt,
                    LineTransport* transport) {
  const int n = env.n_agents();
  require(static_cast<int>(team.seats.size()) == n,
          "evaluate: seat count must equal the agent count");
  require(opt.episodes_per_seed >= 1, "evaluate: need at least one episode");
  require(!opt.seeds.empty(), "evaluate: need at least one seed");

  // Load checkpoints (shared across seats naming the same file).
  std::map<std::string, Checkpoint> ckpts;
  bool any_policy = false, any_text = false, any_external = false;
  for (const auto& seat : team.seats) {
    if (seat.kind == TeamSpec::Seat::Kind::Policy) {
      any_policy = true;
      if (!ckpts.count(seat.checkpoint)) {
        ckpts.emplace(seat.checkpoint, load_checkpoint(seat.checkpoint));
      }
      const Checkpoint& c = ckpts.at(seat.checkpoint);
      require(c.config.env == env.tag(),
              "evaluate: checkpoint " + seat.checkpoint + " was trained on " +
                  c.config.env + ", not " + env.tag());
    } else {
      any_text = true;
      any_external |= seat.kind == TeamSpec::Seat::Kind::External;
    }
  }
  require(!any_external || transport != nullptr,
          "evaluate: external seats need a transport");

  // The vector<->text bridge.
  std::unique_ptr<EmbeddingProvider> provider;
  if (ds && any_policy && any_text) {
    provider = provider_from_fingerprint(ds->provider_fingerprint());
    require(provider != nullptr,
            "evaluate: cannot rebuild the embedding provider from "
            "fingerprint \"" +
                ds->provider_fingerprint() + "\"");
  }
  std::unordered_map<std::string, Vector> embed_cache;
  auto embed = [&](const std::string& text) -> const Vector& {
    auto it = embed_cache.find(text);
    if (it == embed_cache.end()) {
      it = embed_cache.emplace(text, provider->embed(text)).first;
    }
    return it->second;
  };

  EvalReport report;
  report.env = env.tag();
  report.seeds = opt.seeds;
  {
    std::string label;
    for (std::size_t i = 0; i < team.seats.size(); ++i) {
      if (i) label += ",";
      label += seat_label(team.seats[i], ckpts);
    }
    report.variant = label;
  }

  std::vector<EpisodeTrace> policy_traces;
  for (const std::uint64_t seed : opt.seeds) {
    for (int e = 0; e < opt.episodes_per_seed; ++e) {
      RngStream env_rng =
          rng_stream(seed, "eval", static_cast<std::uint64_t>(e));
      EnvState state = env.reset(env_rng);

      struct SeatState {
        const Checkpoint* ckpt = nullptr;
        AgentCarry carry;
        std::optional<OracleAgent> oracle;
        Vector prev_comm;   // raw comm vector (policy seats)
        int prev_gate = 0;  // whether the previous message was broadcast
        std::string prev_text;
      };
      std::vector<SeatState> seats(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        auto& st = seats[static_cast<std::size_t>(i)];
        const auto& spec_seat = team.seats[static_cast<std::size_t>(i)];
        if (spec_seat.kind == TeamSpec::Seat::Kind::Policy) {
          st.ckpt = &ckpts.at(spec_seat.checkpoint);
          st.carry = st.ckpt->state.policy.initial_carry();
          st.prev_comm =
              Vector::Zero(st.ckpt->state.policy.config().comm_dim);
        } else if (spec_seat.kind == TeamSpec::Seat::Kind::Oracle) {
          st.oracle.emplace(env, i);
        }
      }

      EpisodeTrace trace;
      double score = 0.0;
      while (!env.finished(state)) {
        // Channel contents from the previous step, per sender.
        std::vector<Vector> comms(static_cast<std::size_t>(n));
        std::vector<int> gates(static_cast<std::size_t>(n), 0);
        for (int j = 0; j < n; ++j) {
          auto& st = seats[static_cast<std::size_t>(j)];
          if (st.ckpt) {
            comms[static_cast<std::size_t>(j)] = st.prev_comm;
            gates[static_cast<std::size_t>(j)] = st.prev_gate;
          } else if (provider && !st.prev_text.empty()) {
            comms[static_cast<std::size_t>(j)] = embed(st.prev_text);
            gates[static_cast<std::size_t>(j)] = 1;
          } else {
            comms[static_cast<std::size_t>(j)] = Vector::Zero(1);
          }
        }
        auto inbox_for = [&](int i) {
          std::vector<std::string> inbox;
          for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const auto& st = seats[static_cast<std::size_t>(j)];
            if (st.ckpt) {
              if (ds && st.prev_gate) {
                inbox.push_back(ds->translate(st.prev_comm).message);
              }
            } else if (!st.prev_text.empty()) {
              inbox.push_back(st.prev_text);
            }
          }
          return inbox;
        };

        std::vector<int> joint(static_cast<std::size_t>(n), 0);
        std::vector<Vector> new_comm(static_cast<std::size_t>(n));
        std::vector<int> new_gate(static_cast<std::size_t>(n), 0);
        std::vector<std::string> new_text(static_cast<std::size_t>(n));
        std::vector<StepRecord> step_records;
        for (int i = 0; i < n; ++i) {
          auto& st = seats[static_cast<std::size_t>(i)];
          if (st.ckpt) {
            const AgentPolicy& policy = st.ckpt->state.policy;
            const TrainConfig& cfg = st.ckpt->config;
            const Vector obs = env.observe(state, i);
            // Mean over open channels. A no-communication policy ignores the
            // channel entirely (it trained with a zero aggregate).
            Vector incoming = Vector::Zero(policy.config().comm_dim);
            int open = 0;
            for (int j = 0; j < n && cfg.variant != Variant::NoComm; ++j) {
              if (j == i || !gates[static_cast<std::size_t>(j)]) continue;
              const Vector& c = comms[static_cast<std::size_t>(j)];
              require(c.size() == incoming.size(),
                      "evaluate: mixed comm dimensions (dataset and "
                      "checkpoint disagree)");
              incoming += c;
              ++open;
            }
            if (open > 0) incoming /= open;
            StepOutput out = agent_step(policy, obs, i, incoming, st.carry);
            const int action =
                static_cast<int>(nn::categorical_greedy(out.action_logits)
                                     .index);
            int gate = 0;
            if (cfg.variant == Variant::NoComm) {
              gate = 0;
            } else if (cfg.no_gating) {
              gate = 1;
            } else {
              gate = greedy_gate(out.gate_prob).bit;
            }
            st.carry = out.carry;
            st.carry.last_comm = out.comm;
            st.carry.last_gate = gate;
            new_comm[static_cast<std::size_t>(i)] = out.comm;
            new_gate[static_cast<std::size_t>(i)] = gate;
            joint[static_cast<std::size_t>(i)] = action;

            StepRecord rec;
            rec.obs = obs;
            rec.action = action;
            rec.gate = gate;
            rec.value = out.value;
            rec.comm = out.comm;
            rec.position = env.agent_position(state, i);
            step_records.push_back(std::move(rec));
          } else if (st.oracle) {
            OracleDecision d = st.oracle->act(state, inbox_for(i));
            joint[static_cast<std::size_t>(i)] = d.action;
            new_text[static_cast<std::size_t>(i)] = d.message;
          } else {
            // External seat over the wire, session protocol.
            const std::string obs_text = render(env, state, i, inbox_for(i));
            transport->write_line(json{{"type", "obs"},
                                       {"episode", e},
                                       {"round", state.t},
                                       {"agent", i},
                                       {"text", obs_text}}
                                      .dump());
            bool decided = false;
            for (int attempt = 0; attempt < opt.max_retries && !decided;
                 ++attempt) {
              auto line = transport->read_line(opt.timeout_ms);
              if (!line) break;
              json j = json::parse(*line, nullptr, false);
              if (j.is_discarded() || !j.is_object() ||
                  j.value("type", std::string{}) != "act" ||
                  !j.contains("text") || !j["text"].is_string()) {
                transport->write_line(
                    json{{"type", "error"},
                         {"text",
                          "expected {\"type\":\"act\",\"text\":\"...\"}"}}
                        .dump());
                continue;
              }
              ParseOutcome po =
                  parse_reply(j["text"].get<std::string>(), env, state, i);
              if (!po.ok) {
                transport->write_line(json{{"type", "feedback"},
                                           {"text", po.feedback}}
                                          .dump());
                continue;
              }
              joint[static_cast<std::size_t>(i)] = po.action;
              new_text[static_cast<std::size_t>(i)] = po.message;
              decided = true;
            }
            if (!decided) {
              joint[static_cast<std::size_t>(i)] = eval_default_action(env);
              report.external_timeouts += 1;
            }
          }
        }

        StepResult sr = env.step(state, joint);
        {
          // Rewards are indexed by agent; records only cover policy seats.
          std::size_t rec_idx = 0;
          for (int i = 0; i < n; ++i) {
            if (seats[static_cast<std::size_t>(i)].ckpt) {
              step_records[rec_idx].reward =
                  sr.rewards[static_cast<std::size_t>(i)];
              ++rec_idx;
            }
          }
        }
        for (double r : sr.rewards) score += r;
        if (!step_records.empty()) {
          trace.steps.push_back(std::move(step_records));
        }
        state = std::move(sr.state);
        for (int i = 0; i < n; ++i) {
          auto& st = seats[static_cast<std::size_t>(i)];
          if (st.ckpt) {
            st.prev_comm = new_comm[static_cast<std::size_t>(i)];
            st.prev_gate = new_gate[static_cast<std::size_t>(i)];
          } else {
            st.prev_text = new_text[static_cast<std::size_t>(i)];
          }
        }
      }

      if (env.kind() == EnvKind::Usar) score = state.usar.score;
      EvalEpisode row;
      row.seed = seed;
      row.episode = e;
      row.length = state.t;
      row.success = env.success(state);
      row.score = score;
      report.episodes.push_back(row);
      if (!trace.steps.empty()) {
        trace.length = state.t;
        trace.success = row.success;
        for (const auto& step : trace.steps) {
          for (const auto& rec : step) trace.total_return += rec.reward;
        }
        if (env.kind() == EnvKind::PredatorPrey) trace.prey = state.pp.prey;
        policy_traces.push_back(std::move(trace));
      }
    }
  }

  if (opt.with_metrics && !policy_traces.empty()) {
    if (ds) {
      report.align = alignment(policy_traces, *ds);
    }
    std::vector<Vector> comms, positions;
    for (const auto& ep : policy_traces) {
      for (const auto& step : ep.steps) {
        for (const auto& rec : step) {
          comms.push_back(rec.comm);
          positions.push_back(rec.position);
        }
      }
    }
    report.topo = topo_similarity(policy_traces, env, opt.topo);
    const std::size_t all_pairs = comms.size() * (comms.size() - 1) / 2;
    report.topo_pairs = std::min(all_pairs, opt.topo.max_pairs);

    if (comms.size() >= 2) {
      double eps = opt.eps;
      if (eps <= 0.0) eps = suggest_eps(comms, opt.min_pts);
      if (eps > 0.0) {
        report.comm_points = comms;
        report.comm_labels = dbscan(comms, eps, opt.min_pts);
        report.comm_xy = pca2(comms);
        std::map<int, std::vector<std::size_t>> members;
        for (std::size_t i = 0; i < report.comm_labels.size(); ++i) {
          if (report.comm_labels[i] == kNoiseLabel) {
            report.noise_points += 1;
          } else {
            members[report.comm_labels[i]].push_back(i);
          }
        }
        for (const auto& [id, idx] : members) {
          ClusterSummary cs;
          cs.id = id;
          cs.size = idx.size();
          if (ds) {
            Vector centroid = Vector::Zero(comms[idx[0]].size());
            for (std::size_t i : idx) centroid += comms[i];
            centroid /= static_cast<double>(idx.size());
            cs.message = ds->translate(centroid).message;
          }
          report.clusters.push_back(std::move(cs));
        }
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Zero-shot holdout evaluation
// ---------------------------------------------------------------------------

std::vector<ZeroShotRow> zero_shot_eval(
    const Environment& env, const Checkpoint& ckpt,
    const GroundingDataset& full_ds,
    const std::vector<std::array<int, 2>>& cells, const ZeroShotOptions& opt) {
  require(env.kind() == EnvKind::PredatorPrey,
          "zero_shot_eval: holdout spawning is a predator-prey experiment");
  require(opt.episodes_per_cell >= 1, "zero_shot_eval: need episodes");
  const AgentPolicy& policy = ckpt.state.policy;
  const TrainConfig& cfg = ckpt.config;
  const int n = env.n_agents();
  const Index D = policy.config().comm_dim;
  require(full_ds.dim() == D,
          "zero_shot_eval: dataset dimension does not match the checkpoint");

  std::vector<ZeroShotRow> rows;
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    const std::array<int, 2> cell = cells[ci];
    require(cell[0] >= 0 && cell[0] < env.pp_config().grid && cell[1] >= 0 &&
                cell[1] < env.pp_config().grid,
            "zero_shot_eval: cell out of bounds");
    ZeroShotRow row;
    row.cell = cell;
    double cos_sum = 0.0, bleu_sum = 0.0, best_cos = -2.0;
    int successes = 0;

    for (int ep = 0; ep < opt.episodes_per_cell; ++ep) {
      RngStream rng = rng_stream(opt.seed, "zeroshot", ci,
                                 static_cast<std::uint64_t>(ep));
      EnvState state = env.reset(rng);
      state.pp.prey = cell;  // force the held-out spawn
      for (int i = 0; i < n; ++i) {
        state.pp.reached[static_cast<std::size_t>(i)] =
            state.pp.predators[static_cast<std::size_t>(i)] == cell;
      }

      std::vector<AgentCarry> carries(static_cast<std::size_t>(n));
      for (auto& c : carries) c = policy.initial_carry();
      std::vector<Vector> prev_comm(static_cast<std::size_t>(n),
                                    Vector::Zero(D));
      std::vector<int> prev_gate(static_cast<std::size_t>(n), 0);

      while (!env.finished(state)) {
        std::vector<int> joint(static_cast<std::size_t>(n));
        std::vector<Vector> comm_now(static_cast<std::size_t>(n));
        std::vector<int> gate_now(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
          const auto iu = static_cast<std::size_t>(i);
          const Vector obs = env.observe(state, i);
          const Vector incoming = aggregate(prev_comm, prev_gate, i);
          StepOutput out = agent_step(policy, obs, i, incoming, carries[iu]);
          const int action =
              static_cast<int>(nn::categorical_greedy(out.action_logits)
                                   .index);
          int gate = 0;
          if (cfg.variant == Variant::NoComm) {
            gate = 0;
          } else if (cfg.no_gating) {
            gate = 1;
          } else {
            gate = greedy_gate(out.gate_prob).bit;
          }
          carries[iu] = out.carry;
          carries[iu].last_comm = out.comm;
          carries[iu].last_gate = gate;
          joint[iu] = action;
          comm_now[iu] = out.comm;
          gate_now[iu] = gate;

          const GroundingEntry* hit = full_ds.lookup(obs, action);
          if (hit && hit->meta.prey_known.value_or(false) &&
              hit->meta.prey.has_value() && *hit->meta.prey == cell) {
            const double c = safe_cosine(out.comm, hit->embedding);
            const GroundingDataset::Translation tr =
                full_ds.translate(out.comm);
            cos_sum += c;
            bleu_sum += bleu(tr.message, hit->message);
            row.grounded_steps += 1;
            if (c > best_cos) {
              best_cos = c;
              row.example_message = tr.message;
            }
          }
        }
        StepResult sr = env.step(state, joint);
        state = std::move(sr.state);
        prev_comm = std::move(comm_now);
        prev_gate = std::move(gate_now);
      }
      successes += env.success(state) ? 1 : 0;
    }

    row.episodes = opt.episodes_per_cell;
    row.success_rate =
        static_cast<double>(successes) / opt.episodes_per_cell;
    if (row.grounded_steps == 0) {
      row.absent = true;
    } else {
      row.mean_cosine = cos_sum / static_cast<double>(row.grounded_steps);
      row.mean_bleu = bleu_sum / static_cast<double>(row.grounded_steps);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  require(ec == std::errc(), "fmt_double failed");
  return std::string(buf, p);
}

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  out += '"';
  return out;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

json vector_to_json(const Vector& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Vector vector_from_json(const json& a) {
  Vector v(static_cast<Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    v[static_cast<Index>(i)] = a[i].get<double>();
  }
  return v;
}

const char* kPalette[] = {"#4c78a8", "#f58518", "#54a24b", "#e45756",
                          "#72b7b2", "#eeca3b", "#b279a2", "#ff9da6",
                          "#9d755d", "#bab0ac"};

void write_svg(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path);
  const int W = 720, H = 560, margin = 40;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H
      << "\">\n";
  out << "<rect width=\"" << W << "\" height=\"" << H
      << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << margin << "\" y=\"24\" font-size=\"16\" "
      << "font-family=\"sans-serif\">Communication space (" << report.env
      << ", " << xml_escape(report.variant) << ")</text>\n";
  if (report.comm_xy.empty()) {
    out << "<text x=\"" << margin
        << "\" y=\"60\" font-size=\"13\" font-family=\"sans-serif\" "
        << "fill=\"#777\">no communication samples</text>\n</svg>\n";
    return;
  }
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& p : report.comm_xy) {
    xmin = std::min(xmin, p[0]);
    xmax = std::max(xmax, p[0]);
    ymin = std::min(ymin, p[1]);
    ymax = std::max(ymax, p[1]);
  }
  const double xspan = xmax - xmin > 0 ? xmax - xmin : 1.0;
  const double yspan = ymax - ymin > 0 ? ymax - ymin : 1.0;
  auto sx = [&](double x) {
    return margin + (x - xmin) / xspan * (W - 2 * margin);
  };
  auto sy = [&](double y) {
    return H - margin - (y - ymin) / yspan * (H - 2 * margin);
  };
  for (std::size_t i = 0; i < report.comm_xy.size(); ++i) {
    const int label =
        i < report.comm_labels.size() ? report.comm_labels[i] : kNoiseLabel;
    const char* color =
        label == kNoiseLabel
            ? "#bbbbbb"
            : kPalette[static_cast<std::size_t>(label) % 10];
    out << "<circle cx=\"" << sx(report.comm_xy[i][0]) << "\" cy=\""
        << sy(report.comm_xy[i][1]) << "\" r=\"3\" fill=\"" << color
        << "\" fill-opacity=\"0.6\"/>\n";
  }
  // Annotate each cluster at its 2-D centroid with the nearest reference.
  for (const auto& c : report.clusters) {
    double cx = 0, cy = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < report.comm_xy.size(); ++i) {
      if (i < report.comm_labels.size() && report.comm_labels[i] == c.id) {
        cx += report.comm_xy[i][0];
        cy += report.comm_xy[i][1];
        ++count;
      }
    }
    if (!count) continue;
    cx /= static_cast<double>(count);
    cy /= static_cast<double>(count);
    out << "<text x=\"" << sx(cx) << "\" y=\"" << sy(cy)
        << "\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#222\">"
        << xml_escape(c.message) << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace

void write_report(const EvalReport& report, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);

  json j;
  j["env"] = report.env;
  j["variant"] = report.variant;
  j["seeds"] = report.seeds;
  j["episodes"] = json::array();
  for (const auto& e : report.episodes) {
    j["episodes"].push_back({{"seed", e.seed},
                             {"episode", e.episode},
                             {"length", e.length},
                             {"success", e.success},
                             {"score", e.score}});
  }
  j["summary"] = {{"n_episodes", report.n_episodes()},
                  {"mean_length", report.mean_length()},
                  {"sd_length", report.sd_length()},
                  {"success_rate", report.success_rate()},
                  {"mean_score", report.mean_score()}};
  if (report.align) {
    j["alignment"] = {{"mean_cosine", report.align->mean_cosine},
                      {"mean_bleu", report.align->mean_bleu},
                      {"grounded_steps", report.align->grounded_steps}};
  } else {
    j["alignment"] = nullptr;
  }
  if (report.topo) {
    j["topographic"] = {{"rho", *report.topo}, {"pairs", report.topo_pairs}};
  } else {
    j["topographic"] = nullptr;
  }
  j["clusters"] = json::array();
  for (const auto& c : report.clusters) {
    j["clusters"].push_back(
        {{"id", c.id}, {"size", c.size}, {"message", c.message}});
  }
  j["noise_points"] = report.noise_points;
  j["external_timeouts"] = report.external_timeouts;
  j["comm_points"] = json::array();
  for (const auto& p : report.comm_points) {
    j["comm_points"].push_back(vector_to_json(p));
  }
  j["comm_labels"] = report.comm_labels;
  j["comm_xy"] = json::array();
  for (const auto& p : report.comm_xy) {
    j["comm_xy"].push_back({p[0], p[1]});
  }
  j["zero_shot"] = json::array();
  for (const auto& z : report.zero_shot) {
    j["zero_shot"].push_back({{"cell", {z.cell[0], z.cell[1]}},
                              {"episodes", z.episodes},
                              {"success_rate", z.success_rate},
                              {"grounded_steps", z.grounded_steps},
                              {"absent", z.absent},
                              {"mean_cosine", z.mean_cosine},
                              {"mean_bleu", z.mean_bleu},
                              {"example_message", z.example_message}});
  }
  {
    std::ofstream out(dir / "report.json");
    require(out.good(), "cannot write report.json in " + out_dir);
    out << j.dump(2) << "\n";
  }
  {
    std::ofstream out(dir / "report.csv");
    require(out.good(), "cannot write report.csv in " + out_dir);
    out << "env,variant,seed,episode,length,success,score\n";
    for (const auto& e : report.episodes) {
      out << report.env << "," << csv_quote(report.variant) << "," << e.seed
          << "," << e.episode << "," << e.length << ","
          << (e.success ? 1 : 0) << "," << fmt_double(e.score) << "\n";
    }
  }
  {
    std::ofstream out(dir / "clusters.csv");
    require(out.good(), "cannot write clusters.csv in " + out_dir);
    out << "cluster,size,message\n";
    for (const auto& c : report.clusters) {
      out << c.id << "," << c.size << "," << csv_quote(c.message) << "\n";
    }
  }
  {
    std::ofstream out(dir / "zero_shot.csv");
    require(out.good(), "cannot write zero_shot.csv in " + out_dir);
    out << "row,col,episodes,success_rate,grounded_steps,absent,mean_cosine,"
           "mean_bleu,example_message\n";
    for (const auto& z : report.zero_shot) {
      out << z.cell[0] << "," << z.cell[1] << "," << z.episodes << ","
          << fmt_double(z.success_rate) << "," << z.grounded_steps << ","
          << (z.absent ? 1 : 0) << "," << fmt_double(z.mean_cosine) << ","
          << fmt_double(z.mean_bleu) << "," << csv_quote(z.example_message)
          << "\n";
    }
  }
  write_svg(report, (dir / "comm_space.svg").string());
}

EvalReport load_report(const std::string& dir) {
  std::ifstream in(std::filesystem::path(dir) / "report.json");
  require(in.good(), "cannot open report.json in " + dir);
  json j = json::parse(in, nullptr, false);
  require(!j.is_discarded(), dir + "/report.json: malformed JSON");

  EvalReport report;
  report.env = j.at("env").get<std::string>();
  report.variant = j.at("variant").get<std::string>();
  report.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& e : j.at("episodes")) {
    EvalEpisode row;
    row.seed = e.at("seed").get<std::uint64_t>();
    row.episode = e.at("episode").get<int>();
    row.length = e.at("length").get<int>();
    row.success = e.at("success").get<bool>();
    row.score = e.at("score").get<double>();
    report.episodes.push_back(row);
  }
  if (!j.at("alignment").is_null()) {
    AlignmentStats a;
    a.mean_cosine = j["alignment"].at("mean_cosine").get<double>();
    a.mean_bleu = j["alignment"].at("mean_bleu").get<double>();
    a.grounded_steps = j["alignment"].at("grounded_steps").get<std::size_t>();
    report.align = a;
  }
  if (!j.at("topographic").is_null()) {
    report.topo = j["topographic"].at("rho").get<double>();
    report.topo_pairs = j["topographic"].at("pairs").get<std::size_t>();
  }
  for (const auto& c : j.at("clusters")) {
    ClusterSummary cs;
    cs.id = c.at("id").get<int>();
    cs.size = c.at("size").get<std::size_t>();
    cs.message = c.at("message").get<std::string>();
    report.clusters.push_back(std::move(cs));
  }
  report.noise_points = j.at("noise_points").get<std::size_t>();
  report.external_timeouts = j.at("external_timeouts").get<std::size_t>();
  for (const auto& p : j.at("comm_points")) {
    report.comm_points.push_back(vector_from_json(p));
  }
  report.comm_labels = j.at("comm_labels").get<std::vector<int>>();
  for (const auto& p : j.at("comm_xy")) {
    report.comm_xy.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  for (const auto& z : j.at("zero_shot")) {
    ZeroShotRow row;
    row.cell = {z.at("cell")[0].get<int>(), z.at("cell")[1].get<int>()};
    row.episodes = z.at("episodes").get<int>();
    row.success_rate = z.at("success_rate").get<double>();
    row.grounded_steps = z.at("grounded_steps").get<std::size_t>();
    row.absent = z.at("absent").get<bool>();
    row.mean_cosine = z.at("mean_cosine").get<double>();
    row.mean_bleu = z.at("mean_bleu").get<double>();
    row.example_message = z.at("example_message").get<std::string>();
    report.zero_shot.push_back(std::move(row));
  }
  return report;
}

}  // namespace marlcomm
