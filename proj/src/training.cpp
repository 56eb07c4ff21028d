#include "marlcomm/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace marlcomm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::LangGround: return "langground";
    case Variant::Ic3Net: return "ic3net";
    case Variant::NoComm: return "nocomm";
    case Variant::AeComm: return "aecomm";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "langground") return Variant::LangGround;
  if (s == "ic3net") return Variant::Ic3Net;
  if (s == "nocomm") return Variant::NoComm;
  if (s == "aecomm") return Variant::AeComm;
  throw MarlError("unknown variant: " + s +
                  " (expected langground|ic3net|nocomm|aecomm)");
}

namespace {

bool is_usar_env(const std::string& env) { return env == "usar"; }

}  // namespace

void TrainConfig::resolve() {
  require(is_env_preset(env), "unknown env preset: " + env);
  const bool usar = is_usar_env(env);
  if (lambda < 0.0) lambda = usar ? 10.0 : 1.0;
  if (learning_rate < 0.0) learning_rate = usar ? 1e-4 : 1e-3;

  if (variant == Variant::Ic3Net || variant == Variant::NoComm) {
    lambda = 0.0;
    require(grounding_path.empty(),
            to_string(variant) + " does not take a grounding dataset");
  }
  if (variant == Variant::AeComm) {
    require(grounding_path.empty(),
            "aecomm is self-supervised and takes no grounding dataset");
  }
  if (variant == Variant::LangGround && lambda > 0.0) {
    require(!grounding_path.empty(),
            "langground with lambda > 0 requires a grounding dataset");
  }
  require(lambda >= 0.0, "lambda must be >= 0");
  require(gamma >= 0.0 && gamma <= 1.0, "gamma must be in [0,1]");
  require(batch_steps >= 1, "batch_steps must be >= 1");
  require(updates_per_epoch >= 1, "updates_per_epoch must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(hidden >= 1 && comm_dim >= 1, "hidden/comm_dim must be >= 1");
  require(learning_rate > 0.0, "learning_rate must be > 0");
  require(grounding_fraction > 0.0 && grounding_fraction <= 1.0,
          "grounding_fraction must be in (0,1]");
  require(optimizer == "rmsprop" || optimizer == "sgd",
          "optimizer must be rmsprop or sgd");
  if (!hold_out.empty()) {
    require(!usar, "hold_out applies to predator-prey envs only");
  }
}

std::string TrainConfig::canonical_json() const {
  json holds = json::array();
  for (const auto& c : hold_out) holds.push_back({c[0], c[1]});
  json j = {{"env", env},
            {"hold_out", holds},
            {"variant", to_string(variant)},
            {"lambda", lambda},
            {"gamma", gamma},
            {"batch_steps", batch_steps},
            {"updates_per_epoch", updates_per_epoch},
            {"epochs", epochs},
            {"hidden", hidden},
            {"comm_dim", comm_dim},
            {"learning_rate", learning_rate},
            {"value_coef", value_coef},
            {"entropy_coef", entropy_coef},
            {"clip_norm", clip_norm},
            {"optimizer", optimizer},
            {"seed", seed},
            {"grounding_path", grounding_path},
            {"grounding_fraction", grounding_fraction},
            {"mask_seed", mask_seed},
            {"no_gating", no_gating}};
  return j.dump(2);
}

std::uint64_t TrainConfig::config_hash() const {
  return fnv1a(canonical_json());
}

TrainConfig config_from_json(const std::string& json_text) {
  json j = json::parse(json_text, nullptr, false);
  require(!j.is_discarded(), "config: malformed JSON");
  require(j.is_object(), "config: top level must be an object");
  static const std::set<std::string> known = {
      "env",           "hold_out",          "variant",
      "lambda",        "gamma",             "batch_steps",
      "updates_per_epoch", "epochs",        "hidden",
      "comm_dim",      "learning_rate",     "value_coef",
      "entropy_coef",  "clip_norm",         "optimizer",
      "seed",          "grounding_path",    "grounding_fraction",
      "mask_seed",     "no_gating"};
  for (const auto& [key, value] : j.items()) {
    require(known.count(key) > 0, "config: unknown key \"" + key + "\"");
  }
  TrainConfig cfg;
  cfg.env = j.value("env", cfg.env);
  if (j.contains("hold_out")) {
    for (const auto& cell : j["hold_out"]) {
      require(cell.is_array() && cell.size() == 2,
              "config: hold_out entries must be [row, col]");
      cfg.hold_out.push_back({cell[0].get<int>(), cell[1].get<int>()});
    }
  }
  if (j.contains("variant")) {
    cfg.variant = variant_from_string(j["variant"].get<std::string>());
  }
  cfg.lambda = j.value("lambda", cfg.lambda);
  cfg.gamma = j.value("gamma", cfg.gamma);
  cfg.batch_steps = j.value("batch_steps", cfg.batch_steps);
  cfg.updates_per_epoch = j.value("updates_per_epoch", cfg.updates_per_epoch);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.hidden = j.value("hidden", cfg.hidden);
  cfg.comm_dim = j.value("comm_dim", cfg.comm_dim);
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.value_coef = j.value("value_coef", cfg.value_coef);
  cfg.entropy_coef = j.value("entropy_coef", cfg.entropy_coef);
  cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
  cfg.optimizer = j.value("optimizer", cfg.optimizer);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.grounding_path = j.value("grounding_path", cfg.grounding_path);
  cfg.grounding_fraction = j.value("grounding_fraction", cfg.grounding_fraction);
  cfg.mask_seed = j.value("mask_seed", cfg.mask_seed);
  cfg.no_gating = j.value("no_gating", cfg.no_gating);
  return cfg;
}

void apply_preset(TrainConfig& cfg, const std::string& preset) {
  const bool usar = is_usar_env(cfg.env);
  if (preset == "desk") {
    cfg.hidden = 64;
    cfg.comm_dim = 32;
    cfg.epochs = 300;
    cfg.batch_steps = 150;
    cfg.updates_per_epoch = 10;
  } else if (preset == "paper") {
    cfg.hidden = 256;
    cfg.comm_dim = 256;
    cfg.epochs = usar ? 500 : 2000;
    cfg.batch_steps = 500;
    cfg.updates_per_epoch = 10;
  } else {
    throw MarlError("unknown preset: " + preset + " (expected desk|paper)");
  }
}

Environment env_from_config(const TrainConfig& cfg) {
  Environment base = make_env(cfg.env);
  if (base.kind() == EnvKind::PredatorPrey && !cfg.hold_out.empty()) {
    PredatorPreyConfig pp = base.pp_config();
    pp.held_out_prey_spawns = cfg.hold_out;
    return Environment(pp);
  }
  return base;
}

AgentPolicy policy_from_config(const TrainConfig& cfg) {
  Environment env = env_from_config(cfg);
  PolicyConfig pc;
  pc.obs_dim = env.obs_dim();
  pc.n_actions = env.n_actions();
  pc.hidden = cfg.hidden;
  pc.comm_dim = cfg.comm_dim;
  pc.n_agents = env.n_agents();
  pc.append_agent_id = env.kind() == EnvKind::Usar;
  pc.with_decoder = cfg.variant == Variant::AeComm;
  pc.init_seed = cfg.seed;
  return AgentPolicy(pc);
}

std::optional<GroundingDataset> grounding_from_config(const TrainConfig& cfg) {
  if (cfg.variant != Variant::LangGround || cfg.lambda == 0.0 ||
      cfg.grounding_path.empty()) {
    return std::nullopt;
  }
  GroundingDataset ds = load_grounding(cfg.grounding_path);
  require(ds.dim() == cfg.comm_dim,
          "grounding dataset dimension " + std::to_string(ds.dim()) +
              " does not match comm_dim " + std::to_string(cfg.comm_dim));
  if (cfg.grounding_fraction < 1.0) {
    ds = ds.masked(cfg.grounding_fraction, cfg.mask_seed);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

std::vector<double> discounted_returns(const std::vector<double>& rewards,
                                       double gamma) {
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t k = rewards.size(); k > 0; --k) {
    acc = rewards[k - 1] + gamma * acc;
    out[k - 1] = acc;
  }
  return out;
}

std::vector<EpisodeTrace> collect(const Environment& env,
                                  const AgentPolicy& policy,
                                  const GroundingDataset* grounding,
                                  const RolloutOptions& opt,
                                  std::uint64_t seed,
                                  std::uint64_t& episode_counter) {
  const int n = env.n_agents();
  require(policy.config().obs_dim == env.obs_dim(),
          "collect: policy/env observation dims differ");
  require(policy.config().n_actions == env.n_actions(),
          "collect: policy/env action spaces differ");

  std::vector<EpisodeTrace> traces;
  int total_steps = 0;
  while (total_steps < opt.n_steps) {
    const std::uint64_t ep = episode_counter++;
    RngStream env_rng = rng_stream(seed, "env", ep);
    std::vector<RngStream> act_rng;
    act_rng.reserve(n);
    for (int i = 0; i < n; ++i) {
      act_rng.push_back(rng_stream(seed, "act", ep, i));
    }

    EnvState state = env.reset(env_rng);
    EpisodeTrace trace;
    if (env.kind() == EnvKind::PredatorPrey) trace.prey = state.pp.prey;

    std::vector<AgentCarry> carry(n);
    for (int i = 0; i < n; ++i) carry[i] = policy.initial_carry();
    std::vector<Vector> prev_comms(n);
    std::vector<int> prev_gates(n, 0);

    while (!env.finished(state)) {
      const int t = state.t;
      trace.steps.emplace_back(n);
      std::vector<int> joint(n);
      std::vector<Vector> comms(n);
      std::vector<int> gates(n);
      for (int i = 0; i < n; ++i) {
        StepRecord& rec = trace.steps.back()[static_cast<std::size_t>(i)];
        rec.obs = env.observe(state, i);
        rec.position = env.agent_position(state, i);
        const Vector incoming =
            t == 0 ? Vector::Zero(policy.config().comm_dim)
                   : aggregate(prev_comms, prev_gates, i);
        StepOutput o = agent_step(policy, rec.obs, i, incoming, carry[i]);
        carry[i] = o.carry;

        const nn::SampleResult a =
            opt.greedy ? nn::categorical_greedy(o.action_logits)
                       : nn::categorical_sample(o.action_logits, act_rng[i]);
        rec.action = static_cast<int>(a.index);
        rec.action_logprob = a.logprob;
        rec.value = o.value;
        rec.comm = o.comm;
        rec.cache = std::move(o.cache);
        rec.enc_out = rec.cache.enc_pre.array().tanh();

        if (opt.variant == Variant::NoComm) {
          rec.gate = 0;
          rec.gate_logprob = 0.0;
        } else if (opt.no_gating) {
          rec.gate = 1;
          rec.gate_logprob = 0.0;
        } else {
          const double p =
              std::clamp(o.gate_prob, 1e-12, 1.0 - 1e-12);
          const GateSample g =
              opt.greedy ? greedy_gate(p) : sample_gate(p, act_rng[i]);
          rec.gate = g.bit;
          rec.gate_logprob = g.logprob;
        }

        if (grounding != nullptr) {
          if (const GroundingEntry* hit = grounding->lookup(rec.obs, rec.action)) {
            rec.has_ref = true;
            rec.ref_embedding = hit->embedding;
          }
        }
        joint[i] = rec.action;
        comms[i] = rec.comm;
        gates[i] = rec.gate;
      }
      StepResult sr = env.step(state, joint);
      for (int i = 0; i < n; ++i) {
        trace.steps.back()[static_cast<std::size_t>(i)].reward = sr.rewards[i];
        trace.total_return += sr.rewards[i];
      }
      state = std::move(sr.state);
      prev_comms = std::move(comms);
      prev_gates = std::move(gates);
    }
    trace.length = static_cast<int>(trace.steps.size());
    trace.success = env.success(state);
    total_steps += trace.length;
    traces.push_back(std::move(trace));
  }
  return traces;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double gate_logprob_from_logit(double logit, int bit) {
  return bit ? -softplus(-logit) : -softplus(logit);
}

// Re-runs the forward pass of one episode from stored observations and the
// realized actions/gates, refreshing every StepCache. Collection-time record
// fields (value, comm, enc_out) are left alone: they are the detached
// baselines, so the loss stays a pure function of the current parameters.
void reforward_episode(const AgentPolicy& policy, EpisodeTrace& trace) {
  const int n = trace.steps.empty()
                    ? 0
                    : static_cast<int>(trace.steps.front().size());
  std::vector<AgentCarry> carry(n);
  for (int i = 0; i < n; ++i) carry[i] = policy.initial_carry();
  std::vector<Vector> prev_comms(n);
  std::vector<int> prev_gates(n, 0);
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    std::vector<Vector> comms(n);
    std::vector<int> gates(n);
    for (int i = 0; i < n; ++i) {
      StepRecord& rec = trace.steps[t][static_cast<std::size_t>(i)];
      const Vector incoming =
          t == 0 ? Vector::Zero(policy.config().comm_dim)
                 : aggregate(prev_comms, prev_gates, i);
      StepOutput o = agent_step(policy, rec.obs, i, incoming, carry[i]);
      carry[i] = o.carry;
      rec.cache = std::move(o.cache);
      comms[i] = rec.cache.comm;
      gates[i] = rec.gate;
    }
    prev_comms = std::move(comms);
    prev_gates = std::move(gates);
  }
}

}  // namespace

LossBreakdown batch_loss(AgentPolicy& policy,
                         std::vector<EpisodeTrace>& traces,
                         const LossOptions& opt, bool accumulate,
                         bool reforward) {
  const PolicyConfig& pcfg = policy.config();
  const Index H = pcfg.hidden;
  const Index D = pcfg.comm_dim;
  const bool gate_in_loss =
      opt.variant != Variant::NoComm && !opt.no_gating;
  const bool align_sup =
      opt.variant == Variant::LangGround && opt.lambda > 0.0;
  const bool align_recon = opt.variant == Variant::AeComm && opt.lambda > 0.0;
  require(!align_recon || policy.params().has("dec.W"),
          "batch_loss: aecomm requires a policy built with a decoder head");

  LossBreakdown out;
  for (const auto& trace : traces) {
    for (const auto& step : trace.steps) {
      out.agent_steps += static_cast<long>(step.size());
      for (const auto& rec : step) {
        if (rec.has_ref) ++out.grounded_steps;
        out.gate_open_rate += rec.gate;
      }
    }
  }
  require(out.agent_steps > 0, "batch_loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(out.agent_steps);
  const double inv_g =
      out.grounded_steps > 0 ? 1.0 / static_cast<double>(out.grounded_steps)
                             : 0.0;
  out.gate_open_rate *= inv_n;

  for (auto& trace : traces) {
    if (reforward) reforward_episode(policy, trace);
    const int T = trace.length;
    const int n = T > 0 ? static_cast<int>(trace.steps.front().size()) : 0;

    // Per-agent discounted returns.
    std::vector<std::vector<double>> rets(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      std::vector<double> rewards(static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) {
        rewards[static_cast<std::size_t>(t)] =
            trace.steps[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]
                .reward;
      }
      rets[static_cast<std::size_t>(i)] = discounted_returns(rewards, opt.gamma);
    }

    // Forward accounting from the (possibly refreshed) caches.
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < n; ++i) {
        const StepRecord& rec =
            trace.steps[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
        const StepCache& cache = rec.cache;
        const double R = rets[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
        const double adv = R - rec.value;      // detached baseline
        const double vres = R - cache.value;   // value-head residual
        if (opt.include_rl) {
          double lp = nn::log_softmax_at(cache.action_logits, rec.action);
          if (gate_in_loss) {
            lp += gate_logprob_from_logit(cache.gate_logit, rec.gate);
          }
          out.policy_term += -lp * adv * inv_n;
          out.value_term += opt.value_coef * vres * vres * inv_n;
          out.entropy_term +=
              -opt.entropy_coef * nn::softmax_entropy(cache.action_logits) *
              inv_n;
        }
        if (rec.has_ref) {
          Vector c = cache.comm;
          if (c.norm() == 0.0) c[0] = 1e-12;  // cosine guard
          out.mean_cosine += nn::cosine(c, rec.ref_embedding) * inv_g;
        }
      }
    }
  }

  if (align_sup) {
    double sup = 0.0;
    for (const auto& trace : traces) {
      for (const auto& step : trace.steps) {
        for (const auto& rec : step) {
          if (!rec.has_ref) continue;
          Vector c = rec.cache.comm;
          if (c.norm() == 0.0) c[0] = 1e-12;
          sup += (1.0 - nn::cosine(c, rec.ref_embedding)) * inv_g;
        }
      }
    }
    out.sup = sup;
  }
  if (align_recon) {
    const Matrix& Wd = policy.params().at("dec.W").value;
    const Vector bd = policy.params().at("dec.b").value.col(0);
    double recon = 0.0;
    for (const auto& trace : traces) {
      for (const auto& step : trace.steps) {
        for (const auto& rec : step) {
          require(rec.enc_out.size() == H,
                  "batch_loss: aecomm needs encoder snapshots in the traces");
          const Vector r = nn::affine(Wd, bd, rec.cache.comm) - rec.enc_out;
          recon += r.squaredNorm() * inv_n;
        }
      }
    }
    out.recon = recon;
  }

  out.rl = out.policy_term + out.value_term + out.entropy_term;
  out.total = (opt.include_rl ? out.rl : 0.0);
  if (opt.include_alignment) {
    out.total += opt.lambda * (align_sup ? out.sup : 0.0) +
                 opt.lambda * (align_recon ? out.recon : 0.0);
  }

  if (!accumulate) return out;

  // ---- Reverse sweep, one episode at a time ----
  for (auto& trace : traces) {
    const int T = trace.length;
    const int n = T > 0 ? static_cast<int>(trace.steps.front().size()) : 0;
    std::vector<std::vector<double>> rets(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      std::vector<double> rewards(static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) {
        rewards[static_cast<std::size_t>(t)] =
            trace.steps[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]
                .reward;
      }
      rets[static_cast<std::size_t>(i)] = discounted_returns(rewards, opt.gamma);
    }

    std::vector<Vector> dh(static_cast<std::size_t>(n), Vector::Zero(H));
    std::vector<Vector> dc(static_cast<std::size_t>(n), Vector::Zero(H));
    // Channel gradient onto each agent's comm at the *previous* step.
    std::vector<Vector> d_comm_chan(static_cast<std::size_t>(n),
                                    Vector::Zero(D));
    for (int t = T - 1; t >= 0; --t) {
      std::vector<Vector> d_incoming(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        const StepRecord& rec =
            trace.steps[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)];
        const StepCache& cache = rec.cache;
        const double R = rets[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
        const double adv = R - rec.value;
        const double vres = R - cache.value;

        Vector d_logits = Vector::Zero(pcfg.n_actions);
        double d_value = 0.0;
        double d_gate_logit = 0.0;
        if (opt.include_rl) {
          nn::log_softmax_backward(cache.action_logits, rec.action,
                                   -adv * inv_n, d_logits);
          nn::softmax_entropy_backward(cache.action_logits,
                                       -opt.entropy_coef * inv_n, d_logits);
          d_value = -2.0 * opt.value_coef * vres * inv_n;
          if (gate_in_loss) {
            const double p = 1.0 / (1.0 + std::exp(-cache.gate_logit));
            d_gate_logit = -adv * (rec.gate - p) * inv_n;
          }
        }

        Vector d_comm = d_comm_chan[static_cast<std::size_t>(i)];
        if (opt.include_alignment && align_sup && rec.has_ref) {
          Vector c = cache.comm;
          if (c.norm() == 0.0) c[0] = 1e-12;
          nn::cosine_backward(c, rec.ref_embedding, -opt.lambda * inv_g,
                              d_comm);
        }
        if (opt.include_alignment && align_recon) {
          const Matrix& Wd = policy.params().at("dec.W").value;
          const Vector bd = policy.params().at("dec.b").value.col(0);
          const Vector resid = nn::affine(Wd, bd, cache.comm) - rec.enc_out;
          const Vector d_dec = 2.0 * opt.lambda * inv_n * resid;
          Vector d_dec_b = Vector::Zero(H);
          nn::affine_backward(Wd, cache.comm, d_dec,
                              policy.params().at("dec.W").grad, d_dec_b,
                              d_comm);
          policy.params().at("dec.b").grad.col(0) += d_dec_b;
        }

        StepGrad g = agent_step_backward(
            policy, cache, d_logits, d_value, d_gate_logit, d_comm,
            dh[static_cast<std::size_t>(i)], dc[static_cast<std::size_t>(i)]);
        dh[static_cast<std::size_t>(i)] = std::move(g.dh_prev);
        dc[static_cast<std::size_t>(i)] = std::move(g.dc_prev);
        d_incoming[static_cast<std::size_t>(i)] = std::move(g.d_incoming);
      }

      // Route receiver-side incoming gradients to the open senders at t-1.
      for (int i = 0; i < n; ++i) {
        d_comm_chan[static_cast<std::size_t>(i)].setZero();
      }
      if (t == 0) continue;
      const auto& prev = trace.steps[static_cast<std::size_t>(t - 1)];
      for (int r = 0; r < n; ++r) {
        int open = 0;
        for (int j = 0; j < n; ++j) {
          if (j != r && prev[static_cast<std::size_t>(j)].gate) ++open;
        }
        if (open == 0) continue;
        const Vector scaled =
            d_incoming[static_cast<std::size_t>(r)] / static_cast<double>(open);
        for (int j = 0; j < n; ++j) {
          if (j != r && prev[static_cast<std::size_t>(j)].gate) {
            d_comm_chan[static_cast<std::size_t>(j)] += scaled;
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc{} && res.ptr == s.data() + s.size(),
          where + ": bad number \"" + s + "\"");
  return v;
}

constexpr const char* kMetricsHeader =
    "epoch,mean_length,mean_return,success_rate,rl_loss,sup_loss,"
    "mean_cosine,gate_open_rate";

}  // namespace

void MetricsLog::append(const EpochRow& row) { rows_.push_back(row); }

void MetricsLog::save_csv(const std::string& path) const {
  std::ofstream out(path);
  require(out.good(), "cannot write metrics file: " + path);
  out << kMetricsHeader << "\n";
  for (const auto& r : rows_) {
    out << r.epoch << ',' << fmt_double(r.mean_length) << ','
        << fmt_double(r.mean_return) << ',' << fmt_double(r.success_rate)
        << ',' << fmt_double(r.rl_loss) << ',' << fmt_double(r.sup_loss)
        << ',' << fmt_double(r.mean_cosine) << ','
        << fmt_double(r.gate_open_rate) << "\n";
  }
  require(out.good(), "write failed for metrics file: " + path);
}

MetricsLog MetricsLog::load_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open metrics file: " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)),
          "metrics file is empty: " + path);
  require(line == kMetricsHeader, "metrics file has an unexpected header: " + path);
  MetricsLog log;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    require(cells.size() == 8, where + ": expected 8 columns");
    EpochRow r;
    r.epoch = static_cast<int>(parse_double(cells[0], where));
    r.mean_length = parse_double(cells[1], where);
    r.mean_return = parse_double(cells[2], where);
    r.success_rate = parse_double(cells[3], where);
    r.rl_loss = parse_double(cells[4], where);
    r.sup_loss = parse_double(cells[5], where);
    r.mean_cosine = parse_double(cells[6], where);
    r.gate_open_rate = parse_double(cells[7], where);
    log.append(r);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainResult train(const TrainConfig& raw_cfg, const EpochCallback& on_epoch) {
  TrainConfig cfg = raw_cfg;
  cfg.resolve();

  Environment env = env_from_config(cfg);
  std::optional<GroundingDataset> grounding = grounding_from_config(cfg);

  TrainResult result{policy_from_config(cfg)};
  result.optimizer.algo =
      cfg.optimizer == "sgd" ? nn::OptAlgo::Sgd : nn::OptAlgo::RmsProp;
  result.optimizer.learning_rate = cfg.learning_rate;

  RolloutOptions ropt;
  ropt.variant = cfg.variant;
  ropt.no_gating = cfg.no_gating;
  ropt.n_steps = cfg.batch_steps;

  LossOptions lopt;
  lopt.variant = cfg.variant;
  lopt.lambda = cfg.lambda;
  lopt.gamma = cfg.gamma;
  lopt.value_coef = cfg.value_coef;
  lopt.entropy_coef = cfg.entropy_coef;
  lopt.no_gating = cfg.no_gating;

  const GroundingDataset* ds = grounding ? &*grounding : nullptr;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double len_sum = 0.0, ret_sum = 0.0, succ_sum = 0.0;
    long episodes = 0;
    double rl_sum = 0.0, align_sum = 0.0;
    double cos_weighted = 0.0, gate_weighted = 0.0;
    long grounded_total = 0, agent_steps_total = 0;
    try {
      for (int update = 0; update < cfg.updates_per_epoch; ++update) {
        std::vector<EpisodeTrace> traces = collect(
            env, result.policy, ds, ropt, cfg.seed, result.episode_counter);
        LossBreakdown loss =
            batch_loss(result.policy, traces, lopt, /*accumulate=*/true);
        require(std::isfinite(loss.total), "loss is not finite");
        nn::clip_grad_norm(result.policy.params(), cfg.clip_norm);
        result.optimizer.step(result.policy.params());

        for (const auto& trace : traces) {
          len_sum += trace.length;
          ret_sum += trace.total_return;
          succ_sum += trace.success ? 1.0 : 0.0;
          ++episodes;
        }
        rl_sum += loss.rl;
        align_sum += cfg.variant == Variant::AeComm ? loss.recon : loss.sup;
        cos_weighted += loss.mean_cosine * loss.grounded_steps;
        grounded_total += loss.grounded_steps;
        gate_weighted += loss.gate_open_rate * loss.agent_steps;
        agent_steps_total += loss.agent_steps;
      }
    } catch (const MarlError& err) {
      throw MarlError("training aborted at epoch " + std::to_string(epoch) +
                      " (seed " + std::to_string(cfg.seed) +
                      "): " + err.what());
    }

    EpochRow row;
    row.epoch = epoch;
    row.mean_length = len_sum / episodes;
    row.mean_return = ret_sum / episodes;
    row.success_rate = succ_sum / episodes;
    row.rl_loss = rl_sum / cfg.updates_per_epoch;
    row.sup_loss = align_sum / cfg.updates_per_epoch;
    row.mean_cosine =
        grounded_total > 0 ? cos_weighted / grounded_total : 0.0;
    row.gate_open_rate =
        agent_steps_total > 0 ? gate_weighted / agent_steps_total : 0.0;
    result.metrics.append(row);
    if (on_epoch) on_epoch(epoch, result);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Trace dump
// ---------------------------------------------------------------------------

namespace {

json vec_json(const Vector& v) {
  json arr = json::array();
  for (Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Vector vec_from(const json& arr) {
  Vector v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    v[static_cast<Index>(i)] = arr[i].get<double>();
  }
  return v;
}

}  // namespace

void save_traces(const std::vector<EpisodeTrace>& traces,
                 const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write trace file: " + path);
  for (std::size_t e = 0; e < traces.size(); ++e) {
    const EpisodeTrace& trace = traces[e];
    for (std::size_t t = 0; t < trace.steps.size(); ++t) {
      json line = {{"episode", e},
                   {"t", t},
                   {"success", trace.success},
                   {"agents", json::array()}};
      if (trace.prey) line["prey"] = {(*trace.prey)[0], (*trace.prey)[1]};
      for (const StepRecord& rec : trace.steps[t]) {
        json a = {{"obs", vec_json(rec.obs)},
                  {"action", rec.action},
                  {"gate", rec.gate},
                  {"reward", rec.reward},
                  {"value", rec.value},
                  {"comm", vec_json(rec.comm)},
                  {"position", vec_json(rec.position)}};
        if (rec.has_ref) a["ref_embedding"] = vec_json(rec.ref_embedding);
        line["agents"].push_back(std::move(a));
      }
      out << line.dump() << "\n";
    }
  }
  require(out.good(), "write failed for trace file: " + path);
}

std::vector<EpisodeTrace> load_traces(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open trace file: " + path);
  std::vector<EpisodeTrace> traces;
  std::string line;
  int lineno = 0;
  long last_episode = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    json obj = json::parse(line, nullptr, false);
    require(!obj.is_discarded(), where + ": malformed JSON line");
    const long episode = obj.at("episode").get<long>();
    if (episode != last_episode) {
      require(episode == last_episode + 1,
              where + ": episodes must be contiguous");
      traces.emplace_back();
      last_episode = episode;
    }
    EpisodeTrace& trace = traces.back();
    trace.success = obj.value("success", false);
    if (obj.contains("prey")) {
      trace.prey = std::array<int, 2>{obj["prey"][0].get<int>(),
                                      obj["prey"][1].get<int>()};
    }
    std::vector<StepRecord> step;
    for (const auto& a : obj.at("agents")) {
      StepRecord rec;
      rec.obs = vec_from(a.at("obs"));
      rec.action = a.at("action").get<int>();
      rec.gate = a.at("gate").get<int>();
      rec.reward = a.at("reward").get<double>();
      rec.value = a.at("value").get<double>();
      rec.comm = vec_from(a.at("comm"));
      rec.position = vec_from(a.at("position"));
      if (a.contains("ref_embedding")) {
        rec.has_ref = true;
        rec.ref_embedding = vec_from(a["ref_embedding"]);
      }
      trace.total_return += rec.reward;
      step.push_back(std::move(rec));
    }
    trace.steps.push_back(std::move(step));
    trace.length = static_cast<int>(trace.steps.size());
  }
  return traces;
}

}  // namespace marlcomm
