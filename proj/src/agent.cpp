#include "marlcomm/agent.hpp"

#include <cmath>

namespace marlcomm {

namespace {

void init_uniform(Matrix& m, Index fan_in, RngStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Index i = 0; i < m.size(); ++i) {
    m.data()[i] = bound * (2.0 * rng.uniform() - 1.0);
  }
}

}  // namespace

AgentPolicy::AgentPolicy(PolicyConfig cfg) : cfg_(cfg) {
  require(cfg_.obs_dim >= 1, "AgentPolicy: obs_dim must be >= 1");
  require(cfg_.n_actions >= 2, "AgentPolicy: need at least two actions");
  require(cfg_.hidden >= 1 && cfg_.comm_dim >= 1,
          "AgentPolicy: hidden and comm dims must be >= 1");
  require(cfg_.n_agents >= 1, "AgentPolicy: n_agents must be >= 1");

  const Index in = input_dim();
  const Index H = cfg_.hidden;
  const Index D = cfg_.comm_dim;

  params_.add("enc.W", H, in);
  params_.add("enc.b", H, 1);
  params_.add("lstm.Wx", 4 * H, H + D);
  params_.add("lstm.Wh", 4 * H, H);
  params_.add("lstm.b", 4 * H, 1);
  params_.add("act.W", cfg_.n_actions, H);
  params_.add("act.b", cfg_.n_actions, 1);
  params_.add("val.W", 1, H);
  params_.add("val.b", 1, 1);
  params_.add("gate.W", 1, H);
  params_.add("gate.b", 1, 1);
  params_.add("comm.W", D, H);
  params_.add("comm.b", D, 1);
  if (cfg_.with_decoder) {
    params_.add("dec.W", H, D);
    params_.add("dec.b", H, 1);
  }

  // Fan-in scaled uniform init for weights, zero biases, and the customary
  // +1 forget-gate bias so early cell state persists.
  for (const auto& name : params_.names()) {
    if (name.ends_with(".b")) continue;
    Matrix& w = params_.at(name).value;
    RngStream rng = rng_stream(cfg_.init_seed, "init", fnv1a(name));
    init_uniform(w, w.cols(), rng);
  }
  params_.at("lstm.b").value.col(0).segment(H, H).setConstant(1.0);
}

Index AgentPolicy::input_dim() const {
  return cfg_.obs_dim + (cfg_.append_agent_id ? cfg_.n_agents : 0);
}

AgentCarry AgentPolicy::initial_carry() const {
  AgentCarry carry;
  carry.h = Vector::Zero(cfg_.hidden);
  carry.c = Vector::Zero(cfg_.hidden);
  carry.last_comm = Vector::Zero(cfg_.comm_dim);
  carry.last_gate = 0;
  return carry;
}

StepOutput agent_step(const AgentPolicy& policy, const Vector& obs,
                      int agent_id, const Vector& incoming,
                      const AgentCarry& carry) {
  const PolicyConfig& cfg = policy.config();
  const nn::ParamSet& p = policy.params();
  require(obs.size() == cfg.obs_dim, "agent_step: observation dim mismatch");
  require(incoming.size() == cfg.comm_dim, "agent_step: incoming dim mismatch");
  require(agent_id >= 0 && agent_id < cfg.n_agents, "agent_step: bad agent id");
  require(carry.h.size() == cfg.hidden && carry.c.size() == cfg.hidden,
          "agent_step: carry dim mismatch");

  StepOutput out;
  StepCache& cache = out.cache;

  cache.enc_in = Vector(policy.input_dim());
  cache.enc_in.head(cfg.obs_dim) = obs;
  if (cfg.append_agent_id) {
    cache.enc_in.tail(cfg.n_agents).setZero();
    cache.enc_in[cfg.obs_dim + agent_id] = 1.0;
  }

  cache.enc_pre = nn::affine(p.at("enc.W").value, p.at("enc.b").value.col(0),
                             cache.enc_in);
  Vector enc_out = cache.enc_pre.array().tanh();

  cache.lstm_in = Vector(cfg.hidden + cfg.comm_dim);
  cache.lstm_in.head(cfg.hidden) = enc_out;
  cache.lstm_in.tail(cfg.comm_dim) = incoming;

  cache.lstm = nn::lstm_step(p.at("lstm.Wx").value, p.at("lstm.Wh").value,
                             p.at("lstm.b").value.col(0), cache.lstm_in,
                             carry.h, carry.c);
  cache.h = nn::lstm_h(cache.lstm);

  cache.action_logits = nn::affine(p.at("act.W").value,
                                   p.at("act.b").value.col(0), cache.h);
  cache.value = nn::affine(p.at("val.W").value, p.at("val.b").value.col(0),
                           cache.h)[0];
  cache.gate_logit = nn::affine(p.at("gate.W").value,
                                p.at("gate.b").value.col(0), cache.h)[0];
  cache.comm = nn::affine(p.at("comm.W").value, p.at("comm.b").value.col(0),
                          cache.h);

  out.action_logits = cache.action_logits;
  out.value = cache.value;
  out.gate_prob = 1.0 / (1.0 + std::exp(-cache.gate_logit));
  out.comm = cache.comm;
  out.carry = carry;
  out.carry.h = cache.h;
  out.carry.c = cache.lstm.c_new;
  return out;
}

StepGrad agent_step_backward(AgentPolicy& policy, const StepCache& cache,
                             const Vector& d_action_logits, double d_value,
                             double d_gate_logit, const Vector& d_comm,
                             const Vector& dh_next, const Vector& dc_next) {
  const PolicyConfig& cfg = policy.config();
  nn::ParamSet& p = policy.params();
  const Index H = cfg.hidden;

  // Heads first: each accumulates its share into dh.
  Vector dh = dh_next;
  auto head_backward = [&](const char* w, const char* b, const Vector& dy) {
    Vector db = Vector::Zero(dy.size());
    nn::affine_backward(p.at(w).value, cache.h, dy, p.at(w).grad, db, dh);
    p.at(b).grad.col(0) += db;
  };

  head_backward("act.W", "act.b", d_action_logits);
  Vector dval(1), dgate(1);
  dval << d_value;
  dgate << d_gate_logit;
  head_backward("val.W", "val.b", dval);
  head_backward("gate.W", "gate.b", dgate);
  head_backward("comm.W", "comm.b", d_comm);

  // LSTM, then the encoder.
  Matrix& dWx = p.at("lstm.Wx").grad;
  Matrix& dWh = p.at("lstm.Wh").grad;
  Vector dbl = Vector::Zero(4 * H);
  Vector d_lstm_in = Vector::Zero(cache.lstm_in.size());
  StepGrad out;
  out.dh_prev = Vector::Zero(H);
  out.dc_prev = Vector::Zero(H);
  nn::lstm_backward(cache.lstm, p.at("lstm.Wx").value, p.at("lstm.Wh").value,
                    dh, dc_next, dWx, dWh, dbl, d_lstm_in, out.dh_prev,
                    out.dc_prev);
  p.at("lstm.b").grad.col(0) += dbl;

  out.d_incoming = d_lstm_in.tail(cfg.comm_dim);

  // d enc_out -> through tanh -> encoder affine.
  Vector d_enc_out = d_lstm_in.head(H);
  Vector enc_out = cache.enc_pre.array().tanh();
  Vector d_enc_pre =
      d_enc_out.cwiseProduct(Vector::Ones(H) - enc_out.cwiseProduct(enc_out));
  Vector d_enc_b = Vector::Zero(H);
  Vector d_enc_in = Vector::Zero(cache.enc_in.size());
  nn::affine_backward(p.at("enc.W").value, cache.enc_in, d_enc_pre,
                      p.at("enc.W").grad, d_enc_b, d_enc_in);
  p.at("enc.b").grad.col(0) += d_enc_b;
  return out;
}

Vector aggregate(const std::vector<Vector>& comms, const std::vector<int>& gates,
                 int self_id) {
  require(comms.size() == gates.size(), "aggregate: length mismatch");
  require(!comms.empty(), "aggregate: empty team");
  Vector sum = Vector::Zero(comms.front().size());
  int open = 0;
  for (std::size_t j = 0; j < comms.size(); ++j) {
    if (static_cast<int>(j) == self_id || gates[j] == 0) continue;
    sum += comms[j];
    ++open;
  }
  if (open == 0) return sum;  // zero vector
  return sum / static_cast<double>(open);
}

GateSample sample_gate(double prob, RngStream& rng) {
  require(prob > 0.0 && prob < 1.0, "sample_gate: prob must be in (0,1)");
  GateSample g;
  g.bit = rng.uniform() < prob ? 1 : 0;
  g.logprob = g.bit ? std::log(prob) : std::log1p(-prob);
  return g;
}

GateSample greedy_gate(double prob) {
  require(prob > 0.0 && prob < 1.0, "greedy_gate: prob must be in (0,1)");
  GateSample g;
  g.bit = prob >= 0.5 ? 1 : 0;
  g.logprob = g.bit ? std::log(prob) : std::log1p(-prob);
  return g;
}

}  // namespace marlcomm
