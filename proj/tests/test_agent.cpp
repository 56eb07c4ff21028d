#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "marlcomm/agent.hpp"

#include <cmath>
#include <vector>

using namespace marlcomm;

namespace {

PolicyConfig toy_config() {
  PolicyConfig cfg;
  cfg.obs_dim = 3;
  cfg.n_actions = 4;
  cfg.hidden = 5;
  cfg.comm_dim = 2;
  cfg.n_agents = 2;
  cfg.init_seed = 123;
  return cfg;
}

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

}  // namespace

TEST_CASE("policy layout and initialization") {
  AgentPolicy p(toy_config());
  const auto& ps = p.params();
  CHECK(ps.names().size() == 13);
  CHECK(ps.at("enc.W").value.rows() == 5);
  CHECK(ps.at("lstm.Wx").value.cols() == 5 + 2);
  CHECK(ps.at("comm.W").value.rows() == 2);

  // Weights land inside the fan-in bound, biases are zero except the forget
  // gate, which starts at +1.
  const double bound = 1.0 / std::sqrt(3.0);
  CHECK(ps.at("enc.W").value.cwiseAbs().maxCoeff() <= bound);
  CHECK(ps.at("enc.W").value.cwiseAbs().maxCoeff() > 0.0);
  CHECK(ps.at("act.b").value.isZero());
  CHECK(ps.at("lstm.b").value.col(0).segment(5, 5) == Vector::Ones(5));
  CHECK(ps.at("lstm.b").value.col(0).head(5).isZero());

  // Same seed, same init; different seed, different init.
  AgentPolicy q(toy_config());
  CHECK(q.params().at("enc.W").value == ps.at("enc.W").value);
  PolicyConfig other = toy_config();
  other.init_seed = 124;
  AgentPolicy r(other);
  CHECK(r.params().at("enc.W").value != ps.at("enc.W").value);
}

TEST_CASE("zero parameters yield a maximally uninformative step") {
  AgentPolicy p(toy_config());
  for (const auto& name : p.params().names()) {
    p.params().at(name).value.setZero();
  }
  StepOutput out = agent_step(p, vec({0.5, -1.0, 2.0}), 0,
                              Vector::Zero(2), p.initial_carry());
  CHECK(out.action_logits.isZero());
  CHECK(out.value == 0.0);
  CHECK(out.gate_prob == doctest::Approx(0.5));
  CHECK(out.comm.isZero());
  CHECK(out.carry.h.isZero());
  CHECK(out.carry.c.isZero());
}

TEST_CASE("first step is independent of teammates") {
  AgentPolicy p(toy_config());
  const Vector obs = vec({0.1, 0.2, 0.3});
  StepOutput a = agent_step(p, obs, 0, Vector::Zero(2), p.initial_carry());
  StepOutput b = agent_step(p, obs, 0, Vector::Zero(2), p.initial_carry());
  CHECK(a.action_logits == b.action_logits);
  CHECK(a.comm == b.comm);
  // A non-zero incoming message does change the outcome.
  StepOutput c = agent_step(p, obs, 0, vec({1.0, -1.0}), p.initial_carry());
  CHECK(c.action_logits != a.action_logits);
}

TEST_CASE("agent id one-hot differentiates roles under shared parameters") {
  PolicyConfig cfg = toy_config();
  cfg.append_agent_id = true;
  AgentPolicy p(cfg);
  CHECK(p.input_dim() == 3 + 2);
  const Vector obs = vec({0.1, 0.2, 0.3});
  StepOutput a0 = agent_step(p, obs, 0, Vector::Zero(2), p.initial_carry());
  StepOutput a1 = agent_step(p, obs, 1, Vector::Zero(2), p.initial_carry());
  CHECK(a0.action_logits != a1.action_logits);

  // Without the id, identical observations are indistinguishable.
  AgentPolicy q(toy_config());
  StepOutput b0 = agent_step(q, obs, 0, Vector::Zero(2), q.initial_carry());
  StepOutput b1 = agent_step(q, obs, 1, Vector::Zero(2), q.initial_carry());
  CHECK(b0.action_logits == b1.action_logits);
}

TEST_CASE("aggregation means open teammates and never the receiver") {
  std::vector<Vector> comms = {vec({1, 2}), vec({3, 4})};
  CHECK(aggregate(comms, {1, 1}, 1) == vec({1, 2}));
  CHECK(aggregate(comms, {0, 0}, 0) == Vector::Zero(2));
  CHECK(aggregate(comms, {1, 1}, 0) == vec({3, 4}));

  std::vector<Vector> three = {vec({1, 0}), vec({0, 1}), vec({9, 9})};
  CHECK(aggregate(three, {1, 1, 0}, 2) == vec({0.5, 0.5}));
  // A single agent always receives silence.
  std::vector<Vector> solo = {vec({5, 5})};
  CHECK(aggregate(solo, {1}, 0) == Vector::Zero(2));
}

TEST_CASE("gate sampling follows the Bernoulli law") {
  RngStream rng = rng_stream(77, "gate");
  int ones = 0;
  for (int i = 0; i < 1000; ++i) ones += sample_gate(1.0 - 1e-9, rng).bit;
  CHECK(ones == 1000);

  GateSample g = sample_gate(0.25, rng);
  if (g.bit == 1) {
    CHECK(g.logprob == doctest::Approx(std::log(0.25)));
  } else {
    CHECK(g.logprob == doctest::Approx(std::log(0.75)));
  }
  int open = 0;
  for (int i = 0; i < 4000; ++i) open += sample_gate(0.25, rng).bit;
  CHECK(open == doctest::Approx(1000).epsilon(0.12));

  CHECK(greedy_gate(0.7).bit == 1);
  CHECK(greedy_gate(0.3).bit == 0);
  CHECK(greedy_gate(0.7).logprob == doctest::Approx(std::log(0.7)));
  CHECK_THROWS_AS(sample_gate(0.0, rng), MarlError);
}

// A compact two-agent, two-step rollout with cross-communication: the loss
// touches every head (policy gradient, value, gate, alignment, entropy) and
// the backward pass must route message gradients to the sender's previous
// step. Finite differences validate the whole composition.
TEST_CASE("end-to-end gradients through two communicating steps") {
  PolicyConfig cfg = toy_config();
  AgentPolicy policy(cfg);
  const int n = 2, T = 2;

  std::vector<std::vector<Vector>> obs(T, std::vector<Vector>(n));
  RngStream og = rng_stream(5, "obs");
  for (int t = 0; t < T; ++t) {
    for (int a = 0; a < n; ++a) {
      obs[t][a] = Vector::NullaryExpr(3, [&](Index) { return og.normal(); });
    }
  }
  // Frozen realizations: actions, gates, per-step loss weights, references.
  const std::vector<std::vector<Index>> act = {{0, 2}, {3, 1}};
  const std::vector<std::vector<int>> gate = {{1, 1}, {1, 0}};
  const std::vector<std::vector<double>> adv = {{0.7, -0.3}, {0.2, 0.9}};
  const std::vector<std::vector<double>> vtarg = {{0.1, 0.4}, {-0.2, 0.3}};
  Vector ref = vec({0.6, 0.8});

  auto loss_fn = [&](nn::ParamSet&, bool accumulate) {
    // Forward pass, recording caches and channel wiring.
    std::vector<AgentCarry> carry(n);
    for (int a = 0; a < n; ++a) carry[a] = policy.initial_carry();
    std::vector<std::vector<StepCache>> caches(T);
    std::vector<std::vector<Vector>> comms(T, std::vector<Vector>(n));
    double loss = 0.0;
    for (int t = 0; t < T; ++t) {
      caches[t].resize(n);
      std::vector<Vector> incoming(n);
      for (int a = 0; a < n; ++a) {
        incoming[a] = t == 0 ? Vector::Zero(2)
                             : aggregate(comms[t - 1], gate[t - 1], a);
      }
      for (int a = 0; a < n; ++a) {
        StepOutput o = agent_step(policy, obs[t][a], a, incoming[a], carry[a]);
        caches[t][a] = o.cache;
        comms[t][a] = o.comm;
        carry[a] = o.carry;
        loss += -adv[t][a] * nn::log_softmax_at(o.action_logits, act[t][a]);
        loss += 0.5 * (o.value - vtarg[t][a]) * (o.value - vtarg[t][a]);
        loss += -adv[t][a] *
                (gate[t][a] ? std::log(o.gate_prob)
                            : std::log1p(-o.gate_prob));
        loss += -0.01 * nn::softmax_entropy(o.action_logits);
        loss += 1.0 - nn::cosine(o.comm, ref);
      }
    }
    if (!accumulate) return loss;

    // Reverse sweep with cross-agent channel gradients.
    std::vector<Vector> dh(n, Vector::Zero(cfg.hidden));
    std::vector<Vector> dc(n, Vector::Zero(cfg.hidden));
    std::vector<Vector> d_comm_next(n);  // from receivers at t+1
    for (int t = T - 1; t >= 0; --t) {
      std::vector<Vector> d_incoming(n, Vector::Zero(2));
      for (int a = 0; a < n; ++a) {
        const StepCache& cache = caches[t][a];
        Vector d_logits = Vector::Zero(cfg.n_actions);
        nn::log_softmax_backward(cache.action_logits, act[t][a], -adv[t][a],
                                 d_logits);
        nn::softmax_entropy_backward(cache.action_logits, -0.01, d_logits);
        const double d_value = cache.value - vtarg[t][a];
        const double prob = 1.0 / (1.0 + std::exp(-cache.gate_logit));
        const double d_gate_logit = -adv[t][a] * (gate[t][a] - prob);
        Vector d_comm = Vector::Zero(2);
        nn::cosine_backward(cache.comm, ref, -1.0, d_comm);
        if (t + 1 < T) d_comm += d_comm_next[a];

        StepGrad g = agent_step_backward(policy, cache, d_logits, d_value,
                                         d_gate_logit, d_comm, dh[a], dc[a]);
        dh[a] = g.dh_prev;
        dc[a] = g.dc_prev;
        d_incoming[a] = g.d_incoming;
      }
      // Channel: receiver r's incoming at t is the mean over open senders
      // j != r of comm_j at t-1.
      for (int a = 0; a < n; ++a) d_comm_next[a] = Vector::Zero(2);
      for (int r = 0; r < n; ++r) {
        int open = 0;
        for (int j = 0; j < n; ++j) {
          if (j != r && gate[t == 0 ? 0 : t - 1][j]) ++open;
        }
        if (t == 0 || open == 0) continue;
        for (int j = 0; j < n; ++j) {
          if (j != r && gate[t - 1][j]) {
            d_comm_next[j] += d_incoming[r] / open;
          }
        }
      }
    }
    return loss;
  };

  const double err = nn::grad_check(loss_fn, policy.params(), 1e-5);
  CHECK(err < 1e-4);
}
