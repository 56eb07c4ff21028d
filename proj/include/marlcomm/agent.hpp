#pragma once

#include "marlcomm/core.hpp"
#include "marlcomm/nn.hpp"
#include "marlcomm/rng.hpp"

#include <string>
#include <vector>

namespace marlcomm {

// ---------------------------------------------------------------------------
// One shared policy drives every agent on the team; only the recurrent
// carries differ per agent. Architecture per step:
//
//   enc_out = tanh(W_enc [obs ++ id] + b_enc)            (H)
//   h, c    = LSTM([enc_out ++ incoming], h, c)          (H; incoming is D)
//   logits  = W_act h + b_act                            (|A|)
//   value   = w_val . h + b_val                          (scalar baseline)
//   gate    = sigmoid(w_gate . h + b_gate)               (speak probability)
//   comm    = W_comm h + b_comm                          (D)
//
// Messages travel with a one-step delay: comm emitted at t is aggregated and
// becomes teammates' `incoming` at t+1.
// ---------------------------------------------------------------------------

struct PolicyConfig {
  Index obs_dim = 0;
  Index n_actions = 0;
  Index hidden = 256;    // H
  Index comm_dim = 256;  // D
  int n_agents = 1;
  // Appends an agent-id one-hot to the observation so one parameter set can
  // specialize across heterogeneous roles (used for the rescue task).
  bool append_agent_id = false;
  // Adds a decoder head (dec.W: H x D, dec.b: H) that reconstructs the encoded
  // observation from the comm vector (the autoencoder baseline).
  bool with_decoder = false;
  std::uint64_t init_seed = 0;
};

struct AgentCarry {
  Vector h, c;        // LSTM state
  Vector last_comm;   // comm vector emitted at the previous step
  int last_gate = 0;  // gate bit realized at the previous step
};

// Everything the backward pass needs to replay one agent-step.
struct StepCache {
  Vector enc_in;   // obs (++ id one-hot)
  Vector enc_pre;  // encoder pre-activation
  Vector lstm_in;  // enc_out ++ incoming
  nn::LstmCache lstm;
  Vector h;
  Vector action_logits;
  double value = 0.0;
  double gate_logit = 0.0;
  Vector comm;
};

struct StepOutput {
  Vector action_logits;
  double value = 0.0;
  double gate_prob = 0.0;  // in (0,1)
  Vector comm;
  AgentCarry carry;  // updated recurrent state (h, c); comm/gate left to caller
  StepCache cache;
};

class AgentPolicy {
 public:
  explicit AgentPolicy(PolicyConfig cfg);

  const PolicyConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  Index input_dim() const;  // obs_dim plus the optional id one-hot
  AgentCarry initial_carry() const;

 private:
  PolicyConfig cfg_;
  nn::ParamSet params_;
};

// Runs one step for one agent. `incoming` must be the gated team mean from
// the previous step (zero at t=0). Pure in (policy, inputs).
StepOutput agent_step(const AgentPolicy& policy, const Vector& obs,
                      int agent_id, const Vector& incoming,
                      const AgentCarry& carry);

// Gradients flowing out of one agent-step into its inputs.
struct StepGrad {
  Vector dh_prev, dc_prev;
  Vector d_incoming;
};

// Accumulates parameter gradients into `policy.params()` and returns input
// gradients. d_action_logits/d_value/d_gate_logit/d_comm are the per-head
// loss gradients; dh_next/dc_next arrive from the following timestep.
StepGrad agent_step_backward(AgentPolicy& policy, const StepCache& cache,
                             const Vector& d_action_logits, double d_value,
                             double d_gate_logit, const Vector& d_comm,
                             const Vector& dh_next, const Vector& dc_next);

// Mean over teammates' gated messages, excluding the receiver; zero vector
// when nobody else spoke.
Vector aggregate(const std::vector<Vector>& comms, const std::vector<int>& gates,
                 int self_id);

struct GateSample {
  int bit = 0;
  double logprob = 0.0;
};

// Bernoulli draw on the speak probability; greedy thresholds at 0.5.
GateSample sample_gate(double prob, RngStream& rng);
GateSample greedy_gate(double prob);

}  // namespace marlcomm
