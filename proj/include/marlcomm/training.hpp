#pragma once

#include "marlcomm/agent.hpp"
#include "marlcomm/core.hpp"
#include "marlcomm/env.hpp"
#include "marlcomm/grounding.hpp"
#include "marlcomm/nn.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace marlcomm {

// ---------------------------------------------------------------------------
// Variants:
//   langground  - gated communication + supervised alignment of comm vectors
//                 to reference embeddings (the full method)
//   ic3net      - same architecture with the alignment weight fixed to zero
//   nocomm      - gates forced shut; no information flows between agents
//   aecomm      - alignment replaced by an autoencoding objective: a decoder
//                 reconstructs the (detached) encoded observation from the
//                 comm vector
// ---------------------------------------------------------------------------

enum class Variant { LangGround, Ic3Net, NoComm, AeComm };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct TrainConfig {
  std::string env = "pp_v0";  // preset: pp_v0, pp_v1, pp10_v1, usar
  // Prey spawn cells excluded during training (state hold-out experiments).
  std::vector<std::array<int, 2>> hold_out;
  Variant variant = Variant::LangGround;
  double lambda = -1.0;  // alignment weight; < 0 resolves to 1 (PP), 10 (USAR)
  double gamma = 1.0;
  int batch_steps = 500;       // env steps per update (last episode may overshoot)
  int updates_per_epoch = 10;
  int epochs = 300;
  Index hidden = 64;
  Index comm_dim = 32;
  double learning_rate = -1.0;  // < 0 resolves to 1e-3 (PP), 1e-4 (USAR)
  double value_coef = 0.05;
  double entropy_coef = 0.01;
  double clip_norm = 1.0;
  std::string optimizer = "rmsprop";  // or "sgd"
  std::uint64_t seed = 0;
  std::string grounding_path;
  double grounding_fraction = 1.0;
  std::uint64_t mask_seed = 0;
  bool no_gating = false;  // gates forced open; gate terms leave the loss

  // Fills the auto (< 0) fields from the environment family, enforces the
  // variant rules (ic3net/nocomm imply lambda 0 and no dataset), validates
  // ranges. Idempotent.
  void resolve();

  // Canonical JSON of the resolved config; key order is fixed, so equal
  // configs give equal strings and equal hashes.
  std::string canonical_json() const;
  std::uint64_t config_hash() const;
};

TrainConfig config_from_json(const std::string& json_text);

// Applies a named hyperparameter preset ("desk" or "paper") for the config's
// environment. Desk sizes fit single-core acceptance runs; paper sizes match
// the published experiments.
void apply_preset(TrainConfig& cfg, const std::string& preset);

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct StepRecord {
  Vector obs;
  int action = 0;
  double action_logprob = 0.0;
  int gate = 0;
  double gate_logprob = 0.0;
  // Collection-time value estimate. The loss uses it as the (detached)
  // advantage baseline, so the policy-gradient term stays a pure function of
  // the parameters even when the forward pass is recomputed.
  double value = 0.0;
  Vector comm;
  // Collection-time encoder output; the (detached) reconstruction target for
  // the autoencoder variant.
  Vector enc_out;
  double reward = 0.0;
  bool has_ref = false;
  Vector ref_embedding;  // empty unless has_ref
  Vector position;       // environment-space location (for analysis)
  StepCache cache;       // forward activations for the fast backward path
};

struct EpisodeTrace {
  // steps[t][agent]
  std::vector<std::vector<StepRecord>> steps;
  int length = 0;
  double total_return = 0.0;  // summed over agents and steps
  bool success = false;
  std::optional<std::array<int, 2>> prey;  // PP: the episode's prey cell
};

struct RolloutOptions {
  Variant variant = Variant::LangGround;
  bool no_gating = false;
  bool greedy = false;  // argmax actions + thresholded gates (evaluation)
  int n_steps = 500;    // collect until total env steps reach this
};

// Rolls episodes until the step budget is met (overshoot < one episode).
// Streams are named by the global episode index, so a resumed counter
// continues the exact sequence. Grounding may be null (no references).
std::vector<EpisodeTrace> collect(const Environment& env,
                                  const AgentPolicy& policy,
                                  const GroundingDataset* grounding,
                                  const RolloutOptions& opt,
                                  std::uint64_t seed,
                                  std::uint64_t& episode_counter);

// R_t = sum_{k >= t} gamma^{k-t} r_k.
std::vector<double> discounted_returns(const std::vector<double>& rewards,
                                       double gamma);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossOptions {
  Variant variant = Variant::LangGround;
  double lambda = 1.0;
  double gamma = 1.0;
  double value_coef = 0.05;
  double entropy_coef = 0.01;
  bool no_gating = false;
  // Term toggles so the parts can be audited in isolation
  // (total gradient == rl gradient + lambda * alignment gradient).
  bool include_rl = true;
  bool include_alignment = true;
};

struct LossBreakdown {
  double total = 0.0;
  double rl = 0.0;         // policy + value + entropy terms
  double sup = 0.0;        // mean (1 - cos) over grounded steps
  double recon = 0.0;      // aecomm reconstruction term
  double policy_term = 0.0;
  double value_term = 0.0;
  double entropy_term = 0.0;
  double mean_cosine = 0.0;  // over grounded steps (0 when none)
  long grounded_steps = 0;
  long agent_steps = 0;
  double gate_open_rate = 0.0;
};

// Computes the batch loss and, when `accumulate` is set, adds gradients into
// policy.params(). With `reforward` the forward pass is recomputed from the
// stored observations and realized actions/gates, making the loss a pure
// function of the parameters (finite-difference testable); without it the
// caches captured at collection time are trusted (fast path — valid while
// the parameters are unchanged since collection).
LossBreakdown batch_loss(AgentPolicy& policy,
                         std::vector<EpisodeTrace>& traces,
                         const LossOptions& opt, bool accumulate,
                         bool reforward = false);

// ---------------------------------------------------------------------------
// Metrics + training loop
// ---------------------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  double mean_length = 0.0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double rl_loss = 0.0;
  double sup_loss = 0.0;
  double mean_cosine = 0.0;
  double gate_open_rate = 0.0;
};

class MetricsLog {
 public:
  void append(const EpochRow& row);
  const std::vector<EpochRow>& rows() const { return rows_; }

  // Stable header, locale-independent shortest-round-trip numbers: identical
  // runs serialize byte-identically.
  void save_csv(const std::string& path) const;
  static MetricsLog load_csv(const std::string& path);

 private:
  std::vector<EpochRow> rows_;
};

struct TrainResult {
  AgentPolicy policy;
  nn::Optimizer optimizer;
  MetricsLog metrics;
  std::uint64_t episode_counter = 0;
};

// Called after each epoch with the partial result; used for periodic
// checkpointing and progress reporting.
using EpochCallback =
    std::function<void(int epoch, const TrainResult& partial)>;

// Full training loop: epochs x updates of collect -> loss -> optimizer step.
// Throws with epoch/seed context if the loss turns non-finite.
TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Builds the environment described by cfg.env + cfg.hold_out.
Environment env_from_config(const TrainConfig& cfg);
// Builds the policy shell (no training) for cfg; used by loaders.
AgentPolicy policy_from_config(const TrainConfig& cfg);
// Loads + masks the grounding dataset per config; empty optional when the
// variant does not use one.
std::optional<GroundingDataset> grounding_from_config(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Trace dump (JSON-lines, one timestep per line) for offline analysis.
// ---------------------------------------------------------------------------

void save_traces(const std::vector<EpisodeTrace>& traces,
                 const std::string& path);
std::vector<EpisodeTrace> load_traces(const std::string& path);

}  // namespace marlcomm
