#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "marlcomm/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

using namespace marlcomm;

namespace {

// Small policy over a real environment, for fast rollouts in tests.
AgentPolicy tiny_policy(const Environment& env, Index hidden, Index comm,
                        std::uint64_t seed, bool with_decoder = false) {
  PolicyConfig pc;
  pc.obs_dim = env.obs_dim();
  pc.n_actions = env.n_actions();
  pc.hidden = hidden;
  pc.comm_dim = comm;
  pc.n_agents = env.n_agents();
  pc.append_agent_id = env.kind() == EnvKind::Usar;
  pc.with_decoder = with_decoder;
  pc.init_seed = seed;
  return AgentPolicy(pc);
}

void truncate(std::vector<EpisodeTrace>& traces, int len) {
  for (auto& t : traces) {
    if (static_cast<int>(t.steps.size()) > len) t.steps.resize(len);
    t.length = static_cast<int>(t.steps.size());
  }
}

bool same_decisions(const std::vector<EpisodeTrace>& a,
                    const std::vector<EpisodeTrace>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t e = 0; e < a.size(); ++e) {
    if (a[e].length != b[e].length) return false;
    if (a[e].success != b[e].success) return false;
    for (std::size_t t = 0; t < a[e].steps.size(); ++t) {
      for (std::size_t i = 0; i < a[e].steps[t].size(); ++i) {
        const StepRecord& x = a[e].steps[t][i];
        const StepRecord& y = b[e].steps[t][i];
        if (x.action != y.action || x.gate != y.gate) return false;
        if (x.reward != y.reward) return false;
      }
    }
  }
  return true;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("discounted returns") {
  CHECK(discounted_returns({1.0, 1.0, 1.0}, 0.5) ==
        std::vector<double>{1.75, 1.5, 1.0});
  std::vector<double> step_costs(20, -0.05);
  auto r = discounted_returns(step_costs, 1.0);
  CHECK(r.front() == doctest::Approx(-1.0));
  CHECK(r.back() == doctest::Approx(-0.05));
  CHECK(discounted_returns({0.3, -0.2, 0.9}, 0.0) ==
        std::vector<double>{0.3, -0.2, 0.9});
  CHECK(discounted_returns({}, 0.9).empty());
}

TEST_CASE("config resolution and variant rules") {
  TrainConfig cfg;
  cfg.env = "pp_v0";
  cfg.grounding_path = "refs.jsonl";
  cfg.resolve();
  CHECK(cfg.lambda == 1.0);
  CHECK(cfg.learning_rate == 1e-3);

  TrainConfig usar;
  usar.env = "usar";
  usar.grounding_path = "refs.jsonl";
  usar.resolve();
  CHECK(usar.lambda == 10.0);
  CHECK(usar.learning_rate == 1e-4);

  TrainConfig ic;
  ic.env = "pp_v0";
  ic.variant = Variant::Ic3Net;
  ic.resolve();
  CHECK(ic.lambda == 0.0);

  TrainConfig ic_bad;
  ic_bad.env = "pp_v0";
  ic_bad.variant = Variant::Ic3Net;
  ic_bad.grounding_path = "refs.jsonl";
  CHECK_THROWS_AS(ic_bad.resolve(), MarlError);

  TrainConfig lg_bad;
  lg_bad.env = "pp_v0";
  lg_bad.variant = Variant::LangGround;  // lambda resolves to 1, no dataset
  CHECK_THROWS_AS(lg_bad.resolve(), MarlError);

  TrainConfig lg_zero;
  lg_zero.env = "pp_v0";
  lg_zero.lambda = 0.0;  // explicit 0: dataset-free langground is allowed
  lg_zero.resolve();
  CHECK(lg_zero.lambda == 0.0);

  TrainConfig ae;
  ae.env = "pp_v0";
  ae.variant = Variant::AeComm;
  ae.resolve();
  CHECK(ae.lambda == 1.0);
  ae.grounding_path = "refs.jsonl";
  CHECK_THROWS_AS(ae.resolve(), MarlError);

  TrainConfig ho_bad;
  ho_bad.env = "usar";
  ho_bad.variant = Variant::NoComm;
  ho_bad.hold_out = {{2, 2}};
  CHECK_THROWS_AS(ho_bad.resolve(), MarlError);

  TrainConfig opt_bad;
  opt_bad.env = "pp_v0";
  opt_bad.lambda = 0.0;
  opt_bad.optimizer = "adam";
  CHECK_THROWS_AS(opt_bad.resolve(), MarlError);

  CHECK(to_string(variant_from_string("aecomm")) == "aecomm");
  CHECK_THROWS_AS(variant_from_string("telepathy"), MarlError);
}

TEST_CASE("canonical config json and hash") {
  TrainConfig a;
  a.env = "pp_v1";
  a.lambda = 0.0;
  a.seed = 41;
  a.resolve();
  const std::string ja = a.canonical_json();
  a.resolve();  // idempotent
  CHECK(a.canonical_json() == ja);

  TrainConfig b = a;
  CHECK(b.config_hash() == a.config_hash());
  b.seed = 42;
  CHECK(b.config_hash() != a.config_hash());

  // JSON round trip preserves the canonical form.
  TrainConfig c = config_from_json(ja);
  CHECK(c.canonical_json() == ja);

  CHECK_THROWS_WITH_AS(config_from_json("{\"speed\": 3}"),
                       doctest::Contains("unknown key \"speed\""), MarlError);
  CHECK_THROWS_AS(config_from_json("not json"), MarlError);

  TrainConfig d = config_from_json(
      "{\"env\":\"pp_v0\",\"hold_out\":[[2,2],[0,4]],\"lambda\":0}");
  CHECK(d.hold_out.size() == 2);
  CHECK(d.hold_out[1] == std::array<int, 2>{0, 4});
}

TEST_CASE("presets") {
  TrainConfig cfg;
  cfg.env = "pp_v0";
  apply_preset(cfg, "desk");
  CHECK(cfg.hidden == 64);
  CHECK(cfg.comm_dim == 32);
  CHECK(cfg.epochs == 300);
  CHECK(cfg.batch_steps == 150);

  apply_preset(cfg, "paper");
  CHECK(cfg.hidden == 256);
  CHECK(cfg.comm_dim == 256);
  CHECK(cfg.epochs == 2000);
  CHECK(cfg.batch_steps == 500);

  TrainConfig usar;
  usar.env = "usar";
  apply_preset(usar, "paper");
  CHECK(usar.epochs == 500);

  CHECK_THROWS_AS(apply_preset(cfg, "laptop"), MarlError);
}

TEST_CASE("builders from config") {
  TrainConfig cfg;
  cfg.env = "pp_v0";
  cfg.hold_out = {{2, 2}, {1, 3}};
  cfg.variant = Variant::Ic3Net;
  cfg.hidden = 8;
  cfg.comm_dim = 4;
  cfg.resolve();

  Environment env = env_from_config(cfg);
  CHECK(env.pp_config().held_out_prey_spawns.size() == 2);

  AgentPolicy pol = policy_from_config(cfg);
  CHECK(pol.config().obs_dim == env.obs_dim());
  CHECK(pol.config().n_actions == 5);
  CHECK_FALSE(pol.config().append_agent_id);
  CHECK_FALSE(pol.params().has("dec.W"));
  CHECK_FALSE(grounding_from_config(cfg).has_value());

  TrainConfig ae;
  ae.env = "usar";
  ae.variant = Variant::AeComm;
  ae.hidden = 8;
  ae.comm_dim = 4;
  ae.resolve();
  AgentPolicy ae_pol = policy_from_config(ae);
  CHECK(ae_pol.config().append_agent_id);
  CHECK(ae_pol.input_dim() == env_from_config(ae).obs_dim() + 3);
  CHECK(ae_pol.params().has("dec.W"));
  CHECK(ae_pol.params().at("dec.W").value.rows() == 8);
  CHECK(ae_pol.params().at("dec.W").value.cols() == 4);
}

TEST_CASE("collect: budget, determinism, counter resume") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 8, 4, 7);
  RolloutOptions opt;
  opt.variant = Variant::Ic3Net;
  opt.n_steps = 50;

  std::uint64_t counter = 0;
  auto traces = collect(env, pol, nullptr, opt, 123, counter);
  int total = 0;
  for (const auto& t : traces) {
    CHECK(t.length <= env.max_steps());
    total += t.length;
  }
  CHECK(total >= opt.n_steps);
  CHECK(total - traces.back().length < opt.n_steps);  // overshoot < 1 episode
  CHECK(counter == traces.size());

  // Same seed, fresh counter: bit-identical decisions.
  std::uint64_t counter2 = 0;
  auto replay = collect(env, pol, nullptr, opt, 123, counter2);
  CHECK(same_decisions(traces, replay));

  // Different seed: some decision differs.
  std::uint64_t counter3 = 0;
  auto other = collect(env, pol, nullptr, opt, 124, counter3);
  CHECK_FALSE(same_decisions(traces, other));

  // Two half-budget calls sharing a counter reproduce one full-budget call.
  RolloutOptions half = opt;
  half.n_steps = traces[0].length;  // exactly one episode
  std::uint64_t counter4 = 0;
  auto part1 = collect(env, pol, nullptr, half, 123, counter4);
  CHECK(counter4 == 1);
  half.n_steps = total - traces[0].length;
  auto part2 = collect(env, pol, nullptr, half, 123, counter4);
  part1.insert(part1.end(), part2.begin(), part2.end());
  CHECK(same_decisions(traces, part1));
}

TEST_CASE("collect: gate behaviour per variant") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 8, 4, 3);
  std::uint64_t counter = 0;
  RolloutOptions opt;
  opt.n_steps = 40;

  opt.variant = Variant::NoComm;
  for (const auto& t : collect(env, pol, nullptr, opt, 9, counter)) {
    for (const auto& step : t.steps) {
      for (const auto& rec : step) {
        CHECK(rec.gate == 0);
        CHECK(rec.gate_logprob == 0.0);
      }
    }
  }

  opt.variant = Variant::LangGround;
  opt.no_gating = true;
  counter = 0;
  for (const auto& t : collect(env, pol, nullptr, opt, 9, counter)) {
    for (const auto& step : t.steps) {
      for (const auto& rec : step) CHECK(rec.gate == 1);
    }
  }

  // With sampled gates and a fresh policy (gate prob ~0.5) both bits occur.
  opt.no_gating = false;
  counter = 0;
  int open = 0, total = 0;
  for (const auto& t : collect(env, pol, nullptr, opt, 200, counter)) {
    for (const auto& step : t.steps) {
      for (const auto& rec : step) {
        open += rec.gate;
        ++total;
      }
    }
  }
  CHECK(open > 0);
  CHECK(open < total);
}

TEST_CASE("collect: grounding references attach by exact key") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 8, 4, 5);
  RolloutOptions opt;
  opt.variant = Variant::LangGround;
  opt.n_steps = 20;

  // Roll once without grounding, then build a dataset from the first record.
  std::uint64_t counter = 0;
  auto plain = collect(env, pol, nullptr, opt, 77, counter);
  const StepRecord& probe = plain[0].steps[0][0];

  LocalEmbeddingProvider prov(4, 0);
  GroundingDataset ds;
  GroundingEntry e;
  e.env = env.tag();
  e.obs = probe.obs;
  e.action = probe.action;
  e.message = "I am moving somewhere.";
  e.embedding = prov.embed(e.message);
  ds.add(e);

  counter = 0;
  auto grounded = collect(env, pol, &ds, opt, 77, counter);
  const StepRecord& hit = grounded[0].steps[0][0];
  REQUIRE(hit.has_ref);
  CHECK(hit.ref_embedding == e.embedding);
  // Identical decisions with and without grounding: lookups draw no RNG.
  CHECK(same_decisions(plain, grounded));
}

TEST_CASE("batch_loss: zero advantages kill the policy and value terms") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 8, 4, 11);
  RolloutOptions opt;
  opt.variant = Variant::Ic3Net;
  opt.n_steps = 30;
  std::uint64_t counter = 0;
  auto traces = collect(env, pol, nullptr, opt, 5, counter);

  // With gamma = 0 and reward_t := value_t the advantage vanishes everywhere.
  for (auto& t : traces) {
    for (auto& step : t.steps) {
      for (auto& rec : step) rec.reward = rec.value;
    }
  }
  LossOptions lopt;
  lopt.variant = Variant::Ic3Net;
  lopt.lambda = 0.0;
  lopt.gamma = 0.0;
  auto loss = batch_loss(pol, traces, lopt, /*accumulate=*/false);
  CHECK(loss.policy_term == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(loss.value_term == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(loss.entropy_term < 0.0);  // -c_e * H, H > 0 for a fresh policy
  CHECK(loss.rl == doctest::Approx(loss.entropy_term));
}

TEST_CASE("batch_loss: alignment oracle values") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 8, 4, 13);
  RolloutOptions opt;
  opt.variant = Variant::LangGround;
  opt.n_steps = 20;
  std::uint64_t counter = 0;
  auto traces = collect(env, pol, nullptr, opt, 21, counter);

  LossOptions lopt;
  lopt.variant = Variant::LangGround;
  lopt.lambda = 2.0;
  lopt.include_rl = false;

  // References equal to the emitted comm: sup = 0, mean cosine = 1.
  for (auto& step : traces[0].steps) {
    for (auto& rec : step) {
      rec.has_ref = true;
      rec.ref_embedding = rec.cache.comm / rec.cache.comm.norm();
    }
  }
  auto equal = batch_loss(pol, traces, lopt, false);
  CHECK(equal.grounded_steps == 3 * traces[0].length);
  CHECK(equal.sup == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(equal.mean_cosine == doctest::Approx(1.0));
  CHECK(equal.total == doctest::Approx(0.0).epsilon(1e-12));

  // Orthogonal references: every grounded step contributes 1 - 0.
  for (auto& step : traces[0].steps) {
    for (auto& rec : step) {
      // (-c1, c0, 0, 0) is exactly orthogonal to comm whatever c2, c3 are.
      Vector orth = Vector::Zero(4);
      orth[0] = -rec.cache.comm[1];
      orth[1] = rec.cache.comm[0];
      REQUIRE(orth.norm() > 0.0);
      rec.ref_embedding = orth / orth.norm();
    }
  }
  auto orth = batch_loss(pol, traces, lopt, false);
  CHECK(orth.sup == doctest::Approx(1.0));
  CHECK(orth.mean_cosine == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(orth.total == doctest::Approx(lopt.lambda * 1.0));

  // No grounded steps: alignment-only gradients are identically zero.
  for (auto& t : traces) {
    for (auto& step : t.steps) {
      for (auto& rec : step) {
        rec.has_ref = false;
        rec.ref_embedding = Vector();
      }
    }
  }
  pol.params().zero_grad();
  auto none = batch_loss(pol, traces, lopt, /*accumulate=*/true);
  CHECK(none.sup == 0.0);
  CHECK(none.grounded_steps == 0);
  CHECK(pol.params().flatten_grads().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("batch_loss: total gradient is rl + lambda * alignment") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 6, 4, 17);
  RolloutOptions opt;
  opt.variant = Variant::LangGround;
  opt.n_steps = 25;
  std::uint64_t counter = 0;
  auto traces = collect(env, pol, nullptr, opt, 31, counter);
  truncate(traces, 4);
  // Attach references to a scattering of steps.
  LocalEmbeddingProvider prov(4, 9);
  int k = 0;
  for (auto& t : traces) {
    for (auto& step : t.steps) {
      for (auto& rec : step) {
        if (++k % 3 == 0) {
          rec.has_ref = true;
          rec.ref_embedding = prov.embed("token " + std::to_string(k % 5));
        }
      }
    }
  }

  LossOptions lopt;
  lopt.variant = Variant::LangGround;
  lopt.lambda = 0.7;
  lopt.gamma = 0.9;

  pol.params().zero_grad();
  auto full = batch_loss(pol, traces, lopt, true);
  Vector g_full = pol.params().flatten_grads();

  pol.params().zero_grad();
  LossOptions rl_only = lopt;
  rl_only.include_alignment = false;
  auto rl = batch_loss(pol, traces, rl_only, true);
  Vector g_rl = pol.params().flatten_grads();

  pol.params().zero_grad();
  LossOptions al_only = lopt;
  al_only.include_rl = false;
  auto al = batch_loss(pol, traces, al_only, true);
  Vector g_al = pol.params().flatten_grads();

  CHECK(full.total ==
        doctest::Approx(rl.total + al.total).epsilon(1e-12));
  CHECK((g_full - g_rl - g_al).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(g_al.cwiseAbs().maxCoeff() > 0.0);  // alignment actually contributes
}

TEST_CASE("batch_loss: finite differences on a truncated rollout") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 6, 4, 19);
  RolloutOptions opt;
  opt.variant = Variant::LangGround;
  opt.n_steps = 25;  // two episodes
  std::uint64_t counter = 0;
  auto traces = collect(env, pol, nullptr, opt, 301, counter);
  truncate(traces, 3);
  REQUIRE(traces.size() >= 2);

  LocalEmbeddingProvider prov(4, 2);
  int k = 0;
  for (auto& t : traces) {
    for (auto& step : t.steps) {
      for (auto& rec : step) {
        if (++k % 2 == 0) {
          rec.has_ref = true;
          rec.ref_embedding = prov.embed("cell " + std::to_string(k % 7));
        }
      }
    }
  }
  // Make sure the channel carries gradient: open a gate on a non-final step.
  traces[0].steps[0][1].gate = 1;

  LossOptions lopt;
  lopt.variant = Variant::LangGround;
  lopt.lambda = 0.7;
  lopt.gamma = 0.9;

  auto loss_fn = [&](nn::ParamSet&, bool accumulate) {
    return batch_loss(pol, traces, lopt, accumulate, /*reforward=*/true).total;
  };
  CHECK(nn::grad_check(loss_fn, pol.params(), 1e-5) < 1e-4);
}

TEST_CASE("batch_loss: finite differences for the autoencoder variant") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 6, 4, 23, /*with_decoder=*/true);
  RolloutOptions opt;
  opt.variant = Variant::AeComm;
  opt.n_steps = 22;
  std::uint64_t counter = 0;
  auto traces = collect(env, pol, nullptr, opt, 47, counter);
  truncate(traces, 3);

  LossOptions lopt;
  lopt.variant = Variant::AeComm;
  lopt.lambda = 0.3;
  lopt.gamma = 1.0;

  auto loss_fn = [&](nn::ParamSet&, bool accumulate) {
    return batch_loss(pol, traces, lopt, accumulate, /*reforward=*/true).total;
  };
  CHECK(nn::grad_check(loss_fn, pol.params(), 1e-5) < 1e-4);

  auto loss = batch_loss(pol, traces, lopt, false);
  CHECK(loss.recon > 0.0);
  CHECK(loss.sup == 0.0);
}

TEST_CASE("batch_loss: fast path matches reforward on unchanged params") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 8, 4, 29);
  RolloutOptions opt;
  opt.variant = Variant::Ic3Net;
  opt.n_steps = 30;
  std::uint64_t counter = 0;
  auto traces = collect(env, pol, nullptr, opt, 61, counter);

  LossOptions lopt;
  lopt.variant = Variant::Ic3Net;
  lopt.lambda = 0.0;
  lopt.gamma = 1.0;

  pol.params().zero_grad();
  auto fast = batch_loss(pol, traces, lopt, true, /*reforward=*/false);
  Vector g_fast = pol.params().flatten_grads();
  pol.params().zero_grad();
  auto slow = batch_loss(pol, traces, lopt, true, /*reforward=*/true);
  Vector g_slow = pol.params().flatten_grads();
  CHECK(fast.total == doctest::Approx(slow.total).epsilon(1e-12));
  CHECK((g_fast - g_slow).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("REINFORCE sanity: one-step bandit prefers the rewarded action") {
  // Hand-built one-step episodes against the real policy machinery: action 0
  // pays 1, action 1 pays 0. After a few hundred updates the policy should
  // be near-deterministic for action 0.
  PolicyConfig pc;
  pc.obs_dim = 2;
  pc.n_actions = 2;
  pc.hidden = 8;
  pc.comm_dim = 4;
  pc.init_seed = 4;
  AgentPolicy pol(pc);
  nn::Optimizer optim;
  optim.learning_rate = 5e-3;

  LossOptions lopt;
  lopt.variant = Variant::NoComm;
  lopt.lambda = 0.0;
  lopt.gamma = 1.0;

  const Vector obs = Vector::Zero(2);
  RngStream rng = rng_stream(99, "bandit");
  for (int iter = 0; iter < 300; ++iter) {
    std::vector<EpisodeTrace> batch;
    for (int b = 0; b < 16; ++b) {
      StepOutput o = agent_step(pol, obs, 0, Vector::Zero(4),
                                pol.initial_carry());
      nn::SampleResult a = nn::categorical_sample(o.action_logits, rng);
      EpisodeTrace t;
      t.steps.emplace_back();
      StepRecord rec;
      rec.obs = obs;
      rec.action = static_cast<int>(a.index);
      rec.action_logprob = a.logprob;
      rec.value = o.value;
      rec.comm = o.comm;
      rec.cache = std::move(o.cache);
      rec.reward = rec.action == 0 ? 1.0 : 0.0;
      t.steps.back().push_back(std::move(rec));
      t.length = 1;
      batch.push_back(std::move(t));
    }
    batch_loss(pol, batch, lopt, true);
    nn::clip_grad_norm(pol.params(), 1.0);
    optim.step(pol.params());
  }
  StepOutput o = agent_step(pol, obs, 0, Vector::Zero(4), pol.initial_carry());
  CHECK(nn::softmax(o.action_logits)[0] > 0.95);
}

TEST_CASE("lambda = 0 langground is bit-identical to ic3net") {
  TrainConfig a;
  a.env = "pp_v0";
  a.variant = Variant::LangGround;
  a.lambda = 0.0;
  a.hidden = 8;
  a.comm_dim = 4;
  a.batch_steps = 40;
  a.updates_per_epoch = 2;
  a.epochs = 2;
  a.seed = 6;

  TrainConfig b = a;
  b.variant = Variant::Ic3Net;

  TrainResult ra = train(a);
  TrainResult rb = train(b);
  CHECK(ra.policy.params().flatten_values() ==
        rb.policy.params().flatten_values());
  REQUIRE(ra.metrics.rows().size() == rb.metrics.rows().size());
  for (std::size_t i = 0; i < ra.metrics.rows().size(); ++i) {
    CHECK(ra.metrics.rows()[i].mean_return == rb.metrics.rows()[i].mean_return);
    CHECK(ra.metrics.rows()[i].rl_loss == rb.metrics.rows()[i].rl_loss);
  }
}

TEST_CASE("nocomm ignores the communication parameters") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 8, 4, 33);
  RolloutOptions opt;
  opt.variant = Variant::NoComm;
  opt.n_steps = 60;

  std::uint64_t c1 = 0;
  auto before = collect(env, pol, nullptr, opt, 14, c1);

  // Scramble the comm head; closed gates must make this unobservable.
  RngStream rng = rng_stream(1234, "scramble");
  Matrix& w = pol.params().at("comm.W").value;
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  std::uint64_t c2 = 0;
  auto after = collect(env, pol, nullptr, opt, 14, c2);
  CHECK(same_decisions(before, after));

  // Control: with gates open the same scramble does change behaviour.
  RolloutOptions open = opt;
  open.variant = Variant::LangGround;
  open.no_gating = true;
  std::uint64_t c3 = 0;
  auto open_before = collect(env, pol, nullptr, open, 14, c3);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  std::uint64_t c4 = 0;
  auto open_after = collect(env, pol, nullptr, open, 14, c4);
  CHECK_FALSE(same_decisions(open_before, open_after));
}

TEST_CASE("train: deterministic metrics and finite losses") {
  TrainConfig cfg;
  cfg.env = "pp_v0";
  cfg.variant = Variant::NoComm;
  cfg.hidden = 8;
  cfg.comm_dim = 4;
  cfg.batch_steps = 40;
  cfg.updates_per_epoch = 2;
  cfg.epochs = 3;
  cfg.seed = 2;

  int callbacks = 0;
  TrainResult r1 = train(cfg, [&](int epoch, const TrainResult& partial) {
    ++callbacks;
    CHECK(epoch == static_cast<int>(partial.metrics.rows().size()));
  });
  CHECK(callbacks == 3);
  TrainResult r2 = train(cfg);

  const std::string p1 = temp_path("marl_metrics_1.csv");
  const std::string p2 = temp_path("marl_metrics_2.csv");
  r1.metrics.save_csv(p1);
  r2.metrics.save_csv(p2);
  std::ifstream f1(p1), f2(p2);
  std::string s1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK_FALSE(s1.empty());

  for (const auto& row : r1.metrics.rows()) {
    CHECK(std::isfinite(row.rl_loss));
    CHECK(row.mean_length > 0.0);
    CHECK(row.mean_length <= 20.0);
    CHECK(row.gate_open_rate == 0.0);  // nocomm
  }
  CHECK(r1.episode_counter == r2.episode_counter);
  CHECK(r1.episode_counter > 0);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("metrics csv round trip is lossless") {
  MetricsLog log;
  EpochRow r;
  r.epoch = 1;
  r.mean_length = 20.0 / 3.0;
  r.mean_return = -1.05;
  r.success_rate = 0.1;
  r.rl_loss = 1.2345678901234567e-3;
  r.sup_loss = 0.9999999999999999;
  r.mean_cosine = -0.33333333333333331;
  r.gate_open_rate = 0.5;
  log.append(r);
  EpochRow r2 = r;
  r2.epoch = 2;
  r2.rl_loss = 1e300;
  r2.sup_loss = 5e-324;  // denormal min
  log.append(r2);

  const std::string path = temp_path("marl_metrics_rt.csv");
  log.save_csv(path);
  MetricsLog loaded = MetricsLog::load_csv(path);
  REQUIRE(loaded.rows().size() == 2);
  CHECK(loaded.rows()[0].mean_length == r.mean_length);
  CHECK(loaded.rows()[0].rl_loss == r.rl_loss);
  CHECK(loaded.rows()[0].mean_cosine == r.mean_cosine);
  CHECK(loaded.rows()[1].rl_loss == r2.rl_loss);
  CHECK(loaded.rows()[1].sup_loss == r2.sup_loss);
  std::remove(path.c_str());

  CHECK_THROWS_AS(MetricsLog::load_csv("/nonexistent/metrics.csv"), MarlError);
}

TEST_CASE("trace dump round trip") {
  Environment env = make_env("pp_v0");
  AgentPolicy pol = tiny_policy(env, 8, 4, 37);
  RolloutOptions opt;
  opt.variant = Variant::LangGround;
  opt.n_steps = 25;
  std::uint64_t counter = 0;
  auto traces = collect(env, pol, nullptr, opt, 88, counter);
  traces[0].steps[2][1].has_ref = true;
  traces[0].steps[2][1].ref_embedding = Vector::Ones(4) / 2.0;

  const std::string path = temp_path("marl_traces.jsonl");
  save_traces(traces, path);
  auto loaded = load_traces(path);
  std::remove(path.c_str());

  REQUIRE(loaded.size() == traces.size());
  for (std::size_t e = 0; e < traces.size(); ++e) {
    CHECK(loaded[e].length == traces[e].length);
    CHECK(loaded[e].success == traces[e].success);
    REQUIRE(loaded[e].prey.has_value());
    CHECK(*loaded[e].prey == *traces[e].prey);
    CHECK(loaded[e].total_return == doctest::Approx(traces[e].total_return));
    for (std::size_t t = 0; t < traces[e].steps.size(); ++t) {
      for (std::size_t i = 0; i < traces[e].steps[t].size(); ++i) {
        const StepRecord& x = traces[e].steps[t][i];
        const StepRecord& y = loaded[e].steps[t][i];
        CHECK(x.obs == y.obs);
        CHECK(x.action == y.action);
        CHECK(x.gate == y.gate);
        CHECK(x.reward == y.reward);
        CHECK(x.value == y.value);
        CHECK(x.comm == y.comm);
        CHECK(x.position == y.position);
        CHECK(x.has_ref == y.has_ref);
        if (x.has_ref) CHECK(x.ref_embedding == y.ref_embedding);
      }
    }
  }
}
