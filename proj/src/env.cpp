#include "marlcomm/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>
#include <set>

namespace marlcomm {

const std::array<const char*, 5> kPpActionNames = {"up", "down", "left",
                                                   "right", "stay"};

const char* color_name(BombColor c) {
  switch (c) {
    case BombColor::Red:
      return "red";
    case BombColor::Green:
      return "green";
    case BombColor::Blue:
      return "blue";
  }
  return "?";
}

void PredatorPreyConfig::validate() const {
  require(grid >= 2, "PredatorPreyConfig: grid must be >= 2");
  require(n_predators >= 1, "PredatorPreyConfig: need at least one predator");
  require(vision >= 0, "PredatorPreyConfig: vision must be >= 0");
  require(max_steps >= 1, "PredatorPreyConfig: max_steps must be >= 1");
  std::set<std::array<int, 2>> held(held_out_prey_spawns.begin(),
                                    held_out_prey_spawns.end());
  for (const auto& cell : held) {
    require(cell[0] >= 0 && cell[0] < grid && cell[1] >= 0 && cell[1] < grid,
            "PredatorPreyConfig: held-out cell outside grid");
  }
  require(static_cast<int>(held.size()) < grid * grid,
          "PredatorPreyConfig: held-out set excludes every cell");
}

void UsarConfig::validate() const {
  const int n_rooms = static_cast<int>(room_labels.size());
  require(n_rooms >= 2, "UsarConfig: need at least two rooms");
  require(n_agents >= 1, "UsarConfig: need at least one agent");
  require(static_cast<int>(tools.size()) == n_agents,
          "UsarConfig: one toolset per agent");
  require(static_cast<int>(agent_names.size()) == n_agents,
          "UsarConfig: one name per agent");
  for (const auto& e : edges) {
    require(room_index(e[0]) >= 0 && room_index(e[1]) >= 0,
            "UsarConfig: edge references unknown room label");
  }
  // Connectivity check over the undirected graph.
  std::vector<bool> seen(n_rooms, false);
  std::deque<int> queue{0};
  seen[0] = true;
  while (!queue.empty()) {
    const int r = queue.front();
    queue.pop_front();
    for (const auto& e : edges) {
      const int a = room_index(e[0]), b = room_index(e[1]);
      if (a == r && !seen[b]) {
        seen[b] = true;
        queue.push_back(b);
      }
      if (b == r && !seen[a]) {
        seen[a] = true;
        queue.push_back(a);
      }
    }
  }
  require(std::all_of(seen.begin(), seen.end(), [](bool s) { return s; }),
          "UsarConfig: room graph must be connected");
  for (int c = 0; c < 3; ++c) {
    const bool held = std::any_of(tools.begin(), tools.end(), [&](const auto& t) {
      return std::find(t.begin(), t.end(), static_cast<BombColor>(c)) != t.end();
    });
    require(held, std::string("UsarConfig: no agent holds the ") +
                      color_name(static_cast<BombColor>(c)) + " tool");
  }
  for (const auto& seq : bombs) {
    require(!seq.empty() && seq.size() <= 3,
            "UsarConfig: bomb phase count must be in 1..3");
  }
  if (!placement.empty()) {
    require(placement.size() == bombs.size(),
            "UsarConfig: placement must list one room per bomb");
    for (int r : placement) {
      require(r >= 0 && r < n_rooms, "UsarConfig: placement room out of range");
    }
  }
  require(start_room >= 0 && start_room < n_rooms,
          "UsarConfig: start room out of range");
  require(max_steps >= 1, "UsarConfig: max_steps must be >= 1");
}

int UsarConfig::room_index(int label) const {
  for (std::size_t i = 0; i < room_labels.size(); ++i) {
    if (room_labels[i] == label) return static_cast<int>(i);
  }
  return -1;
}

int UsarConfig::max_score() const {
  int phases = 0;
  for (const auto& seq : bombs) phases += static_cast<int>(seq.size());
  return 10 * phases;
}

Environment::Environment(PredatorPreyConfig cfg)
    : kind_(EnvKind::PredatorPrey), pp_(std::move(cfg)) {
  pp_.validate();
  tag_ = pp_.tag;
}

Environment::Environment(UsarConfig cfg)
    : kind_(EnvKind::Usar), usar_(std::move(cfg)) {
  usar_.validate();
  tag_ = usar_.tag;
  const int n_rooms = static_cast<int>(usar_.room_labels.size());
  adj_.assign(n_rooms, std::vector<bool>(n_rooms, false));
  for (const auto& e : usar_.edges) {
    const int a = usar_.room_index(e[0]), b = usar_.room_index(e[1]);
    adj_[a][b] = adj_[b][a] = true;
  }
  // All-pairs hop distances by BFS.
  room_dist_.assign(n_rooms, std::vector<int>(n_rooms, -1));
  for (int s = 0; s < n_rooms; ++s) {
    room_dist_[s][s] = 0;
    std::deque<int> queue{s};
    while (!queue.empty()) {
      const int r = queue.front();
      queue.pop_front();
      for (int nb = 0; nb < n_rooms; ++nb) {
        if (adj_[r][nb] && room_dist_[s][nb] < 0) {
          room_dist_[s][nb] = room_dist_[s][r] + 1;
          queue.push_back(nb);
        }
      }
    }
  }
}

int Environment::n_agents() const {
  return kind_ == EnvKind::PredatorPrey ? pp_.n_predators : usar_.n_agents;
}

int Environment::n_actions() const {
  if (kind_ == EnvKind::PredatorPrey) return 5;
  return static_cast<int>(usar_.room_labels.size()) + 1 + 3;
}

int Environment::obs_dim() const {
  if (kind_ == EnvKind::PredatorPrey) {
    const int patch = 2 * pp_.vision + 1;
    return 3 * patch * patch + 2 * pp_.grid;
  }
  const int n_rooms = static_cast<int>(usar_.room_labels.size());
  const int n_bombs = static_cast<int>(usar_.bombs.size());
  // Per bomb slot: present, inspected, 3x3 remaining-sequence one-hots,
  // 3-way remaining-phase-count one-hot.
  return n_rooms + n_bombs * (1 + 1 + 9 + 3) + 3 +
         (usar_.n_agents - 1) * n_rooms + 2;
}

int Environment::max_steps() const {
  return kind_ == EnvKind::PredatorPrey ? pp_.max_steps : usar_.max_steps;
}

int Environment::room_distance(int room_a, int room_b) const {
  return room_dist_[room_a][room_b];
}

bool Environment::rooms_adjacent(int room_a, int room_b) const {
  return adj_[room_a][room_b];
}

EnvState Environment::reset(RngStream& rng) const {
  return kind_ == EnvKind::PredatorPrey ? reset_pp(rng) : reset_usar(rng);
}

EnvState Environment::reset_pp(RngStream& rng) const {
  std::set<std::array<int, 2>> held(pp_.held_out_prey_spawns.begin(),
                                    pp_.held_out_prey_spawns.end());
  std::vector<std::array<int, 2>> spawnable;
  for (int r = 0; r < pp_.grid; ++r) {
    for (int c = 0; c < pp_.grid; ++c) {
      if (held.count({r, c}) == 0) spawnable.push_back({r, c});
    }
  }
  EnvState s;
  s.kind = EnvKind::PredatorPrey;
  s.t = 0;
  s.pp.prey = spawnable[rng.uniform_int(spawnable.size())];
  s.pp.predators.resize(pp_.n_predators);
  s.pp.reached.assign(pp_.n_predators, false);
  for (int i = 0; i < pp_.n_predators; ++i) {
    s.pp.predators[i] = {static_cast<int>(rng.uniform_int(pp_.grid)),
                         static_cast<int>(rng.uniform_int(pp_.grid))};
    if (s.pp.predators[i] == s.pp.prey) s.pp.reached[i] = true;
  }
  return s;
}

EnvState Environment::reset_usar(RngStream& rng) const {
  (void)rng;  // layout comes from the config seed, not the episode stream
  EnvState s;
  s.kind = EnvKind::Usar;
  s.t = 0;
  s.usar.agent_rooms.assign(usar_.n_agents, usar_.start_room);
  s.usar.remaining = usar_.bombs;
  s.usar.inspected.assign(usar_.bombs.size(), false);
  s.usar.score = 0;
  s.usar.feedback.assign(usar_.n_agents, Feedback::None);
  if (!usar_.placement.empty()) {
    s.usar.bomb_rooms = usar_.placement;
  } else {
    const int n_rooms = static_cast<int>(usar_.room_labels.size());
    std::vector<int> rooms(usar_.bombs.size());
    for (std::size_t k = 0; k < rooms.size(); ++k) {
      rooms[k] = static_cast<int>(k) % n_rooms;
    }
    if (usar_.layout_seed != 0) {
      RngStream layout = rng_stream(usar_.layout_seed, "usar_layout");
      for (std::size_t k = rooms.size(); k > 1; --k) {
        std::swap(rooms[k - 1], rooms[layout.uniform_int(k)]);
      }
    }
    s.usar.bomb_rooms = rooms;
  }
  return s;
}

bool Environment::finished(const EnvState& s) const {
  if (s.t >= max_steps()) return true;
  if (kind_ == EnvKind::PredatorPrey) {
    return std::all_of(s.pp.reached.begin(), s.pp.reached.end(),
                       [](bool r) { return r; });
  }
  return std::all_of(s.usar.remaining.begin(), s.usar.remaining.end(),
                     [](const auto& seq) { return seq.empty(); });
}

bool Environment::success(const EnvState& s) const {
  if (kind_ == EnvKind::PredatorPrey) {
    return std::all_of(s.pp.reached.begin(), s.pp.reached.end(),
                       [](bool r) { return r; });
  }
  return std::all_of(s.usar.remaining.begin(), s.usar.remaining.end(),
                     [](const auto& seq) { return seq.empty(); });
}

StepResult Environment::step(const EnvState& state,
                             const std::vector<int>& actions) const {
  require(static_cast<int>(actions.size()) == n_agents(),
          "step: expected " + std::to_string(n_agents()) + " actions, got " +
              std::to_string(actions.size()));
  for (int a : actions) {
    require(a >= 0 && a < n_actions(),
            "step: action id " + std::to_string(a) + " outside 0.." +
                std::to_string(n_actions() - 1));
  }
  return kind_ == EnvKind::PredatorPrey ? step_pp(state, actions)
                                        : step_usar(state, actions);
}

StepResult Environment::step_pp(const EnvState& state,
                                const std::vector<int>& actions) const {
  StepResult out;
  out.state = state;
  out.rewards.assign(pp_.n_predators, 0.0);
  EnvState& s = out.state;
  s.t = state.t + 1;

  for (int i = 0; i < pp_.n_predators; ++i) {
    if (state.pp.reached[i]) continue;  // frozen once on the prey
    auto pos = state.pp.predators[i];
    switch (actions[i]) {
      case 0: pos[0] -= 1; break;
      case 1: pos[0] += 1; break;
      case 2: pos[1] -= 1; break;
      case 3: pos[1] += 1; break;
      case 4: break;
      default: break;
    }
    pos[0] = std::clamp(pos[0], 0, pp_.grid - 1);
    pos[1] = std::clamp(pos[1], 0, pp_.grid - 1);
    s.pp.predators[i] = pos;
    if (pos == s.pp.prey) {
      s.pp.reached[i] = true;
      out.rewards[i] = 0.5;
    } else {
      out.rewards[i] = -0.05;
    }
  }
  out.done = finished(s);
  return out;
}

StepResult Environment::step_usar(const EnvState& state,
                                  const std::vector<int>& actions) const {
  const int n_rooms = static_cast<int>(usar_.room_labels.size());
  StepResult out;
  out.state = state;
  out.rewards.assign(usar_.n_agents, 0.0);
  EnvState& s = out.state;
  s.t = state.t + 1;

  // Agents act in index order within the step.
  for (int i = 0; i < usar_.n_agents; ++i) {
    const int a = actions[i];
    Feedback fb = Feedback::Ok;
    if (a < n_rooms) {
      if (adj_[s.usar.agent_rooms[i]][a]) {
        s.usar.agent_rooms[i] = a;
      } else {
        fb = Feedback::NonAdjacent;
      }
    } else if (a == n_rooms) {
      int bomb = -1;
      for (std::size_t k = 0; k < s.usar.bomb_rooms.size(); ++k) {
        if (s.usar.bomb_rooms[k] == s.usar.agent_rooms[i] &&
            !s.usar.remaining[k].empty()) {
          bomb = static_cast<int>(k);
          break;
        }
      }
      if (bomb < 0) {
        fb = Feedback::NoBomb;
      } else {
        s.usar.inspected[bomb] = true;
      }
    } else {
      const auto color = static_cast<BombColor>(a - n_rooms - 1);
      const auto& toolset = usar_.tools[i];
      int bomb = -1;
      for (std::size_t k = 0; k < s.usar.bomb_rooms.size(); ++k) {
        if (s.usar.bomb_rooms[k] == s.usar.agent_rooms[i] &&
            !s.usar.remaining[k].empty()) {
          bomb = static_cast<int>(k);
          break;
        }
      }
      if (std::find(toolset.begin(), toolset.end(), color) == toolset.end()) {
        fb = Feedback::ToolNotHeld;
      } else if (bomb < 0) {
        fb = Feedback::NoBomb;
      } else if (s.usar.remaining[bomb].front() != color) {
        fb = Feedback::WrongColor;
      } else {
        s.usar.remaining[bomb].erase(s.usar.remaining[bomb].begin());
        if (usar_.incremental_scoring) {
          s.usar.score += 10;
          for (int j = 0; j < usar_.n_agents; ++j) {
            out.rewards[j] += 10.0 / usar_.n_agents;
          }
        }
        if (s.usar.remaining[bomb].empty()) {
          const int phases = static_cast<int>(usar_.bombs[bomb].size());
          if (!usar_.incremental_scoring) {
            s.usar.score += 10 * phases;
            for (int j = 0; j < usar_.n_agents; ++j) {
              out.rewards[j] += 10.0 * phases / usar_.n_agents;
            }
          }
        }
      }
    }
    s.usar.feedback[i] = fb;
  }
  out.done = finished(s);
  return out;
}

Vector Environment::observe(const EnvState& state, int agent_id) const {
  require(agent_id >= 0 && agent_id < n_agents(), "observe: bad agent id");
  return kind_ == EnvKind::PredatorPrey ? observe_pp(state, agent_id)
                                        : observe_usar(state, agent_id);
}

// Layout: per patch cell (row-major) the channels [prey, other-predator,
// out-of-bounds], then one-hot own row, then one-hot own column.
Vector Environment::observe_pp(const EnvState& state, int agent_id) const {
  const int v = pp_.vision;
  const int patch = 2 * v + 1;
  Vector obs = Vector::Zero(obs_dim());
  const auto& me = state.pp.predators[agent_id];
  for (int pr = 0; pr < patch; ++pr) {
    for (int pc = 0; pc < patch; ++pc) {
      const int r = me[0] - v + pr;
      const int c = me[1] - v + pc;
      const int base = 3 * (pr * patch + pc);
      if (r < 0 || r >= pp_.grid || c < 0 || c >= pp_.grid) {
        obs[base + 2] = 1.0;
        continue;
      }
      if (state.pp.prey == std::array<int, 2>{r, c}) obs[base + 0] = 1.0;
      for (int j = 0; j < pp_.n_predators; ++j) {
        if (j != agent_id && state.pp.predators[j] == std::array<int, 2>{r, c}) {
          obs[base + 1] = 1.0;
          break;
        }
      }
    }
  }
  const int off = 3 * patch * patch;
  obs[off + me[0]] = 1.0;
  obs[off + pp_.grid + me[1]] = 1.0;
  return obs;
}

// Layout: one-hot own room, then per bomb slot [present, inspected, 3 slots x
// 3 colors of the remaining sequence, 3-way remaining-count one-hot], then
// own-tool bits, then teammate room one-hots in agent order skipping self,
// then t/max_steps and score/max_score. Bomb features are visible only while
// the bomb sits undefused in the agent's current room; the sequence and count
// appear only once inspected.
Vector Environment::observe_usar(const EnvState& state, int agent_id) const {
  const int n_rooms = static_cast<int>(usar_.room_labels.size());
  const int n_bombs = static_cast<int>(usar_.bombs.size());
  Vector obs = Vector::Zero(obs_dim());
  int off = 0;
  obs[state.usar.agent_rooms[agent_id]] = 1.0;
  off += n_rooms;
  for (int k = 0; k < n_bombs; ++k) {
    const bool present = state.usar.bomb_rooms[k] ==
                             state.usar.agent_rooms[agent_id] &&
                         !state.usar.remaining[k].empty();
    if (present) {
      obs[off + 0] = 1.0;
      if (state.usar.inspected[k]) {
        obs[off + 1] = 1.0;
        const auto& seq = state.usar.remaining[k];
        for (std::size_t p = 0; p < seq.size() && p < 3; ++p) {
          obs[off + 2 + 3 * p + static_cast<int>(seq[p])] = 1.0;
        }
        obs[off + 11 + static_cast<int>(seq.size()) - 1] = 1.0;
      }
    }
    off += 14;
  }
  for (BombColor c : usar_.tools[agent_id]) {
    obs[off + static_cast<int>(c)] = 1.0;
  }
  off += 3;
  for (int j = 0; j < usar_.n_agents; ++j) {
    if (j == agent_id) continue;
    obs[off + state.usar.agent_rooms[j]] = 1.0;
    off += n_rooms;
  }
  obs[off++] = static_cast<double>(state.t) / usar_.max_steps;
  obs[off++] = static_cast<double>(state.usar.score) / usar_.max_score();
  return obs;
}

Vector Environment::agent_position(const EnvState& state, int agent_id) const {
  if (kind_ == EnvKind::PredatorPrey) {
    Vector p(2);
    p << state.pp.predators[agent_id][0], state.pp.predators[agent_id][1];
    return p;
  }
  Vector p(1);
  p << state.usar.agent_rooms[agent_id];
  return p;
}

std::string observation_key(const std::string& env_tag, const Vector& obs,
                            int action) {
  require(obs.allFinite(), "observation_key: non-finite observation");
  std::string key = env_tag;
  key += '|';
  char buf[32];
  for (Index j = 0; j < obs.size(); ++j) {
    const long long q = std::llround(obs[j] * 1e6);
    std::snprintf(buf, sizeof(buf), "%lld", q);
    key += buf;
    key += j + 1 < obs.size() ? ',' : '|';
  }
  if (obs.size() == 0) key += '|';
  key += std::to_string(action);
  return key;
}

bool is_env_preset(const std::string& name) {
  return name == "pp_v0" || name == "pp_v1" || name == "pp10_v1" ||
         name == "usar";
}

Environment make_env(const std::string& preset) {
  if (preset == "pp_v0") {
    PredatorPreyConfig cfg;
    cfg.tag = "pp_v0";
    cfg.vision = 0;
    return Environment(cfg);
  }
  if (preset == "pp_v1") {
    PredatorPreyConfig cfg;
    cfg.tag = "pp_v1";
    cfg.vision = 1;
    return Environment(cfg);
  }
  if (preset == "pp10_v1") {
    PredatorPreyConfig cfg;
    cfg.tag = "pp10_v1";
    cfg.grid = 10;
    cfg.vision = 1;
    cfg.max_steps = 40;
    return Environment(cfg);
  }
  if (preset == "usar") {
    return Environment(UsarConfig{});
  }
  throw MarlError("unknown environment preset: " + preset);
}

}  // namespace marlcomm
