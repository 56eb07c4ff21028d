#pragma once

#include "marlcomm/core.hpp"
#include "marlcomm/rng.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace marlcomm {

// ---------------------------------------------------------------------------
// Predator-Prey: n predators with vision v search for one static prey on an
// x by x grid. Actions: 0 up, 1 down, 2 left, 3 right, 4 stay. A predator on
// the prey cell is "reached" and frozen. Per-step reward is -0.05 for each
// unreached predator and +0.5 on the step it reaches.
// ---------------------------------------------------------------------------

struct PredatorPreyConfig {
  std::string tag = "pp_v0";
  int grid = 5;
  int n_predators = 3;
  int vision = 0;
  int max_steps = 20;
  // Cells (row, col) excluded from prey spawning.
  std::vector<std::array<int, 2>> held_out_prey_spawns;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Urban Search & Rescue: three agents with color-coded tools defuse bombs in
// a room graph. Actions: 0..n_rooms-1 move to room (by index into
// room_labels), n_rooms inspect, n_rooms+1..n_rooms+3 apply red/green/blue.
// Defusing an x-phase bomb scores 10*x team points, shared equally.
// ---------------------------------------------------------------------------

enum class BombColor { Red = 0, Green = 1, Blue = 2 };

const char* color_name(BombColor c);

struct UsarConfig {
  std::string tag = "usar";
  std::vector<int> room_labels = {0, 3, 5, 6, 8};
  // Edges as pairs of room labels; room 0 connects to all, plus 5-6, 3-8, 8-6.
  std::vector<std::array<int, 2>> edges = {{0, 3}, {0, 5}, {0, 6}, {0, 8},
                                           {5, 6}, {3, 8}, {8, 6}};
  int n_agents = 3;
  std::vector<std::vector<BombColor>> bombs = {
      {BombColor::Red},
      {BombColor::Blue},
      {BombColor::Green, BombColor::Blue},
      {BombColor::Red, BombColor::Green},
      {BombColor::Blue, BombColor::Red, BombColor::Green}};
  // Tool colors per agent: Alpha, Bravo, Charlie.
  std::vector<std::vector<BombColor>> tools = {
      {BombColor::Red, BombColor::Green},
      {BombColor::Green, BombColor::Blue},
      {BombColor::Blue, BombColor::Red}};
  std::vector<std::string> agent_names = {"Alpha", "Bravo", "Charlie"};
  int max_steps = 100;
  // Bomb k sits in room placement[k] (room index). Derived from layout_seed
  // when empty; seed 0 keeps bombs in room-label order.
  std::vector<int> placement;
  std::uint64_t layout_seed = 0;
  int start_room = 0;  // room index; all agents start here
  // When true, each correct tool application scores 10 immediately instead
  // of a 10*x lump sum on completion. Totals agree.
  bool incremental_scoring = false;

  void validate() const;
  int room_index(int label) const;  // -1 when unknown
  int max_score() const;            // 10 * total phases
};

enum class Feedback {
  None = 0,
  Ok,
  NonAdjacent,
  NoBomb,
  ToolNotHeld,
  WrongColor
};

struct PpState {
  std::vector<std::array<int, 2>> predators;
  std::array<int, 2> prey{0, 0};
  std::vector<bool> reached;
};

struct UsarState {
  std::vector<int> agent_rooms;
  std::vector<int> bomb_rooms;
  // Remaining phase sequence per bomb; a suffix of the configured sequence.
  std::vector<std::vector<BombColor>> remaining;
  std::vector<bool> inspected;
  int score = 0;
  std::vector<Feedback> feedback;
};

enum class EnvKind { PredatorPrey, Usar };

struct EnvState {
  EnvKind kind = EnvKind::PredatorPrey;
  int t = 0;
  PpState pp;
  UsarState usar;
};

struct StepResult {
  EnvState state;
  std::vector<double> rewards;
  bool done = false;
};

// Deterministic Dec-POMDP state machine; a value type, cheap to copy.
// reset/step/observe are pure given their inputs and the rng stream.
class Environment {
 public:
  explicit Environment(PredatorPreyConfig cfg);
  explicit Environment(UsarConfig cfg);

  EnvKind kind() const { return kind_; }
  const std::string& tag() const { return tag_; }
  int n_agents() const;
  int n_actions() const;
  int obs_dim() const;
  int max_steps() const;

  const PredatorPreyConfig& pp_config() const { return pp_; }
  const UsarConfig& usar_config() const { return usar_; }

  EnvState reset(RngStream& rng) const;
  StepResult step(const EnvState& state, const std::vector<int>& actions) const;
  Vector observe(const EnvState& state, int agent_id) const;

  bool finished(const EnvState& state) const;
  // PP: Euclidean grid position. USAR: room index (hop metric, see
  // room_distance).
  Vector agent_position(const EnvState& state, int agent_id) const;
  int room_distance(int room_a, int room_b) const;  // USAR shortest hops
  bool rooms_adjacent(int room_a, int room_b) const;

  // Success means the task goal was met within the step limit: all predators
  // reached the prey / all bombs defused.
  bool success(const EnvState& state) const;

 private:
  EnvKind kind_;
  std::string tag_;
  PredatorPreyConfig pp_;
  UsarConfig usar_;
  std::vector<std::vector<bool>> adj_;       // USAR adjacency by room index
  std::vector<std::vector<int>> room_dist_;  // USAR all-pairs hops

  EnvState reset_pp(RngStream& rng) const;
  EnvState reset_usar(RngStream& rng) const;
  StepResult step_pp(const EnvState& state,
                     const std::vector<int>& actions) const;
  StepResult step_usar(const EnvState& state,
                       const std::vector<int>& actions) const;
  Vector observe_pp(const EnvState& state, int agent_id) const;
  Vector observe_usar(const EnvState& state, int agent_id) const;
};

// Canonical cross-platform key for a (tag, observation, action) triple.
// Entries are rounded to 6 decimals before serialization, so perturbations
// below that granularity do not change the key.
std::string observation_key(const std::string& env_tag, const Vector& obs,
                            int action);

// Named presets: pp_v0, pp_v1, pp10_v1, usar.
Environment make_env(const std::string& preset);
bool is_env_preset(const std::string& name);

// PP action names in id order: up, down, left, right, stay.
extern const std::array<const char*, 5> kPpActionNames;

}  // namespace marlcomm
