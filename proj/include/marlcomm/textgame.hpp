#pragma once

#include "marlcomm/core.hpp"
#include "marlcomm/env.hpp"
#include "marlcomm/grounding.hpp"

#include <array>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace marlcomm {

// ---------------------------------------------------------------------------
// The text interface mirrors the tensor interface: render() verbalizes
// exactly the information observe() exposes (plus last-action feedback and
// the inbox), parse() maps free-form replies back to actions by keyword, and
// the oracle agents play the text game with scripted policies and template
// messages. Sentence templates live in data files, not code.
// ---------------------------------------------------------------------------

class TemplateSet {
 public:
  // Loads a flat JSON object of name -> template text. Placeholders are
  // written {key} and replaced verbatim by fill().
  static TemplateSet load(const std::string& path);

  const std::string& raw(const std::string& name) const;
  std::string fill(
      const std::string& name,
      const std::vector<std::pair<std::string, std::string>>& args) const;

 private:
  std::map<std::string, std::string> templates_;
  std::string path_;
};

// Template file directory: the MARLCOMM_TEMPLATES environment variable when
// set, otherwise the source-tree data directory baked in at build time.
std::string templates_dir();

// Cached per-family template set ("pp" for every predator-prey preset,
// "usar" for the rescue task).
const TemplateSet& env_templates(const std::string& env_tag);

// ---------------------------------------------------------------------------
// Rendering and parsing
// ---------------------------------------------------------------------------

// Verbalizes one agent's view. The text is a pure function of
// observe(state, agent_id), the agent's last feedback code, and the inbox —
// never of hidden state (a predator with vision 0 is told its position and
// nothing about the prey).
std::string render(const Environment& env, const EnvState& state, int agent_id,
                   const std::vector<std::string>& inbox);

struct ParseOutcome {
  bool ok = false;
  int action = 0;
  std::string message;   // text after "Message to Team:", unquoted
  std::string feedback;  // corrective sentence when !ok
};

// Case-insensitive keyword matching per the reply format ("Action selection:
// ... Message to Team: \"...\""). Moves to non-adjacent rooms, inspecting
// where no bomb sits, and applying tools the agent does not hold are caught
// here with the same corrective sentences the environment would use.
ParseOutcome parse_reply(const std::string& text, const Environment& env,
                         const EnvState& state, int agent_id);

// The canonical phrase for an action id ("Move up", "Move to Room 5", ...).
std::string action_phrase(const Environment& env, int action);

// Formats (action, message) in the canonical reply format; parse_reply on
// the result always succeeds when the action is legal in `state`.
std::string format_reply(const Environment& env, int action,
                         const std::string& message);

// ---------------------------------------------------------------------------
// Oracle agents
// ---------------------------------------------------------------------------

struct OracleDecision {
  int action = 0;
  std::string message;
};

// Scripted stand-ins for LLM teammates. They play from the same information
// a learning agent gets (own observation + teammates' broadcasts) plus the
// public rules, keep a belief across steps, and always emit legal actions
// and non-empty template messages.
//
// Predator-prey: each agent sweeps its own share of rows, eliminating cells
// it sees empty and cells teammates report from; a prey sighting (its own or
// any broadcast coordinate) switches everyone to greedy pursuit.
// Rescue: explore unvisited rooms, inspect unknown bombs, apply a held tool
// on the next phase, and broadcast a request naming the bomb, room, and
// color whenever the needed tool is missing.
class OracleAgent {
 public:
  OracleAgent(const Environment& env, int agent_id);

  void reset();
  OracleDecision act(const EnvState& state,
                     const std::vector<std::string>& inbox);

  // PP: the currently believed prey cell, if any (drives the recorder's
  // prey_known flag).
  std::optional<std::array<int, 2>> known_prey() const { return known_prey_; }

 private:
  OracleDecision act_pp(const EnvState& state,
                        const std::vector<std::string>& inbox);
  OracleDecision act_usar(const EnvState& state,
                          const std::vector<std::string>& inbox);

  const Environment* env_;
  int id_;

  // PP belief
  std::optional<std::array<int, 2>> known_prey_;
  std::vector<bool> eliminated_;  // grid cells confirmed empty
  int band_lo_ = 0, band_hi_ = 0;

  // USAR belief
  std::vector<std::optional<int>> bomb_room_;   // room index per bomb
  std::vector<bool> bomb_done_;
  std::vector<std::optional<BombColor>> requested_;  // open requests I can serve
  std::vector<bool> visited_;
};

// ---------------------------------------------------------------------------
// Dataset recorder
// ---------------------------------------------------------------------------

// Plays n_episodes with a full oracle team and logs every (observation,
// action, message) with the message's embedding. Deterministic given (env,
// seed) and a deterministic provider. Entries carry episode/step/agent
// metadata; predator-prey entries also carry the prey cell and whether the
// speaker knew it.
GroundingDataset record_dataset(const Environment& env,
                                EmbeddingProvider& provider, int n_episodes,
                                std::uint64_t seed);

}  // namespace marlcomm
