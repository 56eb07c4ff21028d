#include "marlcomm/textgame.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <regex>
#include <sstream>
#include <unordered_map>

namespace marlcomm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

TemplateSet TemplateSet::load(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open template file: " + path);
  json j = json::parse(in, nullptr, false);
  require(!j.is_discarded(), path + ": malformed JSON");
  require(j.is_object(), path + ": expected an object of name -> template");
  TemplateSet set;
  set.path_ = path;
  for (const auto& [name, value] : j.items()) {
    require(value.is_string(), path + ": template \"" + name +
                                   "\" must be a string");
    set.templates_[name] = value.get<std::string>();
  }
  return set;
}

const std::string& TemplateSet::raw(const std::string& name) const {
  auto it = templates_.find(name);
  require(it != templates_.end(),
          path_ + ": no template named \"" + name + "\"");
  return it->second;
}

std::string TemplateSet::fill(
    const std::string& name,
    const std::vector<std::pair<std::string, std::string>>& args) const {
  std::string out = raw(name);
  for (const auto& [key, value] : args) {
    const std::string ph = "{" + key + "}";
    std::size_t pos = 0;
    while ((pos = out.find(ph, pos)) != std::string::npos) {
      out.replace(pos, ph.size(), value);
      pos += value.size();
    }
  }
  if (const std::size_t brace = out.find('{'); brace != std::string::npos) {
    throw MarlError(path_ + ": unresolved placeholder in template \"" + name +
                    "\": " + out.substr(brace, 24));
  }
  return out;
}

std::string templates_dir() {
  if (const char* dir = std::getenv("MARLCOMM_TEMPLATES")) return dir;
#ifdef MARL_DATA_DIR
  return std::string(MARL_DATA_DIR) + "/templates";
#else
  return "data/templates";
#endif
}

const TemplateSet& env_templates(const std::string& env_tag) {
  static std::mutex mu;
  static std::map<std::string, TemplateSet> cache;
  const std::string family = env_tag == "usar" ? "usar" : "pp";
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(family);
  if (it == cache.end()) {
    it = cache.emplace(family,
                       TemplateSet::load(templates_dir() + "/" + family +
                                         ".json"))
             .first;
  }
  return it->second;
}

// ---------------------------------------------------------------------------
// Small text helpers
// ---------------------------------------------------------------------------

namespace {

std::string lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// Strips one layer of straight or curly quotes (and stray apostrophes) from
// either end; tolerates an unterminated opening quote.
std::string unquote(const std::string& s) {
  static const std::vector<std::string> kQuotes = {"\"", "“", "”",
                                                   "'"};
  std::string out = trim(s);
  for (const auto& q : kQuotes) {
    if (out.size() >= q.size() && out.compare(0, q.size(), q) == 0) {
      out = out.substr(q.size());
      break;
    }
  }
  for (const auto& q : kQuotes) {
    if (out.size() >= q.size() &&
        out.compare(out.size() - q.size(), q.size(), q) == 0) {
      out = out.substr(0, out.size() - q.size());
      break;
    }
  }
  return trim(out);
}

std::string join(const std::vector<std::string>& parts,
                 const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// "a", "a and b", "a, b and c"
std::string join_natural(const std::vector<std::string>& parts) {
  if (parts.empty()) return "";
  if (parts.size() == 1) return parts[0];
  std::string out;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (i) out += ", ";
    out += parts[i];
  }
  return out + " and " + parts.back();
}

const char* kColorNames[3] = {"red", "green", "blue"};

const char* dir_name(int action) {
  return kPpActionNames[static_cast<std::size_t>(action)];
}

std::string itos(int v) { return std::to_string(v); }

}  // namespace

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

namespace {

std::string render_pp(const Environment& env, const EnvState& state,
                      int agent_id, const std::vector<std::string>& inbox,
                      const TemplateSet& t) {
  const PredatorPreyConfig& cfg = env.pp_config();
  const auto& me = state.pp.predators[static_cast<std::size_t>(agent_id)];
  std::vector<std::string> lines;
  lines.push_back(
      t.fill("position", {{"r", itos(me[0])}, {"c", itos(me[1])}}));

  const int v = cfg.vision;
  for (int dr = -v; dr <= v; ++dr) {
    for (int dc = -v; dc <= v; ++dc) {
      const int r = me[0] + dr, c = me[1] + dc;
      if (r < 0 || r >= cfg.grid || c < 0 || c >= cfg.grid) continue;
      if (state.pp.prey == std::array<int, 2>{r, c}) {
        lines.push_back(
            t.fill("prey_visible", {{"r", itos(r)}, {"c", itos(c)}}));
      }
      for (int j = 0; j < cfg.n_predators; ++j) {
        if (j != agent_id &&
            state.pp.predators[static_cast<std::size_t>(j)] ==
                std::array<int, 2>{r, c}) {
          lines.push_back(
              t.fill("teammate_visible", {{"r", itos(r)}, {"c", itos(c)}}));
          break;  // one sentence per cell, like the one bit in the tensor
        }
      }
    }
  }

  if (!inbox.empty()) {
    lines.push_back(t.raw("inbox_header"));
    for (const auto& m : inbox) {
      lines.push_back(t.fill("inbox_line", {{"message", m}}));
    }
  }
  lines.push_back(t.raw("prompt"));
  return join(lines, "\n");
}

std::string render_usar(const Environment& env, const EnvState& state,
                        int agent_id, const std::vector<std::string>& inbox,
                        const TemplateSet& t) {
  const UsarConfig& cfg = env.usar_config();
  const int room = state.usar.agent_rooms[static_cast<std::size_t>(agent_id)];
  const std::string room_label = itos(cfg.room_labels[static_cast<std::size_t>(room)]);
  std::vector<std::string> lines;
  lines.push_back(t.fill("round", {{"t", itos(state.t)},
                                   {"T", itos(cfg.max_steps)}}));

  switch (state.usar.feedback[static_cast<std::size_t>(agent_id)]) {
    case Feedback::NonAdjacent:
      lines.push_back(t.raw("fb_nonadjacent"));
      break;
    case Feedback::NoBomb:
      lines.push_back(t.raw("feedback_nobomb"));
      break;
    case Feedback::ToolNotHeld:
      lines.push_back(t.raw("fb_toolnotheld"));
      break;
    case Feedback::WrongColor:
      lines.push_back(t.raw("fb_wrongcolor"));
      break;
    default:
      break;
  }

  std::vector<std::string> bomb_names;
  const int n_bombs = static_cast<int>(cfg.bombs.size());
  for (int k = 0; k < n_bombs; ++k) {
    if (state.usar.bomb_rooms[static_cast<std::size_t>(k)] == room &&
        !state.usar.remaining[static_cast<std::size_t>(k)].empty()) {
      bomb_names.push_back(t.fill("bomb_label", {{"bomb", itos(k + 1)}}));
    }
  }
  if (bomb_names.empty()) {
    lines.push_back(t.fill("room_empty", {{"room", room_label}}));
  } else {
    lines.push_back(t.fill("room_bombs", {{"room", room_label},
                                          {"bombs", join_natural(bomb_names)}}));
  }
  for (int k = 0; k < n_bombs; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    if (state.usar.bomb_rooms[ku] == room && !state.usar.remaining[ku].empty() &&
        state.usar.inspected[ku]) {
      std::vector<std::string> seq;
      for (BombColor c : state.usar.remaining[ku]) {
        seq.push_back(kColorNames[static_cast<int>(c)]);
      }
      lines.push_back(t.fill(
          "bomb_sequence",
          {{"bomb", itos(k + 1)},
           {"n", itos(static_cast<int>(state.usar.remaining[ku].size()))},
           {"seq", join(seq, ", ")}}));
    }
  }

  std::vector<std::string> tools;
  for (BombColor c : cfg.tools[static_cast<std::size_t>(agent_id)]) {
    tools.push_back(kColorNames[static_cast<int>(c)]);
  }
  lines.push_back(t.fill("tools", {{"tools", join_natural(tools)}}));

  for (int j = 0; j < cfg.n_agents; ++j) {
    if (j == agent_id) continue;
    const int jr = state.usar.agent_rooms[static_cast<std::size_t>(j)];
    lines.push_back(t.fill(
        "teammate_room",
        {{"name", cfg.agent_names[static_cast<std::size_t>(j)]},
         {"room", itos(cfg.room_labels[static_cast<std::size_t>(jr)])}}));
  }
  lines.push_back(t.fill("score", {{"score", itos(state.usar.score)}}));

  if (!inbox.empty()) {
    lines.push_back(t.raw("inbox_header"));
    for (std::size_t m = 0; m < inbox.size(); ++m) {
      // Inbox arrives in agent order with the reader skipped.
      std::size_t j = m < static_cast<std::size_t>(agent_id) ? m : m + 1;
      lines.push_back(t.fill("inbox_line",
                             {{"name", cfg.agent_names[j]},
                              {"message", inbox[m]}}));
    }
  }
  lines.push_back(t.raw("prompt"));
  return join(lines, "\n");
}

}  // namespace

std::string render(const Environment& env, const EnvState& state, int agent_id,
                   const std::vector<std::string>& inbox) {
  require(agent_id >= 0 && agent_id < env.n_agents(), "render: bad agent id");
  const TemplateSet& t = env_templates(env.tag());
  return env.kind() == EnvKind::PredatorPrey
             ? render_pp(env, state, agent_id, inbox, t)
             : render_usar(env, state, agent_id, inbox, t);
}

// ---------------------------------------------------------------------------
// parse
// ---------------------------------------------------------------------------

std::string action_phrase(const Environment& env, int action) {
  require(action >= 0 && action < env.n_actions(),
          "action_phrase: action out of range");
  const TemplateSet& t = env_templates(env.tag());
  if (env.kind() == EnvKind::PredatorPrey) {
    if (action == 4) return t.raw("action_stay");
    return t.fill("action_move", {{"dir", dir_name(action)}});
  }
  const UsarConfig& cfg = env.usar_config();
  const int n_rooms = static_cast<int>(cfg.room_labels.size());
  if (action < n_rooms) {
    return t.fill("action_move",
                  {{"room", itos(cfg.room_labels[static_cast<std::size_t>(
                        action)])}});
  }
  if (action == n_rooms) return t.raw("action_inspect");
  return t.fill("action_apply",
                {{"color", kColorNames[action - n_rooms - 1]}});
}

std::string format_reply(const Environment& env, int action,
                         const std::string& message) {
  const TemplateSet& t = env_templates(env.tag());
  return t.fill("reply", {{"action", action_phrase(env, action)},
                          {"message", message}});
}

ParseOutcome parse_reply(const std::string& text, const Environment& env,
                         const EnvState& state, int agent_id) {
  require(agent_id >= 0 && agent_id < env.n_agents(),
          "parse_reply: bad agent id");
  const TemplateSet& t = env_templates(env.tag());
  const std::string low = lower(text);

  ParseOutcome out;
  std::string action_seg = low;
  const std::size_t mpos = low.find("message to team");
  if (mpos != std::string::npos) {
    action_seg = low.substr(0, mpos);
    std::size_t colon = text.find(':', mpos);
    if (colon != std::string::npos) {
      out.message = unquote(text.substr(colon + 1));
    }
  }
  const std::size_t apos = action_seg.find("action selection");
  if (apos != std::string::npos) action_seg = action_seg.substr(apos);

  if (env.kind() == EnvKind::PredatorPrey) {
    // Earliest directional keyword wins; "move up" and bare "up" both hit.
    static const std::regex word(
        "\\b(up|down|left|right|stay)\\b");
    std::smatch m;
    if (!std::regex_search(action_seg, m, word)) {
      out.feedback = t.raw("parse_unknown");
      return out;
    }
    const std::string kw = m[1];
    for (int a = 0; a < 5; ++a) {
      if (kw == kPpActionNames[static_cast<std::size_t>(a)]) out.action = a;
    }
    out.ok = true;
    return out;
  }

  const UsarConfig& cfg = env.usar_config();
  const int n_rooms = static_cast<int>(cfg.room_labels.size());
  const int room = state.usar.agent_rooms[static_cast<std::size_t>(agent_id)];
  std::smatch m;
  static const std::regex move_re("move\\s+to\\s+(?:the\\s+)?room\\s*(\\d+)");
  static const std::regex apply_re("apply\\b");
  static const std::regex color_re("\\b(red|green|blue)\\b");
  if (std::regex_search(action_seg, m, move_re)) {
    const int label = std::stoi(m[1]);
    const int target = cfg.room_index(label);
    if (target < 0) {
      std::vector<std::string> labels;
      for (int l : cfg.room_labels) labels.push_back(itos(l));
      out.feedback = t.fill("feedback_unknown_room",
                            {{"room", itos(label)},
                             {"rooms", join(labels, ", ")}});
      return out;
    }
    if (!env.rooms_adjacent(room, target)) {
      out.feedback = t.fill(
          "feedback_nonadjacent",
          {{"target", itos(label)},
           {"room", itos(cfg.room_labels[static_cast<std::size_t>(room)])}});
      return out;
    }
    out.ok = true;
    out.action = target;
    return out;
  }
  if (action_seg.find("inspect") != std::string::npos) {
    bool bomb_here = false;
    for (std::size_t k = 0; k < cfg.bombs.size(); ++k) {
      if (state.usar.bomb_rooms[k] == room && !state.usar.remaining[k].empty()) {
        bomb_here = true;
      }
    }
    if (!bomb_here) {
      out.feedback = t.raw("feedback_nobomb");
      return out;
    }
    out.ok = true;
    out.action = n_rooms;
    return out;
  }
  if (std::regex_search(action_seg, apply_re)) {
    if (!std::regex_search(action_seg, m, color_re)) {
      out.feedback = t.raw("parse_unknown");
      return out;
    }
    int color = 0;
    for (int c = 0; c < 3; ++c) {
      if (m[1] == kColorNames[c]) color = c;
    }
    const auto& held = cfg.tools[static_cast<std::size_t>(agent_id)];
    if (std::find(held.begin(), held.end(), static_cast<BombColor>(color)) ==
        held.end()) {
      out.feedback =
          t.fill("feedback_toolnotheld", {{"color", kColorNames[color]}});
      return out;
    }
    // Apply targets the lowest-index live bomb in the room; when it has been
    // inspected the mismatch is already knowable here.
    for (std::size_t k = 0; k < cfg.bombs.size(); ++k) {
      if (state.usar.bomb_rooms[k] != room || state.usar.remaining[k].empty()) {
        continue;
      }
      if (state.usar.inspected[k] &&
          state.usar.remaining[k].front() != static_cast<BombColor>(color)) {
        out.feedback =
            t.fill("feedback_wrongcolor", {{"color", kColorNames[color]}});
        return out;
      }
      break;
    }
    out.ok = true;
    out.action = n_rooms + 1 + color;
    return out;
  }
  out.feedback = t.raw("parse_unknown");
  return out;
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

OracleAgent::OracleAgent(const Environment& env, int agent_id)
    : env_(&env), id_(agent_id) {
  require(agent_id >= 0 && agent_id < env.n_agents(),
          "OracleAgent: bad agent id");
  reset();
}

void OracleAgent::reset() {
  known_prey_.reset();
  if (env_->kind() == EnvKind::PredatorPrey) {
    const PredatorPreyConfig& cfg = env_->pp_config();
    eliminated_.assign(
        static_cast<std::size_t>(cfg.grid) * static_cast<std::size_t>(cfg.grid),
        false);
    band_lo_ = id_ * cfg.grid / cfg.n_predators;
    band_hi_ = (id_ + 1) * cfg.grid / cfg.n_predators;
  } else {
    const UsarConfig& cfg = env_->usar_config();
    bomb_room_.assign(cfg.bombs.size(), std::nullopt);
    bomb_done_.assign(cfg.bombs.size(), false);
    requested_.assign(cfg.bombs.size(), std::nullopt);
    visited_.assign(cfg.room_labels.size(), false);
  }
}

OracleDecision OracleAgent::act(const EnvState& state,
                                const std::vector<std::string>& inbox) {
  return env_->kind() == EnvKind::PredatorPrey ? act_pp(state, inbox)
                                               : act_usar(state, inbox);
}

namespace {

// Greedy step toward the target: close the row gap first, then the column.
int greedy_dir(const std::array<int, 2>& from, const std::array<int, 2>& to) {
  if (to[0] < from[0]) return 0;  // up
  if (to[0] > from[0]) return 1;  // down
  if (to[1] < from[1]) return 2;  // left
  if (to[1] > from[1]) return 3;  // right
  return 4;                       // stay
}

}  // namespace

OracleDecision OracleAgent::act_pp(const EnvState& state,
                                   const std::vector<std::string>& inbox) {
  const PredatorPreyConfig& cfg = env_->pp_config();
  const TemplateSet& t = env_templates(env_->tag());
  const int G = cfg.grid;
  const auto& me = state.pp.predators[static_cast<std::size_t>(id_)];
  auto cell_index = [G](int r, int c) {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(G) +
           static_cast<std::size_t>(c);
  };

  // Broadcast beliefs: prey coordinates dominate; sweep reports eliminate
  // the speaker's cell.
  static const std::regex prey_re("prey location at \\((\\d+),(\\d+)\\)");
  static const std::regex sweep_re(
      "from \\((\\d+),(\\d+)\\), no prey in sight");
  for (const auto& msg : inbox) {
    std::smatch m;
    if (std::regex_search(msg, m, prey_re)) {
      known_prey_ = {std::stoi(m[1]), std::stoi(m[2])};
    } else if (std::regex_search(msg, m, sweep_re)) {
      // "No prey in sight" clears the speaker's whole vision patch.
      const int r = std::stoi(m[1]), c = std::stoi(m[2]);
      for (int dr = -cfg.vision; dr <= cfg.vision; ++dr) {
        for (int dc = -cfg.vision; dc <= cfg.vision; ++dc) {
          const int er = r + dr, ec = c + dc;
          if (er >= 0 && er < G && ec >= 0 && ec < G) {
            eliminated_[cell_index(er, ec)] = true;
          }
        }
      }
    }
  }

  // Own sight: everything inside the vision patch is either the prey or an
  // eliminated cell.
  for (int dr = -cfg.vision; dr <= cfg.vision; ++dr) {
    for (int dc = -cfg.vision; dc <= cfg.vision; ++dc) {
      const int r = me[0] + dr, c = me[1] + dc;
      if (r < 0 || r >= G || c < 0 || c >= G) continue;
      if (state.pp.prey == std::array<int, 2>{r, c}) {
        known_prey_ = {r, c};
      } else {
        eliminated_[cell_index(r, c)] = true;
      }
    }
  }

  if (known_prey_) {
    const auto prey = *known_prey_;
    const auto rc = [&](const char* k1, const char* k2)
        -> std::vector<std::pair<std::string, std::string>> {
      return {{k1, itos(prey[0])}, {k2, itos(prey[1])}};
    };
    if (me == prey) {
      return {4, t.fill("oracle_converge", rc("r", "c"))};
    }
    const int dir = greedy_dir(me, prey);
    return {dir, t.fill("oracle_toward", {{"dir", dir_name(dir)},
                                          {"r", itos(prey[0])},
                                          {"c", itos(prey[1])}})};
  }

  // Sweep: nearest unexplored cell in my row band, serpentine tie-break;
  // fall back to the nearest unexplored cell anywhere.
  auto serp = [G](int lo, int r, int c) {
    const int row = r - lo;
    return row * G + (row % 2 == 0 ? c : G - 1 - c);
  };
  std::array<int, 2> target{-1, -1};
  int best_dist = 1 << 30, best_order = 1 << 30;
  auto consider = [&](int lo, int hi) {
    for (int r = lo; r < hi; ++r) {
      for (int c = 0; c < G; ++c) {
        if (eliminated_[cell_index(r, c)]) continue;
        const int dist = std::abs(r - me[0]) + std::abs(c - me[1]);
        const int order = serp(lo, r, c);
        if (dist < best_dist || (dist == best_dist && order < best_order)) {
          best_dist = dist;
          best_order = order;
          target = {r, c};
        }
      }
    }
  };
  consider(band_lo_, band_hi_);
  if (target[0] < 0) consider(0, G);
  // The prey cell is never eliminated, so an unexplored cell always exists.
  const int dir = target[0] < 0 ? 4 : greedy_dir(me, target);
  return {dir, t.fill("oracle_sweep", {{"dir", dir_name(dir)},
                                       {"r", itos(me[0])},
                                       {"c", itos(me[1])}})};
}

OracleDecision OracleAgent::act_usar(const EnvState& state,
                                     const std::vector<std::string>& inbox) {
  const UsarConfig& cfg = env_->usar_config();
  const TemplateSet& t = env_templates(env_->tag());
  const int n_rooms = static_cast<int>(cfg.room_labels.size());
  const int n_bombs = static_cast<int>(cfg.bombs.size());
  const int room = state.usar.agent_rooms[static_cast<std::size_t>(id_)];
  visited_[static_cast<std::size_t>(room)] = true;
  auto label = [&](int idx) {
    return itos(cfg.room_labels[static_cast<std::size_t>(idx)]);
  };
  auto holds = [&](BombColor c) {
    const auto& held = cfg.tools[static_cast<std::size_t>(id_)];
    return std::find(held.begin(), held.end(), c) != held.end();
  };

  // What the current room shows.
  std::vector<bool> present(static_cast<std::size_t>(n_bombs), false);
  for (int k = 0; k < n_bombs; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    if (state.usar.bomb_rooms[ku] == room) {
      if (!state.usar.remaining[ku].empty()) {
        present[ku] = true;
        bomb_room_[ku] = room;
      } else {
        bomb_done_[ku] = true;
        requested_[ku].reset();
      }
    } else if (bomb_room_[ku] == room) {
      // Believed here but gone: it was defused (bombs never move).
      bomb_done_[ku] = true;
      requested_[ku].reset();
    }
  }

  // Teammate broadcasts carry bomb locations and tool requests.
  static const std::regex req_re(
      "[Bb]omb (\\d+) in [Rr]oom (\\d+) needs the (red|green|blue) tool");
  static const std::regex seen_re(
      "[Bb]omb (\\d+) in [Rr]oom (\\d+)");
  static const std::regex apply_re(
      "applying my (red|green|blue) tool on [Bb]omb (\\d+) in [Rr]oom (\\d+)");
  for (const auto& msg : inbox) {
    std::smatch m;
    if (std::regex_search(msg, m, req_re)) {
      const int k = std::stoi(m[1]) - 1;
      const int idx = cfg.room_index(std::stoi(m[2]));
      if (k >= 0 && k < n_bombs && idx >= 0) {
        bomb_room_[static_cast<std::size_t>(k)] = idx;
        int color = 0;
        for (int c = 0; c < 3; ++c) {
          if (m[3] == kColorNames[c]) color = c;
        }
        if (holds(static_cast<BombColor>(color)) &&
            !bomb_done_[static_cast<std::size_t>(k)]) {
          requested_[static_cast<std::size_t>(k)] =
              static_cast<BombColor>(color);
        }
      }
    } else if (std::regex_search(msg, m, apply_re)) {
      const int k = std::stoi(m[2]) - 1;
      const int idx = cfg.room_index(std::stoi(m[3]));
      if (k >= 0 && k < n_bombs && idx >= 0) {
        bomb_room_[static_cast<std::size_t>(k)] = idx;
      }
    } else if (std::regex_search(msg, m, seen_re)) {
      const int k = std::stoi(m[1]) - 1;
      const int idx = cfg.room_index(std::stoi(m[2]));
      if (k >= 0 && k < n_bombs && idx >= 0) {
        bomb_room_[static_cast<std::size_t>(k)] = idx;
      }
    }
  }

  // In-room work first: inspect unknown bombs, then apply a held tool.
  for (int k = 0; k < n_bombs; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    if (present[ku] && !state.usar.inspected[ku]) {
      return {n_rooms, t.fill("oracle_inspect", {{"bomb", itos(k + 1)},
                                                 {"room", label(room)}})};
    }
  }
  // Apply acts on the lowest-index live bomb in the room, so only that
  // bomb's next phase matters here; at this point every present bomb has
  // been inspected.
  std::optional<std::string> request_msg;
  int first = -1;
  for (int k = 0; k < n_bombs && first < 0; ++k) {
    if (present[static_cast<std::size_t>(k)]) first = k;
  }
  if (first >= 0) {
    const auto fu = static_cast<std::size_t>(first);
    const BombColor next = state.usar.remaining[fu].front();
    if (holds(next)) {
      requested_[fu].reset();
      return {n_rooms + 1 + static_cast<int>(next),
              t.fill("oracle_apply",
                     {{"color", kColorNames[static_cast<int>(next)]},
                      {"bomb", itos(first + 1)},
                      {"room", label(room)}})};
    }
    request_msg = t.fill("oracle_request",
                         {{"bomb", itos(first + 1)},
                          {"room", label(room)},
                          {"color", kColorNames[static_cast<int>(next)]}});
  }

  // Movement: serve open requests, then explore, then help at known bombs.
  auto nearest = [&](auto&& want) {
    int best = -1, best_d = 1 << 30;
    for (int rm = 0; rm < n_rooms; ++rm) {
      if (rm == room || !want(rm)) continue;
      const int d = env_->room_distance(room, rm);
      if (d < best_d) {
        best_d = d;
        best = rm;
      }
    }
    return best;
  };
  int target = nearest([&](int rm) {
    for (int k = 0; k < n_bombs; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      if (requested_[ku] && !bomb_done_[ku] && bomb_room_[ku] == rm) return true;
    }
    return false;
  });
  if (target < 0) {
    target = nearest([&](int rm) {
      return !visited_[static_cast<std::size_t>(rm)];
    });
  }
  if (target < 0) {
    target = nearest([&](int rm) {
      for (int k = 0; k < n_bombs; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        if (!bomb_done_[ku] && bomb_room_[ku] == rm) return true;
      }
      return false;
    });
  }
  if (target < 0) {
    // Nothing known to do: shuffle to the lowest-index adjacent room so the
    // action stays legal.
    for (int rm = 0; rm < n_rooms && target < 0; ++rm) {
      if (env_->rooms_adjacent(room, rm)) target = rm;
    }
    int hop = target;
    return {hop, request_msg.value_or(t.raw("oracle_done"))};
  }
  int hop = -1, hop_d = 1 << 30;
  for (int rm = 0; rm < n_rooms; ++rm) {
    if (!env_->rooms_adjacent(room, rm)) continue;
    const int d = env_->room_distance(rm, target);
    if (d < hop_d) {
      hop_d = d;
      hop = rm;
    }
  }
  return {hop, request_msg.value_or(
                   t.fill("oracle_move", {{"room", label(hop)}}))};
}

// ---------------------------------------------------------------------------
// Recorder
// ---------------------------------------------------------------------------

GroundingDataset record_dataset(const Environment& env,
                                EmbeddingProvider& provider, int n_episodes,
                                std::uint64_t seed) {
  require(n_episodes >= 1, "record_dataset: need at least one episode");
  GroundingDataset ds;
  ds.set_provider_fingerprint(provider.fingerprint());
  std::unordered_map<std::string, Vector> embed_cache;
  auto embed = [&](const std::string& text) -> const Vector& {
    auto it = embed_cache.find(text);
    if (it == embed_cache.end()) {
      it = embed_cache.emplace(text, provider.embed(text)).first;
    }
    return it->second;
  };

  const int n = env.n_agents();
  for (int ep = 0; ep < n_episodes; ++ep) {
    RngStream rng = rng_stream(seed, "record", static_cast<std::uint64_t>(ep));
    EnvState state = env.reset(rng);
    std::vector<OracleAgent> team;
    team.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) team.emplace_back(env, i);
    std::vector<std::vector<std::string>> inboxes(
        static_cast<std::size_t>(n));

    while (!env.finished(state)) {
      std::vector<int> joint(static_cast<std::size_t>(n));
      std::vector<std::string> said(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        OracleDecision d = team[iu].act(state, inboxes[iu]);
        joint[iu] = d.action;
        said[iu] = d.message;

        GroundingEntry e;
        e.env = env.tag();
        e.obs = env.observe(state, i);
        e.action = d.action;
        e.message = d.message;
        e.embedding = embed(d.message);
        e.meta.episode = ep;
        e.meta.t = state.t;
        e.meta.agent = env.kind() == EnvKind::Usar
                           ? env.usar_config()
                                 .agent_names[static_cast<std::size_t>(i)]
                           : "predator" + itos(i);
        if (env.kind() == EnvKind::PredatorPrey) {
          e.meta.prey = state.pp.prey;
          e.meta.prey_known = team[iu].known_prey().has_value();
        }
        ds.add(std::move(e));
      }
      StepResult sr = env.step(state, joint);
      state = std::move(sr.state);
      for (int i = 0; i < n; ++i) {
        auto& inbox = inboxes[static_cast<std::size_t>(i)];
        inbox.clear();
        for (int j = 0; j < n; ++j) {
          if (j != i) inbox.push_back(said[static_cast<std::size_t>(j)]);
        }
      }
    }
  }
  return ds;
}

}  // namespace marlcomm
