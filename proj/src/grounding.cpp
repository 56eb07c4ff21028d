#include "marlcomm/grounding.hpp"

#include "marlcomm/rng.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

namespace marlcomm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Local provider
// ---------------------------------------------------------------------------

LocalEmbeddingProvider::LocalEmbeddingProvider(Index dim,
                                               std::uint64_t token_seed)
    : dim_(dim), token_seed_(token_seed) {
  require(dim >= 1, "LocalEmbeddingProvider: dimension must be >= 1");
}

const Vector& LocalEmbeddingProvider::token_vector(const std::string& token) {
  auto it = token_cache_.find(token);
  if (it != token_cache_.end()) return it->second;
  RngStream rng = rng_stream(token_seed_, "token", fnv1a(token));
  Vector v(dim_);
  for (Index i = 0; i < dim_; ++i) v[i] = rng.normal();
  return token_cache_.emplace(token, std::move(v)).first->second;
}

Vector LocalEmbeddingProvider::embed(const std::string& text) {
  require(!text.empty(), "embed: empty text");
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      current += static_cast<char>(
          std::tolower(static_cast<unsigned char>(ch)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  require(!tokens.empty(), "embed: text has no alphanumeric tokens: " + text);

  Vector sum = Vector::Zero(dim_);
  for (const auto& tok : tokens) sum += token_vector(tok);
  sum /= static_cast<double>(tokens.size());
  const double norm = sum.norm();
  require(norm > 0, "embed: degenerate zero embedding for: " + text);
  return sum / norm;
}

std::string LocalEmbeddingProvider::fingerprint() const {
  return "local:" + std::to_string(dim_) + ":" + std::to_string(token_seed_);
}

// ---------------------------------------------------------------------------
// HTTP provider
// ---------------------------------------------------------------------------

HttpEmbeddingProvider::HttpEmbeddingProvider(ProviderConfig cfg)
    : cfg_(std::move(cfg)) {
  require(cfg_.dim >= 1, "HttpEmbeddingProvider: dimension must be >= 1");
  require(!cfg_.endpoint.empty(), "HttpEmbeddingProvider: endpoint required");
  if (!cfg_.api_key_env.empty()) {
    if (const char* key = std::getenv(cfg_.api_key_env.c_str())) {
      api_key_ = key;
    }
  }
}

std::string HttpEmbeddingProvider::fingerprint() const {
  return "http:" + std::to_string(cfg_.dim) + ":" + cfg_.endpoint + ":" +
         cfg_.model;
}

namespace {

std::string_view http_split(std::string_view url, std::string& origin) {
  // Splits "scheme://host[:port]/path" into origin and path.
  auto scheme_end = url.find("://");
  require(scheme_end != std::string_view::npos,
          "embedding endpoint must include a scheme: " + std::string(url));
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string_view::npos) {
    origin = std::string(url);
    return "/";
  }
  origin = std::string(url.substr(0, path_start));
  return url.substr(path_start);
}

}  // namespace

Vector HttpEmbeddingProvider::embed(const std::string& text) {
  require(!text.empty(), "embed: empty text");
  json body = {{"input", text}, {"dimensions", cfg_.dim}};
  if (!cfg_.model.empty()) body["model"] = cfg_.model;

  std::string origin;
  const std::string path{http_split(cfg_.endpoint, origin)};

  std::string last_error;
  for (int attempt = 0; attempt < std::max(1, cfg_.max_retries); ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(250 * attempt));
    }
    httplib::Client client(origin);
    client.set_read_timeout(30, 0);
    httplib::Headers headers;
    if (!api_key_.empty()) {
      headers.emplace("Authorization", "Bearer " + api_key_);
    }
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) {
      last_error = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      last_error = "status " + std::to_string(res->status);
      if (res->status >= 400 && res->status < 500 && res->status != 429) {
        break;  // client errors other than rate limits will not heal
      }
      continue;
    }
    json reply = json::parse(res->body, nullptr, false);
    if (reply.is_discarded()) {
      last_error = "response is not valid JSON";
      continue;
    }
    const json* emb = nullptr;
    if (reply.contains("embedding")) {
      emb = &reply["embedding"];
    } else if (reply.contains("data") && reply["data"].is_array() &&
               !reply["data"].empty() &&
               reply["data"][0].contains("embedding")) {
      emb = &reply["data"][0]["embedding"];
    }
    if (emb == nullptr || !emb->is_array()) {
      throw MarlError("embedding endpoint reply lacks an embedding array");
    }
    Vector v = Vector::Zero(cfg_.dim);
    const Index n = std::min<Index>(cfg_.dim, emb->size());
    for (Index i = 0; i < n; ++i) v[i] = (*emb)[i].get<double>();
    const double norm = v.norm();
    require(norm > 0, "embedding endpoint returned a zero vector");
    return v / norm;
  }
  throw MarlError("embedding request to " + cfg_.endpoint +
                  " failed after retries: " + last_error);
}

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderConfig& cfg) {
  if (cfg.kind == "local") {
    return std::make_unique<LocalEmbeddingProvider>(cfg.dim, cfg.token_seed);
  }
  if (cfg.kind == "http") {
    return std::make_unique<HttpEmbeddingProvider>(cfg);
  }
  throw MarlError("unknown embedding provider kind: " + cfg.kind);
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

void GroundingDataset::add(GroundingEntry entry) {
  require(!entry.message.empty(), "grounding entry: empty message");
  require(entry.action >= 0, "grounding entry: negative action id");
  require(std::abs(entry.embedding.norm() - 1.0) <= 1e-9,
          "grounding entry: embedding is not unit norm");
  if (entries_.empty()) {
    dim_ = entry.embedding.size();
    env_tag_ = entry.env;
  } else {
    require(entry.embedding.size() == dim_,
            "grounding entry: embedding dimension mismatch");
    require(entry.env == env_tag_,
            "grounding entry: env tag mismatch (" + entry.env + " vs " +
                env_tag_ + ")");
    require(entry.obs.size() == entries_.front().obs.size(),
            "grounding entry: observation dimension mismatch");
  }
  const std::string key = observation_key(entry.env, entry.obs, entry.action);
  entries_.push_back(std::move(entry));
  if (!index_.emplace(key, entries_.size() - 1).second) {
    ++duplicates_;
  }
}

const GroundingEntry* GroundingDataset::lookup(const Vector& obs,
                                               int action) const {
  if (entries_.empty()) return nullptr;
  return lookup_key(observation_key(env_tag_, obs, action));
}

const GroundingEntry* GroundingDataset::lookup_key(
    const std::string& key) const {
  auto it = index_.find(key);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

GroundingDataset GroundingDataset::masked(double fraction,
                                          std::uint64_t seed) const {
  require(fraction > 0.0 && fraction <= 1.0,
          "masked: fraction must be in (0, 1]");
  GroundingDataset out = *this;
  if (fraction >= 1.0 || entries_.empty()) return out;

  const bool by_cell =
      std::all_of(entries_.begin(), entries_.end(),
                  [](const GroundingEntry& e) { return e.meta.prey.has_value(); });

  // Collect distinct units (prey cells or keys) in first-appearance order,
  // shuffle them deterministically, and keep a prefix. Prefix selection makes
  // smaller fractions nested inside larger ones for the same seed.
  std::vector<std::string> units;
  std::set<std::string> seen;
  auto unit_of = [&](const GroundingEntry& e) {
    if (by_cell) {
      return std::to_string((*e.meta.prey)[0]) + "," +
             std::to_string((*e.meta.prey)[1]);
    }
    return observation_key(e.env, e.obs, e.action);
  };
  for (const auto& e : entries_) {
    std::string u = unit_of(e);
    if (seen.insert(u).second) units.push_back(std::move(u));
  }
  RngStream rng = rng_stream(seed, "grounding_mask");
  for (std::size_t k = units.size(); k > 1; --k) {
    std::swap(units[k - 1], units[rng.uniform_int(k)]);
  }
  const auto keep_n = static_cast<std::size_t>(std::llround(
      fraction * static_cast<double>(units.size())));
  std::set<std::string> kept(units.begin(),
                             units.begin() + std::min(keep_n, units.size()));

  out.index_.clear();
  out.duplicates_ = 0;
  for (std::size_t i = 0; i < out.entries_.size(); ++i) {
    const auto& e = out.entries_[i];
    if (kept.count(unit_of(e)) == 0) continue;
    const std::string key = observation_key(e.env, e.obs, e.action);
    if (!out.index_.emplace(key, i).second) ++out.duplicates_;
  }
  return out;
}

GroundingDataset::Translation GroundingDataset::translate(
    const Vector& comm) const {
  require(!entries_.empty(), "translate: empty dataset");
  require(comm.size() == dim_, "translate: dimension mismatch");
  const double norm = comm.norm();
  require(norm > 0, "translate: zero communication vector");

  Translation best;
  double best_dot = -2.0;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    // Embeddings are unit vectors, so cosine is a dot product over ‖c‖.
    const double d = entries_[i].embedding.dot(comm);
    if (d > best_dot) {
      best_dot = d;
      best.entry = i;
    }
  }
  best.message = entries_[best.entry].message;
  best.score = best_dot / norm;
  return best;
}

// ---------------------------------------------------------------------------
// JSONL round trip
// ---------------------------------------------------------------------------

namespace {

json vector_to_json(const Vector& v) {
  json arr = json::array();
  for (Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Vector vector_from_json(const json& arr, const std::string& where) {
  require(arr.is_array(), where + " must be an array");
  Vector v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    require(arr[i].is_number(), where + " must contain numbers");
    v[static_cast<Index>(i)] = arr[i].get<double>();
  }
  return v;
}

}  // namespace

GroundingDataset load_grounding(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open grounding file: " + path);
  GroundingDataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    json obj = json::parse(line, nullptr, false);
    require(!obj.is_discarded(), where + ": malformed JSON line");
    // Optional header line carrying the embedding provider's fingerprint.
    if (obj.contains("fingerprint") && !obj.contains("obs")) {
      ds.set_provider_fingerprint(obj["fingerprint"].get<std::string>());
      continue;
    }
    for (const char* field : {"env", "obs", "action", "message", "embedding"}) {
      require(obj.contains(field),
              where + ": missing required field \"" + std::string(field) +
                  "\"");
    }
    GroundingEntry e;
    e.env = obj["env"].get<std::string>();
    e.obs = vector_from_json(obj["obs"], where + ": \"obs\"");
    e.action = obj["action"].get<int>();
    e.message = obj["message"].get<std::string>();
    e.embedding = vector_from_json(obj["embedding"], where + ": \"embedding\"");
    if (obj.contains("meta")) {
      const json& m = obj["meta"];
      e.meta.episode = m.value("episode", 0);
      e.meta.t = m.value("t", 0);
      e.meta.agent = m.value("agent", std::string{});
      if (m.contains("prey")) {
        const json& p = m["prey"];
        require(p.is_array() && p.size() == 2,
                where + ": \"meta.prey\" must be [row, col]");
        e.meta.prey = std::array<int, 2>{p[0].get<int>(), p[1].get<int>()};
      }
      if (m.contains("prey_known")) {
        e.meta.prey_known = m["prey_known"].get<bool>();
      }
    }
    try {
      ds.add(std::move(e));
    } catch (const MarlError& err) {
      throw MarlError(where + ": " + err.what());
    }
  }
  return ds;
}

void save_grounding(const GroundingDataset& ds, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write grounding file: " + path);
  if (!ds.provider_fingerprint().empty()) {
    out << json{{"fingerprint", ds.provider_fingerprint()}}.dump() << "\n";
  }
  for (const auto& e : ds.entries()) {
    json meta = {{"episode", e.meta.episode},
                 {"t", e.meta.t},
                 {"agent", e.meta.agent}};
    if (e.meta.prey) meta["prey"] = {(*e.meta.prey)[0], (*e.meta.prey)[1]};
    if (e.meta.prey_known) meta["prey_known"] = *e.meta.prey_known;
    json obj = {{"env", e.env},
                {"obs", vector_to_json(e.obs)},
                {"action", e.action},
                {"message", e.message},
                {"embedding", vector_to_json(e.embedding)},
                {"meta", meta}};
    out << obj.dump() << "\n";
  }
  require(out.good(), "write failed for grounding file: " + path);
}

}  // namespace marlcomm
