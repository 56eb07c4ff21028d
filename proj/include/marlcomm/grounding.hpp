#pragma once

#include "marlcomm/core.hpp"
#include "marlcomm/env.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace marlcomm {

// ---------------------------------------------------------------------------
// Embedding providers: text -> unit vector of fixed dimension D. Providers
// must be deterministic; the dataset records a fingerprint so mixed-provider
// files are caught early.
// ---------------------------------------------------------------------------

struct ProviderConfig {
  std::string kind = "local";  // "local" or "http"
  Index dim = 32;
  // local: seed for the token-vector hash.
  std::uint64_t token_seed = 0;
  // http: endpoint like "http://host:port/v1/embeddings", a model name sent
  // verbatim, and the name of the environment variable holding the API key.
  std::string endpoint;
  std::string model;
  std::string api_key_env = "EMBEDDING_API_KEY";
  int max_retries = 3;
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  // Returns a unit vector of dimension dim(). Throws on empty text.
  virtual Vector embed(const std::string& text) = 0;
  virtual Index dim() const = 0;
  // Stable identity string, e.g. "local:32:0".
  virtual std::string fingerprint() const = 0;
};

// Bag-of-tokens embedding: lowercase, split on non-alphanumerics, map each
// token through a seeded hash to a fixed pseudo-random Gaussian vector,
// average, L2-normalize. Fully offline and reproducible; sentences sharing
// tokens land near each other, which is all the alignment loss needs.
class LocalEmbeddingProvider : public EmbeddingProvider {
 public:
  LocalEmbeddingProvider(Index dim, std::uint64_t token_seed);
  Vector embed(const std::string& text) override;
  Index dim() const override { return dim_; }
  std::string fingerprint() const override;

 private:
  Index dim_;
  std::uint64_t token_seed_;
  std::unordered_map<std::string, Vector> token_cache_;

  const Vector& token_vector(const std::string& token);
};

// Calls an external embedding endpoint: POST {"input": text, "dimensions": D}
// expecting {"embedding": [...]} (a top-level "data[0].embedding" is also
// accepted). Responses longer than D are truncated, shorter ones zero-padded,
// then L2-normalized. Retries transient failures with linear backoff.
// HTTPS requires the build to find OpenSSL; plain http always works.
class HttpEmbeddingProvider : public EmbeddingProvider {
 public:
  explicit HttpEmbeddingProvider(ProviderConfig cfg);
  Vector embed(const std::string& text) override;
  Index dim() const override { return cfg_.dim; }
  std::string fingerprint() const override;

 private:
  ProviderConfig cfg_;
  std::string api_key_;
};

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderConfig& cfg);

// ---------------------------------------------------------------------------
// The grounding dataset: (observation, action) -> reference message with a
// pre-normalized embedding. Lookup is exact-match on observation_key; there
// is deliberately no nearest-neighbour fallback.
// ---------------------------------------------------------------------------

struct GroundingMeta {
  int episode = 0;
  int t = 0;
  std::string agent;
  // Optional annotations written by the episode recorders. PP runs store the
  // prey cell (and whether the speaker had located it) so that masks and
  // zero-shot evaluations can select entries by underlying state.
  std::optional<std::array<int, 2>> prey;
  std::optional<bool> prey_known;
};

struct GroundingEntry {
  std::string env;
  Vector obs;
  int action = 0;
  std::string message;
  Vector embedding;  // unit norm
  GroundingMeta meta;
};

class GroundingDataset {
 public:
  // Validates the entry (unit embedding, non-empty message, consistent env
  // tag and dimensions) and appends it. The key index keeps the first entry
  // per key; later entries with the same key stay in entries() and are
  // counted as duplicates.
  void add(GroundingEntry entry);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  // Number of distinct keys reachable through lookup (post-mask).
  std::size_t indexed_size() const { return index_.size(); }
  std::size_t duplicate_count() const { return duplicates_; }
  Index dim() const { return dim_; }
  const std::string& env_tag() const { return env_tag_; }
  const std::vector<GroundingEntry>& entries() const { return entries_; }

  const std::string& provider_fingerprint() const { return fingerprint_; }
  void set_provider_fingerprint(std::string fp) { fingerprint_ = std::move(fp); }

  // Exact-match reference lookup; nullptr means no grounding for this pair.
  const GroundingEntry* lookup(const Vector& obs, int action) const;
  const GroundingEntry* lookup_key(const std::string& key) const;

  // Partial grounding: returns a copy whose lookup index covers only a
  // deterministic fraction of underlying states. When every entry carries a
  // prey cell the mask retains round(fraction * n_cells) whole cells
  // (state-level); otherwise it retains a fraction of distinct keys. Smaller
  // fractions under the same seed give nested index sets. translate() stays
  // on the full entry list either way.
  GroundingDataset masked(double fraction, std::uint64_t seed) const;

  struct Translation {
    std::string message;
    double score = 0.0;       // cosine similarity
    std::size_t entry = 0;    // index into entries()
  };
  // Argmax-cosine scan over all entries; ties break to the lowest index.
  Translation translate(const Vector& comm) const;

 private:
  std::vector<GroundingEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t duplicates_ = 0;
  Index dim_ = 0;
  std::string env_tag_;
  std::string fingerprint_;
};

// JSONL round trip, one entry object per line:
//   {"env":..., "obs":[...], "action":..., "message":...,
//    "embedding":[...], "meta":{"episode":...,"t":...,"agent":...}}
// meta may additionally carry "prey": [r, c] and "prey_known": bool.
// Loader errors name the offending line and field.
GroundingDataset load_grounding(const std::string& path);
void save_grounding(const GroundingDataset& ds, const std::string& path);

}  // namespace marlcomm
