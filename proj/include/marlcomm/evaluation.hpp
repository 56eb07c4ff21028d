#pragma once

#include "marlcomm/checkpoint.hpp"
#include "marlcomm/env.hpp"
#include "marlcomm/grounding.hpp"
#include "marlcomm/training.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace marlcomm {

// ---------------------------------------------------------------------------
// Metric primitives. All deterministic; statistics that are undefined on the
// given input (constant ranks, no grounded steps, fewer than two points)
// come back as std::nullopt rather than NaN.
// ---------------------------------------------------------------------------

// Lowercase, split on non-alphanumeric characters, drop empties.
std::vector<std::string> tokenize(const std::string& text);

// BLEU with n-gram orders 1-4, uniform weights, brevity penalty, and add-one
// smoothing on zero counts. Empty candidate scores 0.
double bleu(const std::string& candidate, const std::string& reference);

// Pearson correlation of fractional ranks; ties get average ranks. nullopt
// when either side is constant.
std::optional<double> spearman(const std::vector<double>& x,
                               const std::vector<double>& y);

struct TopoOptions {
  std::size_t max_pairs = 100000;  // uniform subsample cap over message pairs
  std::uint64_t seed = 0;
};

// Topographic similarity: over pairs of recorded messages, x = cosine
// similarity of comm vectors, y = distance between sender states;
// rho = -spearman(x, y). The default state metric is Euclidean; pass
// state_distance to override (the rescue task uses room hop counts).
std::optional<double> topo_similarity(
    const std::vector<Vector>& comms, const std::vector<Vector>& positions,
    const TopoOptions& opt = {},
    const std::function<double(const Vector&, const Vector&)>& state_distance =
        {});

// Gathers (comm, sender position) across all agent-steps of the traces and
// applies the environment's state metric.
std::optional<double> topo_similarity(const std::vector<EpisodeTrace>& traces,
                                      const Environment& env,
                                      const TopoOptions& opt = {});

inline constexpr int kNoiseLabel = -1;

// Density clustering with the Euclidean metric; cluster ids are assigned in
// index order of the first core point reached, so output is deterministic.
std::vector<int> dbscan(const std::vector<Vector>& points, double eps,
                        int min_pts);

// k-distance heuristic for picking eps: the median distance to the k-th
// nearest neighbor (0 when there are too few points).
double suggest_eps(const std::vector<Vector>& points, int k);

// Mean-centered projection onto the top two principal directions (power
// iteration with deflation). Sign convention: the first nonzero loading of
// each axis is positive. Rank-deficient inputs get a zero second axis.
std::vector<std::array<double, 2>> pca2(const std::vector<Vector>& points);

// ---------------------------------------------------------------------------
// Alignment against a grounding dataset
// ---------------------------------------------------------------------------

struct AlignmentStats {
  double mean_cosine = 0.0;
  double mean_bleu = 0.0;
  std::size_t grounded_steps = 0;
};

// For every agent-step whose (observation, action) has a reference in ds:
// cosine(comm, reference embedding), and BLEU between the message
// translate() picks for the comm vector and the reference message. nullopt
// when no step is grounded.
std::optional<AlignmentStats> alignment(const std::vector<EpisodeTrace>& traces,
                                        const GroundingDataset& ds);

// ---------------------------------------------------------------------------
// Team evaluation (including mixed policy/oracle teams)
// ---------------------------------------------------------------------------

struct TeamSpec {
  struct Seat {
    enum class Kind { Policy, Oracle, External } kind = Kind::Oracle;
    std::string checkpoint;  // Policy seats only
  };
  std::vector<Seat> seats;

  // "ckpt.bin,ckpt.bin,oracle" -> three seats ("oracle", "external", or a
  // checkpoint path per position).
  static TeamSpec parse(const std::string& spec);
};

struct EvalEpisode {
  std::uint64_t seed = 0;
  int episode = 0;
  int length = 0;
  bool success = false;
  double score = 0.0;  // summed team reward (PP) or final score (USAR)
};

struct ClusterSummary {
  int id = 0;
  std::size_t size = 0;
  std::string message;  // reference nearest to the cluster centroid
};

struct ZeroShotRow {
  std::array<int, 2> cell{0, 0};
  int episodes = 0;
  double success_rate = 0.0;
  std::size_t grounded_steps = 0;
  bool absent = false;  // no grounded step touched this cell
  double mean_cosine = 0.0;
  double mean_bleu = 0.0;
  std::string example_message;
};

struct EvalReport {
  std::string env;
  std::string variant;  // label for the team/policy under evaluation
  std::vector<std::uint64_t> seeds;
  std::vector<EvalEpisode> episodes;

  std::optional<AlignmentStats> align;
  std::optional<double> topo;
  std::size_t topo_pairs = 0;

  std::vector<ClusterSummary> clusters;
  std::size_t noise_points = 0;
  // Comm-space sample behind the clustering (policy seats' agent-steps).
  std::vector<Vector> comm_points;
  std::vector<int> comm_labels;
  std::vector<std::array<double, 2>> comm_xy;

  std::vector<ZeroShotRow> zero_shot;
  std::size_t external_timeouts = 0;  // external-seat rounds that no-opped

  std::size_t n_episodes() const { return episodes.size(); }
  double mean_length() const;
  double sd_length() const;
  double success_rate() const;
  double mean_score() const;
};

struct EvalOptions {
  int episodes_per_seed = 8;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  // Alignment/topographic/cluster metrics over policy-seat traces (needs a
  // dataset for alignment and cluster annotations).
  bool with_metrics = true;
  int min_pts = 4;
  double eps = 0.0;  // 0: use suggest_eps(points, min_pts)
  TopoOptions topo;
  // External seats (wire protocol as in session.hpp).
  int timeout_ms = 30000;
  int max_retries = 3;
};

class LineTransport;

// Plays greedy evaluation episodes with the given team. Cross-type seats
// communicate through the translation bridge: a policy seat's gated comm
// vector reaches text seats as translate(ds, comm).message, and a text
// seat's message reaches policy seats as its embedding. Without a dataset
// the bridge is closed (messages do not cross the boundary). External seats
// are driven over the transport like a session; a timeout or exhausted retry
// counts in external_timeouts and the seat no-ops that round. Episode e
// under seed s uses rng_stream(s, "eval", e).
EvalReport evaluate(const Environment& env, const TeamSpec& team,
                    const GroundingDataset* ds, const EvalOptions& opt,
                    LineTransport* transport = nullptr);

// ---------------------------------------------------------------------------
// Zero-shot holdout evaluation
// ---------------------------------------------------------------------------

struct ZeroShotOptions {
  int episodes_per_cell = 25;
  std::uint64_t seed = 0;
};

// Forces the prey into each held-out cell and plays greedy episodes with the
// checkpointed team. Messages emitted in states whose reference (from the
// full, unmasked dataset) names the cell are scored against it; a cell with
// no such step comes back marked absent.
std::vector<ZeroShotRow> zero_shot_eval(const Environment& env,
                                        const Checkpoint& ckpt,
                                        const GroundingDataset& full_ds,
                                        const std::vector<std::array<int, 2>>& cells,
                                        const ZeroShotOptions& opt);

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

// Writes report.json (authoritative, full report), report.csv (episode
// table), clusters.csv, zero_shot.csv, and comm_space.svg (PCA scatter
// colored by cluster, annotated with each cluster's reference message) into
// out_dir. File names are stable; empty sections produce header-only files.
void write_report(const EvalReport& report, const std::string& out_dir);

// Reads report.json back; the CSVs carry the same tabular data.
EvalReport load_report(const std::string& dir);

}  // namespace marlcomm
