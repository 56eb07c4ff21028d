// marlcomm: single entry point for training, dataset collection, evaluation,
// zero-shot probing, ad-hoc team play, trace analysis, and text-protocol
// sessions. Every subcommand writes its fully-resolved configuration next to
// its outputs; re-running that file reproduces the run bit-exactly.
#include <CLI11.hpp>
#include <json.hpp>

#include "marlcomm/checkpoint.hpp"
#include "marlcomm/env.hpp"
#include "marlcomm/evaluation.hpp"
#include "marlcomm/grounding.hpp"
#include "marlcomm/session.hpp"
#include "marlcomm/textgame.hpp"
#include "marlcomm/training.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace marlcomm;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open config file " + path);
  json j = json::parse(in, nullptr, false);
  require(!j.is_discarded(), path + ": malformed JSON");
  require(j.is_object(), path + ": top level must be an object");
  return j;
}

// Applies "a.b.c=value" overrides; the value is parsed as JSON when it is
// valid JSON (numbers, booleans, arrays), otherwise taken as a string.
void apply_overrides(json& j, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    require(eq != std::string::npos && eq > 0,
            "override \"" + s + "\" is not key=value");
    const std::string path = s.substr(0, eq);
    const std::string raw = s.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    json* node = &j;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) {
      require(!part.empty(), "override \"" + s + "\" has an empty key part");
      parts.push_back(part);
    }
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      node = &(*node)[parts[i]];
      require(node->is_object() || node->is_null(),
              "override \"" + s + "\": " + parts[i] + " is not an object");
    }
    (*node)[parts.back()] = value;
  }
}

void write_text(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write " + path.string());
  out << content;
}

std::vector<std::array<int, 2>> parse_cells(const std::string& text) {
  std::vector<std::array<int, 2>> cells;
  if (text.empty()) return cells;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    int r = 0, c = 0;
    char comma = 0;
    std::stringstream cs(item);
    if (!(cs >> r >> comma >> c) || comma != ',') {
      throw MarlError("cannot parse cell \"" + item +
                      "\" (expected row,col[;row,col...])");
    }
    cells.push_back({r, c});
  }
  return cells;
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known,
                         const std::string& context) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    require(ok, context + ": unknown key \"" + key + "\"");
  }
}

GroundingDataset load_masked(const std::string& path, double fraction,
                             std::uint64_t mask_seed) {
  GroundingDataset ds = load_grounding(path);
  if (fraction < 1.0) ds = ds.masked(fraction, mask_seed);
  return ds;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainCli {
  std::string config_path, out = "runs/train", preset;
  std::vector<std::string> sets;
  std::string env, variant, grounding, hold_out;
  double lambda = -1.0, grounding_fraction = -1.0;
  bool no_gating = false;
  std::int64_t seed = -1;
  int epochs = -1;
};

int run_train(const TrainCli& cli) {
  TrainConfig cfg;
  if (!cli.config_path.empty()) {
    cfg = config_from_json(load_json_file(cli.config_path).dump());
  }
  if (!cli.preset.empty()) apply_preset(cfg, cli.preset);
  if (!cli.env.empty()) cfg.env = cli.env;
  if (!cli.variant.empty()) cfg.variant = variant_from_string(cli.variant);
  if (cli.lambda >= 0) cfg.lambda = cli.lambda;
  if (!cli.grounding.empty()) cfg.grounding_path = cli.grounding;
  if (cli.grounding_fraction >= 0) {
    cfg.grounding_fraction = cli.grounding_fraction;
  }
  if (!cli.hold_out.empty()) cfg.hold_out = parse_cells(cli.hold_out);
  if (cli.no_gating) cfg.no_gating = true;
  if (cli.seed >= 0) cfg.seed = static_cast<std::uint64_t>(cli.seed);
  if (cli.epochs >= 0) cfg.epochs = cli.epochs;
  if (!cli.sets.empty()) {
    json j = json::parse(cfg.canonical_json());
    apply_overrides(j, cli.sets);
    cfg = config_from_json(j.dump());
  }
  cfg.resolve();

  const fs::path out(cli.out);
  fs::create_directories(out);
  write_text(out / "config.json", cfg.canonical_json() + "\n");

  const int tick = std::max(1, cfg.epochs / 10);
  TrainResult result =
      train(cfg, [&](int epoch, const TrainResult& partial) {
        if (epoch % tick != 0 && epoch != cfg.epochs) return;
        const EpochRow& row = partial.metrics.rows().back();
        std::cerr << "epoch " << epoch << "/" << cfg.epochs
                  << "  mean_length=" << row.mean_length
                  << "  success=" << row.success_rate
                  << "  cosine=" << row.mean_cosine << "\n";
      });

  save_checkpoint((out / "checkpoint.bin").string(), cfg, result);
  result.metrics.save_csv((out / "metrics.csv").string());
  const EpochRow& last = result.metrics.rows().back();
  std::cout << "trained " << to_string(cfg.variant) << " on " << cfg.env
            << " for " << cfg.epochs << " epochs -> " << out.string()
            << "\nfinal mean_length=" << last.mean_length
            << " success=" << last.success_rate
            << " mean_cosine=" << last.mean_cosine << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// collect
// ---------------------------------------------------------------------------

struct CollectCli {
  std::string config_path, out = "runs/collect";
  std::vector<std::string> sets;
  std::string env = "pp_v0", provider_kind = "local", endpoint, model;
  int episodes = 50, dim = 32;
  std::uint64_t seed = 0, token_seed = 0;
};

int run_collect(const CollectCli& cli) {
  json j = cli.config_path.empty() ? json::object()
                                   : load_json_file(cli.config_path);
  auto put_default = [&](const char* key, json value) {
    if (!j.contains(key)) j[key] = std::move(value);
  };
  put_default("env", cli.env);
  put_default("episodes", cli.episodes);
  put_default("seed", cli.seed);
  put_default("provider",
              json{{"kind", cli.provider_kind},
                   {"dim", cli.dim},
                   {"token_seed", cli.token_seed},
                   {"endpoint", cli.endpoint},
                   {"model", cli.model}});
  apply_overrides(j, cli.sets);
  reject_unknown_keys(j, {"env", "episodes", "seed", "provider"}, "collect");
  reject_unknown_keys(j["provider"],
                      {"kind", "dim", "token_seed", "endpoint", "model",
                       "api_key_env", "max_retries"},
                      "collect.provider");

  Environment env = make_env(j["env"].get<std::string>());
  ProviderConfig pc;
  pc.kind = j["provider"].value("kind", "local");
  pc.dim = j["provider"].value("dim", Index{32});
  pc.token_seed = j["provider"].value("token_seed", std::uint64_t{0});
  pc.endpoint = j["provider"].value("endpoint", "");
  pc.model = j["provider"].value("model", "");
  pc.api_key_env = j["provider"].value("api_key_env", "EMBEDDING_API_KEY");
  pc.max_retries = j["provider"].value("max_retries", 3);
  std::unique_ptr<EmbeddingProvider> provider = make_provider(pc);

  const fs::path out(cli.out);
  fs::create_directories(out);
  write_text(out / "config.json", j.dump(2) + "\n");

  GroundingDataset ds =
      record_dataset(env, *provider, j["episodes"].get<int>(),
                     j["seed"].get<std::uint64_t>());
  save_grounding(ds, (out / "grounding.jsonl").string());
  std::cout << "recorded " << ds.size() << " entries ("
            << ds.indexed_size() << " distinct states, "
            << ds.duplicate_count() << " duplicates) from "
            << j["episodes"].get<int>() << " oracle episodes on "
            << env.tag() << " -> " << (out / "grounding.jsonl").string()
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval / adhoc
// ---------------------------------------------------------------------------

struct EvalCli {
  std::string config_path, out = "runs/eval";
  std::vector<std::string> sets;
  std::string env, team, grounding;
  double grounding_fraction = 1.0, eps = 0.0;
  std::uint64_t mask_seed = 0, topo_seed = 0;
  int episodes = 8, seeds = 3, min_pts = 4, timeout_ms = 30000,
      max_retries = 3, port = -1;
  std::size_t max_pairs = 100000;
  std::string seed_list;
  bool no_metrics = false, stdio = false;
};

int run_eval(const EvalCli& cli) {
  json j = cli.config_path.empty() ? json::object()
                                   : load_json_file(cli.config_path);
  auto put_default = [&](const char* key, json value) {
    if (!j.contains(key)) j[key] = std::move(value);
  };
  put_default("team", cli.team);
  put_default("env", cli.env);
  put_default("grounding", cli.grounding);
  put_default("grounding_fraction", cli.grounding_fraction);
  put_default("mask_seed", cli.mask_seed);
  put_default("episodes_per_seed", cli.episodes);
  if (!j.contains("seeds")) {
    json seeds = json::array();
    if (!cli.seed_list.empty()) {
      std::stringstream ss(cli.seed_list);
      std::string item;
      while (std::getline(ss, item, ',')) {
        seeds.push_back(std::stoull(item));
      }
    } else {
      for (int s = 0; s < cli.seeds; ++s) seeds.push_back(s);
    }
    j["seeds"] = seeds;
  }
  put_default("with_metrics", !cli.no_metrics);
  put_default("min_pts", cli.min_pts);
  put_default("eps", cli.eps);
  put_default("max_pairs", cli.max_pairs);
  put_default("topo_seed", cli.topo_seed);
  put_default("timeout_ms", cli.timeout_ms);
  put_default("max_retries", cli.max_retries);
  apply_overrides(j, cli.sets);
  reject_unknown_keys(j,
                      {"team", "env", "grounding", "grounding_fraction",
                       "mask_seed", "episodes_per_seed", "seeds",
                       "with_metrics", "min_pts", "eps", "max_pairs",
                       "topo_seed", "timeout_ms", "max_retries"},
                      "eval");
  require(!j["team"].get<std::string>().empty(), "eval: --team is required");

  const TeamSpec team = TeamSpec::parse(j["team"].get<std::string>());
  std::string env_tag = j["env"].get<std::string>();
  if (env_tag.empty()) {
    for (const auto& seat : team.seats) {
      if (seat.kind == TeamSpec::Seat::Kind::Policy) {
        env_tag = load_checkpoint(seat.checkpoint).config.env;
        break;
      }
    }
    require(!env_tag.empty(),
            "eval: --env is required when no seat names a checkpoint");
    j["env"] = env_tag;
  }
  Environment env = make_env(env_tag);

  std::optional<GroundingDataset> ds;
  if (!j["grounding"].get<std::string>().empty()) {
    ds = load_masked(j["grounding"].get<std::string>(),
                     j["grounding_fraction"].get<double>(),
                     j["mask_seed"].get<std::uint64_t>());
  }

  EvalOptions opt;
  opt.episodes_per_seed = j["episodes_per_seed"].get<int>();
  opt.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  opt.with_metrics = j["with_metrics"].get<bool>();
  opt.min_pts = j["min_pts"].get<int>();
  opt.eps = j["eps"].get<double>();
  opt.topo.max_pairs = j["max_pairs"].get<std::size_t>();
  opt.topo.seed = j["topo_seed"].get<std::uint64_t>();
  opt.timeout_ms = j["timeout_ms"].get<int>();
  opt.max_retries = j["max_retries"].get<int>();

  const fs::path out(cli.out);
  fs::create_directories(out);
  write_text(out / "config.json", j.dump(2) + "\n");

  // External seats need a live transport; oracle/policy teams do not.
  bool any_external = false;
  for (const auto& seat : team.seats) {
    any_external |= seat.kind == TeamSpec::Seat::Kind::External;
  }
  std::unique_ptr<LineTransport> transport;
  std::unique_ptr<TcpListener> listener;
  if (any_external) {
    if (cli.stdio) {
      transport = std::make_unique<FdTransport>(0, 1, false);
    } else {
      require(cli.port >= 0,
              "eval: external seats need --port or --stdio");
      listener = std::make_unique<TcpListener>(cli.port);
      std::cerr << "waiting for the external client on 127.0.0.1:"
                << listener->port() << "\n";
      while (!transport) transport = listener->accept(1000);
    }
  }

  EvalReport report =
      evaluate(env, team, ds ? &*ds : nullptr, opt, transport.get());
  write_report(report, out.string());

  std::cout << "evaluated [" << report.variant << "] on " << report.env
            << ": " << report.n_episodes() << " episodes, mean_length="
            << report.mean_length() << ", success=" << report.success_rate();
  if (env.kind() == EnvKind::Usar) {
    std::cout << ", mean_score=" << report.mean_score();
  }
  if (report.align) {
    std::cout << ", mean_cosine=" << report.align->mean_cosine
              << ", mean_bleu=" << report.align->mean_bleu;
  }
  if (report.topo) std::cout << ", topo_rho=" << *report.topo;
  std::cout << " -> " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// zeroshot
// ---------------------------------------------------------------------------

struct ZeroShotCli {
  std::string config_path, out = "runs/zeroshot";
  std::vector<std::string> sets;
  std::string checkpoint, grounding, cells;
  int episodes = 25;
  std::uint64_t seed = 0;
};

int run_zeroshot(const ZeroShotCli& cli) {
  json j = cli.config_path.empty() ? json::object()
                                   : load_json_file(cli.config_path);
  auto put_default = [&](const char* key, json value) {
    if (!j.contains(key)) j[key] = std::move(value);
  };
  put_default("checkpoint", cli.checkpoint);
  put_default("grounding", cli.grounding);
  if (!j.contains("cells")) {
    json cells = json::array();
    for (const auto& c : parse_cells(cli.cells)) {
      cells.push_back({c[0], c[1]});
    }
    j["cells"] = cells;
  }
  put_default("episodes_per_cell", cli.episodes);
  put_default("seed", cli.seed);
  apply_overrides(j, cli.sets);
  reject_unknown_keys(
      j, {"checkpoint", "grounding", "cells", "episodes_per_cell", "seed"},
      "zeroshot");
  require(!j["checkpoint"].get<std::string>().empty(),
          "zeroshot: --checkpoint is required");
  require(!j["grounding"].get<std::string>().empty(),
          "zeroshot: --grounding is required (the full, unmasked dataset)");

  Checkpoint ckpt = load_checkpoint(j["checkpoint"].get<std::string>());
  Environment env = make_env(ckpt.config.env);
  GroundingDataset ds = load_grounding(j["grounding"].get<std::string>());

  std::vector<std::array<int, 2>> cells;
  for (const auto& c : j["cells"]) {
    cells.push_back({c[0].get<int>(), c[1].get<int>()});
  }
  if (cells.empty()) cells = ckpt.config.hold_out;
  require(!cells.empty(),
          "zeroshot: no cells given and the checkpoint holds none out");
  {
    json echo = json::array();
    for (const auto& c : cells) echo.push_back({c[0], c[1]});
    j["cells"] = echo;
  }

  ZeroShotOptions opt;
  opt.episodes_per_cell = j["episodes_per_cell"].get<int>();
  opt.seed = j["seed"].get<std::uint64_t>();

  const fs::path out(cli.out);
  fs::create_directories(out);
  write_text(out / "config.json", j.dump(2) + "\n");

  EvalReport report;
  report.env = env.tag();
  report.variant = "zeroshot:" + to_string(ckpt.config.variant);
  report.zero_shot = zero_shot_eval(env, ckpt, ds, cells, opt);
  write_report(report, out.string());

  for (const auto& row : report.zero_shot) {
    std::cout << "cell (" << row.cell[0] << "," << row.cell[1]
              << "): success=" << row.success_rate;
    if (row.absent) {
      std::cout << ", no grounded steps";
    } else {
      std::cout << ", mean_cosine=" << row.mean_cosine
                << ", mean_bleu=" << row.mean_bleu << ", e.g. \""
                << row.example_message << "\"";
    }
    std::cout << "\n";
  }
  std::cout << "-> " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct AnalyzeCli {
  std::string report_dir, out, grounding;
  double eps = 0.0;
  int min_pts = 4;
  std::vector<std::string> sets;
};

int run_analyze(const AnalyzeCli& cli) {
  require(!cli.report_dir.empty(), "analyze: --report is required");
  EvalReport report = load_report(cli.report_dir);
  json j = {{"report", cli.report_dir},
            {"grounding", cli.grounding},
            {"eps", cli.eps},
            {"min_pts", cli.min_pts}};
  apply_overrides(j, cli.sets);
  reject_unknown_keys(j, {"report", "grounding", "eps", "min_pts"},
                      "analyze");

  std::optional<GroundingDataset> ds;
  if (!j["grounding"].get<std::string>().empty()) {
    ds = load_grounding(j["grounding"].get<std::string>());
  }

  // Recluster the saved comm-space sample under the requested parameters;
  // episode rows, alignment, and topographic similarity stay as recorded.
  report.clusters.clear();
  report.noise_points = 0;
  if (report.comm_points.size() >= 2) {
    const int min_pts = j["min_pts"].get<int>();
    double eps = j["eps"].get<double>();
    if (eps <= 0.0) eps = suggest_eps(report.comm_points, min_pts);
    if (eps > 0.0) {
      report.comm_labels = dbscan(report.comm_points, eps, min_pts);
      report.comm_xy = pca2(report.comm_points);
      std::map<int, std::vector<std::size_t>> members;
      for (std::size_t i = 0; i < report.comm_labels.size(); ++i) {
        if (report.comm_labels[i] == kNoiseLabel) {
          report.noise_points += 1;
        } else {
          members[report.comm_labels[i]].push_back(i);
        }
      }
      for (const auto& [id, idx] : members) {
        ClusterSummary cs;
        cs.id = id;
        cs.size = idx.size();
        if (ds) {
          Vector centroid = Vector::Zero(report.comm_points[idx[0]].size());
          for (std::size_t i : idx) centroid += report.comm_points[i];
          centroid /= static_cast<double>(idx.size());
          cs.message = ds->translate(centroid).message;
        }
        report.clusters.push_back(std::move(cs));
      }
    }
  }

  const fs::path out(cli.out.empty() ? cli.report_dir : cli.out);
  fs::create_directories(out);
  write_text(out / "config.json", j.dump(2) + "\n");
  write_report(report, out.string());

  std::cout << report.clusters.size() << " clusters over "
            << report.comm_points.size() << " comm points ("
            << report.noise_points << " noise)\n";
  for (const auto& c : report.clusters) {
    std::cout << "  cluster " << c.id << " (" << c.size << " points)";
    if (!c.message.empty()) std::cout << ": \"" << c.message << "\"";
    std::cout << "\n";
  }
  std::cout << "-> " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// serve
// ---------------------------------------------------------------------------

struct ServeCli {
  std::string config_path, out = "runs/serve";
  std::vector<std::string> sets;
  std::string env = "pp_v0", seats, transcript;
  int episodes = 1, port = -1, timeout_ms = 30000, max_retries = 3;
  std::uint64_t seed = 0;
  bool stdio = false, verify = false;
};

int run_serve(const ServeCli& cli) {
  json j = cli.config_path.empty() ? json::object()
                                   : load_json_file(cli.config_path);
  auto put_default = [&](const char* key, json value) {
    if (!j.contains(key)) j[key] = std::move(value);
  };
  put_default("env", cli.env);
  put_default("seats", cli.seats);
  put_default("episodes", cli.episodes);
  put_default("seed", cli.seed);
  put_default("timeout_ms", cli.timeout_ms);
  put_default("max_retries", cli.max_retries);
  put_default("transcript", cli.transcript);
  apply_overrides(j, cli.sets);
  reject_unknown_keys(j,
                      {"env", "seats", "episodes", "seed", "timeout_ms",
                       "max_retries", "transcript"},
                      "serve");

  Environment env = make_env(j["env"].get<std::string>());
  std::vector<SeatKind> seats;
  {
    std::string spec = j["seats"].get<std::string>();
    if (spec.empty()) {
      // One live client seat, scripted teammates.
      spec = "external";
      for (int i = 1; i < env.n_agents(); ++i) spec += ",oracle";
      j["seats"] = spec;
    }
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item == "oracle") {
        seats.push_back(SeatKind::Oracle);
      } else if (item == "external") {
        seats.push_back(SeatKind::External);
      } else {
        throw MarlError("serve: seat \"" + item +
                        "\" must be oracle or external");
      }
    }
  }

  const fs::path out(cli.out);
  fs::create_directories(out);

  SessionOptions opt;
  opt.seed = j["seed"].get<std::uint64_t>();
  opt.n_episodes = j["episodes"].get<int>();
  opt.timeout_ms = j["timeout_ms"].get<int>();
  opt.max_retries = j["max_retries"].get<int>();
  opt.transcript_path = j["transcript"].get<std::string>();
  if (opt.transcript_path.empty()) {
    opt.transcript_path = (out / "transcript.jsonl").string();
    j["transcript"] = opt.transcript_path;
  }
  write_text(out / "config.json", j.dump(2) + "\n");

  bool any_external = false;
  for (SeatKind k : seats) any_external |= k == SeatKind::External;
  std::unique_ptr<LineTransport> transport;
  std::unique_ptr<TcpListener> listener;
  if (any_external) {
    if (cli.stdio) {
      transport = std::make_unique<FdTransport>(0, 1, false);
    } else {
      require(cli.port >= 0, "serve: external seats need --port or --stdio");
      listener = std::make_unique<TcpListener>(cli.port);
      std::cerr << "listening on 127.0.0.1:" << listener->port() << "\n";
      while (!transport) transport = listener->accept(1000);
    }
  }

  SessionStats stats = run_session(env, seats, transport.get(), opt);
  if (cli.verify) verify_transcript(env, opt.transcript_path);

  std::ostream& log = cli.stdio ? std::cerr : std::cout;
  log << "played " << stats.episodes << " episode(s) on " << env.tag()
      << ": mean_length=" << stats.mean_length()
      << " success=" << stats.success_rate();
  if (env.kind() == EnvKind::Usar && !stats.scores.empty()) {
    double mean = 0;
    for (double s : stats.scores) mean += s;
    log << " mean_score=" << mean / static_cast<double>(stats.scores.size());
  }
  log << "\ntranscript " << (cli.verify ? "(verified) " : "") << "-> "
      << opt.transcript_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Multi-agent RL with language-grounded communication: training, "
      "evaluation, and text-game sessions."};
  app.require_subcommand(1);

  TrainCli train_cli;
  CLI::App* train_cmd =
      app.add_subcommand("train", "Train a policy and write checkpoint + "
                                  "metrics.csv");
  train_cmd->add_option("--config", train_cli.config_path,
                        "JSON config file (same schema as the echoed "
                        "config.json)");
  train_cmd->add_option("--set", train_cli.sets,
                        "Override a config key, e.g. --set hidden=128");
  train_cmd->add_option("--out", train_cli.out, "Output directory");
  train_cmd->add_option("--env", train_cli.env, "Environment preset")
      ->check(CLI::IsMember({"pp_v0", "pp_v1", "pp10_v1", "usar"}));
  train_cmd->add_option("--variant", train_cli.variant, "Training variant")
      ->check(CLI::IsMember({"langground", "ic3net", "nocomm", "aecomm"}));
  train_cmd->add_option("--lambda", train_cli.lambda,
                        "Alignment loss weight");
  train_cmd->add_option("--grounding", train_cli.grounding,
                        "Grounding dataset path");
  train_cmd->add_option("--grounding-fraction", train_cli.grounding_fraction,
                        "Fraction of grounded states kept (0..1]");
  train_cmd->add_option("--hold-out", train_cli.hold_out,
                        "Prey cells excluded from training spawns, "
                        "\"r,c;r,c\"");
  train_cmd->add_flag("--no-gating", train_cli.no_gating,
                      "Broadcast every message (gating ablation)");
  train_cmd->add_option("--seed", train_cli.seed, "Master seed");
  train_cmd->add_option("--epochs", train_cli.epochs, "Training epochs");
  train_cmd->add_option("--preset", train_cli.preset,
                        "Hyperparameter preset")
      ->check(CLI::IsMember({"desk", "paper"}));

  CollectCli collect_cli;
  CLI::App* collect_cmd = app.add_subcommand(
      "collect", "Record an oracle grounding dataset");
  collect_cmd->add_option("--config", collect_cli.config_path,
                          "JSON config file");
  collect_cmd->add_option("--set", collect_cli.sets, "Override a config key");
  collect_cmd->add_option("--out", collect_cli.out, "Output directory");
  collect_cmd->add_option("--env", collect_cli.env, "Environment preset")
      ->check(CLI::IsMember({"pp_v0", "pp_v1", "pp10_v1", "usar"}));
  collect_cmd->add_option("--episodes", collect_cli.episodes,
                          "Oracle episodes to record");
  collect_cmd->add_option("--seed", collect_cli.seed, "Master seed");
  collect_cmd->add_option("--dim", collect_cli.dim, "Embedding dimension");
  collect_cmd->add_option("--provider", collect_cli.provider_kind,
                          "Embedding provider kind")
      ->check(CLI::IsMember({"local", "http"}));
  collect_cmd->add_option("--endpoint", collect_cli.endpoint,
                          "HTTP embedding endpoint");
  collect_cmd->add_option("--model", collect_cli.model,
                          "Model name sent to the endpoint");
  collect_cmd->add_option("--token-seed", collect_cli.token_seed,
                          "Local provider token seed");

  auto add_eval_options = [](CLI::App* cmd, EvalCli& cli) {
    cmd->add_option("--config", cli.config_path, "JSON config file");
    cmd->add_option("--set", cli.sets, "Override a config key");
    cmd->add_option("--out", cli.out, "Output directory");
    cmd->add_option("--team", cli.team,
                    "Comma-separated seats: checkpoint path, oracle, or "
                    "external");
    cmd->add_option("--env", cli.env,
                    "Environment preset (default: from the first "
                    "checkpoint)")
        ->check(CLI::IsMember({"pp_v0", "pp_v1", "pp10_v1", "usar"}));
    cmd->add_option("--grounding", cli.grounding,
                    "Grounding dataset for the bridge and alignment");
    cmd->add_option("--grounding-fraction", cli.grounding_fraction,
                    "Mask the dataset to this fraction first");
    cmd->add_option("--mask-seed", cli.mask_seed, "Mask selection seed");
    cmd->add_option("--episodes", cli.episodes, "Episodes per seed");
    cmd->add_option("--seeds", cli.seeds, "Number of seeds (0..n-1)");
    cmd->add_option("--seed-list", cli.seed_list,
                    "Explicit comma-separated seeds (overrides --seeds)");
    cmd->add_flag("--no-metrics", cli.no_metrics,
                  "Skip comm-space analysis");
    cmd->add_option("--min-pts", cli.min_pts, "DBSCAN min_pts");
    cmd->add_option("--eps", cli.eps, "DBSCAN eps (0: auto)");
    cmd->add_option("--max-pairs", cli.max_pairs,
                    "Topographic-similarity pair cap");
    cmd->add_option("--topo-seed", cli.topo_seed, "Pair subsample seed");
    cmd->add_option("--timeout-ms", cli.timeout_ms,
                    "External client reply timeout");
    cmd->add_option("--max-retries", cli.max_retries,
                    "Invalid replies tolerated per round");
    cmd->add_option("--port", cli.port,
                    "Listen for the external client on this TCP port "
                    "(0: ephemeral)");
    cmd->add_flag("--stdio", cli.stdio,
                  "Drive the external client over stdin/stdout");
  };
  EvalCli eval_cli;
  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "Evaluate a team and write report files");
  add_eval_options(eval_cmd, eval_cli);
  EvalCli adhoc_cli;
  adhoc_cli.out = "runs/adhoc";
  CLI::App* adhoc_cmd = app.add_subcommand(
      "adhoc", "Play a mixed ad-hoc team (checkpoints, oracles, external "
               "clients) through the translation bridge");
  add_eval_options(adhoc_cmd, adhoc_cli);

  ZeroShotCli zs_cli;
  CLI::App* zs_cmd = app.add_subcommand(
      "zeroshot", "Force held-out prey cells and score the messages");
  zs_cmd->add_option("--config", zs_cli.config_path, "JSON config file");
  zs_cmd->add_option("--set", zs_cli.sets, "Override a config key");
  zs_cmd->add_option("--out", zs_cli.out, "Output directory");
  zs_cmd->add_option("--checkpoint", zs_cli.checkpoint, "Trained policy");
  zs_cmd->add_option("--grounding", zs_cli.grounding,
                     "Full (unmasked) grounding dataset");
  zs_cmd->add_option("--cells", zs_cli.cells,
                     "Cells \"r,c;r,c\" (default: the checkpoint's "
                     "hold-out)");
  zs_cmd->add_option("--episodes", zs_cli.episodes, "Episodes per cell");
  zs_cmd->add_option("--seed", zs_cli.seed, "Master seed");

  AnalyzeCli an_cli;
  CLI::App* an_cmd = app.add_subcommand(
      "analyze", "Recluster and re-annotate a saved report's comm space");
  an_cmd->add_option("--report", an_cli.report_dir,
                     "Directory holding report.json");
  an_cmd->add_option("--out", an_cli.out,
                     "Output directory (default: the report directory)");
  an_cmd->add_option("--grounding", an_cli.grounding,
                     "Dataset for cluster annotations");
  an_cmd->add_option("--eps", an_cli.eps, "DBSCAN eps (0: auto)");
  an_cmd->add_option("--min-pts", an_cli.min_pts, "DBSCAN min_pts");
  an_cmd->add_option("--set", an_cli.sets, "Override a config key");

  ServeCli serve_cli;
  CLI::App* serve_cmd = app.add_subcommand(
      "serve", "Host text-protocol sessions for external clients");
  serve_cmd->add_option("--config", serve_cli.config_path,
                        "JSON config file");
  serve_cmd->add_option("--set", serve_cli.sets, "Override a config key");
  serve_cmd->add_option("--out", serve_cli.out, "Output directory");
  serve_cmd->add_option("--env", serve_cli.env, "Environment preset")
      ->check(CLI::IsMember({"pp_v0", "pp_v1", "pp10_v1", "usar"}));
  serve_cmd->add_option("--seats", serve_cli.seats,
                        "Comma-separated oracle/external seats (default: "
                        "one external, rest oracle)");
  serve_cmd->add_option("--episodes", serve_cli.episodes, "Episodes");
  serve_cmd->add_option("--seed", serve_cli.seed, "Master seed");
  serve_cmd->add_option("--port", serve_cli.port,
                        "Listen on this TCP port (0: ephemeral)");
  serve_cmd->add_flag("--stdio", serve_cli.stdio,
                      "Serve one client over stdin/stdout");
  serve_cmd->add_option("--timeout-ms", serve_cli.timeout_ms,
                        "Client reply timeout");
  serve_cmd->add_option("--max-retries", serve_cli.max_retries,
                        "Invalid replies tolerated per round");
  serve_cmd->add_option("--transcript", serve_cli.transcript,
                        "Transcript path (default: <out>/transcript.jsonl)");
  serve_cmd->add_flag("--verify", serve_cli.verify,
                      "Replay the transcript afterwards and check it");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(train_cmd)) return run_train(train_cli);
    if (app.got_subcommand(collect_cmd)) return run_collect(collect_cli);
    if (app.got_subcommand(eval_cmd)) return run_eval(eval_cli);
    if (app.got_subcommand(adhoc_cmd)) return run_eval(adhoc_cli);
    if (app.got_subcommand(zs_cmd)) return run_zeroshot(zs_cli);
    if (app.got_subcommand(an_cmd)) return run_analyze(an_cli);
    if (app.got_subcommand(serve_cmd)) return run_serve(serve_cli);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}
