// Copyright (C) 2026 The refrank Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License"); you may not use this file except in compliance
// with the License. You may obtain a copy of the License at
//
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software distributed under the License
// is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express
// or implied. See the License for the specific language governing permissions and limitations under the License.

// refrank command-line entry point.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "refrank/afs.h"
#include "refrank/eval.h"
#include "refrank/pca.h"
#include "refrank/service.h"
#include "refrank/session.h"
#include "refrank/store.h"
#include "refrank/synth.h"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace refrank;

namespace {

std::uint64_t seed_fallback() {
  if (const char* env = std::getenv("REFRANK_SEED"); env != nullptr && *env != '\0') {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw InvalidArgument(std::string("REFRANK_SEED is not an unsigned integer: ") + env);
    }
  }
  return 42;
}

const std::vector<std::string> kStrategies = {"none", "prf_original", "prf_extended", "grf",
                                              "afs",  "afs_prf",      "explicit"};

void write_json(const fs::path& path, const ordered_json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, sep)) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

// Flags shared by every verb that runs sessions.
struct SessionFlags {
  SessionParams params;
  std::string anchor = "previous";
  std::string explicit_mode = "running";

  void add(CLI::App* cmd) {
    auto& r = params.rocchio;
    cmd->add_option("--alpha", r.alpha, "Query weight")->capture_default_str();
    cmd->add_option("--beta", r.beta, "Positive feedback weight")->capture_default_str();
    cmd->add_option("--gamma", r.gamma, "Negative feedback weight")->capture_default_str();
    cmd->add_option("--tau", r.tau, "Softmax temperature of the feedback weights")->capture_default_str();
    cmd->add_option("--k", r.k, "Feedback items per turn")->capture_default_str();
    cmd->add_option("--anchor", anchor, "Embedding later turns refine: original | previous")
        ->check(CLI::IsMember({"original", "previous"}))
        ->capture_default_str();
    cmd->add_option("--explicit-mode", explicit_mode, "Explicit feedback mean: running | pairwise")
        ->check(CLI::IsMember({"running", "pairwise"}))
        ->capture_default_str();
    cmd->add_option("--display-k", params.display_k, "Items returned per turn")->capture_default_str();
    cmd->add_option("--region-magnitude", params.region_magnitude, "Attention bias of region boxes")
        ->capture_default_str();
  }

  SessionParams resolve(std::uint64_t seed) const {
    SessionParams p = params;
    p.anchor = parse_anchor(anchor);
    p.explicit_mode = parse_explicit_mode(explicit_mode);
    p.display_k = std::max(p.display_k, p.rocchio.k);
    p.seed = seed;
    p.validate();
    return p;
  }
};

struct TrainFlags {
  afs::TrainConfig train;
  std::string loss = "both";
  std::size_t heads = 4;
  bool ffn = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--loss", loss, "Loss components: img | cap | both")
        ->check(CLI::IsMember({"img", "cap", "both", "image_only", "caption_only"}))
        ->capture_default_str();
    cmd->add_option("--epochs", train.epochs, "Maximum epochs")->capture_default_str();
    cmd->add_option("--patience", train.patience, "Early-stopping patience in epochs")->capture_default_str();
    cmd->add_option("--lr", train.learning_rate, "Initial AdamW learning rate (cosine annealed to 0)")
        ->capture_default_str();
    cmd->add_option("--weight-decay", train.weight_decay, "AdamW decoupled weight decay")->capture_default_str();
    cmd->add_option("--batch-size", train.batch_size, "Queries per optimizer step")->capture_default_str();
    cmd->add_option("--validation-fraction", train.validation_fraction, "Items held out for validation")
        ->capture_default_str();
    cmd->add_option("--heads", heads, "Attention heads (must divide the token dimension)")->capture_default_str();
    cmd->add_flag("--ffn", ffn, "Add a feed-forward layer after each attention block");
  }

  afs::AfsConfig afs_config(const EmbeddingStore& store, std::size_t k, std::uint64_t seed) const {
    afs::AfsConfig base;
    base.heads = heads;
    base.k = k;
    base.seed = seed;
    base.loss_mode = afs::parse_loss_mode(loss);
    base.ffn = ffn;
    return afs::config_for_store(store, base);
  }
};

std::optional<afs::Checkpoint> maybe_checkpoint(const std::string& dir) {
  if (dir.empty()) return std::nullopt;
  return afs::load_checkpoint(dir);
}

void print_metrics(const EvalResult& result) {
  for (const auto& m : result.per_turn) {
    std::printf("turn %zu  hits@1 %.4f  hits@5 %.4f  mrr@5 %.4f  (%zu queries)\n", m.turn, m.hits_at_1, m.hits_at_5,
                m.mrr_at_5, m.n_queries);
  }
}

// ---------------------------------------------------------------------------

struct SynthCmd {
  synth::SynthConfig config;
  std::string out;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("synth", "Generate a seeded synthetic store");
    cmd->add_option("--out", out, "Output store directory")->required();
    cmd->add_option("--items", config.n_items, "Items")->capture_default_str();
    cmd->add_option("--dim", config.dim, "Global embedding dimension d")->capture_default_str();
    cmd->add_option("--token-dim", config.token_dim, "Token feature dimension d_t")->capture_default_str();
    cmd->add_option("--patches", config.patches, "Patches per image")->capture_default_str();
    cmd->add_option("--caption-tokens", config.caption_tokens, "Generated-caption token length")
        ->capture_default_str();
    cmd->add_option("--query-tokens", config.query_tokens, "Query token length")->capture_default_str();
    cmd->add_option("--captions-per-item", config.captions_per_item, "Human captions per item")
        ->capture_default_str();
    cmd->add_option("--sigma-image", config.sigma_image, "Image view noise")->capture_default_str();
    cmd->add_option("--sigma-caption", config.sigma_caption, "Caption view noise")->capture_default_str();
    cmd->add_option("--sigma-synthetic", config.sigma_synthetic, "Generated-caption view noise")
        ->capture_default_str();
    cmd->add_option("--sigma-token", config.sigma_token, "Per-position token noise")->capture_default_str();
    cmd->add_option("--gap", config.gap, "Modality offset magnitude")->capture_default_str();
    cmd->add_option("--clusters", config.clusters, "Concept groups (0 = independent concepts)")
        ->capture_default_str();
    cmd->add_option("--cluster-spread", config.cluster_spread, "Spread of concepts around their group centre")
        ->capture_default_str();
    cmd->add_option("--seed", config.seed, "Item and noise seed (falls back to $REFRANK_SEED)")
        ->default_val(seed_fallback())
        ->capture_default_str();
    cmd->add_option("--backbone-seed", config.backbone_seed, "Seed of the modality offsets and token projection")
        ->capture_default_str();
    cmd->add_option("--split", config.split, "Split name recorded in the manifest")->capture_default_str();
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto store = synth::generate(config);
    write_store(store, out);
    write_json(fs::path(out) / "synth_config.json", synth::to_json(config));
    std::printf("wrote %zu items, %zu queries to %s (baseline hits@1 %.4f)\n", store.size(), store.caption_count(),
                out.c_str(), synth::baseline_hits_at_1(store));
  }
};

struct IngestCmd {
  std::string store;
  std::string report;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("ingest", "Load and validate a store directory");
    cmd->add_option("--store", store, "Store directory (manifest.json + .embt tensors)")->required();
    cmd->add_option("--report", report, "Write a JSON summary here");
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto s = load_store(store);
    ordered_json j;
    j["store"] = store;
    j["backbone"] = s.manifest.backbone;
    j["split"] = s.manifest.split;
    j["items"] = s.size();
    j["captions"] = s.caption_count();
    j["d"] = s.manifest.dim;
    j["d_t"] = s.manifest.token_dim;
    j["image_tokens"] = s.image_tokens.has_value();
    j["synthetic_caption_tokens"] = s.synthetic_caption_tokens.has_value();
    j["query_tokens"] = s.query_tokens.has_value();
    j["image_multivector"] = s.image_multivector.has_value();
    j["violations"] = ordered_json::array();
    if (!report.empty()) write_json(report, j);
    std::cout << j.dump(2) << '\n';
  }
};

struct EvalCmd {
  std::string store;
  std::string strategy = "none";
  std::size_t turns = 2;
  std::string checkpoint;
  std::string out;
  std::size_t threads = 0;
  std::size_t max_queries = 0;
  std::uint64_t seed = 42;
  SessionFlags session;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("eval", "Run every store caption as a query and write metrics");
    cmd->add_option("--store", store, "Store directory")->required();
    cmd->add_option("--strategy", strategy, "Feedback strategy")->check(CLI::IsMember(kStrategies))
        ->capture_default_str();
    cmd->add_option("--turns", turns, "Retrieval turns (turn 1 is the baseline)")->capture_default_str();
    cmd->add_option("--checkpoint", checkpoint, "AFS checkpoint directory (afs, afs_prf)");
    cmd->add_option("--out", out, "Run directory for config.json, metrics.json, runs.jsonl")->required();
    cmd->add_option("--threads", threads, "Worker threads (0 = all cores)")->capture_default_str();
    cmd->add_option("--max-queries", max_queries, "Evaluate only the first N captions (0 = all)")
        ->capture_default_str();
    cmd->add_option("--seed", seed, "Seed (falls back to $REFRANK_SEED)")->default_val(seed_fallback())
        ->capture_default_str();
    session.add(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto s = load_store(store);
    const auto ck = maybe_checkpoint(checkpoint);
    EvalConfig cfg;
    cfg.strategy = parse_strategy(strategy);
    cfg.params = session.resolve(seed);
    cfg.turns = turns;
    cfg.threads = threads;
    if (max_queries > 0) cfg.max_queries = max_queries;
    const auto result = evaluate(s, cfg, ck ? &*ck : nullptr);

    ordered_json flags;
    flags["command"] = "eval";
    flags["store"] = store;
    flags["strategy"] = strategy;
    flags["turns"] = turns;
    flags["checkpoint"] = checkpoint.empty() ? ordered_json(nullptr) : ordered_json(checkpoint);
    flags["max_queries"] = max_queries > 0 ? ordered_json(max_queries) : ordered_json(nullptr);
    flags["seed"] = seed;
    flags["params"] = to_json(cfg.params);
    write_run(out, result, cfg, flags);
    print_metrics(result);
  }
};

struct TrainCmd {
  std::string store;
  std::string out;
  std::size_t k = 5;
  std::size_t threads = 0;
  std::uint64_t seed = 42;
  TrainFlags flags;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("train-afs", "Train the attention-based feedback summarizer");
    cmd->add_option("--store", store, "Training store directory")->required();
    cmd->add_option("--out", out, "Checkpoint directory")->required();
    cmd->add_option("--k", k, "Feedback items per query")->capture_default_str();
    cmd->add_option("--threads", threads, "Worker threads (0 = all cores)")->capture_default_str();
    cmd->add_option("--seed", seed, "Seed (falls back to $REFRANK_SEED)")->default_val(seed_fallback())
        ->capture_default_str();
    flags.add(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto s = load_store(store);
    const auto config = flags.afs_config(s, k, seed);
    auto tc = flags.train;
    tc.seed = seed;
    tc.threads = threads;
    const auto result = afs::train(s, config, tc);
    afs::save_checkpoint(out, result.params, config);
    write_json(fs::path(out) / "history.json", afs::to_json(result.history));
    for (const auto& e : result.history.epochs) {
      std::printf("epoch %3zu  lr %.3e  train %.5f  val %.5f\n", e.epoch, e.learning_rate, e.train_loss,
                  e.validation_loss);
    }
    std::printf("best epoch %zu%s; checkpoint in %s\n", result.history.best_epoch,
                result.history.early_stopped ? " (early stop)" : "", out.c_str());
  }
};

struct AblateCmd {
  std::string store;
  std::string strategy = "prf_extended";
  std::size_t turns = 2;
  std::string checkpoint;
  std::string train_store;
  std::string weights;
  std::string taus;
  std::string ks;
  std::string loss_modes;
  std::string out;
  std::size_t threads = 0;
  std::size_t max_queries = 0;
  std::uint64_t seed = 42;
  SessionFlags session;
  TrainFlags train;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("ablate", "Evaluate a grid of feedback parameters");
    cmd->add_option("--store", store, "Evaluation store directory")->required();
    cmd->add_option("--strategy", strategy, "Feedback strategy")->check(CLI::IsMember(kStrategies))
        ->capture_default_str();
    cmd->add_option("--turns", turns, "Retrieval turns")->capture_default_str();
    cmd->add_option("--checkpoint", checkpoint, "AFS checkpoint used when no loss modes are given");
    cmd->add_option("--train-store", train_store, "Store to train one AFS model per --loss-modes entry");
    cmd->add_option("--weights", weights, "Weight triples, e.g. \"0.8,0.1,0.1;0.33,0.33,0.33\"");
    cmd->add_option("--taus", taus, "Temperatures, e.g. \"0.05,0.1,0.25,0.5\"");
    cmd->add_option("--ks", ks, "Feedback set sizes, e.g. \"1,2,3,4,5\"");
    cmd->add_option("--loss-modes", loss_modes, "AFS loss modes, e.g. \"img,both\"");
    cmd->add_option("--out", out, "Directory for ablation.csv and ablation.json")->required();
    cmd->add_option("--threads", threads, "Worker threads (0 = all cores)")->capture_default_str();
    cmd->add_option("--max-queries", max_queries, "Evaluate only the first N captions (0 = all)")
        ->capture_default_str();
    cmd->add_option("--seed", seed, "Seed (falls back to $REFRANK_SEED)")->default_val(seed_fallback())
        ->capture_default_str();
    session.add(cmd);
    train.add(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto s = load_store(store);
    EvalConfig base;
    base.strategy = parse_strategy(strategy);
    base.params = session.resolve(seed);
    base.turns = turns;
    base.threads = threads;
    if (max_queries > 0) base.max_queries = max_queries;

    AblationGrid grid;
    for (const auto& t : split(weights, ';')) {
      const auto parts = split(t, ',');
      if (parts.size() != 3) throw InvalidArgument("ablate: weight triple needs three values: " + t);
      grid.weights.push_back({std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])});
    }
    for (const auto& t : split(taus, ',')) grid.taus.push_back(std::stod(t));
    for (const auto& t : split(ks, ',')) grid.ks.push_back(std::stoul(t));
    for (const auto& t : split(loss_modes, ',')) grid.loss_modes.push_back(afs::parse_loss_mode(t));

    std::optional<afs::Checkpoint> fixed = maybe_checkpoint(checkpoint);
    std::optional<EmbeddingStore> training;
    std::map<afs::LossMode, afs::Checkpoint> trained;
    CheckpointProvider provider = [&](afs::LossMode mode) -> const afs::Checkpoint* {
      if (grid.loss_modes.empty()) {
        if (!fixed) throw StrategyError("ablate: strategy " + strategy + " needs --checkpoint or --loss-modes");
        return &*fixed;
      }
      if (train_store.empty()) throw StrategyError("ablate: --loss-modes needs --train-store");
      if (!training) training = load_store(train_store);
      auto it = trained.find(mode);
      if (it == trained.end()) {
        auto config = train.afs_config(*training, base.params.rocchio.k, seed);
        config.loss_mode = mode;
        auto tc = train.train;
        tc.seed = seed;
        tc.threads = threads;
        std::printf("training AFS with loss %s\n", afs::to_string(mode).c_str());
        it = trained.emplace(mode, afs::Checkpoint{config, afs::train(*training, config, tc).params}).first;
      }
      return &it->second;
    };

    const auto rows = ablate(s, base, grid, provider);
    fs::create_directories(out);
    {
      std::ofstream csv(fs::path(out) / "ablation.csv", std::ios::trunc);
      csv << ablation_csv(rows);
    }
    write_json(fs::path(out) / "ablation.json", ablation_json(rows));
    std::cout << ablation_csv(rows);
  }
};

struct SaliencyCmd {
  std::string store;
  std::string checkpoint;
  std::string query_id;
  std::string strategy = "afs";
  std::string out;
  std::uint64_t seed = 42;
  SessionFlags session;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("saliency", "Export patch and token saliency for one query");
    cmd->add_option("--store", store, "Store directory")->required();
    cmd->add_option("--checkpoint", checkpoint, "AFS checkpoint directory")->required();
    cmd->add_option("--query-id", query_id, "Caption id of the query")->required();
    cmd->add_option("--strategy", strategy, "afs (images and captions) or afs_prf (images only)")
        ->check(CLI::IsMember({"afs", "afs_prf"}))
        ->capture_default_str();
    cmd->add_option("--out", out, "Write the JSON here instead of stdout");
    cmd->add_option("--seed", seed, "Seed (falls back to $REFRANK_SEED)")->default_val(seed_fallback())
        ->capture_default_str();
    session.add(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto s = load_store(store);
    const auto ck = afs::load_checkpoint(checkpoint);
    const auto row = s.find_caption(query_id);
    if (!row) throw InvalidArgument("saliency: unknown query id " + query_id);
    auto state = start_session(s, *row, parse_strategy(strategy), session.resolve(seed));
    run_multi_turn(state, s, 2, &ck);
    const auto& turn = state.history.back();
    ordered_json j;
    j["query_id"] = query_id;
    j["strategy"] = strategy;
    j["feedback_items"] = ordered_json::array();
    const auto& prev = state.history.front().candidates.entries;
    for (std::size_t i = 0; i < std::min(state.params.rocchio.k, prev.size()); ++i) {
      j["feedback_items"].push_back(prev[i].item_id);
    }
    j["saliency"] = to_json(*turn.saliency, s);
    if (out.empty()) {
      std::cout << j.dump(2) << '\n';
    } else {
      write_json(out, j);
    }
  }
};

struct PcaCmd {
  std::string store;
  std::string checkpoint;
  std::string out;
  std::size_t max_queries = 500;
  std::uint64_t seed = 42;
  SessionFlags session;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("pca", "Project query, image and AFS embeddings onto two principal components");
    cmd->add_option("--store", store, "Store directory")->required();
    cmd->add_option("--checkpoint", checkpoint, "AFS checkpoint; adds one z_cls point per query");
    cmd->add_option("--out", out, "CSV with x,y,kind,id rows")->required();
    cmd->add_option("--max-queries", max_queries, "Queries to include (0 = all)")->capture_default_str();
    cmd->add_option("--seed", seed, "Seed (falls back to $REFRANK_SEED)")->default_val(seed_fallback())
        ->capture_default_str();
    session.add(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto s = load_store(store);
    const auto ck = maybe_checkpoint(checkpoint);
    const auto params = session.resolve(seed);
    const auto n = max_queries == 0 ? s.caption_count() : std::min(max_queries, s.caption_count());

    std::vector<VectorF> vectors;
    std::vector<std::pair<std::string, std::string>> labels;  // kind, id
    std::vector<bool> image_added(s.size(), false);
    for (std::size_t row = 0; row < n; ++row) {
      vectors.emplace_back(s.caption_vector(row).transpose());
      labels.emplace_back("query", s.caption_id(row));
      const auto item = s.item_of_caption(row);
      if (!image_added[item]) {
        image_added[item] = true;
        vectors.emplace_back(s.image_vector(item).transpose());
        labels.emplace_back("image", s.items[item].item_id);
      }
      if (ck) {
        const VectorF q = s.caption_vector(row).transpose();
        std::vector<std::size_t> top;
        for (const auto& c : rank(q, s, params.rocchio.k).entries) top.push_back(c.item);
        const auto input = afs::make_input(s, row, top, ck->config, true);
        vectors.push_back(afs::forward(ck->params, input, ck->config).z_cls);
        labels.emplace_back("afs", s.caption_id(row));
      }
    }
    MatrixD data(static_cast<Eigen::Index>(vectors.size()), s.image_embeddings.dim());
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      data.row(static_cast<Eigen::Index>(i)) = vectors[i].transpose().cast<double>();
    }
    PcaConfig pc;
    pc.seed = seed;
    const auto fit = fit_pca(data, pc);
    const auto xy = project(fit, data);

    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    std::ofstream csv(out, std::ios::trunc);
    if (!csv) throw Error("cannot write " + out);
    csv.precision(9);
    csv << "x,y,kind,id\n";
    for (Eigen::Index i = 0; i < xy.rows(); ++i) {
      csv << xy(i, 0) << ',' << xy(i, 1) << ',' << labels[static_cast<std::size_t>(i)].first << ','
          << labels[static_cast<std::size_t>(i)].second << '\n';
    }
    std::printf("%zu points; component variances %.6g, %.6g\n", vectors.size(), fit.variances[0], fit.variances[1]);
  }
};

struct ServeCmd {
  std::string store;
  std::string checkpoint;
  ServeConfig config;
  std::string session_log = "sessions.json";
  std::uint64_t seed = 42;
  SessionFlags session;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("serve", "Serve the interactive session API");
    cmd->add_option("--store", store, "Store directory")->required();
    cmd->add_option("--checkpoint", checkpoint, "AFS checkpoint; without one afs strategies are rejected");
    cmd->add_option("--host", config.host, "Bind address")->capture_default_str();
    cmd->add_option("--port", config.port, "Port (0 = pick a free one)")->capture_default_str();
    cmd->add_option("--session-log", session_log, "Sessions are written here on shutdown (empty = off)")
        ->capture_default_str();
    cmd->add_option("--seed", seed, "Default session seed (falls back to $REFRANK_SEED)")
        ->default_val(seed_fallback())
        ->capture_default_str();
    session.add(cmd);
    cmd->callback([this] { run(); });
  }

  void run() {
    const auto s = load_store(store);
    const auto ck = maybe_checkpoint(checkpoint);
    config.session_log = session_log;
    serve(s, ck ? &*ck : nullptr, session.resolve(seed), config);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"refrank: relevance-feedback retrieval over precomputed vision-language embeddings"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "refrank 1.0.0");

  SynthCmd synth_cmd;
  IngestCmd ingest_cmd;
  EvalCmd eval_cmd;
  AblateCmd ablate_cmd;
  TrainCmd train_cmd;
  SaliencyCmd saliency_cmd;
  PcaCmd pca_cmd;
  ServeCmd serve_cmd;
  try {
    synth_cmd.add(app);
    ingest_cmd.add(app);
    eval_cmd.add(app);
    ablate_cmd.add(app);
    train_cmd.add(app);
    saliency_cmd.add(app);
    pca_cmd.add(app);
    serve_cmd.add(app);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const StoreError& e) {
    std::cerr << "store error: " << e.what() << '\n';
    return 3;
  } catch (const StrategyError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
