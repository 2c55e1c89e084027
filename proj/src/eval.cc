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

#include "refrank/eval.h"

#include <fstream>
#include <sstream>

#include "refrank/parallel.h"

namespace refrank {

namespace fs = std::filesystem;

EvalResult evaluate(const EmbeddingStore& store, const EvalConfig& config, const afs::Checkpoint* afs) {
  if (config.turns < 1) throw InvalidArgument("eval: turns must be >= 1");
  config.params.validate();
  if (needs_checkpoint(config.strategy) && afs == nullptr) {
    throw StrategyError("strategy " + to_string(config.strategy) + " needs --checkpoint");
  }
  const auto n = config.max_queries ? std::min(*config.max_queries, store.caption_count()) : store.caption_count();
  if (n == 0) throw InvalidArgument("eval: store has no queries");

  EvalResult result;
  result.runs.resize(n);
  parallel_for(n, config.threads, [&](std::size_t row) {
    auto state = start_session(store, row, config.strategy, config.params);
    run_multi_turn(state, store, config.turns, afs);
    auto& run = result.runs[row];
    run.query_id = state.query_id;
    for (const auto& t : state.history) {
      std::vector<std::string> ids;
      for (const auto& c : t.candidates.entries) ids.push_back(c.item_id);
      run.ranked.push_back(std::move(ids));
      run.gt_ranks.push_back(*t.gt_rank);
    }
  });

  for (std::size_t t = 0; t < config.turns; ++t) {
    std::vector<std::size_t> ranks;
    ranks.reserve(n);
    for (const auto& r : result.runs) ranks.push_back(r.gt_ranks[t]);
    result.per_turn.push_back(make_report(ranks, t + 1));
  }
  return result;
}

nlohmann::ordered_json metrics_json(const EvalResult& result, const EvalConfig& config) {
  nlohmann::ordered_json j;
  j["strategy"] = to_string(config.strategy);
  j["turns"] = config.turns;
  j["final"] = to_json(result.final_turn());
  auto& per = j["per_turn"] = nlohmann::ordered_json::array();
  for (const auto& m : result.per_turn) per.push_back(to_json(m));
  return j;
}

nlohmann::ordered_json to_json(const QueryRun& run) {
  nlohmann::ordered_json j;
  j["query_id"] = run.query_id;
  auto& turns = j["turns"] = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < run.ranked.size(); ++t) {
    turns.push_back({{"turn", t + 1}, {"ranked", run.ranked[t]}, {"gt_rank", run.gt_ranks[t]}});
  }
  return j;
}

void write_run(const fs::path& dir, const EvalResult& result, const EvalConfig& config,
               const nlohmann::ordered_json& resolved_flags) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "metrics.json");
    out << metrics_json(result, config).dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "runs.jsonl");
    for (const auto& r : result.runs) out << to_json(r).dump() << '\n';
  }
  {
    std::ofstream out(dir / "config.json");
    out << resolved_flags.dump(2) << '\n';
  }
  if (!fs::exists(dir / "metrics.json")) throw Error("eval: failed to write " + (dir / "metrics.json").string());
}

std::vector<AblationRow> ablate(const EmbeddingStore& store, const EvalConfig& base, const AblationGrid& grid,
                                const CheckpointProvider& checkpoints) {
  const auto& r = base.params.rocchio;
  const auto weights = grid.weights.empty() ? std::vector<WeightTriple>{{r.alpha, r.beta, r.gamma}} : grid.weights;
  const auto taus = grid.taus.empty() ? std::vector<double>{r.tau} : grid.taus;
  const auto ks = grid.ks.empty() ? std::vector<std::size_t>{r.k} : grid.ks;
  const bool uses_afs = needs_checkpoint(base.strategy);
  std::vector<std::optional<afs::LossMode>> modes;
  if (uses_afs && !grid.loss_modes.empty()) {
    for (auto m : grid.loss_modes) modes.emplace_back(m);
  } else {
    modes.emplace_back(std::nullopt);
  }

  std::vector<AblationRow> rows;
  for (const auto& mode : modes) {
    const afs::Checkpoint* ck = nullptr;
    if (uses_afs) {
      if (!checkpoints) throw StrategyError("ablate: afs strategies need a checkpoint source");
      ck = checkpoints(mode.value_or(afs::LossMode::kBoth));
    }
    for (const auto& w : weights) {
      for (double tau : taus) {
        for (std::size_t k : ks) {
          EvalConfig cfg = base;
          cfg.params.rocchio = {w.alpha, w.beta, w.gamma, tau, k};
          cfg.params.display_k = std::max(cfg.params.display_k, k);
          AblationRow row{w, tau, k, mode, evaluate(store, cfg, ck).final_turn()};
          rows.push_back(row);
        }
      }
    }
  }
  if (rows.empty()) throw InvalidArgument("ablate: empty grid");
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "alpha,beta,gamma,tau,k,loss_mode,hits@1,hits@5,mrr@5,n_queries,turn\n";
  for (const auto& r : rows) {
    out << r.weights.alpha << ',' << r.weights.beta << ',' << r.weights.gamma << ',' << r.tau << ',' << r.k << ','
        << (r.loss_mode ? afs::to_string(*r.loss_mode) : "") << ',' << r.metrics.hits_at_1 << ','
        << r.metrics.hits_at_5 << ',' << r.metrics.mrr_at_5 << ',' << r.metrics.n_queries << ',' << r.metrics.turn
        << '\n';
  }
  return out.str();
}

nlohmann::ordered_json ablation_json(const std::vector<AblationRow>& rows) {
  auto out = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["alpha"] = r.weights.alpha;
    j["beta"] = r.weights.beta;
    j["gamma"] = r.weights.gamma;
    j["tau"] = r.tau;
    j["k"] = r.k;
    j["loss_mode"] = r.loss_mode ? nlohmann::ordered_json(afs::to_string(*r.loss_mode)) : nullptr;
    j["metrics"] = to_json(r.metrics);
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace refrank
