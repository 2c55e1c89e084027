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

// Benchmark harness: every store caption is a query, its item is the ground truth.

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "refrank/afs.h"
#include "refrank/ranker.h"
#include "refrank/session.h"
#include "refrank/store.h"

namespace refrank {

struct EvalConfig {
  Strategy strategy = Strategy::kNone;
  SessionParams params;
  std::size_t turns = 2;
  std::size_t threads = 0;
  // Evaluate only the first N captions (store order); all when unset.
  std::optional<std::size_t> max_queries;
};

struct QueryRun {
  std::string query_id;
  std::vector<std::vector<std::string>> ranked;  // per turn, displayed item ids
  std::vector<std::size_t> gt_ranks;             // per turn
};

struct EvalResult {
  std::vector<MetricsReport> per_turn;
  std::vector<QueryRun> runs;

  const MetricsReport& final_turn() const { return per_turn.back(); }
};

EvalResult evaluate(const EmbeddingStore& store, const EvalConfig& config, const afs::Checkpoint* afs = nullptr);

nlohmann::ordered_json metrics_json(const EvalResult& result, const EvalConfig& config);
nlohmann::ordered_json to_json(const QueryRun& run);

// Writes metrics.json, runs.jsonl and config.json into `dir`.
void write_run(const std::filesystem::path& dir, const EvalResult& result, const EvalConfig& config,
               const nlohmann::ordered_json& resolved_flags);

// Ablation grid. Empty lists fall back to the base value.
struct WeightTriple {
  double alpha = 0.8;
  double beta = 0.1;
  double gamma = 0.1;
};

struct AblationGrid {
  std::vector<WeightTriple> weights;
  std::vector<double> taus;
  std::vector<std::size_t> ks;
  std::vector<afs::LossMode> loss_modes;  // only meaningful for afs strategies
};

struct AblationRow {
  WeightTriple weights;
  double tau = 0.0;
  std::size_t k = 0;
  std::optional<afs::LossMode> loss_mode;
  MetricsReport metrics;  // final turn
};

// Supplies the checkpoint for a loss mode (e.g. by training or loading one).
using CheckpointProvider = std::function<const afs::Checkpoint*(afs::LossMode)>;

std::vector<AblationRow> ablate(const EmbeddingStore& store, const EvalConfig& base, const AblationGrid& grid,
                                const CheckpointProvider& checkpoints = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);
nlohmann::ordered_json ablation_json(const std::vector<AblationRow>& rows);

}  // namespace refrank
