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

// Multi-turn retrieval sessions.
//
// Turn 1 ranks the store with the query embedding. Every later turn takes the
// top-K items of the previous turn as feedback, refines the embedding with the
// session's strategy and ranks again.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "refrank/afs.h"
#include "refrank/common.h"
#include "refrank/ranker.h"
#include "refrank/rocchio.h"
#include "refrank/store.h"

namespace refrank {

// Feedback that cannot be applied to the current turn (unknown or unshown item, bad patch index).
class FeedbackError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// Strategy prerequisites not met (e.g. afs without a checkpoint).
class StrategyError : public Error {
 public:
  using Error::Error;
};

enum class Strategy { kNone, kPrfOriginal, kPrfExtended, kGrf, kAfs, kAfsPrf, kExplicit };

std::string to_string(Strategy s);
Strategy parse_strategy(std::string_view text);
bool needs_checkpoint(Strategy s);

// Embedding that later turns refine: the original query or the previous turn's result.
enum class Anchor { kOriginal, kPrevious };
// Explicit feedback: mean over the query and every caption so far, or query and newest caption only.
enum class ExplicitMode { kRunning, kPairwise };

std::string to_string(Anchor a);
std::string to_string(ExplicitMode m);
Anchor parse_anchor(std::string_view text);
ExplicitMode parse_explicit_mode(std::string_view text);

struct SessionParams {
  RocchioParams rocchio;
  Anchor anchor = Anchor::kPrevious;
  ExplicitMode explicit_mode = ExplicitMode::kRunning;
  // Items returned per turn; never below rocchio.k or the metrics cut-off.
  std::size_t display_k = 10;
  double region_magnitude = 1.0;
  std::uint64_t seed = 42;

  void validate() const;
};

nlohmann::ordered_json to_json(const SessionParams& p);
SessionParams session_params_from_json(const nlohmann::json& j, SessionParams base = {});

enum class Relevance { kRelevant, kIrrelevant };

struct ItemMark {
  std::size_t item = 0;  // store item index
  Relevance relevance = Relevance::kRelevant;
};

struct RegionMark {
  std::size_t item = 0;  // store item index
  std::vector<std::size_t> patches;
  afs::Polarity polarity = afs::Polarity::kRelevant;
};

// User input applied before a turn; empty feedback means automatic behaviour.
struct Feedback {
  std::vector<ItemMark> marks;
  std::vector<RegionMark> regions;
  std::optional<std::size_t> explicit_caption_row;

  bool empty() const { return marks.empty() && regions.empty() && !explicit_caption_row; }
};

struct TurnResult {
  std::size_t turn = 0;  // 1-based
  CandidateSet candidates;
  VectorF embedding;                    // embedding the ranking was computed with
  std::optional<std::size_t> gt_rank;  // 1-based rank of the ground-truth item, when known
  std::optional<afs::Saliency> saliency;
  Feedback feedback;  // feedback that produced this turn
};

struct SessionState {
  std::string query_id;
  std::optional<std::size_t> caption_row;  // query caption, when the query comes from the store
  std::optional<std::size_t> target_item;  // ground truth, when known
  Strategy strategy = Strategy::kNone;
  SessionParams params;
  VectorF initial;
  VectorF current;
  std::vector<TurnResult> history;
  std::vector<std::size_t> explicit_pool;  // caption rows, consumption order
  std::size_t explicit_used = 0;
  std::vector<VectorF> explicit_feedback;  // caption embeddings applied so far

  std::size_t turn() const { return history.size(); }
};

// Session for a store caption; the caption's item is the ground truth.
SessionState start_session(const EmbeddingStore& store, std::size_t caption_row, Strategy strategy,
                           const SessionParams& params);

// Remaining captions of the query's item in seeded order.
std::vector<std::size_t> simulate_explicit_pool(const EmbeddingStore& store, std::size_t caption_row,
                                                std::uint64_t seed);

// Folds one more feedback caption into the explicit-feedback embedding.
VectorF explicit_refine(SessionState& state, const Eigen::Ref<const VectorF>& caption_embedding);

// Runs the next turn. `afs` is required for afs/afs_prf; `feedback` overrides automatic feedback.
const TurnResult& run_turn(SessionState& state, const EmbeddingStore& store, const afs::Checkpoint* afs = nullptr,
                           const Feedback& feedback = {});

// Runs turns until the session has `turns` turns in total.
const std::vector<TurnResult>& run_multi_turn(SessionState& state, const EmbeddingStore& store, std::size_t turns,
                                              const afs::Checkpoint* afs = nullptr);

nlohmann::ordered_json to_json(const TurnResult& turn, const EmbeddingStore& store);
nlohmann::ordered_json to_json(const SessionState& state, const EmbeddingStore& store);
nlohmann::ordered_json to_json(const afs::Saliency& saliency, const EmbeddingStore& store);
Feedback feedback_from_json(const nlohmann::json& j, const EmbeddingStore& store);
nlohmann::ordered_json to_json(const Feedback& feedback, const EmbeddingStore& store);

// Re-runs a serialized session from its query and recorded feedback.
SessionState replay(const nlohmann::json& history, const EmbeddingStore& store, const afs::Checkpoint* afs = nullptr);

}  // namespace refrank
