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

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "refrank/common.h"
#include "refrank/store.h"

namespace refrank {

// Cosine similarity with 64-bit accumulation; throws on a zero-norm argument.
template <typename DerivedA, typename DerivedB>
float cosine_similarity(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) throw InvalidArgument("cosine_similarity: size mismatch");
  const auto ad = a.template cast<double>();
  const auto bd = b.template cast<double>();
  const double na = ad.squaredNorm();
  const double nb = bd.squaredNorm();
  if (na <= 0.0 || nb <= 0.0) throw InvalidArgument("cosine_similarity: zero-norm vector");
  return static_cast<float>(ad.cwiseProduct(bd).sum() / std::sqrt(na * nb));
}

// Max over the rows of cosine(row, query).
template <typename DerivedRows, typename DerivedQuery>
float score_multivector(const Eigen::MatrixBase<DerivedRows>& rows, const Eigen::MatrixBase<DerivedQuery>& query) {
  if (rows.rows() < 1) throw InvalidArgument("score_multivector: needs at least one row");
  float best = -2.0F;
  for (Eigen::Index r = 0; r < rows.rows(); ++r) best = std::max(best, cosine_similarity(rows.row(r), query));
  return best;
}

struct Candidate {
  std::size_t item = 0;
  std::string item_id;
  float score = 0.0F;
};

// Ranked items for one query; scores non-increasing, ties by ascending item_id.
struct CandidateSet {
  std::string query_id;
  std::vector<Candidate> entries;
  std::size_t k = 0;
  // Set when the requested k exceeded the collection size.
  bool clamped = false;

  std::size_t size() const { return entries.size(); }
};

// Scores every item against the query (image multivectors when the store has them).
std::vector<float> score_all(const EmbeddingStore& store, const Eigen::Ref<const VectorF>& query);

// Top-k items by descending score.
CandidateSet rank(const Eigen::Ref<const VectorF>& query, const EmbeddingStore& store, std::size_t k,
                  std::string query_id = {});
CandidateSet rank_scores(std::span<const float> scores, const EmbeddingStore& store, std::size_t k,
                         std::string query_id = {});

// Bottom-k items (lowest relevance first).
CandidateSet rank_bottom(std::span<const float> scores, const EmbeddingStore& store, std::size_t k,
                         std::string query_id = {});

// 1-based position of `item` in the full ranking implied by `scores`.
std::size_t ground_truth_rank(std::span<const float> scores, const EmbeddingStore& store, std::size_t item);

// Rank value meaning "not retrieved at all".
inline constexpr std::size_t kNotRetrieved = 0;

double hits_at_k(std::span<const std::size_t> ranks, std::size_t k);
double mrr_at_k(std::span<const std::size_t> ranks, std::size_t k);

struct MetricsReport {
  double hits_at_1 = 0.0;
  double hits_at_5 = 0.0;
  double mrr_at_5 = 0.0;
  std::size_t n_queries = 0;
  std::size_t turn = 1;
};

MetricsReport make_report(std::span<const std::size_t> ranks, std::size_t turn);

// Keys: hits@1, hits@5, mrr@5, n_queries, turn.
nlohmann::ordered_json to_json(const MetricsReport& report);
MetricsReport metrics_from_json(const nlohmann::json& j);

}  // namespace refrank
