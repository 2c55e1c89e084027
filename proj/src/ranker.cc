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

#include "refrank/ranker.h"

#include <algorithm>
#include <numeric>

namespace refrank {

namespace {

// True when a ranks strictly before b.
struct RankOrder {
  std::span<const float> scores;
  const EmbeddingStore* store;
  bool operator()(std::size_t a, std::size_t b) const {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return store->id_order(a) < store->id_order(b);
  }
};

CandidateSet make_set(const std::vector<std::size_t>& order, std::size_t take, std::span<const float> scores,
                      const EmbeddingStore& store, std::size_t k, std::string query_id) {
  CandidateSet out;
  out.query_id = std::move(query_id);
  out.k = k;
  out.clamped = k > scores.size();
  out.entries.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const auto item = order[i];
    out.entries.push_back({item, store.items[item].item_id, scores[item]});
  }
  return out;
}

}  // namespace

std::vector<float> score_all(const EmbeddingStore& store, const Eigen::Ref<const VectorF>& query) {
  const auto qd = query.cast<double>();
  const double qn = qd.squaredNorm();
  if (qn <= 0.0) throw InvalidArgument("score_all: zero-norm query");
  const double q_norm = std::sqrt(qn);
  std::vector<float> scores(store.size());
  if (store.image_multivector) {
    const auto& mv = *store.image_multivector;
    for (std::size_t i = 0; i < store.size(); ++i) {
      scores[i] = score_multivector(mv.item_block(store.items[i].image_row), query.transpose());
    }
    return scores;
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto row = store.image_vector(i).cast<double>();
    const double rn = row.squaredNorm();
    if (rn <= 0.0) throw InvalidArgument("score_all: zero-norm image row for " + store.items[i].item_id);
    scores[i] = static_cast<float>(row.dot(qd.transpose()) / (std::sqrt(rn) * q_norm));
  }
  return scores;
}

CandidateSet rank_scores(std::span<const float> scores, const EmbeddingStore& store, std::size_t k,
                         std::string query_id) {
  if (k < 1) throw InvalidArgument("rank: k must be >= 1");
  if (scores.empty()) throw InvalidArgument("rank: empty store");
  const auto take = std::min(k, scores.size());
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    RankOrder{scores, &store});
  return make_set(order, take, scores, store, k, std::move(query_id));
}

CandidateSet rank(const Eigen::Ref<const VectorF>& query, const EmbeddingStore& store, std::size_t k,
                  std::string query_id) {
  const auto scores = score_all(store, query);
  return rank_scores(scores, store, k, std::move(query_id));
}

CandidateSet rank_bottom(std::span<const float> scores, const EmbeddingStore& store, std::size_t k,
                         std::string query_id) {
  if (k < 1) throw InvalidArgument("rank_bottom: k must be >= 1");
  if (scores.empty()) throw InvalidArgument("rank_bottom: empty store");
  const auto take = std::min(k, scores.size());
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RankOrder before{scores, &store};
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) { return before(b, a); });
  return make_set(order, take, scores, store, k, std::move(query_id));
}

std::size_t ground_truth_rank(std::span<const float> scores, const EmbeddingStore& store, std::size_t item) {
  if (item >= scores.size()) throw InvalidArgument("ground_truth_rank: item out of range");
  RankOrder before{scores, &store};
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != item && before(i, item)) ++ahead;
  }
  return ahead + 1;
}

double hits_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw InvalidArgument("hits_at_k: empty query set");
  std::size_t hits = 0;
  for (auto r : ranks) {
    if (r != kNotRetrieved && r <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double mrr_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw InvalidArgument("mrr_at_k: empty query set");
  double total = 0.0;
  for (auto r : ranks) {
    if (r != kNotRetrieved && r <= k) total += 1.0 / static_cast<double>(r);
  }
  return total / static_cast<double>(ranks.size());
}

MetricsReport make_report(std::span<const std::size_t> ranks, std::size_t turn) {
  MetricsReport m;
  m.hits_at_1 = hits_at_k(ranks, 1);
  m.hits_at_5 = hits_at_k(ranks, 5);
  m.mrr_at_5 = mrr_at_k(ranks, 5);
  m.n_queries = ranks.size();
  m.turn = turn;
  return m;
}

nlohmann::ordered_json to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["hits@1"] = report.hits_at_1;
  j["hits@5"] = report.hits_at_5;
  j["mrr@5"] = report.mrr_at_5;
  j["n_queries"] = report.n_queries;
  j["turn"] = report.turn;
  return j;
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport m;
  m.hits_at_1 = j.at("hits@1").get<double>();
  m.hits_at_5 = j.at("hits@5").get<double>();
  m.mrr_at_5 = j.at("mrr@5").get<double>();
  m.n_queries = j.at("n_queries").get<std::size_t>();
  m.turn = j.at("turn").get<std::size_t>();
  return m;
}

}  // namespace refrank
