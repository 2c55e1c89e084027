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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "refrank/ranker.h"
#include "test_support.h"

namespace refrank {
namespace {

VectorF vec(std::initializer_list<float> v) {
  VectorF out(static_cast<Eigen::Index>(v.size()));
  std::copy(v.begin(), v.end(), out.data());
  return out;
}

double loop_cosine(const float* a, const float* b, std::size_t n) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  return dot / std::sqrt(na * nb);
}

TEST(Cosine, AnalyticCases) {
  EXPECT_FLOAT_EQ(cosine_similarity(vec({1, 0}), vec({1, 0})), 1.0F);
  EXPECT_FLOAT_EQ(cosine_similarity(vec({1, 0}), vec({0, 1})), 0.0F);
  EXPECT_NEAR(cosine_similarity(vec({1, 1}), vec({1, 0})), 0.70711, 1e-5);
  EXPECT_THROW(cosine_similarity(vec({0, 0}), vec({1, 0})), InvalidArgument);
  EXPECT_THROW(cosine_similarity(vec({1, 0, 0}), vec({1, 0})), InvalidArgument);
}

TEST(Cosine, BoundedByOne) {
  const auto m = testing::random_rows(200, 7, 3);
  for (Eigen::Index i = 0; i + 1 < m.rows(); ++i) {
    const float s = cosine_similarity(m.row(i), m.row(i + 1));
    EXPECT_LE(std::abs(s), 1.0F + 1e-6F);
  }
  for (Eigen::Index i = 0; i < 20; ++i) EXPECT_LE(cosine_similarity(m.row(i), m.row(i) * 3.0F), 1.0F + 1e-6F);
}

TEST(Multivector, MaxOverRows) {
  MatrixF rows(2, 2);
  rows << 1, 0, 0, 1;
  EXPECT_FLOAT_EQ(score_multivector(rows, vec({0, 1}).transpose()), 1.0F);
  MatrixF one(1, 2);
  one << 1, 0;
  EXPECT_FLOAT_EQ(score_multivector(one, vec({1, 0}).transpose()), 1.0F);
  MatrixF mixed(2, 2);
  mixed << 1, 0, 1.0F / std::sqrt(2.0F), 1.0F / std::sqrt(2.0F);
  EXPECT_NEAR(score_multivector(mixed, vec({0, 1}).transpose()), 0.70711, 1e-5);
}

TEST(Rank, ExactMatchFirstWithScoreOne) {
  auto images = testing::random_rows(10, 6, 11);
  const auto store = testing::toy_store(images);
  const VectorF q = images.row(7).transpose();
  const auto top = rank(q, store, 3, "q");
  ASSERT_EQ(top.size(), 3U);
  EXPECT_EQ(top.entries[0].item_id, "item007");
  EXPECT_NEAR(top.entries[0].score, 1.0F, 1e-6F);
  EXPECT_EQ(top.query_id, "q");
}

TEST(Rank, TiesOrderedByItemId) {
  MatrixF images(3, 2);
  images << 1, 0, 0, 1, 0, 1;
  auto store = testing::toy_store(images);
  store.items[1].item_id = "b";
  store.items[2].item_id = "a";
  store.build_indexes();
  const auto top = rank(vec({0, 1}), store, 3);
  EXPECT_EQ(top.entries[0].item_id, "a");
  EXPECT_EQ(top.entries[1].item_id, "b");
  EXPECT_EQ(top.entries[0].score, top.entries[1].score);
}

TEST(Rank, MatchesBruteForceSort) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto images = testing::random_rows(50, 8, 100 + seed);
    const auto store = testing::toy_store(images);
    const VectorF q = testing::random_rows(1, 8, 900 + seed).row(0).transpose();
    std::vector<std::pair<double, std::string>> oracle;
    for (Eigen::Index i = 0; i < images.rows(); ++i) {
      const VectorF row = images.row(i).transpose();
      oracle.emplace_back(loop_cosine(row.data(), q.data(), 8), store.items[static_cast<std::size_t>(i)].item_id);
    }
    std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const auto top = rank(q, store, 5);
    ASSERT_EQ(top.size(), 5U);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_EQ(top.entries[i].item_id, oracle[i].second) << "seed " << seed << " position " << i;
      EXPECT_NEAR(top.entries[i].score, oracle[i].first, 1e-6);
    }
  }
}

TEST(Rank, CandidateSetInvariants) {
  const auto images = testing::random_rows(40, 5, 8);
  const auto store = testing::toy_store(images);
  const VectorF q = testing::random_rows(1, 5, 9).row(0).transpose();
  const auto top = rank(q, store, 40);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < top.size(); ++i) {
    ids.insert(top.entries[i].item_id);
    if (i > 0) EXPECT_GE(top.entries[i - 1].score, top.entries[i].score);
  }
  EXPECT_EQ(ids.size(), top.size());
}

TEST(Rank, ClampsOversizedK) {
  const auto store = testing::toy_store(testing::random_rows(4, 3, 1));
  const auto top = rank(vec({1, 0, 0}), store, 10);
  EXPECT_EQ(top.size(), 4U);
  EXPECT_TRUE(top.clamped);
  EXPECT_FALSE(rank(vec({1, 0, 0}), store, 4).clamped);
  EXPECT_THROW(rank(vec({1, 0, 0}), store, 0), InvalidArgument);
  EXPECT_THROW(rank(vec({0, 0, 0}), store, 1), InvalidArgument);
}

TEST(Rank, BottomIsReverseOfFullRanking) {
  const auto store = testing::toy_store(testing::random_rows(30, 4, 21));
  const VectorF q = testing::random_rows(1, 4, 22).row(0).transpose();
  const auto scores = score_all(store, q);
  const auto full = rank_scores(scores, store, 30);
  const auto bottom = rank_bottom(scores, store, 5);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(bottom.entries[i].item, full.entries[29 - i].item);
}

TEST(Rank, GroundTruthRankAgreesWithRanking) {
  const auto store = testing::toy_store(testing::random_rows(25, 4, 31));
  const VectorF q = testing::random_rows(1, 4, 32).row(0).transpose();
  const auto scores = score_all(store, q);
  const auto full = rank_scores(scores, store, 25);
  for (std::size_t pos = 0; pos < full.size(); ++pos) {
    EXPECT_EQ(ground_truth_rank(scores, store, full.entries[pos].item), pos + 1);
  }
}

TEST(Rank, MultivectorStoreScoresWithBestRow) {
  MatrixF images(2, 2);
  images << 1, 0, 1, 0;
  auto store = testing::toy_store(images);
  MultivectorStack mv;
  mv.items = 2;
  mv.vectors = 2;
  mv.dim = 2;
  mv.values.resize(4, 2);
  mv.values << 1, 0, 0.6F, 0.8F, 1, 0, 0, -1;
  store.image_multivector = mv;
  const auto scores = score_all(store, vec({0, 1}));
  EXPECT_NEAR(scores[0], 0.8F, 1e-6F);
  EXPECT_NEAR(scores[1], 0.0F, 1e-6F);
}

TEST(Metrics, MrrExamples) {
  const std::vector<std::size_t> a{1, 1, 1};
  EXPECT_EQ(mrr_at_k(a, 5), 1.0);
  const std::vector<std::size_t> b{4};
  EXPECT_EQ(mrr_at_k(b, 5), 0.25);
  const std::vector<std::size_t> c{1, 3, 7};
  EXPECT_EQ(mrr_at_k(c, 5), (1.0 + 1.0 / 3.0) / 3.0);
  EXPECT_NEAR(mrr_at_k(c, 5), 0.4444, 1e-4);
}

TEST(Metrics, HitsExamples) {
  const std::vector<std::size_t> c{1, 3, 7};
  EXPECT_DOUBLE_EQ(hits_at_k(c, 5), 2.0 / 3.0);
  const std::vector<std::size_t> d{6};
  EXPECT_EQ(hits_at_k(d, 5), 0.0);
  const std::vector<std::size_t> all{1, 9, 20, 3};
  EXPECT_EQ(hits_at_k(all, 20), 1.0);
  const std::vector<std::size_t> missing{kNotRetrieved, 1};
  EXPECT_EQ(hits_at_k(missing, 5), 0.5);
  const std::vector<std::size_t> none;
  EXPECT_THROW(hits_at_k(none, 5), InvalidArgument);
}

TEST(Metrics, OrderingInvariantOnRandomRuns) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> rank_dist(0, 12);
  std::uniform_int_distribution<std::size_t> len(1, 40);
  for (int run = 0; run < 200; ++run) {
    std::vector<std::size_t> ranks(len(rng));
    for (auto& r : ranks) r = rank_dist(rng);
    const auto m = make_report(ranks, 1);
    EXPECT_LE(m.hits_at_1, m.mrr_at_5);
    EXPECT_LE(m.mrr_at_5, m.hits_at_5);
  }
}

TEST(Metrics, JsonRoundTrip) {
  const std::vector<std::size_t> ranks{1, 2, 9};
  const auto m = make_report(ranks, 2);
  const auto j = to_json(m);
  EXPECT_TRUE(j.contains("hits@1"));
  EXPECT_TRUE(j.contains("mrr@5"));
  const auto back = metrics_from_json(j);
  EXPECT_EQ(back.hits_at_1, m.hits_at_1);
  EXPECT_EQ(back.hits_at_5, m.hits_at_5);
  EXPECT_EQ(back.mrr_at_5, m.mrr_at_5);
  EXPECT_EQ(back.n_queries, 3U);
  EXPECT_EQ(back.turn, 2U);
}

}  // namespace
}  // namespace refrank
