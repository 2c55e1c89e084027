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

#include <cstring>

#include "refrank/ranker.h"
#include "refrank/synth.h"

namespace refrank {
namespace {

double baseline_mrr(const EmbeddingStore& store) {
  std::vector<std::size_t> ranks;
  for (std::size_t row = 0; row < store.caption_count(); ++row) {
    const VectorF q = store.caption_vector(row).transpose();
    ranks.push_back(ground_truth_rank(score_all(store, q), store, store.item_of_caption(row)));
  }
  return mrr_at_k(ranks, 5);
}

bool same_bits(const MatrixF& a, const MatrixF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

TEST(Synth, SameSeedGivesBitIdenticalStores) {
  synth::SynthConfig c;
  c.n_items = 40;
  const auto a = synth::generate(c);
  const auto b = synth::generate(c);
  EXPECT_TRUE(same_bits(a.image_embeddings.values, b.image_embeddings.values));
  EXPECT_TRUE(same_bits(a.caption_embeddings.values, b.caption_embeddings.values));
  EXPECT_TRUE(same_bits(a.synthetic_caption_embeddings.values, b.synthetic_caption_embeddings.values));
  EXPECT_TRUE(same_bits(a.image_tokens->values, b.image_tokens->values));
  EXPECT_TRUE(same_bits(a.query_tokens->values, b.query_tokens->values));
  EXPECT_EQ(a.synthetic_caption_tokens->mask, b.synthetic_caption_tokens->mask);
  c.seed = 43;
  EXPECT_FALSE(same_bits(a.image_embeddings.values, synth::generate(c).image_embeddings.values));
}

TEST(Synth, ShapesFollowConfig) {
  synth::SynthConfig c;
  c.n_items = 17;
  c.captions_per_item = 3;
  const auto s = synth::generate(c);
  EXPECT_TRUE(validate_store(s).ok());
  EXPECT_EQ(s.size(), 17U);
  EXPECT_EQ(s.caption_count(), 51U);
  EXPECT_EQ(s.manifest.dim, c.dim);
  EXPECT_EQ(s.manifest.token_dim, c.token_dim);
  EXPECT_EQ(s.image_tokens->positions, c.patches);
  EXPECT_EQ(s.synthetic_caption_tokens->positions, c.caption_tokens);
  EXPECT_EQ(s.query_tokens->items, 51U);
  for (const auto& item : s.items) EXPECT_EQ(item.human_captions.size(), 3U);
}

TEST(Synth, NoiselessLimitRetrievesOwnImage) {
  synth::SynthConfig c;
  c.n_items = 100;
  c.sigma_image = c.sigma_caption = 0.0;
  c.gap = 0.0;
  const auto s = synth::generate(c);
  EXPECT_EQ(synth::baseline_hits_at_1(s), 1.0);
  EXPECT_EQ(baseline_mrr(s), 1.0);
}

TEST(Synth, DefaultWorldIsNeitherTrivialNorHopeless) {
  const double h1 = synth::baseline_hits_at_1(synth::generate(synth::SynthConfig{}));
  EXPECT_GE(h1, 0.3);
  EXPECT_LE(h1, 0.8);
}

TEST(Synth, MoreCaptionNoiseNeverHelps) {
  double previous = 2.0;
  for (double sigma : {0.3, 0.6, 1.2}) {
    synth::SynthConfig c;
    c.n_items = 300;
    c.sigma_caption = sigma;
    const double mrr = baseline_mrr(synth::generate(c));
    EXPECT_LE(mrr, previous) << "sigma_caption " << sigma;
    previous = mrr;
  }
}

TEST(Synth, ConfigJsonRoundTrip) {
  synth::SynthConfig c;
  c.n_items = 12;
  c.sigma_token = 0.1;
  c.clusters = 0;
  c.split = "train";
  const auto back = synth::config_from_json(synth::to_json(c));
  EXPECT_EQ(back.n_items, 12U);
  EXPECT_EQ(back.sigma_token, 0.1);
  EXPECT_EQ(back.clusters, 0U);
  EXPECT_EQ(back.split, "train");
  EXPECT_EQ(synth::to_json(back), synth::to_json(c));
}

TEST(Synth, RejectsInvalidConfig) {
  synth::SynthConfig c;
  c.n_items = 0;
  EXPECT_THROW(synth::generate(c), InvalidArgument);
  c = synth::SynthConfig{};
  c.sigma_image = -1;
  EXPECT_THROW(synth::generate(c), InvalidArgument);
}

}  // namespace
}  // namespace refrank
