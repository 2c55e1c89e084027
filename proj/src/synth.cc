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

#include "refrank/synth.h"

#include <cmath>
#include <cstdio>
#include <random>

#include "refrank/ranker.h"

namespace refrank::synth {

namespace {

class Gaussian {
 public:
  explicit Gaussian(std::uint64_t seed) : rng_(seed) {}

  VectorD vector(std::size_t n) {
    VectorD v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal_(rng_);
    return v;
  }
  // Isotropic noise with E|e|^2 = 1.
  VectorD noise(std::size_t n) { return vector(n) / std::sqrt(static_cast<double>(n)); }
  VectorD unit(std::size_t n) {
    VectorD v = vector(n);
    return v / v.norm();
  }
  std::size_t uniform_int(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

struct Backbone {
  VectorD m_img;
  VectorD m_txt;
  MatrixD projection;  // d_t x d
};

Backbone make_backbone(const SynthConfig& c) {
  Gaussian g(c.backbone_seed);
  Backbone b;
  b.m_img = g.unit(c.dim);
  VectorD t = g.vector(c.dim);
  t -= t.dot(b.m_img) * b.m_img;
  b.m_txt = t / t.norm();
  b.projection = MatrixD(static_cast<Eigen::Index>(c.token_dim), static_cast<Eigen::Index>(c.dim));
  for (Eigen::Index r = 0; r < b.projection.rows(); ++r) {
    b.projection.row(r) = g.vector(c.dim).transpose() / std::sqrt(static_cast<double>(c.dim));
  }
  return b;
}

VectorD normalized(const VectorD& v) { return v / v.norm(); }

// Removes the modality-offset directions so that semantic content is orthogonal to the gap.
VectorD semantic(const VectorD& v, const Backbone& b) {
  VectorD out = v - v.dot(b.m_img) * b.m_img;
  out -= out.dot(b.m_txt) * b.m_txt;
  return out;
}

// Writes `valid` token rows for a noisy view; the remaining rows stay zero and masked.
void write_tokens(TokenFeatureTensor& t, std::size_t row, const VectorD& view, std::size_t valid,
                  const Backbone& b, double sigma, Gaussian& g) {
  const VectorD base = normalized(b.projection * view);
  for (std::size_t pos = 0; pos < t.positions; ++pos) {
    const auto r = static_cast<Eigen::Index>(row * t.positions + pos);
    if (pos < valid) {
      t.values.row(r) = (base + sigma * g.noise(t.dim)).transpose().cast<float>();
      t.mask[row * t.positions + pos] = 1;
    } else {
      t.values.row(r).setZero();
      t.mask[row * t.positions + pos] = 0;
    }
  }
}

TokenFeatureTensor make_tokens(std::size_t rows, std::size_t positions, std::size_t dim) {
  TokenFeatureTensor t;
  t.items = rows;
  t.positions = positions;
  t.dim = dim;
  t.values = MatrixF::Zero(static_cast<Eigen::Index>(rows * positions), static_cast<Eigen::Index>(dim));
  t.mask.assign(rows * positions, 0);
  return t;
}

std::string item_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "item-%05zu", i);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_items < 1 || dim < 2 || token_dim < 2 || patches < 1 || caption_tokens < 1 || query_tokens < 1 ||
      captions_per_item < 1) {
    throw InvalidArgument("synth: sizes must be positive (dim and token_dim >= 2)");
  }
  if (sigma_image < 0 || sigma_caption < 0 || sigma_synthetic < 0 || sigma_token < 0 || gap < 0 ||
      cluster_spread < 0) {
    throw InvalidArgument("synth: noise scales and gap must be non-negative");
  }
}

nlohmann::ordered_json to_json(const SynthConfig& c) {
  nlohmann::ordered_json j;
  j["n_items"] = c.n_items;
  j["d"] = c.dim;
  j["d_t"] = c.token_dim;
  j["p"] = c.patches;
  j["s"] = c.caption_tokens;
  j["s_q"] = c.query_tokens;
  j["captions_per_item"] = c.captions_per_item;
  j["sigma_image"] = c.sigma_image;
  j["sigma_caption"] = c.sigma_caption;
  j["sigma_synthetic"] = c.sigma_synthetic;
  j["sigma_token"] = c.sigma_token;
  j["gap"] = c.gap;
  j["clusters"] = c.clusters;
  j["cluster_spread"] = c.cluster_spread;
  j["seed"] = c.seed;
  j["backbone_seed"] = c.backbone_seed;
  j["split"] = c.split;
  return j;
}

SynthConfig config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.n_items = j.value("n_items", c.n_items);
  c.dim = j.value("d", c.dim);
  c.token_dim = j.value("d_t", c.token_dim);
  c.patches = j.value("p", c.patches);
  c.caption_tokens = j.value("s", c.caption_tokens);
  c.query_tokens = j.value("s_q", c.query_tokens);
  c.captions_per_item = j.value("captions_per_item", c.captions_per_item);
  c.sigma_image = j.value("sigma_image", c.sigma_image);
  c.sigma_caption = j.value("sigma_caption", c.sigma_caption);
  c.sigma_synthetic = j.value("sigma_synthetic", c.sigma_synthetic);
  c.sigma_token = j.value("sigma_token", c.sigma_token);
  c.gap = j.value("gap", c.gap);
  c.clusters = j.value("clusters", c.clusters);
  c.cluster_spread = j.value("cluster_spread", c.cluster_spread);
  c.seed = j.value("seed", c.seed);
  c.backbone_seed = j.value("backbone_seed", c.backbone_seed);
  c.split = j.value("split", c.split);
  c.validate();
  return c;
}

EmbeddingStore generate(const SynthConfig& c) {
  c.validate();
  const auto b = make_backbone(c);
  Gaussian g(c.seed);

  const auto n = c.n_items;
  const auto n_caps = n * c.captions_per_item;
  const auto d = static_cast<Eigen::Index>(c.dim);

  EmbeddingStore store;
  store.manifest = {"synthetic", c.split, c.dim, c.token_dim};
  store.image_embeddings.values.resize(static_cast<Eigen::Index>(n), d);
  store.caption_embeddings.values.resize(static_cast<Eigen::Index>(n_caps), d);
  store.synthetic_caption_embeddings.values.resize(static_cast<Eigen::Index>(n), d);
  store.image_tokens = make_tokens(n, c.patches, c.token_dim);
  store.synthetic_caption_tokens = make_tokens(n, c.caption_tokens, c.token_dim);
  store.query_tokens = make_tokens(n_caps, c.query_tokens, c.token_dim);
  store.items.reserve(n);

  const std::size_t min_caption_len = (c.caption_tokens + 1) / 2;
  const std::size_t min_query_len = (c.query_tokens + 1) / 2;

  std::vector<VectorD> cluster_centres;
  for (std::size_t k = 0; k < c.clusters; ++k) cluster_centres.push_back(normalized(semantic(g.vector(c.dim), b)));

  for (std::size_t i = 0; i < n; ++i) {
    const VectorD centre =
        cluster_centres.empty()
            ? normalized(semantic(g.vector(c.dim), b))
            : normalized(cluster_centres[i % c.clusters] + c.cluster_spread * semantic(g.noise(c.dim), b));
    ItemRecord rec;
    rec.item_id = item_name(i);
    rec.image_ref = "synthetic://" + rec.item_id + ".png";
    rec.image_row = i;
    rec.synthetic_row = i;
    rec.caption_begin = i * c.captions_per_item;

    const VectorD img_view = normalized(centre + c.sigma_image * semantic(g.noise(c.dim), b));
    store.image_embeddings.values.row(static_cast<Eigen::Index>(i)) =
        (img_view + c.gap * b.m_img).transpose().cast<float>();
    write_tokens(*store.image_tokens, i, img_view, c.patches, b, c.sigma_token, g);

    for (std::size_t k = 0; k < c.captions_per_item; ++k) {
      const auto row = rec.caption_begin + k;
      const VectorD view = normalized(centre + c.sigma_caption * semantic(g.noise(c.dim), b));
      store.caption_embeddings.values.row(static_cast<Eigen::Index>(row)) =
          (view + c.gap * b.m_txt).transpose().cast<float>();
      write_tokens(*store.query_tokens, row, view, g.uniform_int(min_query_len, c.query_tokens), b, c.sigma_token,
                   g);
      rec.human_captions.push_back({rec.item_id + "#" + std::to_string(k),
                                    "caption " + std::to_string(k) + " of " + rec.item_id});
    }

    const VectorD syn_view = normalized(centre + c.sigma_synthetic * semantic(g.noise(c.dim), b));
    store.synthetic_caption_embeddings.values.row(static_cast<Eigen::Index>(i)) =
        (syn_view + c.gap * b.m_txt).transpose().cast<float>();
    write_tokens(*store.synthetic_caption_tokens, i, syn_view, g.uniform_int(min_caption_len, c.caption_tokens), b,
                 c.sigma_token, g);
    rec.synthetic_caption = "generated caption of " + rec.item_id;
    store.items.push_back(std::move(rec));
  }
  store.build_indexes();
  return store;
}

double baseline_hits_at_1(const EmbeddingStore& store) {
  std::vector<std::size_t> ranks;
  ranks.reserve(store.caption_count());
  for (std::size_t row = 0; row < store.caption_count(); ++row) {
    const VectorF q = store.caption_vector(row).transpose();
    const auto scores = score_all(store, q);
    ranks.push_back(ground_truth_rank(scores, store, store.item_of_caption(row)));
  }
  return hits_at_k(ranks, 1);
}

}  // namespace refrank::synth
