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

// Attentive feedback summarizer.
//
// A two-block attention model that reads the token features of a text query and
// the patch/token features of the top-K feedback items and emits one vector in
// the global embedding space:
//
//   h0   = [cls; query tokens]
//   h1   = h0 + CrossAttn(LN(h0), W_in r + b_in)     keys/values: relevance sequence
//   h2   = h1 + SelfAttn(LN(h1))                      padded query tokens masked
//   z    = W_out h2[cls] + b_out
//
// No positional encoding is applied to the relevance sequence, so the summary
// is invariant to the order of the feedback items. Feed-forward sublayers are
// available behind AfsConfig::ffn and are off by default.
//
// At query time z is the positive Rocchio vector; the negative vector weights
// each feedback item by a softmax over its negated accumulated cross-attention.

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "refrank/autodiff.h"
#include "refrank/common.h"
#include "refrank/ranker.h"
#include "refrank/rocchio.h"
#include "refrank/store.h"

namespace refrank::afs {

enum class LossMode { kImageOnly, kCaptionOnly, kBoth };

std::string to_string(LossMode mode);
LossMode parse_loss_mode(std::string_view text);

struct AfsConfig {
  std::size_t token_dim = 16;       // d_t
  std::size_t output_dim = 32;      // d
  std::size_t heads = 4;            // n_h
  std::size_t caption_tokens = 12;  // s, padded synthetic caption length
  std::size_t patches = 9;          // p
  std::size_t query_tokens = 12;    // s_q
  std::size_t k = 5;                // feedback items
  std::uint64_t seed = 42;
  LossMode loss_mode = LossMode::kBoth;
  bool ffn = false;

  void validate() const;
  std::size_t head_dim() const { return token_dim / heads; }
};

nlohmann::ordered_json to_json(const AfsConfig& config);
AfsConfig config_from_json(const nlohmann::json& j);

// Shape fields taken from a store; heads/k/seed/loss_mode keep the given values.
AfsConfig config_for_store(const EmbeddingStore& store, AfsConfig base = {});

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct AttentionBlock {
  T wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct FeedForward {
  T ln_g, ln_b, w1, b1, w2, b2;
};

// One slot per learnable tensor; T is a matrix type or an autodiff variable.
template <typename T>
struct ParamSet {
  T cls;
  T in_w, in_b;
  T ln1_g, ln1_b;
  AttentionBlock<T> cross;
  FeedForward<T> cross_ffn;
  T ln2_g, ln2_b;
  AttentionBlock<T> self;
  FeedForward<T> self_ffn;
  T out_w, out_b;
};

// Calls fn(name, sets.field...) for every slot in a fixed order.
template <typename Fn, typename... Sets>
void visit_params(Fn&& fn, Sets&... sets) {
  auto block = [&](const std::string& p, auto&... b) {
    fn(p + ".wq", b.wq...);
    fn(p + ".bq", b.bq...);
    fn(p + ".wk", b.wk...);
    fn(p + ".bk", b.bk...);
    fn(p + ".wv", b.wv...);
    fn(p + ".bv", b.bv...);
    fn(p + ".wo", b.wo...);
    fn(p + ".bo", b.bo...);
  };
  auto ffn = [&](const std::string& p, auto&... f) {
    fn(p + ".ln_g", f.ln_g...);
    fn(p + ".ln_b", f.ln_b...);
    fn(p + ".w1", f.w1...);
    fn(p + ".b1", f.b1...);
    fn(p + ".w2", f.w2...);
    fn(p + ".b2", f.b2...);
  };
  fn(std::string("cls"), sets.cls...);
  fn(std::string("in_proj.w"), sets.in_w...);
  fn(std::string("in_proj.b"), sets.in_b...);
  fn(std::string("ln1.g"), sets.ln1_g...);
  fn(std::string("ln1.b"), sets.ln1_b...);
  block("cross", sets.cross...);
  ffn("cross_ffn", sets.cross_ffn...);
  fn(std::string("ln2.g"), sets.ln2_g...);
  fn(std::string("ln2.b"), sets.ln2_b...);
  block("self", sets.self...);
  ffn("self_ffn", sets.self_ffn...);
  fn(std::string("out_proj.w"), sets.out_w...);
  fn(std::string("out_proj.b"), sets.out_b...);
}

template <typename Scalar>
using AfsParams = ParamSet<Matrix<Scalar>>;

// Seeded initialisation: uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LN gains.
AfsParams<float> init_params(const AfsConfig& config);

template <typename To, typename From>
AfsParams<To> cast_params(const AfsParams<From>& params) {
  AfsParams<To> out;
  visit_params([](const std::string&, Matrix<To>& dst, const Matrix<From>& src) { dst = src.template cast<To>(); },
               out, params);
  return out;
}

template <typename Scalar>
std::size_t parameter_count(const AfsParams<Scalar>& params) {
  std::size_t n = 0;
  visit_params([&](const std::string&, const Matrix<Scalar>& m) { n += static_cast<std::size_t>(m.size()); }, params);
  return n;
}

// ---------------------------------------------------------------------------
// Relevance sequence

enum class Modality : std::uint8_t { kImage, kCaption };

struct Segment {
  Modality modality = Modality::kImage;
  std::size_t slot = 0;  // position of the item in the feedback set
};

template <typename Scalar>
struct RelevanceSequence {
  Matrix<Scalar> features;  // s_r x d_t; all image patches of items 1..K, then all caption tokens
  std::vector<Segment> segments;
  Mask mask;
  std::vector<std::size_t> items;  // store item index per slot
  std::size_t patches = 0;
  std::size_t caption_tokens = 0;
  bool with_captions = true;

  std::size_t k() const { return items.size(); }
  std::size_t length() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t image_offset(std::size_t slot) const { return slot * patches; }
  std::size_t caption_offset(std::size_t slot) const { return k() * patches + slot * caption_tokens; }

  template <typename To>
  RelevanceSequence<To> cast() const {
    return {features.template cast<To>(), segments, mask, items, patches, caption_tokens, with_captions};
  }
};

// Concatenates image patch features (and, unless with_captions is false, synthetic caption
// token features) of the given items. Throws if a needed modality is missing from the store.
RelevanceSequence<float> build_relevance_sequence(const EmbeddingStore& store, std::span<const std::size_t> items,
                                                  const AfsConfig& config, bool with_captions = true);
RelevanceSequence<float> build_relevance_sequence(const EmbeddingStore& store, const CandidateSet& top_k,
                                                  const AfsConfig& config, bool with_captions = true);

template <typename Scalar>
struct AfsInput {
  Matrix<Scalar> query_tokens;  // s_q x d_t
  Mask query_mask;              // s_q
  RelevanceSequence<Scalar> sequence;
  // Optional 1 x s_r additive bias on cross-attention logits (region feedback).
  Matrix<Scalar> key_bias;

  template <typename To>
  AfsInput<To> cast() const {
    return {query_tokens.template cast<To>(), query_mask, sequence.template cast<To>(), key_bias.template cast<To>()};
  }
};

AfsInput<float> make_input(const EmbeddingStore& store, std::size_t caption_row, std::span<const std::size_t> items,
                           const AfsConfig& config, bool with_captions = true);

// ---------------------------------------------------------------------------
// Forward pass

// Cross-attention probabilities, one (1 + s_q) x s_r matrix per head.
// Row 0 belongs to the CLS token; row_mask flags rows of real tokens.
template <typename Scalar>
struct AttentionScores {
  std::vector<Matrix<Scalar>> heads;
  Mask row_mask;
};

template <typename Scalar>
struct AfsOutput {
  Vector<Scalar> z_cls;
  AttentionScores<Scalar> cross_attention;
};

template <typename Scalar>
struct TapeOutput {
  ad::Var<Scalar> z_cls;  // 1 x d
  AttentionScores<Scalar> cross_attention;
};

template <typename Scalar>
ParamSet<ad::Var<Scalar>> bind_params(ad::Tape<Scalar>& tape, const AfsParams<Scalar>& params, bool trainable);

template <typename Scalar>
TapeOutput<Scalar> forward_on_tape(ad::Tape<Scalar>& tape, const ParamSet<ad::Var<Scalar>>& params,
                                   const AfsInput<Scalar>& input, const AfsConfig& config);

template <typename Scalar>
AfsOutput<Scalar> forward(const AfsParams<Scalar>& params, const AfsInput<Scalar>& input, const AfsConfig& config);

// ---------------------------------------------------------------------------
// Losses

struct TrainingTarget {
  VectorF image;          // ground-truth image embedding
  VectorF caption_mean;   // mean of the held-out human caption embeddings
};

// 1 - cos(z_cls, target), in [0, 2].
double loss_image(const Eigen::Ref<const VectorD>& z_cls, const Eigen::Ref<const VectorD>& z_img);
double loss_caption(const Eigen::Ref<const VectorD>& z_cls, const Eigen::Ref<const VectorD>& z_cap);

struct QueryLoss {
  double image = 0.0;
  double caption = 0.0;
};

struct LossReport {
  std::vector<QueryLoss> per_query;
  double total = 0.0;  // batch loss L
};

// both: L = 1/2 sum_q (l_img + l_cap); single-component modes: L = sum_q l.
LossReport batch_loss(std::span<const QueryLoss> losses, LossMode mode);

// Per-query contribution to the batch loss, on the tape.
template <typename Scalar>
ad::Var<Scalar> query_loss_on_tape(ad::Var<Scalar> z_cls, const Matrix<Scalar>& image_target,
                                   const Matrix<Scalar>& caption_target, LossMode mode);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double validation_fraction = 0.1;
  std::uint64_t seed = 42;
  std::size_t threads = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double learning_rate = 0.0;
  double train_loss = 0.0;       // mean per-query loss
  double validation_loss = 0.0;  // mean per-query loss
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

nlohmann::ordered_json to_json(const TrainHistory& history);

struct TrainResult {
  AfsParams<float> params;  // best-validation parameters
  TrainHistory history;
};

// Trains on every item of `store` that has >= 2 human captions. One caption per item
// and epoch is sampled as the query; feedback items are its baseline top-K.
TrainResult train(const EmbeddingStore& store, const AfsConfig& config, const TrainConfig& train_config);

// ---------------------------------------------------------------------------
// Inference-time refinement

struct ItemScores {
  VectorD image;    // K
  VectorD caption;  // K, empty without captions
};

// Sums probabilities over heads and valid query rows, then averages over each item's valid
// positions within each modality.
template <typename Scalar>
ItemScores accumulate_item_scores(const AttentionScores<Scalar>& attn, const RelevanceSequence<Scalar>& seq);

// softmax(-scores / tau).
VectorD negative_weights(const Eigen::Ref<const VectorD>& item_scores, double tau);

template <typename Scalar>
struct AfsRefinement {
  Vector<Scalar> refined;
  Vector<Scalar> positive_vector;  // z_cls
  Vector<Scalar> negative_vector;
  VectorD image_weights;
  VectorD caption_weights;
};

// refined = alpha z_q + beta z_cls - gamma sum_j (w_img_j z_img_j + w_cap_j z_cap_j) / 2.
// Without caption embeddings the caption term is dropped and the image term is not halved.
template <typename Scalar>
AfsRefinement<Scalar> refine_query_afs(const Eigen::Ref<const Vector<Scalar>>& z_q,
                                       const Eigen::Ref<const Vector<Scalar>>& z_cls, const ItemScores& scores,
                                       const Matrix<Scalar>& image_embeddings,
                                       const Matrix<Scalar>* caption_embeddings, const RocchioParams& params);

// Same rule with caller-supplied negative weights (e.g. from user marks). caption_weights is
// ignored when caption_embeddings is null.
template <typename Scalar>
AfsRefinement<Scalar> refine_query_afs_weighted(const Eigen::Ref<const Vector<Scalar>>& z_q,
                                                const Eigen::Ref<const Vector<Scalar>>& z_cls,
                                                const VectorD& image_weights, const VectorD& caption_weights,
                                                const Matrix<Scalar>& image_embeddings,
                                                const Matrix<Scalar>* caption_embeddings,
                                                const RocchioParams& params);

// ---------------------------------------------------------------------------
// Saliency and region feedback

struct ItemSaliency {
  std::size_t slot = 0;
  std::size_t item = 0;
  std::vector<double> patches;  // p values in [0, 1]
  std::vector<double> tokens;   // s values in [0, 1] (padding = 0); empty without captions
  Mask token_mask;
  double image_score = 0.0;
  double caption_score = 0.0;
};

struct Saliency {
  std::vector<ItemSaliency> items;
  bool with_captions = true;
};

// Min-max normalises the head/row-summed scores of the image and caption subsequences
// independently; a constant subsequence maps to zeros.
template <typename Scalar>
Saliency saliency(const AttentionScores<Scalar>& attn, const RelevanceSequence<Scalar>& seq);

// Head/row-summed cross-attention per relevance position.
template <typename Scalar>
VectorD summed_scores(const AttentionScores<Scalar>& attn);

enum class Polarity { kRelevant, kIrrelevant };

struct RegionBox {
  std::size_t slot = 0;               // feedback-set position of the item
  std::vector<std::size_t> patches;   // patch indices in [0, p)
  Polarity polarity = Polarity::kRelevant;
};

// 1 x s_r bias: +magnitude on relevant patches, -magnitude on irrelevant ones.
template <typename Scalar>
Matrix<Scalar> region_bias_row(const RelevanceSequence<Scalar>& seq, std::span<const RegionBox> boxes,
                               double magnitude);

// logits (rows x s_r) plus the region bias broadcast over rows.
template <typename Scalar>
Matrix<Scalar> apply_region_bias(const Matrix<Scalar>& logits, const RelevanceSequence<Scalar>& seq,
                                 std::span<const RegionBox> boxes, double magnitude);

// ---------------------------------------------------------------------------
// Checkpoints: directory with one .embt per tensor, params.json and afs_config.json.

struct Checkpoint {
  AfsConfig config;
  AfsParams<float> params;
};

void save_checkpoint(const std::filesystem::path& dir, const AfsParams<float>& params, const AfsConfig& config);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace refrank::afs
