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

#include "refrank/afs.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_map>

#include "refrank/embt.h"
#include "refrank/optim.h"
#include "refrank/parallel.h"

namespace refrank::afs {

namespace fs = std::filesystem;

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::kImageOnly:
      return "image_only";
    case LossMode::kCaptionOnly:
      return "caption_only";
    case LossMode::kBoth:
      return "both";
  }
  return "both";
}

LossMode parse_loss_mode(std::string_view text) {
  if (text == "image_only" || text == "img" || text == "image") return LossMode::kImageOnly;
  if (text == "caption_only" || text == "cap" || text == "caption") return LossMode::kCaptionOnly;
  if (text == "both") return LossMode::kBoth;
  throw InvalidArgument("unknown loss mode '" + std::string(text) + "' (expected img, cap or both)");
}

void AfsConfig::validate() const {
  if (token_dim == 0 || output_dim == 0) throw InvalidArgument("afs: token_dim and output_dim must be > 0");
  if (heads == 0 || token_dim % heads != 0) {
    throw InvalidArgument("afs: token_dim " + std::to_string(token_dim) + " is not divisible by heads " +
                          std::to_string(heads));
  }
  if (token_dim < 2) throw InvalidArgument("afs: token_dim must be >= 2 for layer norm");
  if (k < 1) throw InvalidArgument("afs: k must be >= 1");
  if (patches == 0) throw InvalidArgument("afs: patches must be >= 1");
  if (query_tokens == 0) throw InvalidArgument("afs: query_tokens must be >= 1");
}

nlohmann::ordered_json to_json(const AfsConfig& c) {
  nlohmann::ordered_json j;
  j["d_t"] = c.token_dim;
  j["d"] = c.output_dim;
  j["n_h"] = c.heads;
  j["s"] = c.caption_tokens;
  j["p"] = c.patches;
  j["s_q"] = c.query_tokens;
  j["k"] = c.k;
  j["seed"] = c.seed;
  j["loss_mode"] = to_string(c.loss_mode);
  j["ffn"] = c.ffn;
  return j;
}

AfsConfig config_from_json(const nlohmann::json& j) {
  AfsConfig c;
  c.token_dim = j.at("d_t").get<std::size_t>();
  c.output_dim = j.at("d").get<std::size_t>();
  c.heads = j.at("n_h").get<std::size_t>();
  c.caption_tokens = j.at("s").get<std::size_t>();
  c.patches = j.at("p").get<std::size_t>();
  c.query_tokens = j.at("s_q").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.seed = j.value("seed", std::uint64_t{42});
  c.loss_mode = parse_loss_mode(j.value("loss_mode", std::string("both")));
  c.ffn = j.value("ffn", false);
  c.validate();
  return c;
}

AfsConfig config_for_store(const EmbeddingStore& store, AfsConfig base) {
  if (!store.image_tokens) throw StoreError("afs: store has no image token features");
  if (!store.query_tokens) throw StoreError("afs: store has no query token features");
  base.token_dim = store.manifest.token_dim;
  base.output_dim = store.manifest.dim;
  base.patches = store.image_tokens->positions;
  base.query_tokens = store.query_tokens->positions;
  if (store.synthetic_caption_tokens) base.caption_tokens = store.synthetic_caption_tokens->positions;
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  MatrixF uniform(std::size_t rows, std::size_t cols, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    MatrixF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(dist(rng_));
    return m;
  }
  MatrixF weight(std::size_t fan_in, std::size_t fan_out) {
    return uniform(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  }
  static MatrixF zeros(std::size_t rows, std::size_t cols) { return MatrixF::Zero(rows, cols); }
  static MatrixF ones(std::size_t rows, std::size_t cols) { return MatrixF::Ones(rows, cols); }

 private:
  std::mt19937_64 rng_;
};

AttentionBlock<MatrixF> init_block(Initializer& init, std::size_t dt) {
  return {init.weight(dt, dt), Initializer::zeros(1, dt), init.weight(dt, dt), Initializer::zeros(1, dt),
          init.weight(dt, dt), Initializer::zeros(1, dt), init.weight(dt, dt), Initializer::zeros(1, dt)};
}

FeedForward<MatrixF> init_ffn(Initializer& init, std::size_t dt, bool enabled) {
  if (!enabled) return {};
  const std::size_t hidden = 4 * dt;
  return {Initializer::ones(1, dt),    Initializer::zeros(1, dt),     init.weight(dt, hidden),
          Initializer::zeros(1, hidden), init.weight(hidden, dt), Initializer::zeros(1, dt)};
}

}  // namespace

AfsParams<float> init_params(const AfsConfig& config) {
  config.validate();
  const auto dt = config.token_dim;
  Initializer init(config.seed);
  AfsParams<float> p;
  p.cls = init.uniform(1, dt, 1.0 / std::sqrt(static_cast<double>(dt)));
  p.in_w = init.weight(dt, dt);
  p.in_b = Initializer::zeros(1, dt);
  p.ln1_g = Initializer::ones(1, dt);
  p.ln1_b = Initializer::zeros(1, dt);
  p.cross = init_block(init, dt);
  p.cross_ffn = init_ffn(init, dt, config.ffn);
  p.ln2_g = Initializer::ones(1, dt);
  p.ln2_b = Initializer::zeros(1, dt);
  p.self = init_block(init, dt);
  p.self_ffn = init_ffn(init, dt, config.ffn);
  // A small output map lets the bias settle the target direction before the attention layers do.
  p.out_w = init.weight(dt, config.output_dim) * 0.1f;
  p.out_b = Initializer::zeros(1, config.output_dim);
  return p;
}

// ---------------------------------------------------------------------------
// Relevance sequence

RelevanceSequence<float> build_relevance_sequence(const EmbeddingStore& store, std::span<const std::size_t> items,
                                                  const AfsConfig& config, bool with_captions) {
  if (items.empty()) throw InvalidArgument("relevance sequence: no feedback items");
  if (!store.image_tokens) throw StoreError("relevance sequence: store has no image token features");
  const auto& img = *store.image_tokens;
  if (img.positions != config.patches || img.dim != config.token_dim) {
    throw InvalidArgument("relevance sequence: image token shape differs from the AFS config");
  }
  const TokenFeatureTensor* cap = nullptr;
  if (with_captions) {
    if (!store.synthetic_caption_tokens) {
      throw StoreError("relevance sequence: store has no synthetic caption token features");
    }
    cap = &*store.synthetic_caption_tokens;
    if (cap->positions != config.caption_tokens || cap->dim != config.token_dim) {
      throw InvalidArgument("relevance sequence: caption token shape differs from the AFS config");
    }
  }
  RelevanceSequence<float> seq;
  seq.items.assign(items.begin(), items.end());
  seq.patches = config.patches;
  seq.caption_tokens = with_captions ? config.caption_tokens : 0;
  seq.with_captions = with_captions;
  const std::size_t k = items.size();
  const std::size_t length = k * seq.patches + k * seq.caption_tokens;
  seq.features.resize(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(config.token_dim));
  seq.segments.reserve(length);
  seq.mask.reserve(length);
  for (std::size_t j = 0; j < k; ++j) {
    if (items[j] >= store.size()) throw InvalidArgument("relevance sequence: item index out of range");
    const auto row = store.items[items[j]].image_row;
    seq.features.middleRows(static_cast<Eigen::Index>(seq.image_offset(j)), static_cast<Eigen::Index>(seq.patches)) =
        img.item_block(row);
    const auto m = img.item_mask(row);
    seq.mask.insert(seq.mask.end(), m.begin(), m.end());
    for (std::size_t t = 0; t < seq.patches; ++t) seq.segments.push_back({Modality::kImage, j});
  }
  if (with_captions) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto row = store.items[items[j]].synthetic_row;
      seq.features.middleRows(static_cast<Eigen::Index>(seq.caption_offset(j)),
                              static_cast<Eigen::Index>(seq.caption_tokens)) = cap->item_block(row);
      const auto m = cap->item_mask(row);
      seq.mask.insert(seq.mask.end(), m.begin(), m.end());
      for (std::size_t t = 0; t < seq.caption_tokens; ++t) seq.segments.push_back({Modality::kCaption, j});
    }
  }
  if (std::none_of(seq.mask.begin(), seq.mask.end(), [](std::uint8_t v) { return v != 0; })) {
    throw InvalidArgument("relevance sequence: every position is masked");
  }
  return seq;
}

RelevanceSequence<float> build_relevance_sequence(const EmbeddingStore& store, const CandidateSet& top_k,
                                                  const AfsConfig& config, bool with_captions) {
  std::vector<std::size_t> items;
  items.reserve(top_k.size());
  for (const auto& c : top_k.entries) items.push_back(c.item);
  return build_relevance_sequence(store, items, config, with_captions);
}

AfsInput<float> make_input(const EmbeddingStore& store, std::size_t caption_row, std::span<const std::size_t> items,
                           const AfsConfig& config, bool with_captions) {
  if (!store.query_tokens) throw StoreError("afs: store has no query token features");
  const auto& q = *store.query_tokens;
  if (q.positions != config.query_tokens || q.dim != config.token_dim) {
    throw InvalidArgument("afs: query token shape differs from the AFS config");
  }
  if (caption_row >= q.items) throw InvalidArgument("afs: caption row out of range");
  AfsInput<float> in;
  in.query_tokens = q.item_block(caption_row);
  const auto m = q.item_mask(caption_row);
  in.query_mask.assign(m.begin(), m.end());
  in.sequence = build_relevance_sequence(store, items, config, with_captions);
  return in;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename Scalar>
ParamSet<ad::Var<Scalar>> bind_params(ad::Tape<Scalar>& tape, const AfsParams<Scalar>& params, bool trainable) {
  ParamSet<ad::Var<Scalar>> vars;
  visit_params(
      [&](const std::string&, ad::Var<Scalar>& v, const Matrix<Scalar>& m) {
        v = trainable ? tape.variable(m) : tape.constant(m);
      },
      vars, params);
  return vars;
}

namespace {

template <typename Scalar>
using V = ad::Var<Scalar>;

template <typename Scalar>
V<Scalar> linear(V<Scalar> x, V<Scalar> w, V<Scalar> b) {
  return ad::add_row(ad::matmul(x, w), b);
}

// Multi-head attention; per-head probabilities are appended to `probs` when given.
template <typename Scalar>
V<Scalar> multi_head(const AttentionBlock<V<Scalar>>& p, V<Scalar> queries, V<Scalar> keys, std::size_t heads,
                     const Mask* key_mask, const Matrix<Scalar>* bias, std::vector<Matrix<Scalar>>* probs) {
  auto q = linear(queries, p.wq, p.bq);
  auto k = linear(keys, p.wk, p.bk);
  auto v = linear(keys, p.wv, p.bv);
  const auto dh = q.cols() / static_cast<Eigen::Index>(heads);
  std::vector<V<Scalar>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto start = static_cast<Eigen::Index>(h) * dh;
    auto r = ad::attention(ad::col_block(q, start, dh), ad::col_block(k, start, dh), ad::col_block(v, start, dh),
                           key_mask, bias);
    if (probs != nullptr) probs->push_back(r.scores.value());
    outs.push_back(r.output);
  }
  auto merged = heads == 1 ? outs[0] : ad::hconcat<Scalar>(outs);
  return linear(merged, p.wo, p.bo);
}

template <typename Scalar>
V<Scalar> feed_forward(const FeedForward<V<Scalar>>& p, V<Scalar> h) {
  auto x = ad::layer_norm(h, p.ln_g, p.ln_b);
  auto y = linear(ad::relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
  return h + y;
}

template <typename Scalar>
void check_input(const AfsInput<Scalar>& input, const AfsConfig& config) {
  const auto dt = static_cast<Eigen::Index>(config.token_dim);
  if (input.query_tokens.cols() != dt || input.sequence.features.cols() != dt) {
    throw InvalidArgument("afs forward: token dimension differs from config d_t");
  }
  if (input.query_tokens.rows() == 0) throw InvalidArgument("afs forward: empty query");
  if (input.query_mask.size() != static_cast<std::size_t>(input.query_tokens.rows())) {
    throw InvalidArgument("afs forward: query mask length differs from query token count");
  }
  const auto sr = input.sequence.length();
  if (sr == 0) throw InvalidArgument("afs forward: empty relevance sequence");
  if (input.sequence.mask.size() != sr || input.sequence.segments.size() != sr) {
    throw InvalidArgument("afs forward: relevance mask/segment length differs from sequence length");
  }
  if (input.key_bias.size() != 0 &&
      (input.key_bias.rows() != 1 || input.key_bias.cols() != static_cast<Eigen::Index>(sr))) {
    throw InvalidArgument("afs forward: key bias must be 1 x s_r");
  }
}

}  // namespace

template <typename Scalar>
TapeOutput<Scalar> forward_on_tape(ad::Tape<Scalar>& tape, const ParamSet<ad::Var<Scalar>>& p,
                                   const AfsInput<Scalar>& input, const AfsConfig& config) {
  check_input(input, config);
  const auto& seq = input.sequence;

  std::vector<V<Scalar>> rows{p.cls, tape.constant(input.query_tokens)};
  auto h0 = ad::vconcat<Scalar>(rows);

  Mask row_mask;
  row_mask.reserve(input.query_mask.size() + 1);
  row_mask.push_back(1);
  row_mask.insert(row_mask.end(), input.query_mask.begin(), input.query_mask.end());

  auto relevance = linear(tape.constant(seq.features), p.in_w, p.in_b);
  const Matrix<Scalar>* bias = input.key_bias.size() != 0 ? &input.key_bias : nullptr;

  TapeOutput<Scalar> out;
  out.cross_attention.row_mask = row_mask;
  auto x1 = ad::layer_norm(h0, p.ln1_g, p.ln1_b);
  auto h1 = h0 + multi_head(p.cross, x1, relevance, config.heads, &seq.mask, bias, &out.cross_attention.heads);
  if (config.ffn) h1 = feed_forward(p.cross_ffn, h1);

  auto x2 = ad::layer_norm(h1, p.ln2_g, p.ln2_b);
  auto h2 = h1 + multi_head<Scalar>(p.self, x2, x2, config.heads, &row_mask, nullptr, nullptr);
  if (config.ffn) h2 = feed_forward(p.self_ffn, h2);

  out.z_cls = linear(ad::row_block(h2, 0, 1), p.out_w, p.out_b);
  return out;
}

template <typename Scalar>
AfsOutput<Scalar> forward(const AfsParams<Scalar>& params, const AfsInput<Scalar>& input, const AfsConfig& config) {
  ad::Tape<Scalar> tape;
  const auto vars = bind_params(tape, params, false);
  auto r = forward_on_tape(tape, vars, input, config);
  AfsOutput<Scalar> out;
  out.z_cls = r.z_cls.value().row(0).transpose();
  if (!out.z_cls.allFinite()) throw Error("afs forward: non-finite summary vector");
  out.cross_attention = std::move(r.cross_attention);
  return out;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

double cosine_loss(const Eigen::Ref<const VectorD>& a, const Eigen::Ref<const VectorD>& b, const char* what) {
  if (a.size() != b.size()) throw InvalidArgument(std::string(what) + ": dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw InvalidArgument(std::string(what) + ": zero-norm operand");
  const double cos = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return 1.0 - cos;
}

}  // namespace

double loss_image(const Eigen::Ref<const VectorD>& z_cls, const Eigen::Ref<const VectorD>& z_img) {
  return cosine_loss(z_cls, z_img, "loss_image");
}

double loss_caption(const Eigen::Ref<const VectorD>& z_cls, const Eigen::Ref<const VectorD>& z_cap) {
  return cosine_loss(z_cls, z_cap, "loss_caption");
}

LossReport batch_loss(std::span<const QueryLoss> losses, LossMode mode) {
  LossReport r;
  r.per_query.assign(losses.begin(), losses.end());
  for (const auto& l : losses) {
    switch (mode) {
      case LossMode::kBoth:
        r.total += 0.5 * (l.image + l.caption);
        break;
      case LossMode::kImageOnly:
        r.total += l.image;
        break;
      case LossMode::kCaptionOnly:
        r.total += l.caption;
        break;
    }
  }
  return r;
}

template <typename Scalar>
ad::Var<Scalar> query_loss_on_tape(ad::Var<Scalar> z_cls, const Matrix<Scalar>& image_target,
                                   const Matrix<Scalar>& caption_target, LossMode mode) {
  switch (mode) {
    case LossMode::kImageOnly:
      return ad::cosine_distance(z_cls, image_target);
    case LossMode::kCaptionOnly:
      return ad::cosine_distance(z_cls, caption_target);
    case LossMode::kBoth:
      break;
  }
  auto both = ad::cosine_distance(z_cls, image_target) + ad::cosine_distance(z_cls, caption_target);
  return ad::scale(both, Scalar(0.5));
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Example {
  std::size_t caption_row = 0;
  std::vector<std::size_t> feedback;
  MatrixF image_target;    // 1 x d
  MatrixF caption_target;  // 1 x d
};

Example make_example(const EmbeddingStore& store, std::size_t item, std::size_t query_caption,
                     const std::vector<std::vector<std::size_t>>& top_k) {
  const auto& rec = store.items[item];
  Example ex;
  ex.caption_row = rec.caption_begin + query_caption;
  ex.feedback = top_k[ex.caption_row];
  ex.image_target = store.image_vector(item);
  ex.caption_target = MatrixF::Zero(1, store.caption_embeddings.dim());
  std::size_t n = 0;
  for (std::size_t c = 0; c < rec.human_captions.size(); ++c) {
    if (c == query_caption) continue;
    ex.caption_target += store.caption_vector(rec.caption_begin + c);
    ++n;
  }
  ex.caption_target /= static_cast<float>(n);
  return ex;
}

using ParamList = std::vector<MatrixF*>;

ParamList param_pointers(AfsParams<float>& p) {
  ParamList out;
  visit_params(
      [&](const std::string&, MatrixF& m) {
        if (m.size() != 0) out.push_back(&m);
      },
      p);
  return out;
}

struct QueryGrad {
  std::vector<MatrixF> grads;
  double loss = 0.0;
};

QueryGrad query_gradient(const AfsParams<float>& params, const Example& ex, const EmbeddingStore& store,
                         const AfsConfig& config, bool want_grad) {
  ad::Tape<float> tape;
  auto vars = bind_params(tape, params, want_grad);
  auto input = make_input(store, ex.caption_row, ex.feedback, config, true);
  auto out = forward_on_tape(tape, vars, input, config);
  auto loss = query_loss_on_tape(out.z_cls, ex.image_target, ex.caption_target, config.loss_mode);
  QueryGrad g;
  g.loss = static_cast<double>(loss.value()(0, 0));
  if (!want_grad) return g;
  tape.backward(loss);
  visit_params(
      [&](const std::string&, const ad::Var<float>& v, const MatrixF& m) {
        if (m.size() != 0) g.grads.push_back(v.grad());
      },
      vars, params);
  return g;
}

double mean_loss(const AfsParams<float>& params, const std::vector<Example>& examples, const EmbeddingStore& store,
                 const AfsConfig& config, std::size_t threads) {
  if (examples.empty()) return 0.0;
  std::vector<double> losses(examples.size());
  parallel_for(examples.size(), threads,
               [&](std::size_t i) { losses[i] = query_gradient(params, examples[i], store, config, false).loss; });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
}

}  // namespace

nlohmann::ordered_json to_json(const TrainHistory& history) {
  nlohmann::ordered_json j;
  j["best_epoch"] = history.best_epoch;
  j["early_stopped"] = history.early_stopped;
  auto& epochs = j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : history.epochs) {
    nlohmann::ordered_json row;
    row["epoch"] = e.epoch;
    row["learning_rate"] = e.learning_rate;
    row["train_loss"] = e.train_loss;
    row["validation_loss"] = e.validation_loss;
    epochs.push_back(std::move(row));
  }
  return j;
}

TrainResult train(const EmbeddingStore& store, const AfsConfig& config, const TrainConfig& tc) {
  config.validate();
  if (tc.batch_size < 1) throw InvalidArgument("train: batch size must be >= 1");
  if (tc.epochs < 1) throw InvalidArgument("train: epochs must be >= 1");
  if (!store.synthetic_caption_tokens) throw StoreError("train: store lacks synthetic caption token features");
  if (!store.image_tokens || !store.query_tokens) throw StoreError("train: store lacks token features");

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.items[i].human_captions.size() >= 2) eligible.push_back(i);
  }
  if (eligible.size() < 2) throw InvalidArgument("train: need at least two items with >= 2 captions");

  std::mt19937_64 rng(tc.seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  auto n_val = static_cast<std::size_t>(std::llround(tc.validation_fraction * static_cast<double>(eligible.size())));
  n_val = std::clamp<std::size_t>(n_val, tc.validation_fraction > 0.0 ? 1 : 0, eligible.size() - 1);
  const std::vector<std::size_t> val_items(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_items(eligible.begin() + static_cast<std::ptrdiff_t>(n_val), eligible.end());

  // Baseline top-K per caption row; feedback items never change during training.
  std::vector<std::vector<std::size_t>> top_k(store.caption_count());
  parallel_for(store.caption_count(), tc.threads, [&](std::size_t row) {
    const VectorF q = store.caption_vector(row).transpose();
    for (const auto& c : rank(q, store, config.k).entries) top_k[row].push_back(c.item);
  });

  std::vector<Example> validation;
  for (auto item : val_items) validation.push_back(make_example(store, item, 0, top_k));

  TrainResult result;
  result.params = init_params(config);
  auto params = param_pointers(result.params);
  AdamW<float> opt(params, {0.9, 0.999, 1e-8, tc.weight_decay});
  AfsParams<float> best = result.params;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = cosine_annealing(tc.learning_rate, epoch, tc.epochs);
    std::shuffle(train_items.begin(), train_items.end(), rng);
    std::vector<Example> examples;
    examples.reserve(train_items.size());
    for (auto item : train_items) {
      std::uniform_int_distribution<std::size_t> pick(0, store.items[item].human_captions.size() - 1);
      examples.push_back(make_example(store, item, pick(rng), top_k));
    }

    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < examples.size(); begin += tc.batch_size) {
      const auto end = std::min(begin + tc.batch_size, examples.size());
      std::vector<QueryGrad> per_query(end - begin);
      parallel_for(per_query.size(), tc.threads, [&](std::size_t i) {
        per_query[i] = query_gradient(result.params, examples[begin + i], store, config, true);
      });
      // Summed in index order so the update is independent of the thread count.
      std::vector<MatrixF> grads = per_query[0].grads;
      epoch_loss += per_query[0].loss;
      for (std::size_t i = 1; i < per_query.size(); ++i) {
        for (std::size_t p = 0; p < grads.size(); ++p) grads[p] += per_query[i].grads[p];
        epoch_loss += per_query[i].loss;
      }
      std::vector<const MatrixF*> grad_ptrs;
      for (const auto& g : grads) grad_ptrs.push_back(&g);
      opt.step(params, grad_ptrs, lr);
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.learning_rate = lr;
    rec.train_loss = epoch_loss / static_cast<double>(examples.size());
    rec.validation_loss = validation.empty() ? rec.train_loss
                                             : mean_loss(result.params, validation, store, config, tc.threads);
    result.history.epochs.push_back(rec);

    if (rec.validation_loss < best_val) {
      best_val = rec.validation_loss;
      best = result.params;
      result.history.best_epoch = rec.epoch;
      since_best = 0;
    } else if (++since_best >= tc.patience && tc.patience > 0) {
      result.history.early_stopped = rec.epoch < tc.epochs;
      break;
    }
  }
  result.params = std::move(best);
  return result;
}

// ---------------------------------------------------------------------------
// Inference-time refinement

template <typename Scalar>
VectorD summed_scores(const AttentionScores<Scalar>& attn) {
  if (attn.heads.empty()) throw InvalidArgument("attention scores: no heads");
  const auto rows = attn.heads[0].rows();
  if (attn.row_mask.size() != static_cast<std::size_t>(rows)) {
    throw InvalidArgument("attention scores: row mask length differs from row count");
  }
  VectorD total = VectorD::Zero(attn.heads[0].cols());
  for (const auto& h : attn.heads) {
    if (h.rows() != rows || h.cols() != total.size()) throw InvalidArgument("attention scores: ragged heads");
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (attn.row_mask[static_cast<std::size_t>(r)] != 0) total += h.row(r).transpose().template cast<double>();
    }
  }
  return total;
}

namespace {

template <typename Scalar>
void check_sequence(const VectorD& summed, const RelevanceSequence<Scalar>& seq) {
  if (static_cast<std::size_t>(summed.size()) != seq.length() || seq.mask.size() != seq.length()) {
    throw InvalidArgument("attention scores: width differs from the relevance sequence length");
  }
}

double masked_mean(const VectorD& values, const Mask& mask, std::size_t begin, std::size_t count) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = begin; i < begin + count; ++i) {
    if (mask[i] == 0) continue;
    total += values[static_cast<Eigen::Index>(i)];
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

// Min-max over the valid positions of [begin, begin + count); masked positions stay 0.
std::vector<double> min_max(const VectorD& values, const Mask& mask, std::size_t begin, std::size_t count) {
  std::vector<double> out(count, 0.0);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < count; ++i) {
    if (mask[begin + i] == 0) continue;
    lo = std::min(lo, values[static_cast<Eigen::Index>(begin + i)]);
    hi = std::max(hi, values[static_cast<Eigen::Index>(begin + i)]);
  }
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < count; ++i) {
    if (mask[begin + i] == 0) continue;
    out[i] = (values[static_cast<Eigen::Index>(begin + i)] - lo) / (hi - lo);
  }
  return out;
}

}  // namespace

template <typename Scalar>
ItemScores accumulate_item_scores(const AttentionScores<Scalar>& attn, const RelevanceSequence<Scalar>& seq) {
  const auto summed = summed_scores(attn);
  check_sequence(summed, seq);
  const auto k = static_cast<Eigen::Index>(seq.k());
  ItemScores s;
  s.image.resize(k);
  for (std::size_t j = 0; j < seq.k(); ++j) {
    s.image[static_cast<Eigen::Index>(j)] = masked_mean(summed, seq.mask, seq.image_offset(j), seq.patches);
  }
  if (seq.with_captions) {
    s.caption.resize(k);
    for (std::size_t j = 0; j < seq.k(); ++j) {
      s.caption[static_cast<Eigen::Index>(j)] =
          masked_mean(summed, seq.mask, seq.caption_offset(j), seq.caption_tokens);
    }
  }
  return s;
}

VectorD negative_weights(const Eigen::Ref<const VectorD>& item_scores, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("negative_weights: tau must be > 0");
  const VectorD negated = -item_scores;
  return softmax_temperature(negated, tau);
}

template <typename Scalar>
AfsRefinement<Scalar> refine_query_afs_weighted(const Eigen::Ref<const Vector<Scalar>>& z_q,
                                                const Eigen::Ref<const Vector<Scalar>>& z_cls,
                                                const VectorD& image_weights, const VectorD& caption_weights,
                                                const Matrix<Scalar>& image_embeddings,
                                                const Matrix<Scalar>* caption_embeddings,
                                                const RocchioParams& params) {
  params.validate();
  const auto k = image_weights.size();
  if (z_q.size() != z_cls.size()) throw InvalidArgument("refine_query_afs: z_q and z_cls differ in dimension");
  if (image_embeddings.rows() != k || image_embeddings.cols() != z_q.size()) {
    throw InvalidArgument("refine_query_afs: image embeddings must be K x d");
  }
  const bool captions = caption_embeddings != nullptr;
  if (captions && (caption_embeddings->rows() != k || caption_embeddings->cols() != z_q.size() ||
                   caption_weights.size() != k)) {
    throw InvalidArgument("refine_query_afs: caption embeddings/weights must be K x d / K");
  }
  AfsRefinement<Scalar> out;
  out.positive_vector = z_cls;
  out.image_weights = image_weights;
  out.negative_vector = image_embeddings.transpose() * image_weights.template cast<Scalar>();
  if (captions) {
    out.caption_weights = caption_weights;
    out.negative_vector += caption_embeddings->transpose() * caption_weights.template cast<Scalar>();
    out.negative_vector *= Scalar(0.5);
  }
  out.refined = detail::combine(z_q, out.positive_vector, out.negative_vector, params);
  return out;
}

template <typename Scalar>
AfsRefinement<Scalar> refine_query_afs(const Eigen::Ref<const Vector<Scalar>>& z_q,
                                       const Eigen::Ref<const Vector<Scalar>>& z_cls, const ItemScores& scores,
                                       const Matrix<Scalar>& image_embeddings,
                                       const Matrix<Scalar>* caption_embeddings, const RocchioParams& params) {
  params.validate();
  if (caption_embeddings != nullptr && scores.caption.size() != scores.image.size()) {
    throw InvalidArgument("refine_query_afs: caption scores missing");
  }
  const VectorD w_img = negative_weights(scores.image, params.tau);
  const VectorD w_cap = caption_embeddings != nullptr ? negative_weights(scores.caption, params.tau) : VectorD();
  return refine_query_afs_weighted<Scalar>(z_q, z_cls, w_img, w_cap, image_embeddings, caption_embeddings, params);
}

// ---------------------------------------------------------------------------
// Saliency and region feedback

template <typename Scalar>
Saliency saliency(const AttentionScores<Scalar>& attn, const RelevanceSequence<Scalar>& seq) {
  const auto summed = summed_scores(attn);
  check_sequence(summed, seq);
  const auto k = seq.k();
  const auto image = min_max(summed, seq.mask, 0, k * seq.patches);
  std::vector<double> caption;
  if (seq.with_captions) caption = min_max(summed, seq.mask, seq.caption_offset(0), k * seq.caption_tokens);
  const auto item_scores = accumulate_item_scores(attn, seq);

  Saliency out;
  out.with_captions = seq.with_captions;
  for (std::size_t j = 0; j < k; ++j) {
    ItemSaliency s;
    s.slot = j;
    s.item = seq.items[j];
    s.patches.assign(image.begin() + static_cast<std::ptrdiff_t>(j * seq.patches),
                     image.begin() + static_cast<std::ptrdiff_t>((j + 1) * seq.patches));
    s.image_score = item_scores.image[static_cast<Eigen::Index>(j)];
    if (seq.with_captions) {
      s.tokens.assign(caption.begin() + static_cast<std::ptrdiff_t>(j * seq.caption_tokens),
                      caption.begin() + static_cast<std::ptrdiff_t>((j + 1) * seq.caption_tokens));
      const auto off = seq.caption_offset(j);
      s.token_mask.assign(seq.mask.begin() + static_cast<std::ptrdiff_t>(off),
                          seq.mask.begin() + static_cast<std::ptrdiff_t>(off + seq.caption_tokens));
      s.caption_score = item_scores.caption[static_cast<Eigen::Index>(j)];
    }
    out.items.push_back(std::move(s));
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> region_bias_row(const RelevanceSequence<Scalar>& seq, std::span<const RegionBox> boxes,
                               double magnitude) {
  if (!(magnitude >= 0.0) || !std::isfinite(magnitude)) {
    throw InvalidArgument("region bias: magnitude must be finite and >= 0");
  }
  Matrix<Scalar> bias = Matrix<Scalar>::Zero(1, static_cast<Eigen::Index>(seq.length()));
  for (const auto& box : boxes) {
    if (box.slot >= seq.k()) {
      throw InvalidArgument("region bias: item slot " + std::to_string(box.slot) + " outside the feedback set");
    }
    const double sign = box.polarity == Polarity::kRelevant ? 1.0 : -1.0;
    for (auto patch : box.patches) {
      if (patch >= seq.patches) {
        throw InvalidArgument("region bias: patch index " + std::to_string(patch) + " out of range (p=" +
                              std::to_string(seq.patches) + ")");
      }
      bias(0, static_cast<Eigen::Index>(seq.image_offset(box.slot) + patch)) += static_cast<Scalar>(sign * magnitude);
    }
  }
  return bias;
}

template <typename Scalar>
Matrix<Scalar> apply_region_bias(const Matrix<Scalar>& logits, const RelevanceSequence<Scalar>& seq,
                                 std::span<const RegionBox> boxes, double magnitude) {
  if (logits.cols() != static_cast<Eigen::Index>(seq.length())) {
    throw InvalidArgument("region bias: logits width differs from the relevance sequence length");
  }
  const auto bias = region_bias_row(seq, boxes, magnitude);
  Matrix<Scalar> out = logits;
  out.rowwise() += bias.row(0);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kParamsIndex = "params.json";
constexpr const char* kConfigFile = "afs_config.json";

std::string file_name(const std::string& param) {
  std::string out = param;
  std::replace(out.begin(), out.end(), '.', '_');
  return out + ".embt";
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

}  // namespace

void save_checkpoint(const fs::path& dir, const AfsParams<float>& params, const AfsConfig& config) {
  config.validate();
  fs::create_directories(dir);
  nlohmann::ordered_json index;
  index["format"] = "refrank-afs";
  index["version"] = 1;
  auto& tensors = index["tensors"] = nlohmann::ordered_json::array();
  visit_params(
      [&](const std::string& name, const MatrixF& m) {
        if (m.size() == 0) return;
        if (!m.allFinite()) throw Error("save_checkpoint: parameter " + name + " is not finite");
        const auto file = file_name(name);
        embt::write_matrix(dir / file, m);
        tensors.push_back({{"name", name}, {"file", file}, {"shape", {m.rows(), m.cols()}}});
      },
      params);
  write_json(dir / kParamsIndex, index);
  write_json(dir / kConfigFile, to_json(config));
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("checkpoint directory not found: " + dir.string());
  Checkpoint ck;
  ck.config = config_from_json(read_json(dir / kConfigFile));
  const auto index = read_json(dir / kParamsIndex);
  std::unordered_map<std::string, std::string> files;
  for (const auto& t : index.at("tensors")) files[t.at("name").get<std::string>()] = t.at("file").get<std::string>();

  const auto expected = init_params(ck.config);
  ck.params = expected;
  visit_params(
      [&](const std::string& name, MatrixF& dst, const MatrixF& shape) {
        if (shape.size() == 0) {
          dst.resize(0, 0);
          return;
        }
        auto it = files.find(name);
        if (it == files.end()) throw Error("checkpoint is missing parameter " + name);
        dst = embt::read_matrix(dir / it->second);
        if (dst.rows() != shape.rows() || dst.cols() != shape.cols()) {
          throw Error("checkpoint parameter " + name + " has shape " + std::to_string(dst.rows()) + "x" +
                      std::to_string(dst.cols()) + ", config implies " + std::to_string(shape.rows()) + "x" +
                      std::to_string(shape.cols()));
        }
        if (!dst.allFinite()) throw Error("checkpoint parameter " + name + " is not finite");
      },
      ck.params, expected);
  return ck;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define REFRANK_AFS_INSTANTIATE(S)                                                                                \
  template ParamSet<ad::Var<S>> bind_params<S>(ad::Tape<S>&, const AfsParams<S>&, bool);                          \
  template TapeOutput<S> forward_on_tape<S>(ad::Tape<S>&, const ParamSet<ad::Var<S>>&, const AfsInput<S>&,        \
                                            const AfsConfig&);                                                    \
  template AfsOutput<S> forward<S>(const AfsParams<S>&, const AfsInput<S>&, const AfsConfig&);                    \
  template ad::Var<S> query_loss_on_tape<S>(ad::Var<S>, const Matrix<S>&, const Matrix<S>&, LossMode);            \
  template VectorD summed_scores<S>(const AttentionScores<S>&);                                                   \
  template ItemScores accumulate_item_scores<S>(const AttentionScores<S>&, const RelevanceSequence<S>&);          \
  template AfsRefinement<S> refine_query_afs<S>(const Eigen::Ref<const Vector<S>>&,                               \
                                                const Eigen::Ref<const Vector<S>>&, const ItemScores&,            \
                                                const Matrix<S>&, const Matrix<S>*, const RocchioParams&);        \
  template AfsRefinement<S> refine_query_afs_weighted<S>(                                                         \
      const Eigen::Ref<const Vector<S>>&, const Eigen::Ref<const Vector<S>>&, const VectorD&, const VectorD&,     \
      const Matrix<S>&, const Matrix<S>*, const RocchioParams&);                                                  \
  template Saliency saliency<S>(const AttentionScores<S>&, const RelevanceSequence<S>&);                          \
  template Matrix<S> region_bias_row<S>(const RelevanceSequence<S>&, std::span<const RegionBox>, double);         \
  template Matrix<S> apply_region_bias<S>(const Matrix<S>&, const RelevanceSequence<S>&,                          \
                                          std::span<const RegionBox>, double);

REFRANK_AFS_INSTANTIATE(float)
REFRANK_AFS_INSTANTIATE(double)

#undef REFRANK_AFS_INSTANTIATE

}  // namespace refrank::afs
