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

#include "refrank/session.h"

#include <algorithm>
#include <random>
#include <set>

namespace refrank {

namespace {

constexpr std::size_t kMetricsCutoff = 5;

struct StrategyName {
  Strategy strategy;
  const char* name;
};

constexpr StrategyName kStrategies[] = {
    {Strategy::kNone, "none"},       {Strategy::kPrfOriginal, "prf_original"}, {Strategy::kPrfExtended, "prf_extended"},
    {Strategy::kGrf, "grf"},         {Strategy::kAfs, "afs"},                  {Strategy::kAfsPrf, "afs_prf"},
    {Strategy::kExplicit, "explicit"},
};

}  // namespace

std::string to_string(Strategy s) {
  for (const auto& e : kStrategies) {
    if (e.strategy == s) return e.name;
  }
  return "none";
}

Strategy parse_strategy(std::string_view text) {
  for (const auto& e : kStrategies) {
    if (text == e.name) return e.strategy;
  }
  throw InvalidArgument("unknown strategy '" + std::string(text) +
                        "' (expected none, prf_original, prf_extended, grf, afs, afs_prf or explicit)");
}

bool needs_checkpoint(Strategy s) { return s == Strategy::kAfs || s == Strategy::kAfsPrf; }

std::string to_string(Anchor a) { return a == Anchor::kOriginal ? "original" : "previous"; }
std::string to_string(ExplicitMode m) { return m == ExplicitMode::kRunning ? "running" : "pairwise"; }

Anchor parse_anchor(std::string_view text) {
  if (text == "original") return Anchor::kOriginal;
  if (text == "previous") return Anchor::kPrevious;
  throw InvalidArgument("unknown anchor '" + std::string(text) + "' (expected original or previous)");
}

ExplicitMode parse_explicit_mode(std::string_view text) {
  if (text == "running") return ExplicitMode::kRunning;
  if (text == "pairwise") return ExplicitMode::kPairwise;
  throw InvalidArgument("unknown explicit mode '" + std::string(text) + "' (expected running or pairwise)");
}

void SessionParams::validate() const {
  rocchio.validate();
  if (display_k < rocchio.k) throw InvalidArgument("display_k must be >= k");
  if (display_k < kMetricsCutoff) throw InvalidArgument("display_k must be >= 5");
  if (!(region_magnitude >= 0.0)) throw InvalidArgument("region magnitude must be >= 0");
}

nlohmann::ordered_json to_json(const SessionParams& p) {
  nlohmann::ordered_json j;
  j["alpha"] = p.rocchio.alpha;
  j["beta"] = p.rocchio.beta;
  j["gamma"] = p.rocchio.gamma;
  j["tau"] = p.rocchio.tau;
  j["k"] = p.rocchio.k;
  j["anchor"] = to_string(p.anchor);
  j["explicit_mode"] = to_string(p.explicit_mode);
  j["display_k"] = p.display_k;
  j["region_magnitude"] = p.region_magnitude;
  j["seed"] = p.seed;
  return j;
}

SessionParams session_params_from_json(const nlohmann::json& j, SessionParams p) {
  if (!j.is_object()) throw InvalidArgument("params must be a JSON object");
  p.rocchio.alpha = j.value("alpha", p.rocchio.alpha);
  p.rocchio.beta = j.value("beta", p.rocchio.beta);
  p.rocchio.gamma = j.value("gamma", p.rocchio.gamma);
  p.rocchio.tau = j.value("tau", p.rocchio.tau);
  p.rocchio.k = j.value("k", p.rocchio.k);
  if (j.contains("anchor")) p.anchor = parse_anchor(j.at("anchor").get<std::string>());
  if (j.contains("explicit_mode")) p.explicit_mode = parse_explicit_mode(j.at("explicit_mode").get<std::string>());
  p.display_k = j.value("display_k", std::max(p.display_k, p.rocchio.k));
  p.region_magnitude = j.value("region_magnitude", p.region_magnitude);
  p.seed = j.value("seed", p.seed);
  p.validate();
  return p;
}

std::vector<std::size_t> simulate_explicit_pool(const EmbeddingStore& store, std::size_t caption_row,
                                                std::uint64_t seed) {
  if (caption_row >= store.caption_count()) throw InvalidArgument("explicit pool: caption row out of range");
  const auto& item = store.items[store.item_of_caption(caption_row)];
  if (item.human_captions.size() < 2) {
    throw StrategyError("explicit feedback needs >= 2 captions for item " + item.item_id);
  }
  std::vector<std::size_t> pool;
  for (std::size_t c = 0; c < item.human_captions.size(); ++c) {
    const auto row = item.caption_begin + c;
    if (row != caption_row) pool.push_back(row);
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(caption_row)};
  std::mt19937_64 rng(seq);
  std::shuffle(pool.begin(), pool.end(), rng);
  return pool;
}

SessionState start_session(const EmbeddingStore& store, std::size_t caption_row, Strategy strategy,
                           const SessionParams& params) {
  params.validate();
  if (caption_row >= store.caption_count()) throw InvalidArgument("session: caption row out of range");
  SessionState s;
  s.query_id = store.caption_id(caption_row);
  s.caption_row = caption_row;
  s.target_item = store.item_of_caption(caption_row);
  s.strategy = strategy;
  s.params = params;
  s.initial = store.caption_vector(caption_row).transpose();
  s.current = s.initial;
  if (strategy == Strategy::kExplicit) s.explicit_pool = simulate_explicit_pool(store, caption_row, params.seed);
  return s;
}

VectorF explicit_refine(SessionState& state, const Eigen::Ref<const VectorF>& caption_embedding) {
  if (caption_embedding.size() != state.initial.size()) {
    throw InvalidArgument("explicit feedback: embedding dimension differs from the query");
  }
  state.explicit_feedback.emplace_back(caption_embedding);
  if (state.params.explicit_mode == ExplicitMode::kPairwise) {
    return ((state.initial.cast<double>() + caption_embedding.cast<double>()) / 2.0).cast<float>();
  }
  VectorD total = state.initial.cast<double>();
  for (const auto& v : state.explicit_feedback) total += v.cast<double>();
  return (total / static_cast<double>(state.explicit_feedback.size() + 1)).cast<float>();
}

namespace {

MatrixF gather_rows(const std::vector<std::size_t>& items, const EmbeddingStore& store, bool synthetic) {
  MatrixF m(static_cast<Eigen::Index>(items.size()), store.image_embeddings.dim());
  for (std::size_t i = 0; i < items.size(); ++i) {
    m.row(static_cast<Eigen::Index>(i)) = synthetic ? store.synthetic_vector(items[i]) : store.image_vector(items[i]);
  }
  return m;
}

// Marked items in mark order plus their Rocchio weights.
struct MarkedSet {
  std::vector<std::size_t> items;
  FeedbackWeights<float> weights;
};

MarkedSet marked_set(const std::vector<ItemMark>& marks) {
  MarkedSet out;
  std::vector<std::size_t> relevant;
  std::vector<std::size_t> irrelevant;
  for (const auto& m : marks) {
    (m.relevance == Relevance::kRelevant ? relevant : irrelevant).push_back(out.items.size());
    out.items.push_back(m.item);
  }
  out.weights = marked_weights<float>(out.items.size(), relevant, irrelevant);
  return out;
}

void check_feedback(const SessionState& state, const Feedback& fb, const EmbeddingStore& store) {
  if (fb.empty()) return;
  if (state.history.empty()) throw FeedbackError("feedback needs a previous turn");
  const auto& shown = state.history.back().candidates.entries;
  auto was_shown = [&](std::size_t item) {
    return std::any_of(shown.begin(), shown.end(), [&](const Candidate& c) { return c.item == item; });
  };
  std::set<std::size_t> seen;
  for (const auto& m : fb.marks) {
    if (m.item >= store.size()) throw FeedbackError("mark references an unknown item");
    if (!was_shown(m.item)) {
      throw FeedbackError("item " + store.items[m.item].item_id + " was not shown in turn " +
                          std::to_string(state.turn()));
    }
    if (!seen.insert(m.item).second) throw FeedbackError("item " + store.items[m.item].item_id + " marked twice");
  }
  if (!fb.regions.empty() && !needs_checkpoint(state.strategy)) {
    throw FeedbackError("region boxes need the afs or afs_prf strategy");
  }
  if (fb.explicit_caption_row) {
    if (state.strategy != Strategy::kExplicit) throw FeedbackError("explicit captions need the explicit strategy");
    if (*fb.explicit_caption_row >= store.caption_count()) throw FeedbackError("unknown explicit caption");
  }
}

struct AfsStep {
  VectorF refined;
  afs::Saliency saliency;
};

AfsStep afs_step(const SessionState& state, const EmbeddingStore& store, const afs::Checkpoint& ck,
                 const std::vector<std::size_t>& top_k, const Feedback& fb, const VectorF& z_q) {
  if (!state.caption_row) throw StrategyError("afs needs a store caption as the query");
  const bool with_captions = state.strategy == Strategy::kAfs;
  std::vector<std::size_t> items = top_k;
  MarkedSet marked;
  if (!fb.marks.empty()) {
    marked = marked_set(fb.marks);
    items = marked.items;
  }
  auto input = afs::make_input(store, *state.caption_row, items, ck.config, with_captions);
  if (!fb.regions.empty()) {
    std::vector<afs::RegionBox> boxes;
    for (const auto& r : fb.regions) {
      const auto it = std::find(items.begin(), items.end(), r.item);
      if (it == items.end()) {
        throw FeedbackError("region box on " + store.items[r.item].item_id + ", which is not a feedback item");
      }
      boxes.push_back({static_cast<std::size_t>(it - items.begin()), r.patches, r.polarity});
    }
    try {
      input.key_bias = afs::region_bias_row(input.sequence, boxes, state.params.region_magnitude);
    } catch (const InvalidArgument& e) {
      throw FeedbackError(e.what());
    }
  }
  const auto out = afs::forward(ck.params, input, ck.config);
  const MatrixF images = gather_rows(items, store, false);
  const MatrixF captions = with_captions ? gather_rows(items, store, true) : MatrixF();
  const MatrixF* cap_ptr = with_captions ? &captions : nullptr;

  AfsStep step;
  if (fb.marks.empty()) {
    const auto scores = afs::accumulate_item_scores(out.cross_attention, input.sequence);
    step.refined =
        afs::refine_query_afs<float>(z_q, out.z_cls, scores, images, cap_ptr, state.params.rocchio).refined;
  } else {
    const VectorD w = marked.weights.negative.cast<double>();
    step.refined = afs::refine_query_afs_weighted<float>(z_q, out.z_cls, w, with_captions ? w : VectorD(), images,
                                                         cap_ptr, state.params.rocchio)
                       .refined;
  }
  step.saliency = afs::saliency(out.cross_attention, input.sequence);
  return step;
}

}  // namespace

const TurnResult& run_turn(SessionState& state, const EmbeddingStore& store, const afs::Checkpoint* afs,
                           const Feedback& fb) {
  if (needs_checkpoint(state.strategy) && afs == nullptr) {
    throw StrategyError("strategy " + to_string(state.strategy) + " needs an AFS checkpoint");
  }
  check_feedback(state, fb, store);

  TurnResult result;
  result.turn = state.turn() + 1;
  result.feedback = fb;

  if (!state.history.empty() && state.strategy != Strategy::kNone) {
    const auto& rp = state.params.rocchio;
    const VectorF z_q = state.params.anchor == Anchor::kOriginal ? state.initial : state.current;
    const auto& prev = state.history.back().candidates.entries;
    std::vector<std::size_t> top_k;
    for (std::size_t i = 0; i < std::min(rp.k, prev.size()); ++i) top_k.push_back(prev[i].item);

    VectorF refined;
    switch (state.strategy) {
      case Strategy::kNone:
        break;
      case Strategy::kPrfExtended:
      case Strategy::kGrf: {
        const bool synthetic = state.strategy == Strategy::kGrf;
        if (!fb.marks.empty()) {
          auto m = marked_set(fb.marks);
          refined = refine_with_weights(z_q, gather_rows(m.items, store, synthetic), m.weights, rp).refined;
          break;
        }
        const auto scores = score_all(store, z_q);
        VectorF sims(static_cast<Eigen::Index>(top_k.size()));
        for (std::size_t i = 0; i < top_k.size(); ++i) sims[static_cast<Eigen::Index>(i)] = scores[top_k[i]];
        refined = refine_extended(z_q, gather_rows(top_k, store, synthetic), sims, rp).refined;
        break;
      }
      case Strategy::kPrfOriginal: {
        if (!fb.marks.empty()) {
          std::vector<std::size_t> rel;
          std::vector<std::size_t> irr;
          for (const auto& m : fb.marks) (m.relevance == Relevance::kRelevant ? rel : irr).push_back(m.item);
          // An empty side contributes nothing.
          const VectorF pos = rel.empty() ? VectorF::Zero(z_q.size()) : VectorF(gather_rows(rel, store, false)
                                                                                     .colwise()
                                                                                     .mean()
                                                                                     .transpose());
          const VectorF neg = irr.empty() ? VectorF::Zero(z_q.size()) : VectorF(gather_rows(irr, store, false)
                                                                                     .colwise()
                                                                                     .mean()
                                                                                     .transpose());
          refined = detail::combine(z_q, pos, neg, rp);
          break;
        }
        const auto scores = score_all(store, z_q);
        const auto bottom = rank_bottom(scores, store, rp.k);
        std::vector<std::size_t> bottom_items;
        for (const auto& c : bottom.entries) bottom_items.push_back(c.item);
        refined = refine_original(z_q, gather_rows(top_k, store, false), gather_rows(bottom_items, store, false), rp)
                      .refined;
        break;
      }
      case Strategy::kAfs:
      case Strategy::kAfsPrf: {
        auto step = afs_step(state, store, *afs, top_k, fb, z_q);
        refined = std::move(step.refined);
        result.saliency = std::move(step.saliency);
        break;
      }
      case Strategy::kExplicit: {
        VectorF base = z_q;
        if (fb.explicit_caption_row) {
          base = explicit_refine(state, store.caption_vector(*fb.explicit_caption_row).transpose());
        } else if (fb.marks.empty()) {
          if (state.explicit_used >= state.explicit_pool.size()) {
            throw StrategyError("explicit caption pool exhausted after " + std::to_string(state.explicit_used) +
                                " feedback turns");
          }
          const auto row = state.explicit_pool[state.explicit_used++];
          base = explicit_refine(state, store.caption_vector(row).transpose());
        }
        if (!fb.marks.empty()) {
          auto m = marked_set(fb.marks);
          base = refine_with_weights(base, gather_rows(m.items, store, false), m.weights, rp).refined;
        }
        refined = std::move(base);
        break;
      }
    }
    if (!refined.allFinite()) throw Error("session: refinement produced a non-finite embedding");
    state.current = std::move(refined);
  }

  const auto scores = score_all(store, state.current);
  result.candidates = rank_scores(scores, store, state.params.display_k, state.query_id);
  result.embedding = state.current;
  if (state.target_item) result.gt_rank = ground_truth_rank(scores, store, *state.target_item);
  state.history.push_back(std::move(result));
  return state.history.back();
}

const std::vector<TurnResult>& run_multi_turn(SessionState& state, const EmbeddingStore& store, std::size_t turns,
                                              const afs::Checkpoint* afs) {
  if (turns < 1) throw InvalidArgument("turns must be >= 1");
  while (state.turn() < turns) run_turn(state, store, afs);
  return state.history;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

std::string relevance_name(Relevance r) { return r == Relevance::kRelevant ? "relevant" : "irrelevant"; }
std::string polarity_name(afs::Polarity p) { return p == afs::Polarity::kRelevant ? "relevant" : "irrelevant"; }

bool parse_relevant(const nlohmann::json& j, const char* key) {
  const auto text = j.at(key).get<std::string>();
  if (text == "relevant") return true;
  if (text == "irrelevant") return false;
  throw FeedbackError(std::string(key) + " must be 'relevant' or 'irrelevant'");
}

std::size_t lookup_item(const EmbeddingStore& store, const nlohmann::json& j) {
  const auto id = j.at("item_id").get<std::string>();
  auto item = store.find_item(id);
  if (!item) throw FeedbackError("unknown item " + id);
  return *item;
}

}  // namespace

nlohmann::ordered_json to_json(const afs::Saliency& s, const EmbeddingStore& store) {
  nlohmann::ordered_json j;
  j["with_captions"] = s.with_captions;
  auto& items = j["items"] = nlohmann::ordered_json::array();
  for (const auto& it : s.items) {
    nlohmann::ordered_json e;
    e["item_id"] = store.items[it.item].item_id;
    e["slot"] = it.slot;
    e["image_score"] = it.image_score;
    e["patches"] = it.patches;
    if (s.with_captions) {
      e["caption_score"] = it.caption_score;
      e["tokens"] = it.tokens;
      std::vector<int> mask(it.token_mask.begin(), it.token_mask.end());
      e["token_mask"] = mask;
    }
    items.push_back(std::move(e));
  }
  return j;
}

nlohmann::ordered_json to_json(const Feedback& fb, const EmbeddingStore& store) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  auto& marks = j["item_marks"] = nlohmann::ordered_json::array();
  for (const auto& m : fb.marks) {
    marks.push_back({{"item_id", store.items[m.item].item_id}, {"relevance", relevance_name(m.relevance)}});
  }
  auto& regions = j["region_boxes"] = nlohmann::ordered_json::array();
  for (const auto& r : fb.regions) {
    regions.push_back(
        {{"item_id", store.items[r.item].item_id}, {"patches", r.patches}, {"polarity", polarity_name(r.polarity)}});
  }
  if (fb.explicit_caption_row) j["explicit_caption_id"] = store.caption_id(*fb.explicit_caption_row);
  return j;
}

Feedback feedback_from_json(const nlohmann::json& j, const EmbeddingStore& store) {
  Feedback fb;
  if (j.is_null()) return fb;
  if (!j.is_object()) throw FeedbackError("feedback must be a JSON object");
  try {
    for (const auto& m : j.value("item_marks", nlohmann::json::array())) {
      fb.marks.push_back(
          {lookup_item(store, m), parse_relevant(m, "relevance") ? Relevance::kRelevant : Relevance::kIrrelevant});
    }
    for (const auto& r : j.value("region_boxes", nlohmann::json::array())) {
      RegionMark rm;
      rm.item = lookup_item(store, r);
      rm.patches = r.at("patches").get<std::vector<std::size_t>>();
      rm.polarity = parse_relevant(r, "polarity") ? afs::Polarity::kRelevant : afs::Polarity::kIrrelevant;
      fb.regions.push_back(std::move(rm));
    }
    if (j.contains("explicit_caption_id") && !j.at("explicit_caption_id").is_null()) {
      const auto id = j.at("explicit_caption_id").get<std::string>();
      auto row = store.find_caption(id);
      if (!row) throw FeedbackError("unknown caption " + id);
      fb.explicit_caption_row = *row;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FeedbackError(std::string("malformed feedback: ") + e.what());
  }
  return fb;
}

nlohmann::ordered_json to_json(const TurnResult& t, const EmbeddingStore& store) {
  nlohmann::ordered_json j;
  j["turn"] = t.turn;
  auto& items = j["items"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < t.candidates.entries.size(); ++i) {
    const auto& c = t.candidates.entries[i];
    items.push_back({{"rank", i + 1}, {"item_id", c.item_id}, {"score", c.score}});
  }
  j["gt_rank"] = t.gt_rank ? nlohmann::ordered_json(*t.gt_rank) : nlohmann::ordered_json(nullptr);
  j["embedding"] = std::vector<float>(t.embedding.data(), t.embedding.data() + t.embedding.size());
  j["feedback"] = to_json(t.feedback, store);
  if (t.saliency) j["saliency"] = to_json(*t.saliency, store);
  return j;
}

nlohmann::ordered_json to_json(const SessionState& s, const EmbeddingStore& store) {
  nlohmann::ordered_json j;
  j["query_id"] = s.query_id;
  j["caption_id"] = s.caption_row ? nlohmann::ordered_json(store.caption_id(*s.caption_row)) : nullptr;
  j["target_item_id"] = s.target_item ? nlohmann::ordered_json(store.items[*s.target_item].item_id) : nullptr;
  j["strategy"] = to_string(s.strategy);
  j["params"] = to_json(s.params);
  auto& turns = j["turns"] = nlohmann::ordered_json::array();
  for (const auto& t : s.history) turns.push_back(to_json(t, store));
  return j;
}

SessionState replay(const nlohmann::json& history, const EmbeddingStore& store, const afs::Checkpoint* afs) {
  const auto caption_id = history.at("caption_id").get<std::string>();
  const auto row = store.find_caption(caption_id);
  if (!row) throw InvalidArgument("replay: unknown caption " + caption_id);
  auto state = start_session(store, *row, parse_strategy(history.at("strategy").get<std::string>()),
                             session_params_from_json(history.at("params")));
  const auto& turns = history.at("turns");
  for (std::size_t t = 0; t < turns.size(); ++t) {
    const auto fb = t == 0 ? Feedback{} : feedback_from_json(turns[t].value("feedback", nlohmann::json()), store);
    run_turn(state, store, afs, fb);
  }
  return state;
}

}  // namespace refrank
