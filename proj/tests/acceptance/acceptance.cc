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

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../afs_gradcheck.h"
#include "../test_support.h"
#include "refrank/afs.h"
#include "refrank/eval.h"
#include "refrank/ranker.h"
#include "refrank/rocchio.h"
#include "refrank/store.h"
#include "refrank/synth.h"

namespace refrank {
namespace {

using testing::TempDir;

// Collects failures of one criterion; the first few are kept for the report line.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (ok) return;
    ++failures_;
    if (messages_.size() < 3) messages_.push_back(what);
  }
  void note(const std::string& text) { notes_.push_back(text); }

  bool passed() const { return failures_ == 0 && checks_ > 0; }
  std::string summary() const {
    std::ostringstream out;
    out << checks_ << " checks";
    for (const auto& n : notes_) out << "; " << n;
    if (failures_ > 0) {
      out << "; " << failures_ << " failed";
      for (const auto& m : messages_) out << "; " << m;
    }
    return out.str();
  }

 private:
  std::size_t checks_ = 0;
  std::size_t failures_ = 0;
  std::vector<std::string> messages_;
  std::vector<std::string> notes_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(precision);
  out << v;
  return out.str();
}

std::string sci(double v) {
  std::ostringstream out;
  out.setf(std::ios::scientific);
  out.precision(2);
  out << v;
  return out.str();
}

VectorD random_vector(std::mt19937_64& rng, Eigen::Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  VectorD v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

MatrixD random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

std::vector<double> oracle_softmax(const std::vector<double>& v, double tau) {
  double top = v[0];
  for (double x : v) top = std::max(top, x);
  std::vector<double> e(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) z += (e[i] = std::exp((v[i] - top) / tau));
  for (auto& x : e) x /= z;
  return e;
}

bool same_bits(const MatrixF& a, const MatrixF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

// ---------------------------------------------------------------------------

Check feedback_weight_lists() {
  Check c;
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<int> length(1, 64);
  std::uniform_real_distribution<double> sim(-1.0, 1.0);
  const double taus[] = {0.05, 0.1, 0.25, 0.5};
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = length(rng);
    VectorD s(n);
    for (int i = 0; i < n; ++i) s[i] = trial % 7 == 0 && i > 0 ? s[i - 1] : sim(rng);
    const double tau = taus[trial % 4];
    const auto w = feedback_weights(s, tau);
    c.expect(std::abs(w.positive.sum() - 1.0) <= 1e-6, "positive weights sum " + fmt(w.positive.sum(), 9));
    bool ordered = true;
    bool complement = true;
    for (int i = 0; i < n; ++i) {
      complement = complement && w.negative[i] == 1.0 - w.positive[i];
      for (int j = 0; j < n; ++j) {
        if (s[i] > s[j] && w.positive[i] < w.positive[j]) ordered = false;
        if (s[i] == s[j] && w.positive[i] != w.positive[j]) ordered = false;
      }
    }
    c.expect(ordered, "weights not order-consistent in list " + std::to_string(trial));
    c.expect(complement, "negative weight is not 1 - positive in list " + std::to_string(trial));
  }
  c.note("1000 lists");
  return c;
}

Check refinement_oracles() {
  Check c;
  std::mt19937_64 rng(2002);
  std::uniform_int_distribution<int> dim(2, 16);
  std::uniform_int_distribution<int> count(1, 8);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int d = dim(rng), k = count(rng), k2 = count(rng);
    RocchioParams p;
    p.alpha = unit(rng);
    p.beta = unit(rng);
    p.gamma = unit(rng);
    p.tau = 0.05 + unit(rng);
    const VectorD q = random_vector(rng, d);
    const MatrixD cand = random_matrix(rng, k, d);
    const MatrixD other = random_matrix(rng, k2, d);
    VectorD sims(k);
    for (int i = 0; i < k; ++i) sims[i] = cand.row(i).dot(q) / (cand.row(i).norm() * q.norm());

    // Softmax-weighted rule.
    const auto ext = refine_extended(q, cand, sims, p).refined;
    std::vector<double> sv(sims.data(), sims.data() + k);
    const auto wp = oracle_softmax(sv, p.tau);
    for (int x = 0; x < d; ++x) {
      double pos = 0.0, neg = 0.0;
      for (int i = 0; i < k; ++i) {
        pos += wp[i] * cand(i, x);
        neg += (1.0 - wp[i]) * cand(i, x);
      }
      worst = std::max(worst, std::abs(ext[x] - (p.alpha * q[x] + p.beta * pos - p.gamma * neg)));
    }

    // Classical centroid rule.
    const auto orig = refine_original(q, cand, other, p).refined;
    for (int x = 0; x < d; ++x) {
      double pos = 0.0, neg = 0.0;
      for (int i = 0; i < k; ++i) pos += cand(i, x);
      for (int i = 0; i < k2; ++i) neg += other(i, x);
      worst = std::max(worst, std::abs(orig[x] - (p.alpha * q[x] + p.beta * pos / k - p.gamma * neg / k2)));
    }

    // Attention-summary rule, with and without caption embeddings.
    const VectorD z_cls = random_vector(rng, d);
    afs::ItemScores scores{VectorD(k), VectorD(k)};
    for (int i = 0; i < k; ++i) scores.image[i] = unit(rng), scores.caption[i] = unit(rng);
    const MatrixD caps = random_matrix(rng, k, d);
    const bool with_caps = trial % 2 == 0;
    const auto afs_out = afs::refine_query_afs<double>(q, z_cls, scores, cand, with_caps ? &caps : nullptr, p).refined;
    std::vector<double> neg_img(k), neg_cap(k);
    for (int i = 0; i < k; ++i) neg_img[i] = -scores.image[i], neg_cap[i] = -scores.caption[i];
    const auto wi = oracle_softmax(neg_img, p.tau);
    const auto wc = oracle_softmax(neg_cap, p.tau);
    for (int x = 0; x < d; ++x) {
      double neg = 0.0;
      for (int i = 0; i < k; ++i) {
        neg += with_caps ? 0.5 * (wi[i] * cand(i, x) + wc[i] * caps(i, x)) : wi[i] * cand(i, x);
      }
      worst = std::max(worst, std::abs(afs_out[x] - (p.alpha * q[x] + p.beta * z_cls[x] - p.gamma * neg)));
    }

    RocchioParams id;
    id.alpha = 1.0;
    id.beta = 0.0;
    id.gamma = 0.0;
    const VectorF qf = q.cast<float>();
    const MatrixF cf = cand.cast<float>();
    const VectorF sf = sims.cast<float>();
    c.expect(refine_extended(q, cand, sims, id).refined == q, "extended identity not bit-exact");
    c.expect(refine_extended(qf, cf, sf, id).refined == qf, "extended identity (float) not bit-exact");
    c.expect(refine_original(q, cand, other, id).refined == q, "centroid identity not bit-exact");
    c.expect(afs::refine_query_afs<double>(q, z_cls, scores, cand, &caps, id).refined == q,
             "attention-summary identity not bit-exact");
  }
  c.expect(worst <= 1e-6, "max oracle error " + sci(worst));
  c.note("100 instances, max oracle error " + sci(worst));
  return c;
}

Check metric_oracles() {
  Check c;
  std::mt19937_64 rng(3003);
  std::uniform_int_distribution<int> items(5, 40);
  std::uniform_int_distribution<int> dims(2, 8);
  for (int run = 0; run < 50; ++run) {
    const int n = items(rng), d = dims(rng);
    // A few duplicated rows make exact score ties.
    MatrixF images = random_matrix(rng, n, d).cast<float>();
    for (int i = 1; i < n; i += 4) images.row(i) = images.row(i - 1);
    auto store = testing::toy_store(images);
    std::vector<std::size_t> ranks;
    std::vector<std::size_t> oracle;
    for (int qi = 0; qi < n; ++qi) {
      const VectorD qd = (images.row(qi).cast<double>() + 0.8 * random_vector(rng, d).transpose()).transpose();
      const VectorF qf = qd.cast<float>();
      const auto target = static_cast<std::size_t>(qi);
      ranks.push_back(ground_truth_rank(score_all(store, qf), store, target));

      const VectorD qq = qf.cast<double>();
      auto cosine = [&](int i) {
        const VectorD v = images.row(i).transpose().cast<double>();
        return v.dot(qq) / (v.norm() * qq.norm());
      };
      const double own = cosine(qi);
      std::size_t r = 1;
      for (int i = 0; i < n; ++i) {
        if (i == qi) continue;
        const double s = cosine(i);
        const bool tie = images.row(i) == images.row(qi);
        if ((!tie && s > own) || (tie && store.items[i].item_id < store.items[qi].item_id)) ++r;
      }
      oracle.push_back(r);
    }
    c.expect(ranks == oracle, "rank mismatch in run " + std::to_string(run));
    const auto report = make_report(ranks, 1);
    double h1 = 0, h5 = 0, mrr = 0;
    for (auto r : oracle) {
      h1 += r == 1;
      h5 += r <= 5;
      if (r <= 5) mrr += 1.0 / static_cast<double>(r);
    }
    const double total = static_cast<double>(oracle.size());
    c.expect(report.hits_at_1 == h1 / total && report.hits_at_5 == h5 / total && report.mrr_at_5 == mrr / total,
             "metric mismatch in run " + std::to_string(run));
    c.expect(report.hits_at_1 <= report.mrr_at_5 && report.mrr_at_5 <= report.hits_at_5,
             "hits@1 <= mrr@5 <= hits@5 violated in run " + std::to_string(run));
  }
  const std::vector<std::size_t> a{1, 1, 1}, b{4}, e{1, 3, 7};
  c.expect(mrr_at_k(a, 5) == 1.0, "mrr example 1");
  c.expect(mrr_at_k(b, 5) == 0.25, "mrr example 0.25");
  c.expect(mrr_at_k(e, 5) == (1.0 + 1.0 / 3.0) / 3.0 && std::abs(mrr_at_k(e, 5) - 0.4444) < 1e-4,
           "mrr example 0.4444");
  c.note("50 runs");
  return c;
}

Check afs_gradcheck() {
  Check c;
  double worst = 0.0;
  std::size_t entries = 0;
  for (bool ffn : {false, true}) {
    for (auto mode : {afs::LossMode::kImageOnly, afs::LossMode::kCaptionOnly, afs::LossMode::kBoth}) {
      const auto r = testing::afs_batch_gradcheck(mode, ffn);
      worst = std::max(worst, r.report.max_relative_error);
      entries += r.report.checked;
      c.expect(r.report.passed(), afs::to_string(mode) + (ffn ? " (ffn)" : "") + ": " +
                                      std::to_string(r.report.violations.size()) + " entries over tolerance");
    }
  }
  c.note(std::to_string(entries) + " entries, max relative error " + sci(worst));
  return c;
}

Check afs_invariants() {
  Check c;
  synth::SynthConfig sc;
  sc.n_items = 60;
  const auto store = synth::generate(sc);
  afs::AfsConfig base;
  const auto cfg = afs::config_for_store(store, base);
  const auto params = afs::init_params(cfg);
  const auto params_d = afs::cast_params<double>(params);

  std::mt19937_64 rng(5005);
  std::uniform_int_distribution<std::size_t> pick(0, store.size() - 1);
  double worst_row = 0.0, worst_perm = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> items;
    while (items.size() < cfg.k) {
      const auto i = pick(rng);
      if (std::find(items.begin(), items.end(), i) == items.end()) items.push_back(i);
    }
    const std::size_t row = pick(rng) * sc.captions_per_item;
    const bool captions = trial % 2 == 0;
    const auto input = afs::make_input(store, row, items, cfg, captions).cast<double>();
    const auto out = afs::forward(params_d, input, cfg);
    for (const auto& h : out.cross_attention.heads) {
      for (Eigen::Index r = 0; r < h.rows(); ++r) worst_row = std::max(worst_row, std::abs(h.row(r).sum() - 1.0));
    }
    auto shuffled = items;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto moved = afs::forward(params_d, afs::make_input(store, row, shuffled, cfg, captions).cast<double>(), cfg);
    worst_perm = std::max(worst_perm, (moved.z_cls - out.z_cls).cwiseAbs().maxCoeff());

    const auto sal = afs::saliency(out.cross_attention, input.sequence);
    double lo_img = 2, hi_img = -1, lo_cap = 2, hi_cap = -1;
    for (const auto& it : sal.items) {
      for (double v : it.patches) lo_img = std::min(lo_img, v), hi_img = std::max(hi_img, v);
      for (std::size_t t = 0; t < it.tokens.size(); ++t) {
        if (it.token_mask[t]) lo_cap = std::min(lo_cap, it.tokens[t]), hi_cap = std::max(hi_cap, it.tokens[t]);
      }
    }
    c.expect(lo_img == 0.0 && hi_img == 1.0, "image saliency range [" + fmt(lo_img) + ", " + fmt(hi_img) + "]");
    if (captions) c.expect(lo_cap == 0.0 && hi_cap == 1.0, "caption saliency range");
  }
  c.expect(worst_row <= 1e-6, "row sum error " + sci(worst_row));
  c.expect(worst_perm <= 1e-5, "permutation drift " + sci(worst_perm));

  TempDir dir("refrank-accept-ckpt");
  afs::save_checkpoint(dir.path(), params, cfg);
  const auto ck = afs::load_checkpoint(dir.path());
  bool exact = true;
  afs::visit_params([&](const std::string&, const MatrixF& a, const MatrixF& b) { exact = exact && same_bits(a, b); },
                    ck.params, params);
  const std::vector<std::size_t> items{1, 2, 3, 4, 5};
  const auto input = afs::make_input(store, 0, items, cfg);
  exact = exact && afs::forward(ck.params, input, ck.config).z_cls == afs::forward(params, input, cfg).z_cls;
  c.expect(exact, "checkpoint round trip not bit-exact");
  c.note("row-sum error " + sci(worst_row) + ", permutation drift " + sci(worst_perm));
  return c;
}

Check synthetic_benchmark() {
  Check c;
  const auto store = synth::generate(synth::SynthConfig{});

  EvalConfig none;
  none.turns = 1;
  const auto baseline = evaluate(store, none).final_turn();
  auto two_turns = [&](Strategy s, const afs::Checkpoint* ck = nullptr) {
    EvalConfig cfg;
    cfg.strategy = s;
    cfg.turns = 2;
    return evaluate(store, cfg, ck).final_turn();
  };
  const auto prf = two_turns(Strategy::kPrfExtended);
  const auto grf = two_turns(Strategy::kGrf);
  EvalConfig explicit_cfg;
  explicit_cfg.strategy = Strategy::kExplicit;
  explicit_cfg.turns = 5;
  const auto expl = evaluate(store, explicit_cfg);

  synth::SynthConfig train_cfg;
  train_cfg.seed = 43;
  train_cfg.split = "train";
  const auto train_store = synth::generate(train_cfg);
  afs::TrainConfig tc;
  tc.epochs = 30;
  auto trained = afs::train(train_store, afs::config_for_store(train_store), tc);
  const auto& hist = trained.history.epochs;
  const double ratio = hist.back().train_loss / hist.front().train_loss;
  afs::Checkpoint ck{afs::config_for_store(train_store), std::move(trained.params)};
  const auto afs_m = two_turns(Strategy::kAfs, &ck);

  const double b = baseline.mrr_at_5;
  c.expect(baseline.hits_at_1 >= 0.3 && baseline.hits_at_1 <= 0.8, "(a) baseline Hits@1 " + fmt(baseline.hits_at_1));
  c.expect(std::abs(prf.mrr_at_5 - b) <= 0.01, "(b) PRF-extended MRR@5 " + fmt(prf.mrr_at_5));
  c.expect(expl.per_turn[1].mrr_at_5 - b >= 0.02, "(c) explicit turn-2 MRR@5 " + fmt(expl.per_turn[1].mrr_at_5));
  c.expect(grf.mrr_at_5 - b >= 0.0, "(d) GRF turn-2 MRR@5 " + fmt(grf.mrr_at_5));
  c.expect(ratio <= 0.5, "(e) AFS loss ratio " + fmt(ratio));
  c.expect(afs_m.mrr_at_5 >= b - 0.005, "(e) AFS MRR@5 " + fmt(afs_m.mrr_at_5) + " below baseline");
  c.expect(afs_m.mrr_at_5 >= prf.mrr_at_5, "(e) AFS MRR@5 " + fmt(afs_m.mrr_at_5) + " below PRF");
  std::string curve;
  for (std::size_t t = 0; t < expl.per_turn.size(); ++t) {
    if (t > 0) {
      c.expect(expl.per_turn[t].mrr_at_5 >= expl.per_turn[t - 1].mrr_at_5 - 0.005,
               "(f) explicit MRR@5 drops at turn " + std::to_string(t + 1));
    }
    curve += (t ? "/" : "") + fmt(expl.per_turn[t].mrr_at_5);
  }
  c.note("none Hits@1 " + fmt(baseline.hits_at_1) + " MRR@5 " + fmt(b));
  c.note("prf_extended " + fmt(prf.mrr_at_5));
  c.note("grf " + fmt(grf.mrr_at_5));
  c.note("afs " + fmt(afs_m.mrr_at_5) + " (loss ratio " + fmt(ratio, 3) + ")");
  c.note("explicit " + curve);
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Check cli_determinism() {
  Check c;
  TempDir dir("refrank-accept-det");
  const std::string cli = REFRANK_CLI_PATH;
  auto run = [&](const std::string& args) {
    const std::string cmd = "\"" + cli + "\" " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
  };
  const auto store = (dir / "store").string();
  c.expect(run("synth --out \"" + store + "\" --items 150 --seed 42") == 0, "synth command failed");
  for (const char* strategy : {"grf", "explicit"}) {
    std::string metrics[2];
    for (int i = 0; i < 2; ++i) {
      const auto out = (dir / (std::string(strategy) + std::to_string(i))).string();
      c.expect(run("eval --store \"" + store + "\" --strategy " + strategy + " --turns 3 --seed 42 --out \"" + out +
                   "\"") == 0,
               std::string("eval ") + strategy + " failed");
      metrics[i] = slurp(std::filesystem::path(out) / "metrics.json");
    }
    c.expect(!metrics[0].empty() && metrics[0] == metrics[1], std::string("metrics.json differs for ") + strategy);
  }
  c.note("two runs each of grf and explicit");
  return c;
}

Check store_format() {
  Check c;
  synth::SynthConfig sc;
  sc.n_items = 12;
  sc.clusters = 4;
  auto store = synth::generate(sc);
  MultivectorStack mv;
  mv.items = store.size();
  mv.vectors = 3;
  mv.dim = sc.dim;
  std::mt19937_64 rng(7007);
  mv.values = random_matrix(rng, static_cast<Eigen::Index>(mv.items * mv.vectors), static_cast<Eigen::Index>(mv.dim))
                  .cast<float>();
  store.image_multivector = mv;

  TempDir dir("refrank-accept-store");
  write_store(store, dir.path());
  const auto back = load_store(dir.path());
  c.expect(same_bits(back.image_embeddings.values, store.image_embeddings.values), "image embeddings differ");
  c.expect(same_bits(back.caption_embeddings.values, store.caption_embeddings.values), "caption embeddings differ");
  c.expect(same_bits(back.synthetic_caption_embeddings.values, store.synthetic_caption_embeddings.values),
           "synthetic caption embeddings differ");
  for (auto member : {&EmbeddingStore::image_tokens, &EmbeddingStore::synthetic_caption_tokens,
                      &EmbeddingStore::query_tokens}) {
    const auto& a = back.*member;
    const auto& b = store.*member;
    c.expect(a && same_bits(a->values, b->values) && a->mask == b->mask, "token tensor differs");
  }
  c.expect(back.image_multivector && same_bits(back.image_multivector->values, mv.values), "multivectors differ");
  bool records = back.items.size() == store.items.size();
  for (std::size_t i = 0; records && i < store.items.size(); ++i) {
    const auto& x = back.items[i];
    const auto& y = store.items[i];
    records = x.item_id == y.item_id && x.image_ref == y.image_ref && x.synthetic_caption == y.synthetic_caption &&
              x.caption_begin == y.caption_begin && x.human_captions.size() == y.human_captions.size();
  }
  c.expect(records, "item records differ");

  auto base = store;
  base.image_multivector.reset();
  struct Case {
    std::string kind;
    std::function<void(EmbeddingStore&)> inject;
  };
  const std::vector<Case> cases = {
      {"dimension", [](EmbeddingStore& s) { s.manifest.dim += 1; }},
      {"dimension", [](EmbeddingStore& s) { s.manifest.token_dim += 2; }},
      {"non-finite", [](EmbeddingStore& s) { s.caption_embeddings.values(2, 0) = std::nanf(""); }},
      {"zero norm", [](EmbeddingStore& s) { s.image_embeddings.values.row(5).setZero(); }},
      {"mask", [](EmbeddingStore& s) {
         auto& t = *s.synthetic_caption_tokens;
         std::fill(t.mask.begin() + static_cast<std::ptrdiff_t>(t.positions),
                   t.mask.begin() + static_cast<std::ptrdiff_t>(2 * t.positions), 0);
       }},
      {"duplicate id", [](EmbeddingStore& s) { s.items[3].item_id = s.items[2].item_id; }},
      {"caption count", [](EmbeddingStore& s) { s.items[7].human_captions.clear(); }},
      {"image index", [](EmbeddingStore& s) { s.items[1].image_row = 500; }},
      {"synthetic index", [](EmbeddingStore& s) { s.items[9].synthetic_row = 12; }},
      {"caption index", [](EmbeddingStore& s) { s.items[11].caption_begin = 58; }},
  };
  for (const auto& kc : cases) {
    auto broken = base;
    kc.inject(broken);
    const auto report = validate_store(broken);
    const bool found = std::any_of(report.violations.begin(), report.violations.end(),
                                   [&](const Violation& v) { return v.kind == kc.kind; });
    c.expect(found, "injected " + kc.kind + " not detected");
  }
  c.note("round trip with multivectors, " + std::to_string(cases.size()) + " injected violations");
  return c;
}

Check region_bias() {
  Check c;
  std::mt19937_64 rng(9009);
  std::uniform_int_distribution<std::size_t> kdist(1, 5), pdist(1, 9), sdist(1, 6), rows(1, 13);
  std::uniform_real_distribution<double> mag(0.05, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    afs::RelevanceSequence<double> seq;
    seq.patches = pdist(rng);
    seq.with_captions = trial % 3 != 0;
    seq.caption_tokens = seq.with_captions ? sdist(rng) : 0;
    const auto k = kdist(rng);
    for (std::size_t j = 0; j < k; ++j) seq.items.push_back(j);
    const auto len = k * seq.patches + k * seq.caption_tokens;
    seq.features = MatrixD::Zero(static_cast<Eigen::Index>(len), 2);
    seq.mask.assign(len, 1);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t t = 0; t < seq.patches; ++t) seq.segments.push_back({afs::Modality::kImage, j});
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t t = 0; t < seq.caption_tokens; ++t) seq.segments.push_back({afs::Modality::kCaption, j});

    std::uniform_int_distribution<std::size_t> slot(0, k - 1), patch(0, seq.patches - 1);
    afs::RegionBox box;
    box.slot = slot(rng);
    const std::size_t marked = std::uniform_int_distribution<std::size_t>(1, seq.patches)(rng);
    for (std::size_t i = 0; i < marked; ++i) {
      const auto p = patch(rng);
      if (std::find(box.patches.begin(), box.patches.end(), p) == box.patches.end()) box.patches.push_back(p);
    }
    const std::vector<afs::RegionBox> boxes{box};
    if (box.patches.size() == len) continue;  // every position marked: the softmax is unchanged

    const MatrixD logits = random_matrix(rng, static_cast<Eigen::Index>(rows(rng)), static_cast<Eigen::Index>(len));
    c.expect(afs::apply_region_bias(logits, seq, boxes, 0.0) == logits, "magnitude 0 changed the logits");

    const double m = mag(rng);
    ad::Tape<double> tape;
    const MatrixD before = ad::softmax_rows(tape.constant(logits)).value();
    const MatrixD after = ad::softmax_rows(tape.constant(afs::apply_region_bias(logits, seq, boxes, m))).value();
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      for (auto p : box.patches) {
        const auto col = static_cast<Eigen::Index>(seq.image_offset(box.slot) + p);
        c.expect(after(r, col) > before(r, col), "marked patch weight did not increase in case " +
                                                     std::to_string(trial));
      }
    }
  }
  c.note("100 cases");
  return c;
}

}  // namespace
}  // namespace refrank

int main() {
  using namespace refrank;
  struct Criterion {
    const char* name;
    std::function<Check()> run;
  };
  const std::vector<Criterion> criteria = {
      {"feedback weights", feedback_weight_lists},
      {"refinement rules match scalar oracles", refinement_oracles},
      {"retrieval metrics", metric_oracles},
      {"AFS gradient check", afs_gradcheck},
      {"AFS structural invariants", afs_invariants},
      {"synthetic benchmark", synthetic_benchmark},
      {"determinism", cli_determinism},
      {"store format", store_format},
      {"region bias", region_bias},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Check result;
    std::string error;
    try {
      result = cr.run();
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool ok = error.empty() && result.passed();
    failed += ok ? 0 : 1;
    std::cout << (ok ? "PASS " : "FAIL ") << cr.name << " (" << (error.empty() ? result.summary() : error) << "; "
              << refrank::fmt(secs, 1) << " s)" << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
