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

// Seeded synthetic embedding stores with a known ground truth.
//
// Every item i owns a concept c_i on the unit sphere of the subspace orthogonal to
// both modality offsets. Concepts come in groups of near neighbours so that the
// top of a ranking holds plausible distractors. Each view of the item (its image,
// every human caption, its generated caption) is a noisy copy of the concept,
// shifted by a fixed modality offset:
//
//   image   = normalize(c_i + sigma_image   * e) + gap * m_img
//   caption = normalize(c_i + sigma_caption * e) + gap * m_txt      m_img ⊥ m_txt
//
// Token features project the same noisy copy through a fixed d -> d_t map and add
// per-position noise, so patch and token features carry the concept signal of
// the view they belong to. Noise vectors e are scaled so that E|e| = 1.

#pragma once

#include <cstdint>

#include "json.hpp"
#include "refrank/common.h"
#include "refrank/store.h"

namespace refrank::synth {

struct SynthConfig {
  std::size_t n_items = 500;
  std::size_t dim = 32;             // d
  std::size_t token_dim = 16;       // d_t
  std::size_t patches = 9;          // p
  std::size_t caption_tokens = 12;  // s, generated-caption token length
  std::size_t query_tokens = 12;    // s_q
  std::size_t captions_per_item = 5;
  double sigma_image = 0.6;
  double sigma_caption = 0.6;
  double sigma_synthetic = 0.6;
  double sigma_token = 0.3;
  double gap = 0.5;
  // Item i is a perturbation of centre i % clusters (0 = independent concepts).
  std::size_t clusters = 100;
  double cluster_spread = 0.5;
  // Items, captions and noise.
  std::uint64_t seed = 42;
  // Modality offsets and the token projection; shared by stores meant to come from one "backbone".
  std::uint64_t backbone_seed = 1234;
  std::string split = "test";

  void validate() const;
};

nlohmann::ordered_json to_json(const SynthConfig& config);
SynthConfig config_from_json(const nlohmann::json& j);

EmbeddingStore generate(const SynthConfig& config);

// Hits@1 of no-feedback retrieval with every caption as a query.
double baseline_hits_at_1(const EmbeddingStore& store);

}  // namespace refrank::synth
