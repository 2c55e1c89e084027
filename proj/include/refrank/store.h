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

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "refrank/common.h"

namespace refrank {

class StoreError : public Error {
 public:
  using Error::Error;
};

// N vectors of dimensionality d, one per row.
struct EmbeddingMatrix {
  MatrixF values;
  // Recorded by the producer; the ranker never relies on it.
  bool normalized = false;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index dim() const { return values.cols(); }
  auto row(Eigen::Index i) const { return values.row(i); }
};

// items x positions x dim token features with a validity mask per position.
struct TokenFeatureTensor {
  std::size_t items = 0;
  std::size_t positions = 0;
  std::size_t dim = 0;
  MatrixF values;  // (items * positions) x dim
  Mask mask;       // items * positions

  auto item_block(std::size_t item) const {
    return values.middleRows(static_cast<Eigen::Index>(item * positions), static_cast<Eigen::Index>(positions));
  }
  std::span<const std::uint8_t> item_mask(std::size_t item) const {
    return std::span<const std::uint8_t>(mask).subspan(item * positions, positions);
  }
};

// items x vectors x dim stack for backbones that emit several image vectors per item.
struct MultivectorStack {
  std::size_t items = 0;
  std::size_t vectors = 0;
  std::size_t dim = 0;
  MatrixF values;  // (items * vectors) x dim
  bool normalized = false;

  auto item_block(std::size_t item) const {
    return values.middleRows(static_cast<Eigen::Index>(item * vectors), static_cast<Eigen::Index>(vectors));
  }
};

struct Caption {
  std::string caption_id;
  std::string text;
};

struct ItemRecord {
  std::string item_id;
  std::string image_ref;
  std::vector<Caption> human_captions;
  std::string synthetic_caption;
  // Row in image_embeddings, image_tokens and image_multivector.
  std::size_t image_row = 0;
  // Rows [caption_begin, caption_begin + human_captions.size()) of caption_embeddings and query_tokens.
  std::size_t caption_begin = 0;
  // Row in synthetic_caption_embeddings and synthetic_caption_tokens.
  std::size_t synthetic_row = 0;
};

struct StoreManifest {
  std::string backbone = "unknown";
  std::string split = "test";
  std::size_t dim = 0;
  std::size_t token_dim = 0;
};

struct EmbeddingStore {
  StoreManifest manifest;
  EmbeddingMatrix image_embeddings;
  EmbeddingMatrix caption_embeddings;
  EmbeddingMatrix synthetic_caption_embeddings;
  std::optional<TokenFeatureTensor> image_tokens;
  std::optional<TokenFeatureTensor> synthetic_caption_tokens;
  std::optional<TokenFeatureTensor> query_tokens;
  std::optional<MultivectorStack> image_multivector;
  std::vector<ItemRecord> items;

  std::size_t size() const { return items.size(); }
  std::size_t caption_count() const { return static_cast<std::size_t>(caption_embeddings.rows()); }

  // Rebuilds the lookup tables below. Called by load_store and the generators;
  // callers that assemble a store by hand must call it before use.
  void build_indexes();

  std::optional<std::size_t> find_item(std::string_view item_id) const;
  std::optional<std::size_t> find_caption(std::string_view caption_id) const;
  std::size_t item_of_caption(std::size_t caption_row) const { return caption_owner_.at(caption_row); }
  const std::string& caption_id(std::size_t caption_row) const { return caption_ids_.at(caption_row); }
  // Position of the item in ascending item_id order; used for deterministic tie-breaking.
  std::size_t id_order(std::size_t item) const { return id_order_[item]; }

  auto image_vector(std::size_t item) const {
    return image_embeddings.row(static_cast<Eigen::Index>(items[item].image_row));
  }
  auto synthetic_vector(std::size_t item) const {
    return synthetic_caption_embeddings.row(static_cast<Eigen::Index>(items[item].synthetic_row));
  }
  auto caption_vector(std::size_t caption_row) const {
    return caption_embeddings.row(static_cast<Eigen::Index>(caption_row));
  }

 private:
  std::unordered_map<std::string, std::size_t> item_index_;
  std::unordered_map<std::string, std::size_t> caption_index_;
  std::vector<std::size_t> caption_owner_;
  std::vector<std::string> caption_ids_;
  std::vector<std::size_t> id_order_;
};

struct Violation {
  std::string kind;  // e.g. "caption count", "caption index", "dimension", "non-finite"
  std::string item_id;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

// Checks every store invariant; never throws and never mutates.
ValidationReport validate_store(const EmbeddingStore& store);

// Reads manifest.json plus the tensors it references and validates the result.
// Throws StoreError on format problems, dimension mismatches, non-finite values and
// any validation violation.
EmbeddingStore load_store(const std::filesystem::path& root);

// Writes manifest.json and one .embt (plus .mask for token tensors) per tensor.
void write_store(const EmbeddingStore& store, const std::filesystem::path& root);

inline constexpr const char* kManifestName = "manifest.json";

}  // namespace refrank
