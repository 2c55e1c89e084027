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

#include "refrank/store.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "refrank/embt.h"

namespace refrank {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char* kImageEmbeddings = "image_embeddings";
constexpr const char* kCaptionEmbeddings = "caption_embeddings";
constexpr const char* kSyntheticEmbeddings = "synthetic_caption_embeddings";
constexpr const char* kImageTokens = "image_tokens";
constexpr const char* kSyntheticTokens = "synthetic_caption_tokens";
constexpr const char* kQueryTokens = "query_tokens";
constexpr const char* kImageMultivector = "image_multivector";

void check_matrix(const EmbeddingMatrix& m, const char* role, std::vector<Violation>& out) {
  for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
    const auto row = m.values.row(r);
    if (!row.allFinite()) {
      out.push_back({"non-finite", "", std::string(role) + ": non-finite value in row " + std::to_string(r)});
      continue;
    }
    if (row.template cast<double>().squaredNorm() <= 0.0) {
      out.push_back({"zero norm", "", std::string(role) + ": row " + std::to_string(r) + " has zero norm"});
    }
  }
}

void check_tokens(const TokenFeatureTensor& t, const char* role, std::size_t expected_items, std::size_t token_dim,
                  std::vector<Violation>& out) {
  if (t.items != expected_items) {
    out.push_back({"dimension", "",
                   std::string(role) + ": has " + std::to_string(t.items) + " entries, expected " +
                       std::to_string(expected_items)});
  }
  if (t.dim != token_dim) {
    out.push_back({"dimension", "",
                   std::string(role) + ": token dim " + std::to_string(t.dim) + " differs from manifest d_t " +
                       std::to_string(token_dim)});
  }
  if (static_cast<std::size_t>(t.values.rows()) != t.items * t.positions ||
      static_cast<std::size_t>(t.values.cols()) != t.dim) {
    out.push_back({"dimension", "", std::string(role) + ": value buffer shape disagrees with items x positions x dim"});
  }
  if (t.mask.size() != t.items * t.positions) {
    out.push_back({"mask", "", std::string(role) + ": mask length disagrees with items x positions"});
    return;
  }
  if (!t.values.allFinite()) out.push_back({"non-finite", "", std::string(role) + ": non-finite token feature"});
  for (std::size_t i = 0; i < t.items; ++i) {
    const auto m = t.item_mask(i);
    if (std::none_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; })) {
      out.push_back({"mask", "", std::string(role) + ": entry " + std::to_string(i) + " has no valid positions"});
    }
  }
}

ordered_json shape_json(std::initializer_list<std::size_t> dims) { return ordered_json(std::vector<std::size_t>(dims)); }

std::vector<std::uint64_t> expect_dims(const embt::Header& h, const fs::path& path, std::size_t rank) {
  if (h.dims.size() != rank) {
    throw StoreError(path.string() + ": expected rank " + std::to_string(rank) + ", header says " +
                     std::to_string(h.dims.size()));
  }
  return h.dims;
}

void check_finite(const embt::Float32Tensor& t, const fs::path& path) {
  const std::uint64_t last = t.header.dims.empty() ? 1 : std::max<std::uint64_t>(t.header.dims.back(), 1);
  for (std::size_t i = 0; i < t.values.size(); ++i) {
    if (!std::isfinite(t.values[i])) {
      throw StoreError(path.string() + ": non-finite value at row " + std::to_string(i / last) + ", column " +
                       std::to_string(i % last) + " (byte offset " +
                       std::to_string(t.header.payload_offset() + i * sizeof(float)) + ")");
    }
  }
}

void check_dim(std::uint64_t header_dim, std::size_t manifest_dim, const char* what, const fs::path& path) {
  if (header_dim != manifest_dim) {
    throw StoreError(path.string() + ": dimension mismatch, manifest declares " + std::string(what) + "=" +
                     std::to_string(manifest_dim) + " but tensor header says " + std::to_string(header_dim));
  }
}

struct TensorEntry {
  std::string role;
  std::string file;
  std::string mask;
  std::vector<std::size_t> shape;
  bool normalized = false;
};

EmbeddingMatrix read_global(const fs::path& root, const TensorEntry& e, std::size_t dim) {
  const auto path = root / e.file;
  const auto header = embt::read_header(path);
  const auto dims = expect_dims(header, path, 2);
  check_dim(dims[1], dim, "d", path);
  if (!e.shape.empty() && (e.shape.size() != 2 || e.shape[0] != dims[0] || e.shape[1] != dims[1])) {
    throw StoreError(path.string() + ": shape listed in manifest disagrees with tensor header");
  }
  auto t = embt::read_f32(path);
  check_finite(t, path);
  EmbeddingMatrix m;
  m.values.resize(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
  std::copy(t.values.begin(), t.values.end(), m.values.data());
  m.normalized = e.normalized;
  return m;
}

TokenFeatureTensor read_tokens(const fs::path& root, const TensorEntry& e, std::size_t token_dim) {
  const auto path = root / e.file;
  const auto header = embt::read_header(path);
  const auto dims = expect_dims(header, path, 3);
  check_dim(dims[2], token_dim, "d_t", path);
  auto t = embt::read_f32(path);
  check_finite(t, path);
  TokenFeatureTensor out;
  out.items = dims[0];
  out.positions = dims[1];
  out.dim = dims[2];
  out.values.resize(static_cast<Eigen::Index>(dims[0] * dims[1]), static_cast<Eigen::Index>(dims[2]));
  std::copy(t.values.begin(), t.values.end(), out.values.data());
  if (e.mask.empty()) {
    out.mask.assign(out.items * out.positions, 1);
  } else {
    const auto mask_path = root / e.mask;
    auto m = embt::read_u8(mask_path);
    if (m.header.dims.size() != 2 || m.header.dims[0] != dims[0] || m.header.dims[1] != dims[1]) {
      throw StoreError(mask_path.string() + ": mask shape does not match " + path.string());
    }
    out.mask = std::move(m.values);
  }
  return out;
}

MultivectorStack read_multivector(const fs::path& root, const TensorEntry& e, std::size_t dim) {
  const auto path = root / e.file;
  const auto header = embt::read_header(path);
  const auto dims = expect_dims(header, path, 3);
  check_dim(dims[2], dim, "d", path);
  auto t = embt::read_f32(path);
  check_finite(t, path);
  MultivectorStack out;
  out.items = dims[0];
  out.vectors = dims[1];
  out.dim = dims[2];
  out.normalized = e.normalized;
  out.values.resize(static_cast<Eigen::Index>(dims[0] * dims[1]), static_cast<Eigen::Index>(dims[2]));
  std::copy(t.values.begin(), t.values.end(), out.values.data());
  return out;
}

void write_global(const fs::path& root, const EmbeddingMatrix& m, const char* role, ordered_json& tensors) {
  const std::string file = std::string(role) + ".embt";
  embt::write_matrix(root / file, m.values);
  ordered_json e;
  e["role"] = role;
  e["file"] = file;
  e["shape"] = shape_json({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.dim())});
  e["normalized"] = m.normalized;
  tensors.push_back(std::move(e));
}

void write_tokens(const fs::path& root, const TokenFeatureTensor& t, const char* role, ordered_json& tensors) {
  const std::string file = std::string(role) + ".embt";
  const std::string mask = std::string(role) + ".mask";
  const std::uint64_t dims[3] = {t.items, t.positions, t.dim};
  embt::write(root / file, dims, std::span<const float>(t.values.data(), static_cast<std::size_t>(t.values.size())));
  const std::uint64_t mdims[2] = {t.items, t.positions};
  embt::write(root / mask, mdims, std::span<const std::uint8_t>(t.mask));
  ordered_json e;
  e["role"] = role;
  e["file"] = file;
  e["mask"] = mask;
  e["shape"] = shape_json({t.items, t.positions, t.dim});
  tensors.push_back(std::move(e));
}

}  // namespace

void EmbeddingStore::build_indexes() {
  item_index_.clear();
  caption_index_.clear();
  caption_owner_.assign(caption_count(), 0);
  caption_ids_.assign(caption_count(), std::string());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    item_index_.emplace(item.item_id, i);
    for (std::size_t c = 0; c < item.human_captions.size(); ++c) {
      const auto row = item.caption_begin + c;
      if (row >= caption_owner_.size()) continue;  // reported by validate_store
      caption_owner_[row] = i;
      caption_ids_[row] = item.human_captions[c].caption_id;
      caption_index_.emplace(item.human_captions[c].caption_id, row);
    }
  }
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return items[a].item_id < items[b].item_id; });
  id_order_.assign(items.size(), 0);
  for (std::size_t pos = 0; pos < order.size(); ++pos) id_order_[order[pos]] = pos;
}

std::optional<std::size_t> EmbeddingStore::find_item(std::string_view item_id) const {
  auto it = item_index_.find(std::string(item_id));
  if (it == item_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> EmbeddingStore::find_caption(std::string_view caption_id) const {
  auto it = caption_index_.find(std::string(caption_id));
  if (it == caption_index_.end()) return std::nullopt;
  return it->second;
}

ValidationReport validate_store(const EmbeddingStore& store) {
  ValidationReport report;
  auto& out = report.violations;
  const auto n = store.items.size();
  const auto d = store.manifest.dim;

  const std::pair<const EmbeddingMatrix*, const char*> globals[] = {
      {&store.image_embeddings, kImageEmbeddings},
      {&store.caption_embeddings, kCaptionEmbeddings},
      {&store.synthetic_caption_embeddings, kSyntheticEmbeddings}};
  for (const auto& [m, role] : globals) {
    if (static_cast<std::size_t>(m->dim()) != d) {
      out.push_back({"dimension", "",
                     std::string(role) + ": dim " + std::to_string(m->dim()) + " differs from manifest d " +
                         std::to_string(d)});
    }
    check_matrix(*m, role, out);
  }
  if (d == 0) out.push_back({"dimension", "", "manifest d must be >= 1"});

  const auto n_images = static_cast<std::size_t>(store.image_embeddings.rows());
  const auto n_captions = static_cast<std::size_t>(store.caption_embeddings.rows());
  const auto n_synthetic = static_cast<std::size_t>(store.synthetic_caption_embeddings.rows());

  if (store.image_tokens) check_tokens(*store.image_tokens, kImageTokens, n_images, store.manifest.token_dim, out);
  if (store.synthetic_caption_tokens) {
    check_tokens(*store.synthetic_caption_tokens, kSyntheticTokens, n_synthetic, store.manifest.token_dim, out);
  }
  if (store.query_tokens) check_tokens(*store.query_tokens, kQueryTokens, n_captions, store.manifest.token_dim, out);
  if (store.image_multivector) {
    const auto& mv = *store.image_multivector;
    if (mv.items != n_images || mv.dim != d || mv.vectors == 0) {
      out.push_back({"dimension", "", "image_multivector: shape disagrees with image_embeddings or d"});
    } else if (!mv.values.allFinite()) {
      out.push_back({"non-finite", "", "image_multivector: non-finite value"});
    } else {
      for (Eigen::Index r = 0; r < mv.values.rows(); ++r) {
        if (mv.values.row(r).template cast<double>().squaredNorm() <= 0.0) {
          out.push_back({"zero norm", "", "image_multivector: row " + std::to_string(r) + " has zero norm"});
        }
      }
    }
  }

  std::set<std::string> item_ids;
  std::set<std::string> caption_ids;
  std::vector<int> caption_owner(n_captions, -1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& item = store.items[i];
    if (!item_ids.insert(item.item_id).second) {
      out.push_back({"duplicate id", item.item_id, "duplicate item_id " + item.item_id});
    }
    if (item.human_captions.empty()) {
      out.push_back({"caption count", item.item_id, "item " + item.item_id + " has no human captions"});
    }
    if (item.image_row >= n_images) {
      out.push_back({"image index", item.item_id,
                     "item " + item.item_id + ": image row " + std::to_string(item.image_row) + " out of range"});
    }
    if (item.synthetic_row >= n_synthetic) {
      out.push_back({"synthetic index", item.item_id,
                     "item " + item.item_id + ": synthetic row " + std::to_string(item.synthetic_row) +
                         " out of range"});
    }
    const auto end = item.caption_begin + item.human_captions.size();
    if (!item.human_captions.empty() && end > n_captions) {
      out.push_back({"caption index", item.item_id,
                     "item " + item.item_id + ": caption rows [" + std::to_string(item.caption_begin) + ", " +
                         std::to_string(end) + ") exceed " + std::to_string(n_captions) + " caption rows"});
      continue;
    }
    for (std::size_t row = item.caption_begin; row < end; ++row) {
      if (caption_owner[row] >= 0) {
        out.push_back({"caption index", item.item_id,
                       "caption row " + std::to_string(row) + " claimed by more than one item"});
      }
      caption_owner[row] = static_cast<int>(i);
    }
    for (const auto& c : item.human_captions) {
      if (!caption_ids.insert(c.caption_id).second) {
        out.push_back({"duplicate id", item.item_id, "duplicate caption_id " + c.caption_id});
      }
    }
  }
  for (std::size_t row = 0; row < n_captions; ++row) {
    if (caption_owner[row] < 0) {
      out.push_back({"caption index", "", "caption row " + std::to_string(row) + " belongs to no item"});
    }
  }
  return report;
}

EmbeddingStore load_store(const fs::path& root) {
  const auto manifest_path = root / kManifestName;
  std::ifstream in(manifest_path);
  if (!in) throw StoreError("cannot open " + manifest_path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw StoreError(manifest_path.string() + ": " + e.what());
  }

  EmbeddingStore store;
  try {
    store.manifest.backbone = doc.value("backbone", std::string("unknown"));
    store.manifest.split = doc.value("split", std::string("test"));
    store.manifest.dim = doc.at("dim").get<std::size_t>();
    store.manifest.token_dim = doc.value("token_dim", std::size_t{0});

    std::unordered_map<std::string, TensorEntry> entries;
    for (const auto& t : doc.at("tensors")) {
      TensorEntry e;
      e.role = t.at("role").get<std::string>();
      e.file = t.at("file").get<std::string>();
      e.mask = t.value("mask", std::string());
      e.shape = t.value("shape", std::vector<std::size_t>{});
      e.normalized = t.value("normalized", false);
      entries[e.role] = std::move(e);
    }
    auto required = [&](const char* role) -> const TensorEntry& {
      auto it = entries.find(role);
      if (it == entries.end()) throw StoreError(manifest_path.string() + ": missing tensor role " + role);
      return it->second;
    };
    const auto d = store.manifest.dim;
    store.image_embeddings = read_global(root, required(kImageEmbeddings), d);
    store.caption_embeddings = read_global(root, required(kCaptionEmbeddings), d);
    store.synthetic_caption_embeddings = read_global(root, required(kSyntheticEmbeddings), d);
    if (entries.count(kImageTokens)) {
      store.image_tokens = read_tokens(root, entries[kImageTokens], store.manifest.token_dim);
    }
    if (entries.count(kSyntheticTokens)) {
      store.synthetic_caption_tokens = read_tokens(root, entries[kSyntheticTokens], store.manifest.token_dim);
    }
    if (entries.count(kQueryTokens)) {
      store.query_tokens = read_tokens(root, entries[kQueryTokens], store.manifest.token_dim);
    }
    if (entries.count(kImageMultivector)) {
      store.image_multivector = read_multivector(root, entries[kImageMultivector], d);
    }

    for (const auto& j : doc.at("items")) {
      ItemRecord item;
      item.item_id = j.at("item_id").get<std::string>();
      item.image_ref = j.value("image_ref", std::string());
      for (const auto& c : j.at("captions")) {
        item.human_captions.push_back({c.at("caption_id").get<std::string>(), c.value("text", std::string())});
      }
      item.synthetic_caption = j.value("synthetic_caption", std::string());
      item.image_row = j.at("image_row").get<std::size_t>();
      item.caption_begin = j.at("caption_begin").get<std::size_t>();
      item.synthetic_row = j.at("synthetic_row").get<std::size_t>();
      store.items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw StoreError(manifest_path.string() + ": malformed manifest: " + e.what());
  }

  const auto report = validate_store(store);
  if (!report.ok()) {
    std::string msg = root.string() + ": store failed validation:";
    for (const auto& v : report.violations) msg += "\n  [" + v.kind + "] " + v.message;
    throw StoreError(msg);
  }
  store.build_indexes();
  return store;
}

void write_store(const EmbeddingStore& store, const fs::path& root) {
  fs::create_directories(root);
  ordered_json doc;
  doc["format"] = "refrank-store";
  doc["version"] = 1;
  doc["backbone"] = store.manifest.backbone;
  doc["split"] = store.manifest.split;
  doc["dim"] = store.manifest.dim;
  doc["token_dim"] = store.manifest.token_dim;
  ordered_json tensors = ordered_json::array();
  write_global(root, store.image_embeddings, kImageEmbeddings, tensors);
  write_global(root, store.caption_embeddings, kCaptionEmbeddings, tensors);
  write_global(root, store.synthetic_caption_embeddings, kSyntheticEmbeddings, tensors);
  if (store.image_tokens) write_tokens(root, *store.image_tokens, kImageTokens, tensors);
  if (store.synthetic_caption_tokens) write_tokens(root, *store.synthetic_caption_tokens, kSyntheticTokens, tensors);
  if (store.query_tokens) write_tokens(root, *store.query_tokens, kQueryTokens, tensors);
  if (store.image_multivector) {
    const auto& mv = *store.image_multivector;
    const std::string file = std::string(kImageMultivector) + ".embt";
    const std::uint64_t dims[3] = {mv.items, mv.vectors, mv.dim};
    embt::write(root / file, dims, std::span<const float>(mv.values.data(), static_cast<std::size_t>(mv.values.size())));
    ordered_json e;
    e["role"] = kImageMultivector;
    e["file"] = file;
    e["shape"] = shape_json({mv.items, mv.vectors, mv.dim});
    e["normalized"] = mv.normalized;
    tensors.push_back(std::move(e));
  }
  doc["tensors"] = std::move(tensors);

  ordered_json items = ordered_json::array();
  for (const auto& item : store.items) {
    ordered_json j;
    j["item_id"] = item.item_id;
    j["image_ref"] = item.image_ref;
    ordered_json caps = ordered_json::array();
    for (const auto& c : item.human_captions) caps.push_back({{"caption_id", c.caption_id}, {"text", c.text}});
    j["captions"] = std::move(caps);
    j["synthetic_caption"] = item.synthetic_caption;
    j["image_row"] = item.image_row;
    j["caption_begin"] = item.caption_begin;
    j["synthetic_row"] = item.synthetic_row;
    items.push_back(std::move(j));
  }
  doc["items"] = std::move(items);

  std::ofstream out(root / kManifestName, std::ios::trunc);
  if (!out) throw StoreError("cannot write " + (root / kManifestName).string());
  out << doc.dump(2) << '\n';
}

}  // namespace refrank
