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

// EMBT tensor files.
//
// Layout (little-endian):
//   bytes 0..3   magic "EMBT"
//   u32          version (1)
//   u32          dtype code (0 = float32, 1 = uint8)
//   u32          rank
//   rank x u64   dims
//   payload      row-major values
//
// Padding masks use the same container with dtype uint8.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "refrank/common.h"

namespace refrank::embt {

inline constexpr char kMagic[4] = {'E', 'M', 'B', 'T'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint32_t { kFloat32 = 0, kUInt8 = 1 };

class FormatError : public Error {
 public:
  using Error::Error;
};

struct Header {
  DType dtype = DType::kFloat32;
  std::vector<std::uint64_t> dims;

  std::uint64_t element_count() const;
  // Byte offset of the first payload element.
  std::uint64_t payload_offset() const { return 16 + 8 * dims.size(); }
};

template <typename T>
struct Tensor {
  Header header;
  std::vector<T> values;
};

using Float32Tensor = Tensor<float>;
using UInt8Tensor = Tensor<std::uint8_t>;

void write(const std::filesystem::path& path, std::span<const std::uint64_t> dims, std::span<const float> values);
void write(const std::filesystem::path& path, std::span<const std::uint64_t> dims,
           std::span<const std::uint8_t> values);

Header read_header(const std::filesystem::path& path);
Float32Tensor read_f32(const std::filesystem::path& path);
UInt8Tensor read_u8(const std::filesystem::path& path);

// Convenience for rank-2 float matrices.
void write_matrix(const std::filesystem::path& path, const MatrixF& m);
MatrixF read_matrix(const std::filesystem::path& path);

}  // namespace refrank::embt
