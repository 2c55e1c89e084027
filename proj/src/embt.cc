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

#include "refrank/embt.h"

#include <bit>
#include <cstring>
#include <fstream>

namespace refrank::embt {

static_assert(std::endian::native == std::endian::little, "EMBT I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw FormatError(path.string() + ": truncated header");
  }
  return value;
}

std::uint64_t product(std::span<const std::uint64_t> dims) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

template <typename T>
void write_impl(const std::filesystem::path& path, std::span<const std::uint64_t> dims, std::span<const T> values,
                DType dtype) {
  if (product(dims) != values.size()) {
    throw InvalidArgument(path.string() + ": payload size " + std::to_string(values.size()) +
                          " does not match dims product " + std::to_string(product(dims)));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dtype));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put<std::uint64_t>(out, d);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
  if (!out) throw Error("write failed for " + path.string());
}

Header read_header_from(std::ifstream& in, const std::filesystem::path& path) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError(path.string() + ": truncated header");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + ": bad magic, expected EMBT");
  auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  }
  auto dtype = get<std::uint32_t>(in, path);
  if (dtype != static_cast<std::uint32_t>(DType::kFloat32) && dtype != static_cast<std::uint32_t>(DType::kUInt8)) {
    throw FormatError(path.string() + ": unknown dtype code " + std::to_string(dtype));
  }
  auto rank = get<std::uint32_t>(in, path);
  if (rank > 8) throw FormatError(path.string() + ": implausible rank " + std::to_string(rank));
  Header h;
  h.dtype = static_cast<DType>(dtype);
  h.dims.resize(rank);
  for (auto& d : h.dims) d = get<std::uint64_t>(in, path);
  return h;
}

template <typename T>
Tensor<T> read_impl(const std::filesystem::path& path, DType expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  Tensor<T> t;
  t.header = read_header_from(in, path);
  if (t.header.dtype != expected) {
    throw FormatError(path.string() + ": dtype code " + std::to_string(static_cast<std::uint32_t>(t.header.dtype)) +
                      " does not match expected " + std::to_string(static_cast<std::uint32_t>(expected)));
  }
  const auto n = t.header.element_count();
  t.values.resize(n);
  if (n > 0 && !in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(n * sizeof(T)))) {
    throw FormatError(path.string() + ": payload truncated, expected " + std::to_string(n) + " elements");
  }
  in.peek();
  if (!in.eof()) throw FormatError(path.string() + ": trailing bytes after payload");
  return t;
}

}  // namespace

std::uint64_t Header::element_count() const { return product(dims); }

void write(const std::filesystem::path& path, std::span<const std::uint64_t> dims, std::span<const float> values) {
  write_impl(path, dims, values, DType::kFloat32);
}

void write(const std::filesystem::path& path, std::span<const std::uint64_t> dims,
           std::span<const std::uint8_t> values) {
  write_impl(path, dims, values, DType::kUInt8);
}

Header read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_header_from(in, path);
}

Float32Tensor read_f32(const std::filesystem::path& path) { return read_impl<float>(path, DType::kFloat32); }

UInt8Tensor read_u8(const std::filesystem::path& path) { return read_impl<std::uint8_t>(path, DType::kUInt8); }

void write_matrix(const std::filesystem::path& path, const MatrixF& m) {
  const std::uint64_t dims[2] = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  write(path, dims, std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}

MatrixF read_matrix(const std::filesystem::path& path) {
  auto t = read_f32(path);
  if (t.header.dims.size() != 2) {
    throw FormatError(path.string() + ": expected rank 2, got " + std::to_string(t.header.dims.size()));
  }
  MatrixF m(static_cast<Eigen::Index>(t.header.dims[0]), static_cast<Eigen::Index>(t.header.dims[1]));
  std::copy(t.values.begin(), t.values.end(), m.data());
  return m;
}

}  // namespace refrank::embt
