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

// Principal components by power iteration with deflation.

#pragma once

#include <cstdint>

#include "refrank/common.h"

namespace refrank {

struct PcaConfig {
  std::size_t components = 2;
  std::size_t max_iterations = 5000;
  double tolerance = 1e-12;  // on 1 - |<v_new, v_old>|
  std::uint64_t seed = 42;
};

template <typename Scalar>
struct Pca {
  Vector<Scalar> mean;
  Matrix<Scalar> components;  // one unit row per component
  Vector<Scalar> variances;   // eigenvalues of the sample covariance, descending
};

// Rows of `data` are observations. Needs at least three rows.
template <typename Scalar>
Pca<Scalar> fit_pca(const Matrix<Scalar>& data, const PcaConfig& config = {});

// Coordinates of each row of `data` along the fitted components.
template <typename Scalar>
Matrix<Scalar> project(const Pca<Scalar>& pca, const Matrix<Scalar>& data);

}  // namespace refrank
