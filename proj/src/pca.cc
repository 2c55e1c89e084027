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

#include "refrank/pca.h"

#include <cmath>
#include <random>

namespace refrank {

template <typename Scalar>
Pca<Scalar> fit_pca(const Matrix<Scalar>& data, const PcaConfig& config) {
  const auto n = data.rows();
  const auto d = data.cols();
  if (n < 3) throw InvalidArgument("pca: need at least three vectors");
  if (config.components < 1 || static_cast<Eigen::Index>(config.components) > d) {
    throw InvalidArgument("pca: component count must be in [1, dim]");
  }
  if (!data.allFinite()) throw InvalidArgument("pca: data contains non-finite values");

  // The accumulation runs in double regardless of the input scalar.
  const MatrixD x = data.template cast<double>();
  const VectorD mean = x.colwise().mean().transpose();
  const MatrixD centred = x.rowwise() - mean.transpose();
  MatrixD cov = (centred.transpose() * centred) / static_cast<double>(n - 1);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Pca<Scalar> out;
  out.mean = mean.cast<Scalar>();
  out.components = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(config.components), d);
  out.variances = Vector<Scalar>::Zero(static_cast<Eigen::Index>(config.components));

  std::vector<VectorD> found;
  for (std::size_t c = 0; c < config.components; ++c) {
    VectorD v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = normal(rng);
    for (const auto& u : found) v -= v.dot(u) * u;
    v.normalize();

    double lambda = 0.0;
    for (std::size_t it = 0; it < config.max_iterations; ++it) {
      VectorD w = cov * v;
      // Keep the iterate orthogonal to earlier components against round-off.
      for (const auto& u : found) w -= w.dot(u) * u;
      const double norm = w.norm();
      if (norm == 0.0) {
        lambda = 0.0;
        break;
      }
      w /= norm;
      const double change = 1.0 - std::abs(w.dot(v));
      v = w;
      lambda = v.dot(cov * v);
      if (change < config.tolerance) break;
    }
    // Fix the sign so the largest-magnitude coordinate is positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;

    cov -= lambda * v * v.transpose();
    found.push_back(v);
    out.components.row(static_cast<Eigen::Index>(c)) = v.transpose().cast<Scalar>();
    out.variances[static_cast<Eigen::Index>(c)] = static_cast<Scalar>(std::max(lambda, 0.0));
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> project(const Pca<Scalar>& pca, const Matrix<Scalar>& data) {
  if (data.cols() != pca.components.cols()) throw InvalidArgument("pca: dimension differs from the fitted data");
  return (data.rowwise() - pca.mean.transpose()) * pca.components.transpose();
}

template Pca<float> fit_pca(const Matrix<float>&, const PcaConfig&);
template Pca<double> fit_pca(const Matrix<double>&, const PcaConfig&);
template Matrix<float> project(const Pca<float>&, const Matrix<float>&);
template Matrix<double> project(const Pca<double>&, const Matrix<double>&);

}  // namespace refrank
