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

// Rocchio query refinement over dense embeddings.
//
//   refined = alpha * query + beta * positive - gamma * negative
//
// The classical rule takes the centroids of a relevant and a non-relevant set.
// The softmax-weighted rule draws both vectors from the same top-K feedback set:
//   w_i      = softmax(s_i / tau)
//   positive = sum_i w_i z_i
//   negative = sum_i (1 - w_i) z_i
// so items close to the query dominate the positive vector while the remaining
// hard negatives dominate the negative one.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "refrank/common.h"

namespace refrank {

struct RocchioParams {
  double alpha = 0.8;
  double beta = 0.1;
  double gamma = 0.1;
  double tau = 0.05;
  std::size_t k = 5;

  void validate() const {
    if (!(tau > 0.0)) throw InvalidArgument("rocchio: tau must be > 0");
    if (k < 1) throw InvalidArgument("rocchio: k must be >= 1");
    if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw InvalidArgument("rocchio: weights must be non-negative");
  }
};

template <typename Scalar>
struct FeedbackWeights {
  Vector<Scalar> positive;
  Vector<Scalar> negative;
};

template <typename Scalar>
struct RefinementBreakdown {
  Vector<Scalar> refined;
  Vector<Scalar> positive_vector;
  Vector<Scalar> negative_vector;
  FeedbackWeights<Scalar> weights;
};

// Numerically stable softmax of values / tau, evaluated in double.
template <typename Derived>
Vector<typename Derived::Scalar> softmax_temperature(const Eigen::MatrixBase<Derived>& values, double tau) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > 0.0)) throw InvalidArgument("softmax: tau must be > 0");
  if (values.size() == 0) throw InvalidArgument("softmax: empty input");
  const auto v = values.template cast<double>();
  const double top = v.maxCoeff();
  Eigen::ArrayXd e = ((v.array() - top) / tau).exp();
  e /= e.sum();
  return e.matrix().template cast<Scalar>();
}

template <typename Derived>
FeedbackWeights<typename Derived::Scalar> feedback_weights(const Eigen::MatrixBase<Derived>& similarities,
                                                           double tau) {
  using Scalar = typename Derived::Scalar;
  FeedbackWeights<Scalar> w;
  w.positive = softmax_temperature(similarities, tau);
  w.negative = (Scalar(1) - w.positive.array()).matrix();
  return w;
}

namespace detail {

template <typename Scalar, typename DerivedQ>
Vector<Scalar> combine(const Eigen::MatrixBase<DerivedQ>& query, const Vector<Scalar>& positive,
                       const Vector<Scalar>& negative, const RocchioParams& params) {
  // Zero-weight terms are skipped so alpha=1, beta=gamma=0 reproduces the query bit for bit.
  Vector<Scalar> refined = Scalar(params.alpha) * query;
  if (params.beta != 0.0) refined += Scalar(params.beta) * positive;
  if (params.gamma != 0.0) refined -= Scalar(params.gamma) * negative;
  return refined;
}

template <typename DerivedQ, typename DerivedC>
void check_shapes(const Eigen::MatrixBase<DerivedQ>& query, const Eigen::MatrixBase<DerivedC>& candidates,
                  Eigen::Index weights) {
  if (query.cols() != 1) throw InvalidArgument("rocchio: query must be a column vector");
  if (candidates.rows() == 0) throw InvalidArgument("rocchio: empty feedback set");
  if (candidates.cols() != query.rows()) throw InvalidArgument("rocchio: candidate dim differs from query dim");
  if (weights != candidates.rows()) throw InvalidArgument("rocchio: one weight per candidate required");
}

}  // namespace detail

// Rocchio with explicit per-item weights over a K x d feedback matrix.
template <typename DerivedQ, typename DerivedC>
RefinementBreakdown<typename DerivedQ::Scalar> refine_with_weights(
    const Eigen::MatrixBase<DerivedQ>& query, const Eigen::MatrixBase<DerivedC>& candidates,
    FeedbackWeights<typename DerivedQ::Scalar> weights, const RocchioParams& params) {
  using Scalar = typename DerivedQ::Scalar;
  detail::check_shapes(query, candidates, weights.positive.size());
  if (weights.negative.size() != weights.positive.size()) throw InvalidArgument("rocchio: weight length mismatch");
  RefinementBreakdown<Scalar> out;
  out.positive_vector = candidates.transpose() * weights.positive;
  out.negative_vector = candidates.transpose() * weights.negative;
  out.refined = detail::combine(query, out.positive_vector, out.negative_vector, params);
  out.weights = std::move(weights);
  return out;
}

// Softmax-weighted rule; similarities are the raw query-item cosines, row-aligned with candidates.
template <typename DerivedQ, typename DerivedC, typename DerivedS>
RefinementBreakdown<typename DerivedQ::Scalar> refine_extended(const Eigen::MatrixBase<DerivedQ>& query,
                                                               const Eigen::MatrixBase<DerivedC>& candidates,
                                                               const Eigen::MatrixBase<DerivedS>& similarities,
                                                               const RocchioParams& params) {
  using Scalar = typename DerivedQ::Scalar;
  params.validate();
  detail::check_shapes(query, candidates, similarities.size());
  return refine_with_weights(query, candidates, feedback_weights(similarities.template cast<Scalar>(), params.tau),
                             params);
}

// Same arithmetic as refine_extended with synthetic-caption embeddings as the feedback vectors.
template <typename DerivedQ, typename DerivedC, typename DerivedS>
RefinementBreakdown<typename DerivedQ::Scalar> refine_grf(const Eigen::MatrixBase<DerivedQ>& query,
                                                          const Eigen::MatrixBase<DerivedC>& caption_embeddings,
                                                          const Eigen::MatrixBase<DerivedS>& similarities,
                                                          const RocchioParams& params) {
  return refine_extended(query, caption_embeddings, similarities, params);
}

// Classical rule: centroid of the relevant set minus centroid of the non-relevant set.
template <typename DerivedQ, typename DerivedR, typename DerivedN>
RefinementBreakdown<typename DerivedQ::Scalar> refine_original(const Eigen::MatrixBase<DerivedQ>& query,
                                                               const Eigen::MatrixBase<DerivedR>& relevant,
                                                               const Eigen::MatrixBase<DerivedN>& nonrelevant,
                                                               const RocchioParams& params) {
  using Scalar = typename DerivedQ::Scalar;
  detail::check_shapes(query, relevant, relevant.rows());
  detail::check_shapes(query, nonrelevant, nonrelevant.rows());
  RefinementBreakdown<Scalar> out;
  out.weights.positive = Vector<Scalar>::Constant(relevant.rows(), Scalar(1) / Scalar(relevant.rows()));
  out.weights.negative = Vector<Scalar>::Constant(nonrelevant.rows(), Scalar(1) / Scalar(nonrelevant.rows()));
  out.positive_vector = relevant.colwise().mean().transpose();
  out.negative_vector = nonrelevant.colwise().mean().transpose();
  out.refined = detail::combine(query, out.positive_vector, out.negative_vector, params);
  return out;
}

// Weights from explicit user marks over a K-item feedback set: marked-relevant items share
// the positive mass equally, marked-irrelevant items share the negative mass, unmarked items get 0.
template <typename Scalar>
FeedbackWeights<Scalar> marked_weights(std::size_t k, std::span<const std::size_t> relevant,
                                       std::span<const std::size_t> irrelevant) {
  FeedbackWeights<Scalar> w;
  w.positive = Vector<Scalar>::Zero(static_cast<Eigen::Index>(k));
  w.negative = Vector<Scalar>::Zero(static_cast<Eigen::Index>(k));
  for (auto i : relevant) {
    if (i >= k) throw InvalidArgument("marked_weights: index out of range");
    w.positive[static_cast<Eigen::Index>(i)] = Scalar(1) / Scalar(relevant.size());
  }
  for (auto i : irrelevant) {
    if (i >= k) throw InvalidArgument("marked_weights: index out of range");
    w.negative[static_cast<Eigen::Index>(i)] = Scalar(1) / Scalar(irrelevant.size());
  }
  return w;
}

}  // namespace refrank
