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

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "refrank/common.h"

namespace refrank {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay over a fixed list of parameter matrices.
template <typename Scalar>
class AdamW {
 public:
  AdamW(std::span<Matrix<Scalar>* const> params, AdamWConfig config) : config_(config) {
    for (auto* p : params) {
      m_.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
    }
  }

  void step(std::span<Matrix<Scalar>* const> params, std::span<const Matrix<Scalar>* const> grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
      throw InvalidArgument("AdamW::step: parameter list changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(config_.beta1);
    const auto b2 = static_cast<Scalar>(config_.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      const auto& g = *grads[i];
      p *= static_cast<Scalar>(1.0 - lr * config_.weight_decay);
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseAbs2();
      const auto m_hat = m_[i].array() / static_cast<Scalar>(bc1);
      const auto v_hat = v_[i].array() / static_cast<Scalar>(bc2);
      p.array() -= static_cast<Scalar>(lr) * m_hat / (v_hat.sqrt() + static_cast<Scalar>(config_.eps));
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamWConfig config_;
  std::vector<Matrix<Scalar>> m_;
  std::vector<Matrix<Scalar>> v_;
  std::size_t t_ = 0;
};

// Cosine annealing from base_lr at epoch 0 towards 0 at `total` epochs.
inline double cosine_annealing(double base_lr, std::size_t epoch, std::size_t total) {
  if (total == 0) return base_lr;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total)));
}

}  // namespace refrank
