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

// Reverse-mode automatic differentiation over 2-D dense matrices.
//
// A Tape owns every intermediate value. Ops append a node holding the forward
// value plus a closure that scatters the node's gradient into its inputs;
// backward() walks the nodes in exact reverse order. Gradients accumulate
// additively, so a value used twice receives the sum of both contributions.
//
// The scalar type is a template parameter: float for training and inference,
// double for finite-difference gradient checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "refrank/common.h"

namespace refrank::ad {

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<Scalar>& value() const { return tape->value(id); }
  const Matrix<Scalar>& grad() const { return tape->grad(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Var<Scalar> variable(Mat value) { return push(std::move(value), true, nullptr); }
  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr); }

  // Appends an op result. `fn` is only kept when the result requires a gradient.
  Var<Scalar> record(Mat value, bool requires_grad, BackwardFn fn) {
#ifndef NDEBUG
    if (!value.allFinite()) throw Error("autodiff: non-finite value produced by forward op");
#endif
    return push(std::move(value), requires_grad, requires_grad ? std::move(fn) : nullptr);
  }

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient of the last backward() pass; zeros when nothing flowed into the node.
  const Mat& grad(std::size_t id) const {
    auto& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  // Mutable gradient slot used by backward closures.
  Mat& grad_slot(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var<Scalar> loss) {
    if (loss.tape != this) throw InvalidArgument("backward: variable belongs to another tape");
    const auto& v = value(loss.id);
    if (v.rows() != 1 || v.cols() != 1) throw InvalidArgument("backward: loss must be a 1x1 scalar");
    for (auto& n : nodes_) n.has_grad = false;
    grad_slot(loss.id).setOnes();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    mutable Mat grad;
    bool requires_grad = false;
    mutable bool has_grad = false;
    BackwardFn backward;
  };

  Var<Scalar> push(Mat value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, false, std::move(fn)});
    return Var<Scalar>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape != b.tape || a.tape == nullptr) throw InvalidArgument("autodiff: operands live on different tapes");
  return *a.tape;
}

inline void require(bool ok, const char* what) {
  if (!ok) throw InvalidArgument(what);
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.record(a.value() * b.value(), rg, [a, b](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_slot(a.id).noalias() += g * tp.value(b.id).transpose();
    if (tp.requires_grad(b.id)) tp.grad_slot(b.id).noalias() += tp.value(a.id).transpose() * g;
  });
}

// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.record(a.value() * b.value().transpose(), rg, [a, b](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_slot(a.id).noalias() += g * tp.value(b.id);
    if (tp.requires_grad(b.id)) tp.grad_slot(b.id).noalias() += g.transpose() * tp.value(a.id);
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.record(a.value() + b.value(), rg, [a, b](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_slot(a.id) += g;
    if (tp.requires_grad(b.id)) tp.grad_slot(b.id) += g;
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  auto& t = detail::same_tape(a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.record(a.value() - b.value(), rg, [a, b](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_slot(a.id) += g;
    if (tp.requires_grad(b.id)) tp.grad_slot(b.id) -= g;
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  return sub(a, b);
}

// Adds a 1 x n row to every row of a.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  auto& t = detail::same_tape(a, row);
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias must be 1 x cols");
  const bool rg = t.requires_grad(a.id) || t.requires_grad(row.id);
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), rg, [a, row](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad_slot(a.id) += g;
    if (tp.requires_grad(row.id)) tp.grad_slot(row.id) += g.colwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  auto& t = *a.tape;
  return t.record(a.value() * s, t.requires_grad(a.id), [a, s](Tape<Scalar>& tp, std::size_t self) {
    tp.grad_slot(a.id) += tp.grad(self) * s;
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  auto& t = *a.tape;
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  return t.record(std::move(out), t.requires_grad(a.id), [a](Tape<Scalar>& tp, std::size_t self) {
    const auto mask = (tp.value(a.id).array() > Scalar(0)).template cast<Scalar>();
    tp.grad_slot(a.id).array() += tp.grad(self).array() * mask;
  });
}

// Row-wise softmax. Columns with key_mask[c] == 0 receive exactly zero weight;
// a row with no valid column is an error.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a, const Mask* key_mask = nullptr) {
  auto& t = *a.tape;
  const auto& x = a.value();
  detail::require(x.cols() >= 1, "softmax_rows: need at least one column");
  if (key_mask != nullptr) {
    detail::require(static_cast<Eigen::Index>(key_mask->size()) == x.cols(), "softmax_rows: mask length");
  }
  auto valid = [&](Eigen::Index c) { return key_mask == nullptr || (*key_mask)[static_cast<std::size_t>(c)] != 0; };
  Matrix<Scalar> y = Matrix<Scalar>::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Scalar top = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (valid(c)) top = std::max(top, x(r, c));
    }
    detail::require(std::isfinite(top), "softmax_rows: fully masked row");
    Scalar total = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (!valid(c)) continue;
      y(r, c) = std::exp(x(r, c) - top);
      total += y(r, c);
    }
    y.row(r) /= total;
  }
  return t.record(std::move(y), t.requires_grad(a.id), [a](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& yv = tp.value(self);
    const Vector<Scalar> dots = g.cwiseProduct(yv).rowwise().sum();
    tp.grad_slot(a.id).array() += yv.array() * (g.colwise() - dots).array();
  });
}

// Per-row standardisation followed by the affine map gain * x_hat + bias.
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias, Scalar eps = Scalar(1e-5)) {
  auto& t = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const auto n = x.cols();
  detail::require(n >= 2, "layer_norm: last dimension must be >= 2");
  detail::require(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n,
                  "layer_norm: gain/bias must be 1 x cols");
  const auto& xv = x.value();
  Matrix<Scalar> x_hat(xv.rows(), n);
  Vector<Scalar> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Scalar mean = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mean).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    x_hat.row(r) = (xv.row(r).array() - mean) * inv_std[r];
  }
  Matrix<Scalar> y = (x_hat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  const bool rg = t.requires_grad(x.id) || t.requires_grad(gain.id) || t.requires_grad(bias.id);
  return t.record(std::move(y), rg,
                  [x, gain, bias, x_hat = std::move(x_hat), inv_std = std::move(inv_std)](Tape<Scalar>& tp,
                                                                                         std::size_t self) {
                    const auto& g = tp.grad(self);
                    if (tp.requires_grad(gain.id)) {
                      tp.grad_slot(gain.id) += g.cwiseProduct(x_hat).colwise().sum();
                    }
                    if (tp.requires_grad(bias.id)) tp.grad_slot(bias.id) += g.colwise().sum();
                    if (tp.requires_grad(x.id)) {
                      const auto& gv = tp.value(gain.id);
                      auto& gx = tp.grad_slot(x.id);
                      for (Eigen::Index r = 0; r < g.rows(); ++r) {
                        const auto dxh = (g.row(r).array() * gv.row(0).array()).eval();
                        const Scalar m1 = dxh.mean();
                        const Scalar m2 = (dxh * x_hat.row(r).array()).mean();
                        gx.row(r).array() += inv_std[r] * (dxh - m1 - x_hat.row(r).array() * m2);
                      }
                    }
                  });
}

template <typename Scalar>
Var<Scalar> col_block(Var<Scalar> a, Eigen::Index start, Eigen::Index width) {
  auto& t = *a.tape;
  detail::require(start >= 0 && width >= 0 && start + width <= a.cols(), "col_block: range out of bounds");
  Matrix<Scalar> out = a.value().middleCols(start, width);
  return t.record(std::move(out), t.requires_grad(a.id), [a, start, width](Tape<Scalar>& tp, std::size_t self) {
    tp.grad_slot(a.id).middleCols(start, width) += tp.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> row_block(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  auto& t = *a.tape;
  detail::require(start >= 0 && count >= 0 && start + count <= a.rows(), "row_block: range out of bounds");
  Matrix<Scalar> out = a.value().middleRows(start, count);
  return t.record(std::move(out), t.requires_grad(a.id), [a, start, count](Tape<Scalar>& tp, std::size_t self) {
    tp.grad_slot(a.id).middleRows(start, count) += tp.grad(self);
  });
}

template <typename Scalar>
Var<Scalar> hconcat(std::span<const Var<Scalar>> parts) {
  detail::require(!parts.empty(), "hconcat: no parts");
  auto& t = *parts[0].tape;
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require(p.tape == &t && p.rows() == parts[0].rows(), "hconcat: row counts differ");
    cols += p.cols();
    rg = rg || t.requires_grad(p.id);
  }
  Matrix<Scalar> out(parts[0].rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var<Scalar>> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), rg, [inputs](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    Eigen::Index at = 0;
    for (const auto& p : inputs) {
      const auto w = tp.value(p.id).cols();
      if (tp.requires_grad(p.id)) tp.grad_slot(p.id) += g.middleCols(at, w);
      at += w;
    }
  });
}

template <typename Scalar>
Var<Scalar> vconcat(std::span<const Var<Scalar>> parts) {
  detail::require(!parts.empty(), "vconcat: no parts");
  auto& t = *parts[0].tape;
  Eigen::Index rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require(p.tape == &t && p.cols() == parts[0].cols(), "vconcat: column counts differ");
    rows += p.rows();
    rg = rg || t.requires_grad(p.id);
  }
  Matrix<Scalar> out(rows, parts[0].cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var<Scalar>> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), rg, [inputs](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    Eigen::Index at = 0;
    for (const auto& p : inputs) {
      const auto h = tp.value(p.id).rows();
      if (tp.requires_grad(p.id)) tp.grad_slot(p.id) += g.middleRows(at, h);
      at += h;
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  auto& t = *a.tape;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), t.requires_grad(a.id), [a](Tape<Scalar>& tp, std::size_t self) {
    tp.grad_slot(a.id).array() += tp.grad(self)(0, 0);
  });
}

template <typename Scalar>
Var<Scalar> sum_squares(Var<Scalar> a) {
  auto& t = *a.tape;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return t.record(std::move(out), t.requires_grad(a.id), [a](Tape<Scalar>& tp, std::size_t self) {
    tp.grad_slot(a.id) += (Scalar(2) * tp.grad(self)(0, 0)) * tp.value(a.id);
  });
}

// 1 - cos(a, target) for a 1 x n variable and a constant 1 x n target.
template <typename Scalar>
Var<Scalar> cosine_distance(Var<Scalar> a, const Matrix<Scalar>& target) {
  auto& t = *a.tape;
  detail::require(a.rows() == 1 && target.rows() == 1 && a.cols() == target.cols(),
                  "cosine_distance: operands must be 1 x n with equal n");
  const Scalar na = a.value().norm();
  const Scalar nt = target.norm();
  detail::require(na > Scalar(0) && nt > Scalar(0), "cosine_distance: zero-norm operand");
  const Scalar dot = a.value().cwiseProduct(target).sum();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = Scalar(1) - dot / (na * nt);
  return t.record(std::move(out), t.requires_grad(a.id), [a, target, na, nt, dot](Tape<Scalar>& tp, std::size_t self) {
    const Scalar g = tp.grad(self)(0, 0);
    // d/da cos = target / (|a||t|) - dot * a / (|a|^3 |t|)
    tp.grad_slot(a.id) -= g * (target / (na * nt) - (dot / (na * na * na * nt)) * tp.value(a.id));
  });
}

// Scaled dot-product attention for one head.
template <typename Scalar>
struct AttentionResult {
  Var<Scalar> output;  // n_q x d_h
  Var<Scalar> scores;  // n_q x n_k, rows sum to 1 over valid keys
};

// scores = softmax(Q K^T / sqrt(d_h) + logit_bias), output = scores V.
// logit_bias, when given, is a constant 1 x n_k row added to every query row.
template <typename Scalar>
AttentionResult<Scalar> attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, const Mask* key_mask = nullptr,
                                  const Matrix<Scalar>* logit_bias = nullptr) {
  detail::require(q.cols() >= 1 && q.cols() == k.cols(), "attention: head dims differ");
  detail::require(k.rows() == v.rows(), "attention: keys and values differ in length");
  auto logits = scale(matmul_nt(q, k), Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols())));
  if (logit_bias != nullptr) {
    detail::require(logit_bias->rows() == 1 && logit_bias->cols() == k.rows(), "attention: bias must be 1 x n_k");
    logits = add_row(logits, q.tape->constant(*logit_bias));
  }
  auto scores = softmax_rows(logits, key_mask);
  return {matmul(scores, v), scores};
}

// Finite-difference gradient check over 64-bit parameters.
struct ParamRef {
  std::string name;
  MatrixD* value = nullptr;
};

struct GradcheckOptions {
  double epsilon = 1e-4;
  double tolerance = 1e-4;
  // Scalars to check; every scalar is checked when the total is at most this.
  std::size_t max_samples = 2000;
  // Denominator floor of the relative error, guarding near-zero gradients.
  double floor = 1e-6;
  std::uint64_t seed = 7;
};

struct GradcheckViolation {
  std::string param;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradcheckReport {
  std::size_t checked = 0;
  double max_relative_error = 0.0;
  std::vector<GradcheckViolation> violations;
  bool passed() const { return violations.empty() && checked > 0; }
};

// `loss` re-evaluates the function at the current parameter values; `analytic`
// holds d loss / d param for each entry of `params`, evaluated at the unperturbed point.
inline GradcheckReport gradcheck(std::span<const ParamRef> params, const std::function<double()>& loss,
                                 std::span<const MatrixD> analytic, const GradcheckOptions& options = {}) {
  if (params.size() != analytic.size()) throw InvalidArgument("gradcheck: one gradient per parameter required");
  struct Slot {
    std::size_t param;
    Eigen::Index index;
  };
  std::vector<Slot> slots;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].value->size() != analytic[p].size()) throw InvalidArgument("gradcheck: gradient shape mismatch");
    for (Eigen::Index i = 0; i < params[p].value->size(); ++i) slots.push_back({p, i});
  }
  if (slots.size() > options.max_samples) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(slots.begin(), slots.end(), rng);
    slots.resize(options.max_samples);
  }
  GradcheckReport report;
  for (const auto& s : slots) {
    auto& m = *params[s.param].value;
    double& x = m.data()[s.index];
    const double saved = x;
    x = saved + options.epsilon;
    const double up = loss();
    x = saved - options.epsilon;
    const double down = loss();
    x = saved;
    const double numeric = (up - down) / (2.0 * options.epsilon);
    const double a = analytic[s.param].data()[s.index];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
    report.max_relative_error = std::max(report.max_relative_error, rel);
    ++report.checked;
    if (rel > options.tolerance) {
      const auto cols = m.cols();
      report.violations.push_back({params[s.param].name, s.index / cols, s.index % cols, a, numeric, rel});
    }
  }
  return report;
}

}  // namespace refrank::ad
