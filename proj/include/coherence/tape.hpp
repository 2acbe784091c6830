// Copyright 2026 The Coherence Toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal reverse-mode differentiation over dense double matrices. Only the
// operations the transformer encoder needs are provided.
//
// A Tape records nodes in evaluation order; backward() walks them in reverse.
// Leaf nodes bound to a ParamSet tensor accumulate their gradient into the
// matching slot of a caller-supplied gradient set.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "coherence/common.hpp"

namespace coherence {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct NamedTensor {
  std::string name;
  Matrix value;
};

// Ordered, named parameter tensors. Order is part of the checkpoint format.
class ParamSet {
 public:
  std::size_t add(std::string name, Matrix value) {
    tensors_.push_back({std::move(name), std::move(value)});
    return tensors_.size() - 1;
  }

  std::size_t size() const { return tensors_.size(); }
  NamedTensor& operator[](std::size_t i) { return tensors_[i]; }
  const NamedTensor& operator[](std::size_t i) const { return tensors_[i]; }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      if (tensors_[i].name == name) return i;
    throw std::out_of_range("no parameter named " + name);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
    return n;
  }

  // Same names, same shapes, all zeros.
  ParamSet zeros_like() const {
    ParamSet z;
    for (const auto& t : tensors_)
      z.add(t.name, Matrix::Zero(t.value.rows(), t.value.cols()));
    return z;
  }

  void set_zero() {
    for (auto& t : tensors_) t.value.setZero();
  }

  bool same_shape(const ParamSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (tensors_[i].name != other[i].name ||
          tensors_[i].value.rows() != other[i].value.rows() ||
          tensors_[i].value.cols() != other[i].value.cols())
        return false;
    return true;
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      if (!t.value.allFinite()) return false;
    return true;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& t : tensors_) s += t.value.squaredNorm();
    return s;
  }

  bool operator==(const ParamSet& other) const {
    if (!same_shape(other)) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (tensors_[i].value != other[i].value) return false;
    return true;
  }

 private:
  std::vector<NamedTensor> tensors_;
};

// Handle to a tape node.
struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  // Constant input; receives no gradient accumulation target.
  Var constant(Matrix value) { return push(std::move(value), {}); }

  // Leaf bound to parameter `index`; backward() adds its gradient there.
  Var param(const ParamSet& params, std::size_t index) {
    Var v = push(params[index].value, {});
    nodes_[v.id].param_index = static_cast<long>(index);
    return v;
  }

  // Rows of parameter `index` selected by `rows` (embedding lookup).
  Var gather_rows(const ParamSet& params, std::size_t index,
                  const std::vector<std::size_t>& rows) {
    const Matrix& table = params[index].value;
    Matrix out(static_cast<Eigen::Index>(rows.size()), table.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
      out.row(static_cast<Eigen::Index>(r)) =
          table.row(static_cast<Eigen::Index>(rows[r]));
    Var v = push(std::move(out), {});
    nodes_[v.id].param_index = static_cast<long>(index);
    nodes_[v.id].gather = rows;
    return v;
  }

  Var matmul(Var a, Var b) {
    Var out = push(value(a) * value(b), {});
    nodes_[out.id].backward = [a, b, out](Tape& t) {
      const Matrix& g = t.nodes_[out.id].grad;
      t.acc(a, g * t.value(b).transpose());
      t.acc(b, t.value(a).transpose() * g);
    };
    return out;
  }

  // a * b^T
  Var matmul_nt(Var a, Var b) {
    Var out = push(value(a) * value(b).transpose(), {});
    nodes_[out.id].backward = [a, b, out](Tape& t) {
      const Matrix& g = t.nodes_[out.id].grad;
      t.acc(a, g * t.value(b));
      t.acc(b, g.transpose() * t.value(a));
    };
    return out;
  }

  Var add(Var a, Var b) {
    Var out = push(value(a) + value(b), {});
    nodes_[out.id].backward = [a, b, out](Tape& t) {
      const Matrix& g = t.nodes_[out.id].grad;
      t.acc(a, g);
      t.acc(b, g);
    };
    return out;
  }

  // x (r x c) + bias (1 x c) broadcast over rows.
  Var add_row(Var x, Var bias) {
    Matrix v = value(x);
    v.rowwise() += value(bias).row(0);
    Var out = push(std::move(v), {});
    nodes_[out.id].backward = [x, bias, out](Tape& t) {
      const Matrix& g = t.nodes_[out.id].grad;
      t.acc(x, g);
      t.acc(bias, g.colwise().sum());
    };
    return out;
  }

  Var scale(Var x, double s) {
    Var out = push(value(x) * s, {});
    nodes_[out.id].backward = [x, s, out](Tape& t) {
      t.acc(x, t.nodes_[out.id].grad * s);
    };
    return out;
  }

  // Elementwise product with a constant mask (dropout).
  Var mask(Var x, Matrix m) {
    Var out = push(value(x).cwiseProduct(m), {});
    nodes_[out.id].backward = [x, m = std::move(m), out](Tape& t) {
      t.acc(x, t.nodes_[out.id].grad.cwiseProduct(m));
    };
    return out;
  }

  // tanh-approximated GELU.
  Var gelu(Var x) {
    static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    const Matrix& xv = value(x);
    Matrix inner = (xv.array() + 0.044715 * xv.array().cube()).matrix() * k;
    Matrix th = inner.array().tanh().matrix();
    Matrix out_v = (0.5 * xv.array() * (1.0 + th.array())).matrix();
    Var out = push(std::move(out_v), {});
    nodes_[out.id].backward = [x, th = std::move(th), out](Tape& t) {
      const Matrix& xv = t.value(x);
      const auto dinner = k * (1.0 + 3.0 * 0.044715 * xv.array().square());
      const auto d = 0.5 * (1.0 + th.array()) +
                     0.5 * xv.array() * (1.0 - th.array().square()) * dinner;
      t.acc(x, (t.nodes_[out.id].grad.array() * d).matrix());
    };
    return out;
  }

  // Row-wise softmax.
  Var softmax_rows(Var x) {
    Matrix s = value(x);
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const double m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    Var out = push(std::move(s), {});
    nodes_[out.id].backward = [x, out](Tape& t) {
      const Matrix& y = t.nodes_[out.id].value;
      const Matrix& g = t.nodes_[out.id].grad;
      Matrix dx = y.cwiseProduct(g);
      const Vector row_dot = dx.rowwise().sum();
      dx -= (y.array().colwise() * row_dot.array()).matrix();
      t.acc(x, dx);
    };
    return out;
  }

  // Row-wise layer normalization with gain and bias (each 1 x c).
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Matrix& xv = value(x);
    const Eigen::Index c = xv.cols();
    Vector mean = xv.rowwise().mean();
    Matrix centered = xv.colwise() - mean;
    Vector inv_std =
        ((centered.array().square().rowwise().sum() / static_cast<double>(c)) +
         eps)
            .rsqrt()
            .matrix();
    Matrix xhat = (centered.array().colwise() * inv_std.array()).matrix();
    Matrix y = (xhat.array().rowwise() * value(gain).row(0).array()).matrix();
    y.rowwise() += value(bias).row(0);
    Var out = push(std::move(y), {});
    nodes_[out.id].backward = [x, gain, bias, out, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)](Tape& t) {
      const Matrix& g = t.nodes_[out.id].grad;
      t.acc(gain, g.cwiseProduct(xhat).colwise().sum());
      t.acc(bias, g.colwise().sum());
      Matrix gx = (g.array().rowwise() * t.value(gain).row(0).array()).matrix();
      const double c = static_cast<double>(gx.cols());
      const Vector mean_g = gx.rowwise().mean();
      const Vector mean_gx = gx.cwiseProduct(xhat).rowwise().sum() / c;
      Matrix dx = gx.colwise() - mean_g;
      dx -= (xhat.array().colwise() * mean_gx.array()).matrix();
      dx = (dx.array().colwise() * inv_std.array()).matrix();
      t.acc(x, dx);
    };
    return out;
  }

  // Columns [start, start + n).
  Var cols(Var x, Eigen::Index start, Eigen::Index n) {
    Var out = push(value(x).middleCols(start, n), {});
    nodes_[out.id].backward = [x, start, n, out](Tape& t) {
      Matrix g = Matrix::Zero(t.value(x).rows(), t.value(x).cols());
      g.middleCols(start, n) = t.nodes_[out.id].grad;
      t.acc(x, g);
    };
    return out;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    Eigen::Index rows = value(parts.front()).rows(), total = 0;
    for (auto p : parts) total += value(p).cols();
    Matrix v(rows, total);
    Eigen::Index off = 0;
    for (auto p : parts) {
      v.middleCols(off, value(p).cols()) = value(p);
      off += value(p).cols();
    }
    Var out = push(std::move(v), {});
    nodes_[out.id].backward = [parts, out](Tape& t) {
      Eigen::Index off = 0;
      for (auto p : parts) {
        const auto w = t.value(p).cols();
        t.acc(p, t.nodes_[out.id].grad.middleCols(off, w));
        off += w;
      }
    };
    return out;
  }

  // Single row as a 1 x c matrix.
  Var row(Var x, Eigen::Index r) {
    Var out = push(value(x).row(r), {});
    nodes_[out.id].backward = [x, r, out](Tape& t) {
      Matrix g = Matrix::Zero(t.value(x).rows(), t.value(x).cols());
      g.row(r) = t.nodes_[out.id].grad.row(0);
      t.acc(x, g);
    };
    return out;
  }

  // Mean over rows [start, rows) as a 1 x c matrix.
  Var mean_rows(Var x, Eigen::Index start = 0) {
    const Eigen::Index n = value(x).rows() - start;
    Var out = push(value(x).bottomRows(n).colwise().mean(), {});
    nodes_[out.id].backward = [x, start, n, out](Tape& t) {
      Matrix g = Matrix::Zero(t.value(x).rows(), t.value(x).cols());
      g.bottomRows(n).rowwise() =
          t.nodes_[out.id].grad.row(0) / static_cast<double>(n);
      t.acc(x, g);
    };
    return out;
  }

  // Seeds d(output) and propagates to every node, then adds parameter
  // gradients into `param_grads` (same layout as the bound ParamSet).
  void backward(Var output, const Matrix& seed, ParamSet& param_grads) {
    for (auto& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
    nodes_[output.id].grad = seed;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward) n.backward(*this);
      if (n.param_index < 0) continue;
      Matrix& target = param_grads[static_cast<std::size_t>(n.param_index)].value;
      if (n.gather.empty()) {
        target += n.grad;
      } else {
        for (std::size_t r = 0; r < n.gather.size(); ++r)
          target.row(static_cast<Eigen::Index>(n.gather[r])) +=
              n.grad.row(static_cast<Eigen::Index>(r));
      }
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&)> backward;
    long param_index = -1;
    std::vector<std::size_t> gather;
  };

  Var push(Matrix value, std::function<void(Tape&)> backward) {
    nodes_.push_back({std::move(value), Matrix(), std::move(backward), -1, {}});
    return Var{nodes_.size() - 1};
  }

  void acc(Var v, const Matrix& g) { nodes_[v.id].grad += g; }

  std::vector<Node> nodes_;
};

}  // namespace coherence
