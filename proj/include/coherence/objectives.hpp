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

// Training objectives with closed-form gradients:
//
//   pairwise:     max(0, tau - s+ + s-)
//   contrastive:  -log( e^{s+} / (e^{s+} + sum_j e^{s-_j - tau}) )
//   momentum:     same softmax form over cosine similarities c+ = cos(z+, z+_m)
//                 and c-_j = cos(z+_m, q_j); z+_m and q_j are constants
//   combined:     lambda * L_contrastive + (1 - lambda) * L_momentum

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coherence/tape.hpp"

namespace coherence {

struct MarginConfig {
  double tau = 0.1;
};

namespace detail {

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v))
    throw std::invalid_argument(std::string(what) + " is not finite");
}

inline void require_margin(double tau) {
  require_finite(tau, "margin");
  if (tau < 0.0) throw std::invalid_argument("margin must be >= 0");
}

// Softmax-cross-entropy of `logits` against index 0, plus the softmax.
inline double nll_first(std::span<const double> logits, std::vector<double>& p) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  p.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) sum += (p[i] = std::exp(logits[i] - m));
  for (auto& v : p) v /= sum;
  return m + std::log(sum) - logits[0];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pairwise ranking

struct PairwiseLoss {
  double value = 0.0;
  double d_pos = 0.0;
  double d_neg = 0.0;
};

// Subgradient at the hinge kink is 0.
inline PairwiseLoss pairwise_loss_grad(double s_pos, double s_neg, double tau) {
  detail::require_finite(s_pos, "positive score");
  detail::require_finite(s_neg, "negative score");
  detail::require_margin(tau);
  const double margin = tau - s_pos + s_neg;
  if (margin > 0.0) return {margin, -1.0, 1.0};
  return {0.0, 0.0, 0.0};
}

inline double pairwise_loss(double s_pos, double s_neg, double tau) {
  return pairwise_loss_grad(s_pos, s_neg, tau).value;
}

// ---------------------------------------------------------------------------
// Margin contrastive loss

struct ContrastiveLoss {
  double value = 0.0;
  double d_pos = 0.0;
  std::vector<double> d_negs;
};

inline ContrastiveLoss contrastive_loss_grad(double s_pos,
                                             std::span<const double> s_negs,
                                             double tau) {
  if (s_negs.empty())
    throw std::invalid_argument("contrastive loss needs at least one negative");
  detail::require_finite(s_pos, "positive score");
  detail::require_margin(tau);
  std::vector<double> logits;
  logits.reserve(s_negs.size() + 1);
  logits.push_back(s_pos);
  for (double s : s_negs) {
    detail::require_finite(s, "negative score");
    logits.push_back(s - tau);
  }
  std::vector<double> p;
  ContrastiveLoss out;
  out.value = detail::nll_first(logits, p);
  out.d_pos = p[0] - 1.0;
  out.d_negs.assign(p.begin() + 1, p.end());
  return out;
}

inline double contrastive_loss(double s_pos, std::span<const double> s_negs,
                               double tau) {
  return contrastive_loss_grad(s_pos, s_negs, tau).value;
}

inline double contrastive_loss(double s_pos, std::initializer_list<double> s_negs,
                               double tau) {
  return contrastive_loss(s_pos, std::span<const double>(s_negs.begin(), s_negs.size()),
                          tau);
}

// ---------------------------------------------------------------------------
// Cosine similarity

inline double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine of vectors with different dimensions");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("cosine of a zero vector is undefined");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// d cos(a, b) / d a.
inline Vector cosine_grad_first(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("cosine of a zero vector is undefined");
  const double c = a.dot(b) / (na * nb);
  return b / (na * nb) - c * a / (na * na);
}

// ---------------------------------------------------------------------------
// Momentum loss

struct MomentumSimilarities {
  double c_pos = 0.0;
  std::vector<double> c_negs;
};

struct MomentumLoss {
  double value = 0.0;
  MomentumSimilarities similarities;
  Vector d_z_pos;
  // Always zero: the momentum positive and queue entries are constants.
  Vector d_z_pos_m;
  std::vector<Vector> d_queue;
};

inline MomentumSimilarities momentum_similarities(const Vector& z_pos,
                                                  const Vector& z_pos_m,
                                                  std::span<const Vector> queue) {
  MomentumSimilarities s;
  s.c_pos = cosine(z_pos, z_pos_m);
  s.c_negs.reserve(queue.size());
  for (const auto& q : queue) s.c_negs.push_back(cosine(z_pos_m, q));
  return s;
}

inline MomentumLoss momentum_loss_grad(const Vector& z_pos, const Vector& z_pos_m,
                                       std::span<const Vector> queue, double tau) {
  if (queue.empty())
    throw std::invalid_argument("momentum loss over an empty queue is undefined");
  detail::require_margin(tau);
  if (!z_pos.allFinite() || !z_pos_m.allFinite())
    throw std::invalid_argument("non-finite representation");
  MomentumLoss out;
  out.similarities = momentum_similarities(z_pos, z_pos_m, queue);
  std::vector<double> logits{out.similarities.c_pos};
  for (double c : out.similarities.c_negs) logits.push_back(c - tau);
  std::vector<double> p;
  out.value = detail::nll_first(logits, p);
  out.d_z_pos = (p[0] - 1.0) * cosine_grad_first(z_pos, z_pos_m);
  out.d_z_pos_m = Vector::Zero(z_pos_m.size());
  out.d_queue.assign(queue.size(), Vector::Zero(z_pos_m.size()));
  return out;
}

inline double momentum_loss(const Vector& z_pos, const Vector& z_pos_m,
                            std::span<const Vector> queue, double tau) {
  return momentum_loss_grad(z_pos, z_pos_m, queue, tau).value;
}

// ---------------------------------------------------------------------------
// Combined objective

inline double combined_loss(double l_contrastive, double l_momentum, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("lambda must be in [0, 1]");
  return lambda * l_contrastive + (1.0 - lambda) * l_momentum;
}

}  // namespace coherence
