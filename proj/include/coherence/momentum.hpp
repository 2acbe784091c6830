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

// Momentum encoder (an exponential moving average of the base encoder), the
// global FIFO queue of momentum-encoded negatives, and random contiguous
// slicing of positives.

#pragma once

#include <deque>
#include <span>
#include <string>
#include <vector>

#include "coherence/common.hpp"
#include "coherence/corpus.hpp"
#include "coherence/scorer.hpp"

namespace coherence {

class MomentumEncoder {
 public:
  MomentumEncoder() = default;
  // phi' starts as a copy of phi.
  MomentumEncoder(const Encoder& base, double mu) : encoder_(base), mu_(mu) {
    check_mu(mu);
  }

  const Encoder& encoder() const { return encoder_; }
  Encoder& encoder() { return encoder_; }
  const ParamSet& params() const { return encoder_.params(); }
  ParamSet& params() { return encoder_.params(); }
  double mu() const { return mu_; }

  EncoderOutput encode(const Document& doc) const { return encoder_.encode(doc); }

  static void check_mu(double mu) {
    if (!(mu >= 0.0 && mu < 1.0))
      throw std::invalid_argument("momentum coefficient must be in [0, 1)");
  }

 private:
  Encoder encoder_;
  double mu_ = 0.9999999;
};

inline MomentumEncoder init_momentum(const Scorer& base, double mu = 0.9999999) {
  return MomentumEncoder(base.encoder(), mu);
}

// phi' <- mu * phi' + (1 - mu) * phi, component-wise.
inline void momentum_update(ParamSet& target, const ParamSet& base, double mu) {
  MomentumEncoder::check_mu(mu);
  if (!target.same_shape(base))
    throw ShapeMismatch("momentum encoder and base encoder shapes differ");
  for (std::size_t i = 0; i < target.size(); ++i)
    target[i].value = mu * target[i].value + (1.0 - mu) * base[i].value;
}

inline void momentum_update(MomentumEncoder& m, const ParamSet& base) {
  momentum_update(m.params(), base, m.mu());
}

inline void momentum_update(MomentumEncoder& m, const ParamSet& base, double mu) {
  momentum_update(m.params(), base, mu);
}

// Fixed-capacity FIFO of detached d-dimensional representations.
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(std::size_t capacity, std::size_t dim)
      : capacity_(capacity), dim_(dim) {
    if (capacity == 0) throw std::invalid_argument("queue capacity must be >= 1");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::deque<Vector>& entries() const { return entries_; }

  // Appends in order, evicting the oldest entries beyond capacity.
  void enqueue(std::span<const Vector> reps) {
    for (const auto& r : reps)
      if (static_cast<std::size_t>(r.size()) != dim_)
        throw std::invalid_argument("queue entry has dimension " +
                                    std::to_string(r.size()) + ", expected " +
                                    std::to_string(dim_));
    for (const auto& r : reps) {
      entries_.push_back(r);
      if (entries_.size() > capacity_) entries_.pop_front();
    }
  }

  void enqueue(const Vector& rep) { enqueue(std::span<const Vector>(&rep, 1)); }

  std::vector<Vector> snapshot() const { return {entries_.begin(), entries_.end()}; }

  void restore(std::vector<Vector> entries) {
    if (entries.size() > capacity_)
      throw std::invalid_argument("restored queue exceeds capacity");
    entries_.assign(entries.begin(), entries.end());
  }

 private:
  std::size_t capacity_ = 1000;
  std::size_t dim_ = 0;
  std::deque<Vector> entries_;
};

inline void enqueue_negatives(NegativeQueue& q, std::span<const Vector> reps) {
  q.enqueue(reps);
}

// Sentences [a, a + L) with L uniform in [min_len, n] and a uniform in
// [0, n - L]. Throws if the document is shorter than min_len.
inline Document slice_positive(const Document& doc, Rng& rng,
                               std::size_t min_len = 4) {
  const std::size_t n = doc.size();
  if (n < min_len)
    throw std::invalid_argument("cannot slice document '" + doc.id + "' with " +
                                std::to_string(n) + " sentences (minimum " +
                                std::to_string(min_len) + ")");
  const auto len = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(n)));
  const auto start = static_cast<std::size_t>(rng.uniform_below(n - len + 1));
  Document out;
  out.id = doc.id + "#s" + std::to_string(start) + "-" + std::to_string(start + len);
  out.sentences.assign(doc.sentences.begin() + static_cast<std::ptrdiff_t>(start),
                       doc.sentences.begin() + static_cast<std::ptrdiff_t>(start + len));
  return out;
}

}  // namespace coherence
