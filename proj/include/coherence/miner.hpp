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

// Local hard-negative ranking. Training is split into blocks of x gradient
// steps. The first block trains on N randomly chosen candidates per instance;
// after each block, the current model scores all h candidates of every
// instance in the next block and keeps the N highest-scoring ones.

#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "coherence/common.hpp"
#include "coherence/scorer.hpp"
#include "coherence/taskgen.hpp"

namespace coherence {

struct MinerConfig {
  std::size_t h = 50;   // candidates per instance
  std::size_t n = 5;    // selected per instance
  std::size_t x = 200;  // block length in gradient steps

  void validate() const {
    if (n < 1 || n > h) throw UsageError("miner requires 1 <= N <= h");
    if (x < 1) throw UsageError("miner block length must be >= 1");
  }
};

struct MiningState {
  std::size_t block_index = 0;
  // Selected candidate indices for each instance of the pending block, in
  // block order.
  std::vector<std::vector<std::size_t>> selections;

  bool operator==(const MiningState&) const = default;
};

// Indices of the n highest scores, descending; equal scores keep the lower
// index first.
inline std::vector<std::size_t> top_n_by_score(std::span<const double> scores,
                                               std::size_t n) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  idx.resize(std::min(n, idx.size()));
  return idx;
}

using CandidateScorer = ScoreFn;

inline std::vector<double> score_candidates(const CandidateScorer& score,
                                            const TrainingInstance& instance) {
  std::vector<double> scores(instance.negative_count());
  for (std::size_t i = 0; i < scores.size(); ++i)
    scores[i] = score(instance.negative(i));
  return scores;
}

inline std::vector<std::size_t> rank_and_select_indices(
    const CandidateScorer& score, const TrainingInstance& instance,
    std::size_t n) {
  auto scores = score_candidates(score, instance);
  return top_n_by_score(scores, n);
}

// Scores every candidate in inference mode and keeps the top n.
inline std::vector<std::size_t> rank_and_select_indices(
    const Scorer& scorer, const TrainingInstance& instance, std::size_t n) {
  return rank_and_select_indices(
      [&](const Document& d) { return scorer.score(d); }, instance, n);
}

inline std::vector<Document> rank_and_select(const Scorer& scorer,
                                             const TrainingInstance& instance,
                                             std::size_t n) {
  std::vector<Document> out;
  for (auto i : rank_and_select_indices(scorer, instance, n))
    out.push_back(instance.negative(i));
  return out;
}

// Block 0: n candidates per instance uniformly without replacement. An
// instance with fewer than n candidates gets an empty selection and a warning.
inline MiningState init_block_random(
    std::span<const TrainingInstance* const> instances, std::size_t n, Rng& rng) {
  MiningState state;
  for (const auto* inst : instances) {
    if (inst->negative_count() < n) {
      warn("instance of '" + inst->positive.id + "' has " +
           std::to_string(inst->negative_count()) + " candidates, fewer than " +
           std::to_string(n) + "; dropped from mining");
      state.selections.emplace_back();
      continue;
    }
    state.selections.push_back(rng.sample_without_replacement(inst->negative_count(), n));
  }
  return state;
}

inline MiningState init_block_random(const std::vector<TrainingInstance>& instances,
                                     std::size_t n, Rng& rng) {
  std::vector<const TrainingInstance*> ptrs;
  for (const auto& i : instances) ptrs.push_back(&i);
  return init_block_random(ptrs, n, rng);
}

// Selections for the next block, computed from the scorer as it stands after
// training on the current block.
inline MiningState advance(const MiningState& state, const CandidateScorer& score,
                           std::span<const TrainingInstance* const> next_block,
                           std::size_t n) {
  MiningState next;
  next.block_index = state.block_index + 1;
  for (const auto* inst : next_block)
    next.selections.push_back(rank_and_select_indices(score, *inst, n));
  return next;
}

inline MiningState advance(const MiningState& state, const Scorer& scorer,
                           std::span<const TrainingInstance* const> next_block,
                           std::size_t n) {
  return advance(
      state, [&](const Document& d) { return scorer.score(d); }, next_block, n);
}

inline MiningState advance(const MiningState& state, const Scorer& scorer,
                           const std::vector<TrainingInstance>& next_block,
                           std::size_t n) {
  std::vector<const TrainingInstance*> ptrs;
  for (const auto& i : next_block) ptrs.push_back(&i);
  return advance(state, scorer, ptrs, n);
}

}  // namespace coherence
