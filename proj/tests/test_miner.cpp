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

#include <gtest/gtest.h>

#include <map>

#include "coherence/miner.hpp"
#include "test_util.hpp"

namespace coherence {
namespace {

using testing_util::random_doc;

// Reference selection: repeatedly take the highest remaining score, lowest
// index first on ties.
std::vector<std::size_t> reference_top_n(const std::vector<double>& s, std::size_t n) {
  std::vector<bool> taken(s.size(), false);
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < n && k < s.size(); ++k) {
    std::size_t best = s.size();
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!taken[i] && (best == s.size() || s[i] > s[best])) best = i;
    taken[best] = true;
    out.push_back(best);
  }
  return out;
}

TEST(TopN, WorkedExample) {
  const std::vector<double> s{0.1, 0.9, 0.5, 0.7};
  EXPECT_EQ(top_n_by_score(s, 2), (std::vector<std::size_t>{1, 3}));
}

TEST(TopN, TiesPreferLowerIndex) {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.5, 0.9};
  EXPECT_EQ(top_n_by_score(s, 3), (std::vector<std::size_t>{1, 4, 0}));
}

TEST(TopN, NEqualsHReturnsAllSorted) {
  const std::vector<double> s{0.3, -1.0, 2.0};
  EXPECT_EQ(top_n_by_score(s, 3), (std::vector<std::size_t>{2, 0, 1}));
}

TEST(TopN, MatchesReferenceOnRandomScores) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const std::size_t h = 1 + rng.uniform_below(60);
    const std::size_t n = 1 + rng.uniform_below(h);
    std::vector<double> s(h);
    // Coarse values so ties are common.
    for (auto& v : s) v = static_cast<double>(rng.uniform_below(8)) / 4.0;
    EXPECT_EQ(top_n_by_score(s, n), reference_top_n(s, n));
  }
}

TEST(TopN, SelectedDominateUnselected) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s(50);
    for (auto& v : s) v = rng.normal();
    auto sel = top_n_by_score(s, 5);
    double min_sel = 1e300;
    for (auto i : sel) min_sel = std::min(min_sel, s[i]);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (std::find(sel.begin(), sel.end(), i) == sel.end()) {
        EXPECT_LE(s[i], min_sel);
      }
    }
  }
}

std::vector<TrainingInstance> make_instances(std::size_t docs, std::size_t h,
                                             std::uint64_t seed) {
  Rng rng(seed);
  Corpus c;
  for (std::size_t i = 0; i < docs; ++i)
    c.documents.push_back(random_doc("m" + std::to_string(i), 6, rng));
  return build_mining_dataset(c, 1, h, seed);
}

TEST(Miner, RankAndSelectUsesScorer) {
  auto instances = make_instances(3, 12, 1);
  // Score is a deterministic function of the candidate order.
  std::map<std::string, double> table;
  Rng rng(2);
  CandidateScorer score = [&](const Document& d) {
    auto [it, inserted] = table.try_emplace(d.id, 0.0);
    if (inserted) it->second = rng.normal();
    return it->second;
  };
  for (const auto& inst : instances) {
    auto scores = score_candidates(score, inst);
    EXPECT_EQ(rank_and_select_indices(score, inst, 5), reference_top_n(scores, 5));
  }
}

TEST(Miner, InitialBlockIsSeededAndValid) {
  auto instances = make_instances(5, 20, 3);
  Rng a = stream(42, "mine-init"), b = stream(42, "mine-init");
  auto s1 = init_block_random(instances, 5, a);
  auto s2 = init_block_random(instances, 5, b);
  EXPECT_EQ(s1, s2);
  EXPECT_EQ(s1.block_index, 0u);
  ASSERT_EQ(s1.selections.size(), 5u);
  for (const auto& sel : s1.selections) {
    ASSERT_EQ(sel.size(), 5u);
    std::set<std::size_t> uniq(sel.begin(), sel.end());
    EXPECT_EQ(uniq.size(), 5u);
    for (auto i : sel) EXPECT_LT(i, 20u);
  }
}

TEST(Miner, ShortPoolIsDroppedWithWarning) {
  auto instances = make_instances(2, 3, 4);
  Rng rng(1);
  ScopedLogCapture cap;
  auto s = init_block_random(instances, 5, rng);
  EXPECT_EQ(cap.count(), 2u);
  EXPECT_TRUE(s.selections[0].empty());
}

TEST(Miner, AdvanceRanksNextBlock) {
  auto instances = make_instances(4, 10, 5);
  CandidateScorer score = [](const Document& d) {
    // Prefers orders whose first sentence index is large.
    return static_cast<double>(d.id[d.id.find("#p") + 2] - '0');
  };
  std::vector<const TrainingInstance*> block{&instances[2], &instances[3]};
  MiningState s0;
  auto s1 = advance(s0, score, block, 3);
  EXPECT_EQ(s1.block_index, 1u);
  ASSERT_EQ(s1.selections.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k)
    EXPECT_EQ(s1.selections[k], reference_top_n(score_candidates(score, *block[k]), 3));
}

TEST(Miner, EmptyNextBlock) {
  MiningState s0;
  auto s1 = advance(s0, CandidateScorer([](const Document&) { return 0.0; }),
                    std::span<const TrainingInstance* const>{}, 5);
  EXPECT_TRUE(s1.selections.empty());
}

TEST(Miner, ConfigValidation) {
  MinerConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n = 51;
  EXPECT_THROW(c.validate(), UsageError);
  c.n = 0;
  EXPECT_THROW(c.validate(), UsageError);
}

}  // namespace
}  // namespace coherence
