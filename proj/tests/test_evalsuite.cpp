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

#include <cmath>
#include <map>

#include "alpha_oracle.hpp"
#include "coherence/evalsuite.hpp"
#include "test_util.hpp"

namespace coherence {
namespace {

using testing_util::alpha_by_pairs;
using testing_util::make_doc;
using testing_util::random_rating_matrix;

// Scores documents by a lookup on their id; unknown ids score 0.
ScoreFn table_score(std::map<std::string, double> table) {
  return [table = std::move(table)](const Document& d) {
    auto it = table.find(d.id);
    return it == table.end() ? 0.0 : it->second;
  };
}

EvalPair pair(const std::string& id, const std::string& pos, const std::string& neg) {
  EvalPair p;
  p.pair_id = id;
  p.positive = make_doc(pos, 2);
  p.negative = make_doc(neg, 2);
  return p;
}

TEST(PairwiseAccuracy, CountsWinsLossesAndTies) {
  std::vector<EvalPair> pairs{pair("1", "a", "b"), pair("2", "c", "d"), pair("3", "e", "f"),
                              pair("4", "g", "h")};
  auto score = table_score({{"a", 2}, {"b", 1}, {"c", 0}, {"d", 1}, {"e", 3}, {"f", 3},
                            {"g", 5}, {"h", -5}});
  auto r = pairwise_accuracy(score, pairs);
  EXPECT_EQ(r.pair_count, 4u);
  EXPECT_EQ(r.correct, 2u);
  EXPECT_EQ(r.tie_count, 1u);
  EXPECT_EQ(r.error_count(), 1u);
  EXPECT_DOUBLE_EQ(*r.value, 0.5);
}

TEST(PairwiseAccuracy, GoldTiesExcludedUnlessKept) {
  std::vector<EvalPair> pairs{pair("1", "a", "b"), pair("2", "c", "d")};
  pairs[1].tied = true;
  auto score = table_score({{"a", 1}, {"c", 1}});
  auto r = pairwise_accuracy(score, pairs);
  EXPECT_EQ(r.pair_count, 1u);
  EXPECT_EQ(r.excluded_count, 1u);
  EXPECT_DOUBLE_EQ(*r.value, 1.0);
  auto kept = pairwise_accuracy(score, pairs, {.keep_ties = true});
  EXPECT_EQ(kept.pair_count, 2u);
  EXPECT_DOUBLE_EQ(*kept.value, 0.5);
}

TEST(PairwiseAccuracy, EmptyIsError) {
  EXPECT_THROW(pairwise_accuracy(table_score({}), {}), std::invalid_argument);
}

TEST(PairwiseAccuracy, InvariantUnderMonotoneTransform) {
  Rng rng(3);
  std::map<std::string, double> t;
  std::vector<EvalPair> pairs;
  for (int i = 0; i < 200; ++i) {
    const std::string a = "p" + std::to_string(i), b = "n" + std::to_string(i);
    t[a] = rng.normal();
    t[b] = rng.normal();
    pairs.push_back(pair(std::to_string(i), a, b));
  }
  std::map<std::string, double> u;
  for (auto& [k, v] : t) u[k] = std::exp(3.0 * v) - 7.0;
  EXPECT_EQ(*pairwise_accuracy(table_score(t), pairs).value,
            *pairwise_accuracy(table_score(u), pairs).value);
}

RatingMatrix from_rows(std::vector<std::vector<int>> rows) {
  // 0 marks a missing value.
  RatingMatrix m;
  for (auto& r : rows) {
    std::vector<std::optional<int>> out;
    for (int v : r) out.push_back(v == 0 ? std::nullopt : std::optional<int>(v));
    m.push_back(out);
  }
  return m;
}

TEST(Alpha, PublishedNominalExample) {
  // Four observers, twelve units, with missing values.
  auto m = from_rows({{1, 2, 3, 3, 2, 1, 4, 1, 2, 0, 0, 0},
                      {1, 2, 3, 3, 2, 2, 4, 1, 2, 5, 0, 3},
                      {0, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, 0},
                      {1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, 0}});
  EXPECT_NEAR(*krippendorff_alpha(m), 0.743, 5e-4);
  EXPECT_NEAR(*krippendorff_alpha(m), alpha_by_pairs(m), 1e-12);
}

TEST(Alpha, PerfectAgreementIsExactlyOne) {
  auto m = from_rows({{1, 2, 1, 2, 2}, {1, 2, 1, 2, 2}, {1, 2, 1, 0, 2}});
  EXPECT_EQ(*krippendorff_alpha(m), 1.0);
}

TEST(Alpha, SystematicDisagreementIsNegative) {
  auto m = from_rows({{1, 2, 1, 2, 1, 2}, {2, 1, 2, 1, 2, 1}});
  EXPECT_LT(*krippendorff_alpha(m), 0.0);
}

TEST(Alpha, UndefinedWithoutVariation) {
  auto m = from_rows({{1, 1, 1}, {1, 1, 1}});
  EXPECT_FALSE(krippendorff_alpha(m).has_value());
}

TEST(Alpha, Errors) {
  EXPECT_THROW(krippendorff_alpha(from_rows({{1, 2}})), std::invalid_argument);
  EXPECT_THROW(krippendorff_alpha(from_rows({{1, 0}, {0, 2}})), std::invalid_argument);
  EXPECT_THROW(krippendorff_alpha(from_rows({{1, 2}, {1}})), std::invalid_argument);
}

TEST(Alpha, MatchesPairwiseOracleOnRandomMatrices) {
  Rng rng(17);
  int compared = 0;
  for (int t = 0; t < 200; ++t) {
    auto m = random_rating_matrix(rng);
    auto a = krippendorff_alpha(m);
    const double o = alpha_by_pairs(m);
    if (!a) {
      EXPECT_TRUE(std::isnan(o));
      continue;
    }
    EXPECT_NEAR(*a, o, 1e-10);
    ++compared;
  }
  EXPECT_GT(compared, 150);
}

TEST(Alpha, InvariantToRaterAndItemOrder) {
  Rng rng(18);
  for (int t = 0; t < 20; ++t) {
    auto m = random_rating_matrix(rng);
    auto a = krippendorff_alpha(m);
    if (!a) continue;
    auto r = m;
    std::reverse(r.begin(), r.end());
    for (auto& row : r) std::reverse(row.begin(), row.end());
    EXPECT_NEAR(*krippendorff_alpha(r), *a, 1e-12);
  }
}

EvalPair judged(const std::string& id, std::vector<Label> labels) {
  auto p = pair(id, id + "a", id + "b");
  p.annotator_labels = std::move(labels);
  return p;
}

TEST(Agreement, ModelAsRaterMatchesManualMatrix) {
  using L = Label;
  std::vector<EvalPair> pairs{judged("1", {L::kA, L::kA}), judged("2", {L::kB, L::kA}),
                              judged("3", {L::kB, L::kB}), judged("4", {L::kTie, L::kTie})};
  auto score = table_score({{"1a", 1}, {"1b", 0}, {"2a", 1}, {"2b", 0}, {"3a", 0}, {"3b", 1}});
  auto r = model_agreement(score, pairs);
  EXPECT_EQ(r.pair_count, 3u);
  EXPECT_EQ(r.excluded_count, 1u);
  auto m = from_rows({{1, 2, 2}, {1, 1, 2}, {1, 1, 2}});
  EXPECT_NEAR(*r.value, *krippendorff_alpha(m), 1e-15);
}

TEST(Agreement, ModelTiesBecomeMissing) {
  using L = Label;
  std::vector<EvalPair> pairs{judged("1", {L::kA, L::kA}), judged("2", {L::kB, L::kB}),
                              judged("3", {L::kA, L::kB})};
  auto score = table_score({{"1a", 1}, {"2b", 1}});  // pair 3 ties at 0
  auto r = model_agreement(score, pairs);
  EXPECT_EQ(r.tie_count, 1u);
  auto m = from_rows({{1, 2, 1}, {1, 2, 2}, {1, 2, 0}});
  EXPECT_NEAR(*r.value, *krippendorff_alpha(m), 1e-15);
}

TEST(Agreement, ModelVsMajority) {
  using L = Label;
  std::vector<EvalPair> pairs{judged("1", {L::kA, L::kA, L::kB}),
                              judged("2", {L::kB, L::kB, L::kA}),
                              judged("3", {L::kA, L::kB})};
  auto score = table_score({{"1a", 1}, {"2b", 1}, {"3a", 1}});
  auto r = model_agreement(score, pairs, AgreementMode::kModelVsMajority);
  auto m = from_rows({{1, 2, 0}, {1, 2, 1}});
  EXPECT_NEAR(*r.value, *krippendorff_alpha(m), 1e-15);
}

TEST(Probe, GroupsByCategoryWithExactDenominators) {
  std::vector<EvalPair> pairs;
  std::map<std::string, double> t;
  auto add = [&](const std::string& cat, int count, int correct) {
    for (int i = 0; i < count; ++i) {
      const std::string id = cat + std::to_string(i);
      auto p = pair(id, id + "+", id + "-");
      p.category = cat;
      t[id + "+"] = i < correct ? 1.0 : -1.0;
      pairs.push_back(p);
    }
  };
  add("tense", 100, 80);
  add("pronoun", 95, 76);
  add("connective", 100, 90);
  auto r = probe_accuracy(table_score(t), pairs);
  ASSERT_EQ(r.breakdown.size(), 3u);
  EXPECT_EQ(r.breakdown["pronoun"].count, 95u);
  EXPECT_EQ(r.breakdown["pronoun"].correct, 76u);
  EXPECT_DOUBLE_EQ(r.breakdown["pronoun"].value, 76.0 / 95.0);
  EXPECT_DOUBLE_EQ(r.breakdown["tense"].value, 0.8);
  EXPECT_EQ(r.pair_count, 295u);
  EXPECT_NEAR(*r.value, (0.8 + 0.8 + 0.9) / 3.0, 1e-15);
  pairs[0].category.reset();
  EXPECT_THROW(probe_accuracy(table_score(t), pairs), std::invalid_argument);
}

TEST(Report, JsonRoundTripAndTable) {
  EvalReport r;
  r.dataset = "dev";
  r.metric = "pairwise_accuracy";
  r.value = 0.75;
  r.pair_count = 4;
  r.correct = 3;
  r.breakdown["x"] = {0.5, 2, 1, 0};
  auto back = eval_report_from_json(to_json(r));
  EXPECT_EQ(back.value, r.value);
  EXPECT_EQ(back.breakdown["x"].count, 2u);
  auto table = format_table(r);
  EXPECT_NE(table.find("75.00"), std::string::npos);
  EXPECT_NE(table.find("dev/x"), std::string::npos);
  r.metric = "krippendorff_alpha";
  r.value.reset();
  EXPECT_NE(format_table(r).find("undefined"), std::string::npos);
}

}  // namespace
}  // namespace coherence
