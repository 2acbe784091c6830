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

// Evaluation protocols: pairwise accuracy, nominal Krippendorff's alpha and
// model agreement with annotators, and per-category probe accuracy.

#pragma once

#include <cstdio>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "coherence/common.hpp"
#include "coherence/scorer.hpp"
#include "coherence/taskgen.hpp"

namespace coherence {

struct CategoryResult {
  double value = 0.0;
  std::size_t count = 0;
  std::size_t correct = 0;
  std::size_t ties = 0;
};

struct EvalReport {
  std::string dataset;
  std::string metric;
  // Empty when the metric is undefined (alpha with no label variation).
  std::optional<double> value;
  std::map<std::string, CategoryResult> breakdown;
  std::size_t pair_count = 0;      // pairs scored
  std::size_t correct = 0;
  std::size_t tie_count = 0;       // exact model-score ties, scored incorrect
  std::size_t excluded_count = 0;  // gold ties or unlabeled items left out
  std::string checkpoint_hash;
  std::string dataset_hash;

  std::size_t error_count() const { return pair_count - correct - tie_count; }
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j{{"dataset", r.dataset},
                   {"metric", r.metric},
                   {"pair_count", r.pair_count},
                   {"correct", r.correct},
                   {"tie_count", r.tie_count},
                   {"excluded_count", r.excluded_count},
                   {"checkpoint_hash", r.checkpoint_hash},
                   {"dataset_hash", r.dataset_hash}};
  j["value"] = r.value ? nlohmann::json(*r.value) : nlohmann::json(nullptr);
  auto& b = j["breakdown"] = nlohmann::json::object();
  for (const auto& [cat, c] : r.breakdown)
    b[cat] = {{"value", c.value}, {"count", c.count}, {"correct", c.correct},
              {"ties", c.ties}};
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  if (!j.at("value").is_null()) r.value = j.at("value").get<double>();
  r.pair_count = j.at("pair_count").get<std::size_t>();
  r.correct = j.value("correct", std::size_t{0});
  r.tie_count = j.at("tie_count").get<std::size_t>();
  r.excluded_count = j.at("excluded_count").get<std::size_t>();
  r.checkpoint_hash = j.value("checkpoint_hash", "");
  r.dataset_hash = j.value("dataset_hash", "");
  if (j.contains("breakdown"))
    for (const auto& [cat, c] : j["breakdown"].items())
      r.breakdown[cat] = {c.at("value").get<double>(), c.at("count").get<std::size_t>(),
                          c.at("correct").get<std::size_t>(),
                          c.at("ties").get<std::size_t>()};
  return r;
}

// Plain-text table: one row per category (if any) and an overall row.
// Accuracy metrics are printed as percentages, alpha as a raw coefficient.
inline std::string format_table(const EvalReport& r, const std::string& model = "model") {
  const bool percent = r.metric != "krippendorff_alpha";
  auto fmt = [&](std::optional<double> v) {
    if (!v) return std::string("undefined");
    std::ostringstream os;
    os << std::fixed << std::setprecision(percent ? 2 : 3) << (percent ? *v * 100.0 : *v);
    return os.str();
  };
  std::ostringstream os;
  os << std::left << std::setw(28) << "Model" << " | " << std::setw(28) << "Dataset"
     << " | " << std::setw(20) << "Metric" << " | " << std::setw(10) << "Value"
     << " | Pairs\n";
  os << std::string(100, '-') << "\n";
  for (const auto& [cat, c] : r.breakdown)
    os << std::setw(28) << model << " | " << std::setw(28) << (r.dataset + "/" + cat)
       << " | " << std::setw(20) << r.metric << " | " << std::setw(10) << fmt(c.value)
       << " | " << c.count << "\n";
  os << std::setw(28) << model << " | " << std::setw(28) << r.dataset << " | "
     << std::setw(20) << r.metric << " | " << std::setw(10) << fmt(r.value) << " | "
     << r.pair_count << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Pairwise accuracy

struct AccuracyOptions {
  // Gold-tied pairs are excluded unless kept, in which case they always
  // count as incorrect.
  bool keep_ties = false;
};

inline EvalReport pairwise_accuracy(const ScoreFn& score,
                                    const std::vector<EvalPair>& pairs,
                                    const AccuracyOptions& opts = {}) {
  if (pairs.empty()) throw std::invalid_argument("pairwise accuracy of an empty pair set");
  EvalReport r;
  r.metric = "pairwise_accuracy";
  for (const auto& p : pairs) {
    if (p.tied && !opts.keep_ties) {
      ++r.excluded_count;
      continue;
    }
    ++r.pair_count;
    const double sp = score(p.positive), sn = score(p.negative);
    if (sp == sn)
      ++r.tie_count;
    else if (sp > sn && !p.tied)
      ++r.correct;
  }
  if (r.pair_count == 0)
    throw std::invalid_argument("every pair was excluded as a gold tie");
  r.value = static_cast<double>(r.correct) / static_cast<double>(r.pair_count);
  return r;
}

inline EvalReport pairwise_accuracy(const Scorer& scorer,
                                    const std::vector<EvalPair>& pairs,
                                    const AccuracyOptions& opts = {}) {
  return pairwise_accuracy(score_fn(scorer), pairs, opts);
}

// ---------------------------------------------------------------------------
// Krippendorff's alpha (nominal)

// ratings[rater][item]; empty optional = missing.
using RatingMatrix = std::vector<std::vector<std::optional<int>>>;

// Coincidence-matrix formulation over pairable items (>= 2 ratings).
// Returns nullopt when alpha is undefined (a single label value overall).
// Throws on fewer than 2 raters or no pairable item.
inline std::optional<double> krippendorff_alpha(const RatingMatrix& ratings) {
  if (ratings.size() < 2) throw std::invalid_argument("alpha needs at least 2 raters");
  const std::size_t items = ratings.front().size();
  for (const auto& row : ratings)
    if (row.size() != items)
      throw std::invalid_argument("ragged rating matrix");

  std::map<int, std::size_t> index;
  for (const auto& row : ratings)
    for (const auto& v : row)
      if (v) index.try_emplace(*v, 0);
  std::size_t k = 0;
  for (auto& [label, i] : index) i = k++;

  std::vector<double> o_diag(k, 0.0), n_c(k, 0.0);
  double n_total = 0.0;
  std::size_t pairable = 0;
  std::vector<double> counts(k);
  for (std::size_t u = 0; u < items; ++u) {
    std::fill(counts.begin(), counts.end(), 0.0);
    double m = 0.0;
    for (const auto& row : ratings)
      if (row[u]) counts[index[*row[u]]] += 1.0, m += 1.0;
    if (m < 2.0) continue;
    ++pairable;
    // o_ck = sum_u (n_uc n_uk - [c == k] n_uc) / (m_u - 1); row sums give n_c.
    for (std::size_t c = 0; c < k; ++c) {
      o_diag[c] += counts[c] * (counts[c] - 1.0) / (m - 1.0);
      n_c[c] += counts[c];
    }
    n_total += m;
  }
  if (pairable == 0)
    throw std::invalid_argument("raters do not overlap on any item");
  double diag = 0.0, sq = 0.0;
  for (std::size_t c = 0; c < k; ++c) diag += o_diag[c], sq += n_c[c] * n_c[c];
  const double expected = n_total * n_total - sq;
  if (expected <= 0.0) return std::nullopt;
  return 1.0 - (n_total - 1.0) * (n_total - diag) / expected;
}

// ---------------------------------------------------------------------------
// Agreement with annotator judgments

enum class AgreementMode {
  kModelAsRater,   // annotators plus the model as one more rater
  kModelVsMajority // two raters: majority annotator label and the model
};

inline std::optional<int> label_code(Label l) {
  if (l == Label::kTie) return std::nullopt;
  return l == Label::kA ? 0 : 1;
}

// Builds the rater x item matrix used by model_agreement. Model ties become
// missing entries.
inline RatingMatrix agreement_matrix(const std::vector<EvalPair>& pairs,
                                     const std::vector<std::optional<int>>& model_labels,
                                     AgreementMode mode) {
  std::size_t raters = 0;
  for (const auto& p : pairs) raters = std::max(raters, p.annotator_labels.size());
  RatingMatrix m;
  if (mode == AgreementMode::kModelAsRater) {
    m.assign(raters + 1, std::vector<std::optional<int>>(pairs.size()));
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      for (std::size_t r = 0; r < pairs[i].annotator_labels.size(); ++r)
        m[r][i] = label_code(pairs[i].annotator_labels[r]);
      m[raters][i] = model_labels[i];
    }
  } else {
    m.assign(2, std::vector<std::optional<int>>(pairs.size()));
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      int a = 0, b = 0;
      for (auto l : pairs[i].annotator_labels) a += l == Label::kA, b += l == Label::kB;
      if (a != b) m[0][i] = a > b ? 0 : 1;
      m[1][i] = model_labels[i];
    }
  }
  return m;
}

inline std::vector<std::optional<int>> model_labels(const ScoreFn& score,
                                                    const std::vector<EvalPair>& pairs) {
  std::vector<std::optional<int>> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const double a = score(p.positive), b = score(p.negative);
    out.push_back(a > b ? std::optional<int>(0)
                        : a < b ? std::optional<int>(1) : std::nullopt);
  }
  return out;
}

inline EvalReport model_agreement(const ScoreFn& score,
                                  const std::vector<EvalPair>& judged_pairs,
                                  AgreementMode mode = AgreementMode::kModelAsRater) {
  std::vector<EvalPair> labeled;
  std::size_t excluded = 0;
  for (const auto& p : judged_pairs) {
    bool any = false;
    for (auto l : p.annotator_labels) any |= l != Label::kTie;
    if (any)
      labeled.push_back(p);
    else
      ++excluded;
  }
  if (labeled.empty()) throw std::invalid_argument("no pairs carry annotator labels");
  const auto labels = model_labels(score, labeled);
  EvalReport r;
  r.metric = "krippendorff_alpha";
  r.excluded_count = excluded;
  r.pair_count = labeled.size();
  for (const auto& l : labels) r.tie_count += !l.has_value();
  if (r.tie_count == labeled.size())
    throw std::invalid_argument("model scores tie on every judged pair");
  r.value = krippendorff_alpha(agreement_matrix(labeled, labels, mode));
  return r;
}

inline EvalReport model_agreement(const Scorer& scorer,
                                  const std::vector<EvalPair>& judged_pairs,
                                  AgreementMode mode = AgreementMode::kModelAsRater) {
  return model_agreement(score_fn(scorer), judged_pairs, mode);
}

// ---------------------------------------------------------------------------
// Linguistic probes

// Per-category pairwise accuracy; the report value is the macro average.
inline EvalReport probe_accuracy(const ScoreFn& score, const std::vector<EvalPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("probe accuracy of an empty pair set");
  std::map<std::string, std::vector<EvalPair>> groups;
  for (const auto& p : pairs) {
    if (!p.category) throw std::invalid_argument("probe pair '" + p.pair_id + "' has no category");
    groups[*p.category].push_back(p);
  }
  EvalReport r;
  r.metric = "probe_accuracy";
  double sum = 0.0;
  for (const auto& [cat, group] : groups) {
    EvalReport g = pairwise_accuracy(score, group);
    r.breakdown[cat] = {*g.value, g.pair_count, g.correct, g.tie_count};
    r.pair_count += g.pair_count;
    r.correct += g.correct;
    r.tie_count += g.tie_count;
    r.excluded_count += g.excluded_count;
    sum += *g.value;
  }
  r.value = sum / static_cast<double>(groups.size());
  return r;
}

inline EvalReport probe_accuracy(const Scorer& scorer, const std::vector<EvalPair>& pairs) {
  return probe_accuracy(score_fn(scorer), pairs);
}

}  // namespace coherence
