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

// Self-supervision dataset construction: permuted-document instances with
// per-positive uniqueness, sentence-intrusion instances, and adapters that
// turn rated or judged texts into evaluation pairs.

#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "coherence/common.hpp"
#include "coherence/corpus.hpp"

namespace coherence {

// A reordering of a positive document's sentences, stored as indices.
struct PermutationRecord {
  std::vector<std::size_t> order;

  bool is_identity() const {
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i] != i) return false;
    return true;
  }
  bool is_permutation_of(std::size_t n) const {
    if (order.size() != n) return false;
    std::vector<bool> seen(n, false);
    for (auto i : order) {
      if (i >= n || seen[i]) return false;
      seen[i] = true;
    }
    return true;
  }
  auto operator<=>(const PermutationRecord&) const = default;
};

using PermutationSet = std::set<PermutationRecord>;

enum class NegativeKind { kPermutation, kIntrusion };

inline std::string to_string(NegativeKind k) {
  return k == NegativeKind::kPermutation ? "permutation" : "intrusion";
}

inline Document apply_permutation(const Document& doc,
                                  const PermutationRecord& perm) {
  if (!perm.is_permutation_of(doc.size()))
    throw ShapeMismatch("permutation does not match document '" + doc.id + "'");
  Document out;
  out.id = doc.id + "#p";
  for (std::size_t i = 0; i < perm.order.size(); ++i) {
    if (i) out.id += '-';
    out.id += std::to_string(perm.order[i]);
    out.sentences.push_back(doc.sentences[perm.order[i]]);
  }
  return out;
}

struct TrainingInstance {
  Document positive;
  NegativeKind kind = NegativeKind::kPermutation;
  std::size_t repetition = 0;
  std::vector<PermutationRecord> orders;  // kind == kPermutation
  std::vector<Document> negative_docs;    // kind == kIntrusion

  std::size_t negative_count() const {
    return kind == NegativeKind::kPermutation ? orders.size()
                                              : negative_docs.size();
  }
  Document negative(std::size_t i) const {
    return kind == NegativeKind::kPermutation
               ? apply_permutation(positive, orders.at(i))
               : negative_docs.at(i);
  }
};

enum class Label { kA, kB, kTie };

inline Label parse_label(const std::string& s) {
  if (s == "a") return Label::kA;
  if (s == "b") return Label::kB;
  if (s == "tie") return Label::kTie;
  throw DataError("unknown judgment label '" + s + "'");
}

inline std::string to_string(Label l) {
  return l == Label::kA ? "a" : l == Label::kB ? "b" : "tie";
}

// A (positive, negative) evaluation pair. For judged pairs, "a" refers to the
// `positive` slot and "b" to the `negative` slot.
struct EvalPair {
  std::string pair_id;
  Document positive;
  Document negative;
  std::vector<Label> annotator_labels;
  std::optional<std::string> category;
  // Gold tie (equal mean ratings); excluded from accuracy unless kept.
  bool tied = false;
};

// ---------------------------------------------------------------------------
// Permutation sampling

// n! - 1, saturating at uint64 max.
inline std::uint64_t permutation_pool_size(std::size_t n) {
  std::uint64_t f = 1;
  for (std::size_t i = 2; i <= n; ++i) {
    if (f > std::numeric_limits<std::uint64_t>::max() / i)
      return std::numeric_limits<std::uint64_t>::max();
    f *= i;
  }
  return f - 1;
}

// Draws `count` distinct non-identity permutations of the document's
// sentences that are not in `already_used`. Throws PoolExhausted when the
// request cannot be met.
inline std::vector<PermutationRecord> sample_permutations(
    const Document& doc, std::size_t count, const PermutationSet& already_used,
    Rng& rng) {
  const std::size_t n = doc.size();
  const std::uint64_t pool = permutation_pool_size(n);
  const std::uint64_t wanted =
      static_cast<std::uint64_t>(count) + already_used.size();
  if (wanted > pool)
    throw PoolExhausted(doc.id, "requested " + std::to_string(count) +
                                    " with " +
                                    std::to_string(already_used.size()) +
                                    " used, but only " + std::to_string(pool) +
                                    " non-identity permutations exist");
  if (count == 0) return {};

  std::vector<PermutationRecord> out;
  out.reserve(count);
  // Dense requests enumerate the remaining pool; sparse ones use rejection.
  if (pool <= 40319 && wanted * 2 > pool) {
    std::vector<PermutationRecord> remaining;
    PermutationRecord p;
    p.order.resize(n);
    std::iota(p.order.begin(), p.order.end(), std::size_t{0});
    while (std::next_permutation(p.order.begin(), p.order.end()))
      if (!already_used.contains(p)) remaining.push_back(p);
    for (auto idx : rng.sample_without_replacement(remaining.size(), count))
      out.push_back(remaining[idx]);
    return out;
  }
  PermutationSet chosen;
  PermutationRecord p;
  p.order.resize(n);
  while (out.size() < count) {
    std::iota(p.order.begin(), p.order.end(), std::size_t{0});
    rng.shuffle(p.order.begin(), p.order.end());
    if (p.is_identity() || already_used.contains(p) || chosen.contains(p))
      continue;
    chosen.insert(p);
    out.push_back(p);
  }
  return out;
}

// One instance per (positive, repetition), each holding
// `negatives_per_instance` permutations that are unique across all of the
// positive's repetitions. Repetitions that cannot be filled are dropped with a
// warning. Repetition r of document d draws from stream (seed, d.id, r).
inline std::vector<TrainingInstance> build_permuted_dataset(
    const Corpus& corpus, std::size_t repetitions,
    std::size_t negatives_per_instance, std::uint64_t seed) {
  std::vector<TrainingInstance> out;
  if (negatives_per_instance == 0)
    throw std::invalid_argument("negatives_per_instance must be >= 1");
  for (const auto& doc : corpus.documents) {
    const std::uint64_t pool = permutation_pool_size(doc.size());
    PermutationSet used;
    std::size_t built = 0;
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      if (used.size() + negatives_per_instance > pool) break;
      Rng rng = stream(seed, "permute", doc.id, rep);
      TrainingInstance inst;
      inst.positive = doc;
      inst.kind = NegativeKind::kPermutation;
      inst.repetition = rep;
      inst.orders = sample_permutations(doc, negatives_per_instance, used, rng);
      used.insert(inst.orders.begin(), inst.orders.end());
      out.push_back(std::move(inst));
      ++built;
    }
    if (built < repetitions)
      warn("document '" + doc.id + "' (n=" + std::to_string(doc.size()) +
           ") has only " + std::to_string(pool) +
           " non-identity permutations; built " + std::to_string(built) +
           " of " + std::to_string(repetitions) + " instances of width " +
           std::to_string(negatives_per_instance));
  }
  return out;
}

// Candidate pool for hard-negative mining: h unique permutations per instance.
inline std::vector<TrainingInstance> build_mining_dataset(
    const Corpus& corpus, std::size_t repetitions, std::size_t h,
    std::uint64_t seed) {
  return build_permuted_dataset(corpus, repetitions, h, seed);
}

// ---------------------------------------------------------------------------
// Sentence intrusion

enum class IntrusionSimilarity { kRandom, kLexicalOverlap };

namespace detail {

inline const std::unordered_set<std::string>& stopwords() {
  static const std::unordered_set<std::string> words = {
      "a",     "an",   "the",  "and",   "or",    "but",  "if",   "of",
      "to",    "in",   "on",   "at",    "by",    "for",  "with", "from",
      "as",    "is",   "was",  "were",  "are",   "be",   "been", "it",
      "its",   "he",   "she",  "they",  "them",  "his",  "her",  "their",
      "this",  "that", "these", "those", "i",    "we",   "you",  "not",
      "had",   "has",  "have", "did",   "do",    "so",   "then", "than",
      "there", "which", "who", "what",  "when",  "where", "all", "also"};
  return words;
}

inline std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

inline std::set<std::string> content_words(std::string_view text) {
  std::set<std::string> out;
  for (auto& w : detail::words_of(text))
    if (!detail::stopwords().contains(w)) out.insert(std::move(w));
  return out;
}

// Number of distinct content words of `candidate` found in `context`.
inline std::size_t lexical_overlap(const std::set<std::string>& context,
                                   std::string_view candidate) {
  std::size_t n = 0;
  for (const auto& w : content_words(candidate)) n += context.contains(w);
  return n;
}

// One intrusion negative per positive: a uniformly chosen sentence is
// replaced by a sentence from another document, picked uniformly or by
// highest content-word overlap with the rest of the positive (uniform
// tie-breaking).
inline std::vector<TrainingInstance> build_intrusion_dataset(
    const Corpus& corpus, IntrusionSimilarity similarity, std::uint64_t seed) {
  if (corpus.size() < 2)
    throw DataError("intrusion generation needs at least 2 documents");
  std::vector<TrainingInstance> out;
  for (std::size_t d = 0; d < corpus.size(); ++d) {
    const Document& doc = corpus.documents[d];
    Rng rng = stream(seed, "intrude", doc.id);
    const std::size_t pos = rng.uniform_below(doc.size());
    const std::string replaced = trim(doc.sentences[pos]);

    std::set<std::string> context;
    if (similarity == IntrusionSimilarity::kLexicalOverlap)
      for (std::size_t i = 0; i < doc.size(); ++i)
        if (i != pos) {
          auto w = content_words(doc.sentences[i]);
          context.insert(w.begin(), w.end());
        }

    std::vector<const std::string*> best;
    std::size_t best_score = 0;
    for (std::size_t o = 0; o < corpus.size(); ++o) {
      if (o == d) continue;
      for (const auto& s : corpus.documents[o].sentences) {
        if (trim(s) == replaced) continue;
        std::size_t score = similarity == IntrusionSimilarity::kLexicalOverlap
                                ? lexical_overlap(context, s)
                                : 0;
        if (best.empty() || score > best_score) {
          best.clear();
          best_score = score;
        }
        if (score == best_score) best.push_back(&s);
      }
    }
    if (best.empty()) {
      warn("no replacement sentence available for '" + doc.id + "'");
      continue;
    }
    TrainingInstance inst;
    inst.positive = doc;
    inst.kind = NegativeKind::kIntrusion;
    Document neg = doc;
    neg.id = doc.id + "#i" + std::to_string(pos);
    neg.sentences[pos] = *best[rng.uniform_below(best.size())];
    inst.negative_docs.push_back(std::move(neg));
    out.push_back(std::move(inst));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation-pair adapters

struct RatedText {
  std::string key;  // source article / prompt shared by comparable texts
  Document doc;
  std::vector<double> ratings;
};

// Every unordered pair of texts under the same key becomes one EvalPair whose
// positive has the higher mean rating. Equal means yield a tie-flagged pair.
inline std::vector<EvalPair> pair_from_ratings(
    const std::vector<RatedText>& texts) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RatedText*>> groups;
  for (const auto& t : texts) {
    if (t.ratings.empty())
      throw DataError("text '" + t.doc.id + "' has no ratings");
    auto [it, inserted] = groups.try_emplace(t.key);
    if (inserted) order.push_back(t.key);
    it->second.push_back(&t);
  }
  auto mean = [](const std::vector<double>& r) {
    return std::accumulate(r.begin(), r.end(), 0.0) /
           static_cast<double>(r.size());
  };
  std::vector<EvalPair> out;
  for (const auto& key : order) {
    const auto& group = groups[key];
    if (group.size() < 2) {
      warn("key '" + key + "' has fewer than 2 texts, skipped");
      continue;
    }
    for (std::size_t i = 0; i < group.size(); ++i)
      for (std::size_t j = i + 1; j < group.size(); ++j) {
        const double mi = mean(group[i]->ratings), mj = mean(group[j]->ratings);
        EvalPair p;
        p.pair_id = key + ":" + group[i]->doc.id + "|" + group[j]->doc.id;
        p.tied = mi == mj;
        const bool first_wins = mi >= mj;
        p.positive = first_wins ? group[i]->doc : group[j]->doc;
        p.negative = first_wins ? group[j]->doc : group[i]->doc;
        out.push_back(std::move(p));
      }
  }
  return out;
}

enum class PairSchema { kGeneric, kJudgments, kProbes };

inline nlohmann::json eval_pair_to_json(const EvalPair& p) {
  nlohmann::json j{{"pair_id", p.pair_id},
                   {"pos", document_to_json(p.positive)},
                   {"neg", document_to_json(p.negative)}};
  if (p.category) j["category"] = *p.category;
  if (!p.annotator_labels.empty()) {
    auto& labels = j["labels"] = nlohmann::json::array();
    for (auto l : p.annotator_labels) labels.push_back(to_string(l));
  }
  if (p.tied) j["tie"] = true;
  return j;
}

namespace detail {

inline Document pair_document(const nlohmann::json& j, const std::string& id) {
  if (!j.is_object()) throw DataError("document slot is not an object");
  nlohmann::json copy = j;
  if (!copy.contains("id")) copy["id"] = id;
  return document_from_json(copy);
}

inline EvalPair parse_eval_pair(const nlohmann::json& j, PairSchema schema) {
  if (!j.is_object()) throw DataError("record is not an object");
  if (!j.contains("pair_id") || !j["pair_id"].is_string())
    throw DataError("missing string field 'pair_id'");
  if (!j.contains("pos") || !j.contains("neg"))
    throw DataError("missing 'pos' or 'neg'");
  EvalPair p;
  p.pair_id = j["pair_id"].get<std::string>();
  p.positive = pair_document(j["pos"], p.pair_id + "/pos");
  p.negative = pair_document(j["neg"], p.pair_id + "/neg");
  if (p.positive.sentences == p.negative.sentences)
    throw DataError("positive and negative documents are identical");
  if (j.contains("category")) {
    if (!j["category"].is_string()) throw DataError("'category' must be a string");
    p.category = j["category"].get<std::string>();
  }
  if (j.contains("labels")) {
    if (!j["labels"].is_array()) throw DataError("'labels' must be an array");
    for (const auto& l : j["labels"]) {
      if (!l.is_string()) throw DataError("label must be a string");
      p.annotator_labels.push_back(parse_label(l.get<std::string>()));
    }
  }
  if (j.contains("tie")) p.tied = j["tie"].get<bool>();
  if (schema == PairSchema::kProbes && !p.category)
    throw DataError("probe record lacks 'category'");
  if (schema == PairSchema::kJudgments && p.annotator_labels.empty())
    throw DataError("judgment record lacks 'labels'");
  return p;
}

}  // namespace detail

// Reads an eval-pair JSON-lines file. Any schema violation is fatal and the
// error names the offending line.
inline std::vector<EvalPair> load_eval_pairs(const std::string& path,
                                             PairSchema schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read pair file: " + path);
  std::vector<EvalPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(
          detail::parse_eval_pair(nlohmann::json::parse(line), schema));
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_eval_pairs(const std::vector<EvalPair>& pairs,
                             std::ostream& out) {
  for (const auto& p : pairs) out << eval_pair_to_json(p).dump() << "\n";
}

// Permuted-document evaluation pairs: each positive against `per_doc` of its
// own unique permutations.
inline std::vector<EvalPair> make_permuted_pairs(const Corpus& corpus,
                                                 std::size_t per_doc,
                                                 std::uint64_t seed) {
  std::vector<EvalPair> out;
  for (const auto& doc : corpus.documents) {
    const auto avail = permutation_pool_size(doc.size());
    const std::size_t k =
        static_cast<std::size_t>(std::min<std::uint64_t>(per_doc, avail));
    Rng rng = stream(seed, "eval-pairs", doc.id);
    auto perms = sample_permutations(doc, k, {}, rng);
    for (std::size_t i = 0; i < perms.size(); ++i) {
      EvalPair p;
      p.pair_id = doc.id + "/" + std::to_string(i);
      p.positive = doc;
      p.negative = apply_permutation(doc, perms[i]);
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instance files

inline nlohmann::json instance_to_json(const TrainingInstance& inst) {
  nlohmann::json j{{"positive_id", inst.positive.id},
                   {"repetition", inst.repetition},
                   {"negative_kind", to_string(inst.kind)}};
  if (inst.kind == NegativeKind::kPermutation) {
    auto& orders = j["orders"] = nlohmann::json::array();
    for (const auto& o : inst.orders) orders.push_back(o.order);
  } else {
    auto& docs = j["negative_docs"] = nlohmann::json::array();
    for (const auto& d : inst.negative_docs) docs.push_back(document_to_json(d));
  }
  return j;
}

inline void write_instances(const std::vector<TrainingInstance>& instances,
                            std::ostream& out) {
  for (const auto& inst : instances) out << instance_to_json(inst).dump() << "\n";
}

// Reads instances, resolving positive ids against `positives`.
inline std::vector<TrainingInstance> load_instances(const std::string& path,
                                                    const Corpus& positives) {
  std::unordered_map<std::string, const Document*> by_id;
  for (const auto& d : positives.documents) by_id[d.id] = &d;
  std::ifstream in(path);
  if (!in) throw DataError("cannot read instance file: " + path);
  std::vector<TrainingInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      TrainingInstance inst;
      const auto pid = j.at("positive_id").get<std::string>();
      auto it = by_id.find(pid);
      if (it == by_id.end()) throw DataError("unknown positive_id '" + pid + "'");
      inst.positive = *it->second;
      inst.repetition = j.at("repetition").get<std::size_t>();
      const auto kind = j.at("negative_kind").get<std::string>();
      if (kind == "permutation") {
        inst.kind = NegativeKind::kPermutation;
        for (const auto& o : j.at("orders")) {
          PermutationRecord r{o.get<std::vector<std::size_t>>()};
          if (!r.is_permutation_of(inst.positive.size()) || r.is_identity())
            throw DataError("invalid permutation record");
          inst.orders.push_back(std::move(r));
        }
      } else if (kind == "intrusion") {
        inst.kind = NegativeKind::kIntrusion;
        for (const auto& d : j.at("negative_docs"))
          inst.negative_docs.push_back(document_from_json(d));
      } else {
        throw DataError("unknown negative_kind '" + kind + "'");
      }
      out.push_back(std::move(inst));
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace coherence
