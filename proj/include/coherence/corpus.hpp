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

// Document ingestion and preprocessing: length filter, sentence-granular
// truncation to a token budget, and block partitioning of long documents.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "coherence/common.hpp"

namespace coherence {

struct Document {
  std::string id;
  std::vector<std::string> sentences;

  std::size_t size() const { return sentences.size(); }
  bool operator==(const Document&) const = default;
};

enum class Split { kTrain, kDev, kTest };

struct Corpus {
  std::vector<Document> documents;
  Split split = Split::kTrain;
  // Malformed records skipped by load_corpus.
  std::size_t skipped = 0;

  std::size_t size() const { return documents.size(); }
};

enum class CorpusFormat { kJsonl, kPlainText };

inline std::string trim(std::string_view s) {
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

// Token counting interface used by preprocessing. The backbone's tokenizer
// can be plugged in here; the default splits on whitespace.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::size_t count(std::string_view text) const = 0;
};

class WhitespaceTokenizer final : public Tokenizer {
 public:
  std::size_t count(std::string_view text) const override {
    std::size_t n = 0;
    bool in_token = false;
    for (unsigned char c : text) {
      const bool space = std::isspace(c) != 0;
      if (!space && !in_token) ++n;
      in_token = !space;
    }
    return n;
  }
};

inline std::size_t token_count(const Document& doc, const Tokenizer& tok) {
  std::size_t n = 0;
  for (const auto& s : doc.sentences) n += tok.count(s);
  return n;
}

inline std::size_t token_count(const Document& doc) {
  return token_count(doc, WhitespaceTokenizer{});
}

// Throws DataError when the document breaks the Document invariants.
inline void validate(const Document& doc) {
  if (doc.id.empty()) throw DataError("document with empty id");
  if (doc.sentences.empty())
    throw DataError("document '" + doc.id + "' has no sentences");
  for (const auto& s : doc.sentences)
    if (trim(s).empty())
      throw DataError("document '" + doc.id + "' has an empty sentence");
}

// Parses one {"id", "sentences"} object. Throws DataError on schema errors.
inline Document document_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("document record is not an object");
  if (!j.contains("id") || !j["id"].is_string())
    throw DataError("document record lacks string field 'id'");
  if (!j.contains("sentences") || !j["sentences"].is_array())
    throw DataError("document record lacks array field 'sentences'");
  Document doc;
  doc.id = j["id"].get<std::string>();
  for (const auto& s : j["sentences"]) {
    if (!s.is_string()) throw DataError("sentence is not a string");
    doc.sentences.push_back(s.get<std::string>());
  }
  validate(doc);
  return doc;
}

inline nlohmann::json document_to_json(const Document& doc) {
  return nlohmann::json{{"id", doc.id}, {"sentences", doc.sentences}};
}

namespace detail {

inline void add_document(Corpus& corpus, std::unordered_set<std::string>& ids,
                         Document doc, std::size_t line) {
  if (!ids.insert(doc.id).second) {
    warn("line " + std::to_string(line) + ": duplicate document id '" +
         doc.id + "', skipped");
    ++corpus.skipped;
    return;
  }
  corpus.documents.push_back(std::move(doc));
}

inline Corpus parse_jsonl_corpus(std::istream& in) {
  Corpus corpus;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      add_document(corpus, ids,
                   document_from_json(nlohmann::json::parse(line)), lineno);
    } catch (const std::exception& e) {
      warn("line " + std::to_string(lineno) + ": malformed record skipped (" +
           e.what() + ")");
      ++corpus.skipped;
    }
  }
  return corpus;
}

// Blank-line separated blocks, one sentence per line. Ids are "doc{index}"
// unless the block's first line is "#id <name>".
inline Corpus parse_text_corpus(std::istream& in) {
  Corpus corpus;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0, start_line = 0, index = 0;
  Document current;
  auto flush = [&] {
    if (current.sentences.empty() && current.id.empty()) return;
    if (current.id.empty()) current.id = "doc" + std::to_string(index);
    ++index;
    try {
      validate(current);
      add_document(corpus, ids, std::move(current), start_line);
    } catch (const DataError& e) {
      warn("line " + std::to_string(start_line) +
           ": malformed block skipped (" + e.what() + ")");
      ++corpus.skipped;
    }
    current = Document{};
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty()) {
      flush();
      continue;
    }
    if (current.sentences.empty() && current.id.empty()) start_line = lineno;
    if (current.sentences.empty() && current.id.empty() &&
        t.rfind("#id ", 0) == 0) {
      current.id = trim(t.substr(4));
      continue;
    }
    current.sentences.push_back(std::move(t));
  }
  flush();
  return corpus;
}

}  // namespace detail

// Reads a corpus file. An unreadable file is fatal; malformed records are
// skipped with a warning and counted in Corpus::skipped.
inline Corpus load_corpus(const std::string& path,
                          CorpusFormat format = CorpusFormat::kJsonl) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read corpus file: " + path);
  return format == CorpusFormat::kJsonl ? detail::parse_jsonl_corpus(in)
                                        : detail::parse_text_corpus(in);
}

inline void write_corpus(const Corpus& corpus, std::ostream& out) {
  for (const auto& d : corpus.documents) out << document_to_json(d).dump() << "\n";
}

struct PreprocessOptions {
  std::size_t min_sentences = 4;
  std::size_t max_tokens = 600;
};

// Drops documents below the sentence minimum and truncates the rest to the
// token budget by removing trailing whole sentences.
inline std::optional<Document> preprocess(const Document& doc,
                                          const PreprocessOptions& opts,
                                          const Tokenizer& tok) {
  if (doc.size() < opts.min_sentences) return std::nullopt;
  Document out = doc;
  std::size_t tokens = token_count(out, tok);
  while (tokens > opts.max_tokens && !out.sentences.empty()) {
    tokens -= tok.count(out.sentences.back());
    out.sentences.pop_back();
  }
  if (out.size() < opts.min_sentences) return std::nullopt;
  return out;
}

inline std::optional<Document> preprocess(const Document& doc,
                                          std::size_t min_sentences = 4,
                                          std::size_t max_tokens = 600) {
  return preprocess(doc, PreprocessOptions{min_sentences, max_tokens},
                    WhitespaceTokenizer{});
}

// Splits documents of at least `threshold` sentences into consecutive blocks
// of `block_size`. A trailing remainder survives only if it still has
// `min_sentences` sentences. Block ids are "{parent}#b{index}".
inline std::vector<Document> partition_blocks(const Document& doc,
                                              std::size_t threshold = 20,
                                              std::size_t block_size = 10,
                                              std::size_t min_sentences = 4) {
  if (doc.size() < threshold) return {doc};
  if (block_size == 0) throw std::invalid_argument("block_size must be > 0");
  std::vector<Document> blocks;
  for (std::size_t start = 0, b = 0; start < doc.size(); start += block_size, ++b) {
    const std::size_t end = std::min(doc.size(), start + block_size);
    if (end - start < block_size && end - start < min_sentences) break;
    Document block;
    block.id = doc.id + "#b" + std::to_string(b);
    block.sentences.assign(doc.sentences.begin() + static_cast<std::ptrdiff_t>(start),
                           doc.sentences.begin() + static_cast<std::ptrdiff_t>(end));
    blocks.push_back(std::move(block));
  }
  return blocks;
}

struct PrepareOptions {
  PreprocessOptions preprocess;
  bool partition = true;
  std::size_t block_threshold = 20;
  std::size_t block_size = 10;
};

// Full positive-document preparation: filter/truncate, then partition.
// Partitioning runs on the untruncated text, since splitting long documents
// into blocks is what keeps their later sentences from being truncated away.
inline Corpus prepare_corpus(const Corpus& raw, const PrepareOptions& opts,
                             const Tokenizer& tok) {
  Corpus out;
  out.split = raw.split;
  for (const auto& doc : raw.documents) {
    if (doc.size() < opts.preprocess.min_sentences) continue;
    std::vector<Document> parts =
        opts.partition ? partition_blocks(doc, opts.block_threshold,
                                          opts.block_size,
                                          opts.preprocess.min_sentences)
                       : std::vector<Document>{doc};
    for (const auto& part : parts)
      if (auto kept = preprocess(part, opts.preprocess, tok))
        out.documents.push_back(std::move(*kept));
  }
  return out;
}

inline Corpus prepare_corpus(const Corpus& raw, const PrepareOptions& opts = {}) {
  return prepare_corpus(raw, opts, WhitespaceTokenizer{});
}

}  // namespace coherence
