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

#include <filesystem>
#include <fstream>

#include "coherence/corpus.hpp"
#include "test_util.hpp"

namespace coherence {
namespace {

using testing_util::TempDir;
using testing_util::make_doc;

// A sentence with exactly `tokens` whitespace tokens.
std::string sentence_of(std::size_t tokens, const std::string& word = "w") {
  std::string s;
  for (std::size_t i = 0; i < tokens; ++i) s += (i ? " " : "") + word + std::to_string(i);
  return s;
}

TEST(LoadCorpus, ThreeValidRecords) {
  TempDir dir;
  auto path = dir.write("c.jsonl",
                        R"({"id":"a","sentences":["x."]})"
                        "\n"
                        R"({"id":"b","sentences":["y.","z."]})"
                        "\n"
                        R"({"id":"c","sentences":["q."]})"
                        "\n");
  auto c = load_corpus(path);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.skipped, 0u);
  EXPECT_EQ(c.documents[1].sentences.size(), 2u);
}

TEST(LoadCorpus, MalformedRecordSkippedWithWarning) {
  TempDir dir;
  auto path = dir.write("c.jsonl",
                        R"({"id":"a","sentences":["x."]})"
                        "\n{not json\n"
                        R"({"id":"b","sentences":["y."]})"
                        "\n");
  ScopedLogCapture cap;
  auto c = load_corpus(path);
  EXPECT_EQ(c.size(), 2u);
  EXPECT_EQ(c.skipped, 1u);
  EXPECT_EQ(cap.count(), 1u);
}

TEST(LoadCorpus, SchemaViolationsAreMalformed) {
  TempDir dir;
  auto path = dir.write("c.jsonl",
                        R"({"id":"a","sentences":[" "]})"
                        "\n"
                        R"({"id":"b"})"
                        "\n"
                        R"({"id":"a2","sentences":["ok"]})"
                        "\n"
                        R"({"id":"a2","sentences":["dup"]})"
                        "\n");
  ScopedLogCapture cap;
  auto c = load_corpus(path);
  EXPECT_EQ(c.size(), 1u);
  EXPECT_EQ(c.skipped, 3u);
}

TEST(LoadCorpus, EmptyFileGivesEmptyCorpus) {
  TempDir dir;
  auto c = load_corpus(dir.write("e.jsonl", ""));
  EXPECT_EQ(c.size(), 0u);
  EXPECT_EQ(c.skipped, 0u);
}

TEST(LoadCorpus, UnreadableFileIsFatal) {
  EXPECT_THROW(load_corpus("/nonexistent/corpus.jsonl"), DataError);
}

TEST(LoadCorpus, PlainTextBlocks) {
  TempDir dir;
  auto path = dir.write("c.txt", "#id first\nOne.\nTwo.\n\n\nThree.\nFour.\nFive.\n");
  auto c = load_corpus(path, CorpusFormat::kPlainText);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.documents[0].id, "first");
  EXPECT_EQ(c.documents[0].size(), 2u);
  EXPECT_EQ(c.documents[1].id, "doc1");
  EXPECT_EQ(c.documents[1].sentences[2], "Five.");
}

TEST(LoadCorpus, WriteThenLoadRoundTrips) {
  TempDir dir;
  Corpus c;
  c.documents = {make_doc("a", 4), make_doc("b", 6)};
  std::ofstream(dir.path() / "rt.jsonl") << [&] {
    std::ostringstream os;
    write_corpus(c, os);
    return os.str();
  }();
  auto back = load_corpus((dir.path() / "rt.jsonl").string());
  EXPECT_EQ(back.documents, c.documents);
}

TEST(Preprocess, ThreeSentencesDropped) {
  EXPECT_FALSE(preprocess(make_doc("d", 3)).has_value());
}

TEST(Preprocess, UnderBothLimitsUnchanged) {
  Document d;
  d.id = "d";
  for (int i = 0; i < 10; ++i) d.sentences.push_back(sentence_of(40));
  ASSERT_EQ(token_count(d), 400u);
  auto out = preprocess(d);
  ASSERT_TRUE(out.has_value());
  EXPECT_EQ(*out, d);
}

TEST(Preprocess, TruncatesTrailingWholeSentences) {
  // 8 sentences, 700 tokens; dropping the last two leaves 590.
  Document d;
  d.id = "d";
  for (std::size_t t : {100, 100, 100, 100, 100, 90, 50, 60}) d.sentences.push_back(sentence_of(t));
  ASSERT_EQ(token_count(d), 700u);
  auto out = preprocess(d);
  ASSERT_TRUE(out.has_value());
  EXPECT_EQ(out->size(), 6u);
  EXPECT_EQ(token_count(*out), 590u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out->sentences[i], d.sentences[i]);
}

TEST(Preprocess, TruncationBelowMinimumDrops) {
  Document d;
  d.id = "d";
  for (int i = 0; i < 5; ++i) d.sentences.push_back(sentence_of(200));
  EXPECT_FALSE(preprocess(d).has_value());
}

TEST(Preprocess, Idempotent) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    Document d;
    d.id = "d" + std::to_string(t);
    const auto n = rng.uniform_int(1, 15);
    for (int i = 0; i < n; ++i)
      d.sentences.push_back(sentence_of(static_cast<std::size_t>(rng.uniform_int(1, 120))));
    auto once = preprocess(d);
    if (!once) continue;
    auto twice = preprocess(*once);
    ASSERT_TRUE(twice.has_value());
    EXPECT_EQ(*twice, *once);
  }
}

TEST(Preprocess, PluggableTokenizer) {
  struct CharTokenizer : Tokenizer {
    std::size_t count(std::string_view s) const override { return s.size(); }
  };
  Document d = make_doc("d", 6);  // sentences "d sentence i." style
  PreprocessOptions opts{4, token_count(d, CharTokenizer{}) - 1};
  auto out = preprocess(d, opts, CharTokenizer{});
  ASSERT_TRUE(out.has_value());
  EXPECT_EQ(out->size(), 5u);
}

TEST(PartitionBlocks, BelowThresholdUnchanged) {
  auto d = make_doc("d", 19);
  auto blocks = partition_blocks(d);
  ASSERT_EQ(blocks.size(), 1u);
  EXPECT_EQ(blocks[0], d);
}

TEST(PartitionBlocks, ExactMultiple) {
  auto blocks = partition_blocks(make_doc("d", 20));
  ASSERT_EQ(blocks.size(), 2u);
  EXPECT_EQ(blocks[0].size(), 10u);
  EXPECT_EQ(blocks[1].size(), 10u);
  EXPECT_EQ(blocks[0].id, "d#b0");
  EXPECT_EQ(blocks[1].id, "d#b1");
}

TEST(PartitionBlocks, RemainderOfFiveKept) {
  auto blocks = partition_blocks(make_doc("d", 25));
  ASSERT_EQ(blocks.size(), 3u);
  EXPECT_EQ(blocks[2].size(), 5u);
}

TEST(PartitionBlocks, RemainderOfThreeDropped) {
  auto blocks = partition_blocks(make_doc("d", 23));
  ASSERT_EQ(blocks.size(), 2u);
}

TEST(PartitionBlocks, PrefixPartitionInOrder) {
  for (std::size_t n = 1; n <= 60; ++n) {
    auto d = make_doc("d", n);
    std::vector<std::string> joined;
    for (const auto& b : partition_blocks(d))
      joined.insert(joined.end(), b.sentences.begin(), b.sentences.end());
    ASSERT_LE(joined.size(), n);
    for (std::size_t i = 0; i < joined.size(); ++i) EXPECT_EQ(joined[i], d.sentences[i]);
  }
}

TEST(PrepareCorpus, PartitionsBeforeTruncating) {
  Corpus raw;
  Document longdoc;
  longdoc.id = "long";
  for (int i = 0; i < 30; ++i) longdoc.sentences.push_back(sentence_of(30));  // 900 tokens
  raw.documents = {longdoc, make_doc("short", 3), make_doc("ok", 5)};
  auto c = prepare_corpus(raw);
  ASSERT_EQ(c.size(), 4u);
  EXPECT_EQ(c.documents[0].id, "long#b0");
  EXPECT_EQ(c.documents[2].id, "long#b2");
  EXPECT_EQ(c.documents[2].size(), 10u);
  EXPECT_EQ(c.documents[3].id, "ok");
}

}  // namespace
}  // namespace coherence
