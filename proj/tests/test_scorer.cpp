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

#include "coherence/scorer.hpp"
#include "coherence/taskgen.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

namespace coherence {
namespace {

using testing_util::check_gradients;
using testing_util::make_doc;
using testing_util::random_doc;
using testing_util::TempDir;

BackboneConfig small_config(std::size_t d = 8, std::size_t layers = 1) {
  BackboneConfig c;
  c.d = d;
  c.layers = layers;
  c.heads = 2;
  c.ffn = 2 * d;
  c.vocab_size = 64;
  c.max_tokens = 64;
  c.max_sentences = 8;
  return c;
}

TEST(Tokenize, WordsAndPunctuation) {
  Document d{"d", {"Hello, World.", "again"}};
  auto t = tokenize(d, 1000, 100);
  EXPECT_EQ(t.ids.size(), 5u);
  EXPECT_EQ(t.sentence_of, (std::vector<std::size_t>{0, 0, 0, 0, 1}));
  EXPECT_EQ(t.ids[0], fnv1a64("hello") % 1000);
  EXPECT_FALSE(t.truncated);
  EXPECT_TRUE(tokenize(d, 1000, 3).truncated);
}

TEST(Encoder, SeededInitIsIdentical) {
  Encoder a(BackboneConfig{}), b(BackboneConfig{});
  EXPECT_EQ(a.params(), b.params());
  BackboneConfig other;
  other.seed = 8;
  EXPECT_FALSE(Encoder(other).params() == a.params());
}

TEST(Encoder, InferenceIsBitIdentical) {
  Encoder e(BackboneConfig{});
  auto doc = make_doc("d", 5);
  const Vector z1 = e.encode(doc).z, z2 = e.encode(doc).z;
  ASSERT_EQ(z1.size(), 32);
  EXPECT_EQ(std::memcmp(z1.data(), z2.data(), sizeof(double) * 32), 0);
  EXPECT_TRUE(z1.allFinite());
}

TEST(Encoder, TruncatesLongDocumentWithWarning) {
  auto cfg = small_config();
  cfg.max_tokens = 10;
  Encoder e(cfg);
  ScopedLogCapture cap;
  auto out = e.encode(make_doc("d", 6));
  EXPECT_EQ(out.token_reps.rows(), 10);
  EXPECT_EQ(cap.count(), 1u);
}

TEST(Encoder, EmptyDocumentIsError) {
  Encoder e(small_config());
  EXPECT_THROW(e.encode(Document{"empty", {}}), DataError);
}

TEST(Encoder, OrderSensitiveWithPositions) {
  Encoder e(BackboneConfig{});
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    auto doc = random_doc("d" + std::to_string(t), 5, rng);
    auto perm = sample_permutations(doc, 1, {}, rng)[0];
    if (apply_permutation(doc, perm).sentences == doc.sentences) continue;
    EXPECT_FALSE(e.encode(doc).z.isApprox(e.encode(apply_permutation(doc, perm)).z));
  }
}

TEST(Encoder, DropoutOnlyInTrainingMode) {
  auto cfg = small_config();
  cfg.dropout = 0.3;
  Encoder e(cfg);
  auto doc = make_doc("d", 4);
  Rng rng(1);
  const Vector train_z = e.trace(doc, &rng).z_value;
  EXPECT_FALSE(train_z.isApprox(e.encode(doc).z));
  EXPECT_TRUE(e.trace(doc, nullptr).z_value == e.encode(doc).z);
}

TEST(Encoder, GradientsMatchFiniteDifferencesFull) {
  // Every parameter of a small encoder, on random 4-sentence documents.
  Encoder e(small_config(8, 1));
  Rng rng(11);
  for (int t = 0; t < 3; ++t) {
    auto doc = random_doc("d", 4, rng);
    Vector w(8);
    for (Eigen::Index i = 0; i < 8; ++i) w(i) = rng.normal();
    auto tr = e.trace(doc, nullptr);
    ParamSet grads = e.params().zeros_like();
    Encoder::backward(tr, w, grads);
    auto loss = [&] { return w.dot(e.encode(doc).z); };
    auto res = check_gradients(e.params(), grads, loss, 1e-4);
    EXPECT_LT(res.max_rel, 1e-4) << res.worst;
  }
}

TEST(Scorer, DegenerateHead) {
  Scorer s{Encoder(small_config())};
  s.head().w().setZero();
  s.head().b() = 0.7;
  Rng rng(1);
  for (int t = 0; t < 5; ++t) EXPECT_DOUBLE_EQ(s.score(random_doc("d", 4, rng)), 0.7);
}

TEST(Scorer, HeadDotProduct) {
  LinearHead head(3);
  head.w() << 1.0, 0.0, 0.0;
  head.b() = 0.1;
  Vector z(3);
  z << 2.5, -1.0, 4.0;
  EXPECT_NEAR(head.apply(z), 2.6, 1e-15);
  Vector wrong(2);
  EXPECT_THROW(head.apply(wrong), ShapeMismatch);
}

TEST(Scorer, LinearInHead) {
  Scorer s{Encoder(small_config())};
  s.head().b() = 0.0;
  Rng rng(2);
  auto doc = random_doc("d", 5, rng);
  const double before = s.score(doc);
  s.head().w() *= 2.0;
  EXPECT_NEAR(s.score(doc), 2.0 * before, 1e-12);
}

TEST(Scorer, TinyDimEightFinite) {
  auto cfg = small_config(8, 2);
  Scorer s(make_backbone(BackboneKind::kTiny, cfg));
  EXPECT_TRUE(std::isfinite(s.score(make_doc("d", 7))));
}

TEST(Backbone, PretrainedBaseIs768) {
  EXPECT_EQ(BackboneConfig::pretrained_base().d, 768u);
  // One layer and a small vocabulary keep the allocation modest; d is the
  // base model's.
  auto cfg = BackboneConfig::pretrained_base();
  cfg.kind = BackboneKind::kTiny;
  cfg.layers = 1;
  cfg.vocab_size = 16;
  cfg.ffn = 768;
  cfg.max_tokens = 32;
  Encoder e(cfg);
  EXPECT_EQ(e.encode(make_doc("d", 4)).z.size(), 768);
}

TEST(Backbone, PretrainedWithoutWeightsIsUnavailable) {
  auto cfg = BackboneConfig::pretrained_base();
  cfg.weights_dir = "/nonexistent/weights";
  EXPECT_THROW(make_backbone(cfg), BackboneUnavailable);
}

TEST(Backbone, PretrainedLoadsConvertedWeights) {
  TempDir dir;
  auto cfg = small_config();
  Encoder source(cfg);
  write_params(source.params(), dir.file("encoder.bin"));
  cfg.kind = BackboneKind::kPretrained;
  cfg.seed = 99;  // ignored: weights come from disk
  cfg.weights_dir = dir.path().string();
  Encoder loaded = make_backbone(cfg);
  EXPECT_EQ(loaded.params(), source.params());
}

TEST(Backbone, UnknownKindIsFatal) {
  EXPECT_THROW(parse_backbone_kind("xlnet-huge"), UsageError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  Scorer s(Encoder(BackboneConfig{}));
  s.head().b() = 0.123456789;
  save_scorer(s, dir.path() / "ck");
  Scorer back = load_scorer(dir.path() / "ck");
  EXPECT_EQ(back.encoder().params(), s.encoder().params());
  EXPECT_EQ(back.head().params(), s.head().params());
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    auto doc = random_doc("d", 6, rng);
    EXPECT_EQ(double_bits(back.score(doc)), double_bits(s.score(doc)));
  }
}

TEST(Checkpoint, MismatchedDimensionIsFatal) {
  TempDir dir;
  save_scorer(Scorer(Encoder(small_config(8))), dir.path() / "ck");
  Scorer other(Encoder(small_config(16)));
  EXPECT_THROW(load_scorer_into(other, dir.path() / "ck"), ShapeMismatch);
}

TEST(Checkpoint, VersionMismatchIsFatal) {
  TempDir dir;
  save_scorer(Scorer(Encoder(small_config())), dir.path() / "ck");
  auto meta = read_json((dir.path() / "ck" / "scorer.json").string());
  meta["format_version"] = 999;
  write_json(meta, (dir.path() / "ck" / "scorer.json").string());
  EXPECT_THROW(load_scorer(dir.path() / "ck"), VersionMismatch);
}

}  // namespace
}  // namespace coherence
