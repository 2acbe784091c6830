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

#include <set>

#include "coherence/common.hpp"
#include "coherence/config.hpp"

namespace coherence {
namespace {

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DerivedStreamsDiffer) {
  EXPECT_NE(derive_seed(1, "permute", "doc", 0), derive_seed(1, "permute", "doc", 1));
  EXPECT_NE(derive_seed(1, "a"), derive_seed(2, "a"));
  EXPECT_EQ(derive_seed(7, "x", 3), derive_seed(7, "x", 3));
}

TEST(Rng, UniformIntStaysInRange) {
  Rng r(3);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    auto v = r.uniform_int(4, 9);
    ASSERT_GE(v, 4);
    ASSERT_LE(v, 9);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 6u);
}

TEST(Rng, SampleWithoutReplacementIsDistinct) {
  Rng r(5);
  for (int t = 0; t < 50; ++t) {
    auto s = r.sample_without_replacement(20, 7);
    ASSERT_EQ(s.size(), 7u);
    std::set<std::size_t> u(s.begin(), s.end());
    EXPECT_EQ(u.size(), 7u);
    for (auto i : s) EXPECT_LT(i, 20u);
  }
  EXPECT_THROW(r.sample_without_replacement(3, 4), std::invalid_argument);
}

TEST(Rng, StateRoundTripIncludesNormalSpare) {
  Rng r(9);
  r.normal();  // leaves a cached spare value
  const std::string state = r.state();
  Rng copy(0);
  copy.set_state(state);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(r.normal(), copy.normal());
}

TEST(Hash, Fnv1aKnownValue) {
  // FNV-1a 64 of the empty string is the offset basis.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(LogCapture, CollectsWarnings) {
  ScopedLogCapture cap;
  warn("first");
  warn("second");
  EXPECT_EQ(cap.count(), 2u);
}

TEST(KeyValues, ParsesCommentsAndOverrides) {
  auto kv = KeyValues::parse("regime = full  # comment\n\n tau=0.2\n");
  kv.apply_override("tau=0.3");
  EXPECT_EQ(kv.get_string("regime", ""), "full");
  EXPECT_DOUBLE_EQ(kv.get("tau", 0.0), 0.3);
  EXPECT_EQ(kv.get<std::size_t>("missing", 7), 7u);
}

TEST(KeyValues, RejectsMalformed) {
  EXPECT_THROW(KeyValues::parse("no equals sign"), UsageError);
  KeyValues kv;
  EXPECT_THROW(kv.apply_override("=3"), UsageError);
  kv.set("n", "abc");
  EXPECT_THROW(kv.get<int>("n", 0), UsageError);
  kv.set("b", "maybe");
  EXPECT_THROW(kv.get<bool>("b", false), UsageError);
}

TEST(KeyValues, ReportsUnusedKeys) {
  auto kv = KeyValues::parse("a = 1\nb = 2\n");
  kv.get("a", 0);
  EXPECT_EQ(kv.unused_keys(), std::set<std::string>{"b"});
}

}  // namespace
}  // namespace coherence
