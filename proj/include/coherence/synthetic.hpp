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

// Template-generated narratives used as an offline demo corpus. Each story
// opens with an arrival and closes with a departure; objects and companions
// are introduced with an indefinite article and later referred back to, so
// shuffling sentences breaks the frame and the reference chains.

#pragma once

#include <array>
#include <string>
#include <vector>

#include "coherence/common.hpp"
#include "coherence/corpus.hpp"

namespace coherence {

struct SyntheticOptions {
  std::size_t documents = 600;
  std::size_t min_sentences = 6;
  std::size_t max_sentences = 12;
  std::uint64_t seed = 0;
};

namespace synthetic_detail {

inline constexpr std::array kNames = {
    "Alice", "Bruno", "Carmen", "Dmitri", "Elena", "Farid", "Greta", "Hiro",
    "Ines",  "Jonas", "Kemal",  "Lucia",  "Marek", "Nadia", "Oscar", "Priya",
    "Quinn", "Rosa",  "Samir",  "Tova",   "Umar",  "Vera",  "Wendel", "Yara"};
inline constexpr std::array kPlaces = {
    "Lisbon", "the harbor town", "a mountain village", "Kyoto",    "the old city",
    "Oslo",   "a river valley",  "Marseille",          "the coast", "Tallinn"};
inline constexpr std::array kRoles = {"baker",   "sailor", "teacher", "guide",
                                      "painter", "farmer", "doctor",  "musician"};
inline constexpr std::array kObjects = {"map",    "lantern", "camera", "notebook",
                                        "bicycle", "kite",   "radio",  "compass",
                                        "basket",  "violin", "key",    "umbrella"};
inline constexpr std::array kActivities = {
    "walked along the river", "visited the market", "climbed the hill",
    "explored the museum",    "sketched the bridge", "rested in the park",
    "sailed across the bay",  "cooked a long dinner"};
inline constexpr std::array kConnectives = {"Later, ", "After that, ", "Then ", "", "Soon ",
                                           "That afternoon, ", "Meanwhile, "};
inline constexpr std::array kWeather = {"rainy", "sunny", "windy", "foggy", "cold", "bright"};

template <std::size_t N>
const char* pick(const std::array<const char*, N>& a, Rng& rng) {
  return a[rng.uniform_below(N)];
}

}  // namespace synthetic_detail

// One story with `n` sentences (n >= 4).
inline Document synthetic_document(const std::string& id, std::size_t n, Rng& rng) {
  using namespace synthetic_detail;
  const std::string hero = pick(kNames, rng);
  std::string friend_name = pick(kNames, rng);
  while (friend_name == hero) friend_name = pick(kNames, rng);
  const std::string role = pick(kRoles, rng);
  const std::string place = pick(kPlaces, rng);

  Document d;
  d.id = id;
  d.sentences.push_back("On a " + std::string(pick(kWeather, rng)) + " morning, " + hero +
                        " arrived in " + place + " for the first time.");
  std::string held_object;  // introduced in the previous sentence, if any
  bool met_friend = false;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const std::string lead = pick(kConnectives, rng);
    std::string s;
    if (!held_object.empty() && rng.uniform01() < 0.5) {
      s = lead + hero + " used the " + held_object + " and " + pick(kActivities, rng) + ".";
      held_object.clear();
    } else if (!met_friend && (i >= n / 3 || rng.uniform01() < 0.3)) {
      s = lead + hero + " met a " + role + " named " + friend_name + ".";
      met_friend = true;
    } else if (met_friend && rng.uniform01() < 0.4) {
      s = lead + friend_name + " and " + hero + " " + pick(kActivities, rng) + " together.";
    } else {
      held_object = pick(kObjects, rng);
      s = lead + hero + " bought a " + held_object + " and " + pick(kActivities, rng) + ".";
    }
    d.sentences.push_back(std::move(s));
  }
  d.sentences.push_back("Finally, " + hero + " said goodbye" +
                        (met_friend ? " to " + friend_name : std::string()) + " and left " +
                        place + ".");
  return d;
}

inline Corpus synthetic_corpus(const SyntheticOptions& opts) {
  if (opts.min_sentences < 4 || opts.max_sentences < opts.min_sentences)
    throw UsageError("synthetic stories need 4 <= min_sentences <= max_sentences");
  Corpus c;
  c.split = Split::kTrain;
  for (std::size_t i = 0; i < opts.documents; ++i) {
    Rng rng = stream(opts.seed, "synthetic", i);
    const auto n = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(opts.min_sentences),
                        static_cast<std::int64_t>(opts.max_sentences)));
    c.documents.push_back(synthetic_document("syn-" + std::to_string(i), n, rng));
  }
  return c;
}

// Contiguous train / dev / test split by index.
struct CorpusSplits {
  Corpus train, dev, test;
};

inline CorpusSplits split_corpus(const Corpus& c, std::size_t dev, std::size_t test) {
  if (dev + test >= c.documents.size())
    throw UsageError("split sizes leave no training documents");
  CorpusSplits s;
  const std::size_t n_train = c.documents.size() - dev - test;
  auto take = [&](Corpus& out, Split split, std::size_t from, std::size_t to) {
    out.split = split;
    out.documents.assign(c.documents.begin() + static_cast<std::ptrdiff_t>(from),
                         c.documents.begin() + static_cast<std::ptrdiff_t>(to));
  };
  take(s.train, Split::kTrain, 0, n_train);
  take(s.dev, Split::kDev, n_train, n_train + dev);
  take(s.test, Split::kTest, n_train + dev, c.documents.size());
  return s;
}

}  // namespace coherence
