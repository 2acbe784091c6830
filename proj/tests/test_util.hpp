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

// Shared fixtures for the test binaries.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "coherence/common.hpp"
#include "coherence/corpus.hpp"

namespace coherence::testing_util {

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "coh-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

  std::string write(const std::string& name, const std::string& content) const {
    const auto p = path_ / name;
    std::ofstream(p, std::ios::binary) << content;
    return p.string();
  }

 private:
  std::filesystem::path path_;
};

// n distinct sentences.
inline Document make_doc(const std::string& id, std::size_t n) {
  Document d;
  d.id = id;
  for (std::size_t i = 0; i < n; ++i)
    d.sentences.push_back("Sentence " + std::to_string(i) + " of " + id + ".");
  return d;
}

// Random short sentences over a small vocabulary.
inline Document random_doc(const std::string& id, std::size_t n, Rng& rng) {
  static const char* words[] = {"the", "cat", "sat", "on", "a", "mat", "and", "then",
                                "ran", "to", "house", "red", "blue", "dog", "saw", "it"};
  Document d;
  d.id = id;
  for (std::size_t i = 0; i < n; ++i) {
    std::string s;
    const auto len = rng.uniform_int(3, 7);
    for (std::int64_t w = 0; w < len; ++w) {
      if (w) s += ' ';
      s += words[rng.uniform_below(16)];
    }
    d.sentences.push_back(s + ".");
  }
  return d;
}

}  // namespace coherence::testing_util
