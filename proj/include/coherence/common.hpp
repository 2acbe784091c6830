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

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

namespace coherence {

inline constexpr std::string_view kToolkitVersion = "1.0.0";

// Error hierarchy. The CLI maps these onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or unreadable input data (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

// Bad command-line usage or configuration (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss (exit code 3).
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

// A forward pass produced NaN or infinity.
class NonFiniteValue : public Error {
 public:
  using Error::Error;
};

class PoolExhausted : public DataError {
 public:
  PoolExhausted(const std::string& doc_id, const std::string& detail)
      : DataError("permutation pool exhausted for document '" + doc_id +
                  "': " + detail),
        doc_id_(doc_id) {}
  const std::string& doc_id() const { return doc_id_; }

 private:
  std::string doc_id_;
};

class BackboneUnavailable : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class VersionMismatch : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { kInfo, kWarning, kError };

using LogSink = std::function<void(LogLevel, std::string_view)>;

namespace detail {
inline LogSink& log_sink() {
  static LogSink sink = [](LogLevel level, std::string_view msg) {
    const char* tag = level == LogLevel::kInfo      ? "info"
                      : level == LogLevel::kWarning ? "warning"
                                                    : "error";
    std::cerr << "[" << tag << "] " << msg << "\n";
  };
  return sink;
}
inline std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

// Replaces the process-wide log sink and returns the previous one.
inline LogSink set_log_sink(LogSink sink) {
  std::lock_guard<std::mutex> lock(detail::log_mutex());
  return std::exchange(detail::log_sink(), std::move(sink));
}

inline void log(LogLevel level, std::string_view msg) {
  std::lock_guard<std::mutex> lock(detail::log_mutex());
  if (detail::log_sink()) detail::log_sink()(level, msg);
}

inline void warn(std::string_view msg) { log(LogLevel::kWarning, msg); }
inline void info(std::string_view msg) { log(LogLevel::kInfo, msg); }

// Captures warnings for the lifetime of the object; restores the old sink.
class ScopedLogCapture {
 public:
  ScopedLogCapture()
      : previous_(set_log_sink([this](LogLevel level, std::string_view msg) {
          if (level != LogLevel::kInfo) messages_.emplace_back(msg);
        })) {}
  ~ScopedLogCapture() { set_log_sink(std::move(previous_)); }
  ScopedLogCapture(const ScopedLogCapture&) = delete;
  ScopedLogCapture& operator=(const ScopedLogCapture&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }
  std::size_t count() const { return messages_.size(); }

 private:
  std::vector<std::string> messages_;
  LogSink previous_;
};

// ---------------------------------------------------------------------------
// Hashing

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[i] = kDigits[v & 0xf];
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read file: " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string file_hash(const std::string& path) {
  return hex64(fnv1a64(read_file(path)));
}

// ---------------------------------------------------------------------------
// Seed derivation and RNG

namespace detail {
inline std::uint64_t mix_tag(std::uint64_t h, std::uint64_t v) {
  return splitmix64(h ^ splitmix64(v));
}
inline std::uint64_t mix_tag(std::uint64_t h, std::string_view s) {
  return splitmix64(h ^ fnv1a64(s));
}
inline std::uint64_t mix_tag(std::uint64_t h, const std::string& s) {
  return mix_tag(h, std::string_view(s));
}
inline std::uint64_t mix_tag(std::uint64_t h, const char* s) {
  return mix_tag(h, std::string_view(s));
}
template <typename T>
  requires std::is_integral_v<T>
inline std::uint64_t mix_tag(std::uint64_t h, T v) {
  return mix_tag(h, static_cast<std::uint64_t>(v));
}
}  // namespace detail

// Derives an independent stream seed from a global seed and any mix of
// integer and string tags. Stateless, so streams do not depend on call order.
template <typename... Tags>
std::uint64_t derive_seed(std::uint64_t seed, const Tags&... tags) {
  std::uint64_t h = splitmix64(seed);
  ((h = detail::mix_tag(h, tags)), ...);
  return h;
}

// mt19937_64 with distribution code written out here, so results do not
// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t uniform_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(
                    uniform_below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(std::distance(first, last));
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = uniform_below(i);
      std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1),
                     first + static_cast<std::ptrdiff_t>(j));
    }
  }

  // k distinct indices from [0, n), in sampled order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n,
                                                      std::size_t k) {
    if (k > n) throw std::invalid_argument("sample size exceeds population");
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const auto j = i + uniform_below(n - i);
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_ << ' ' << has_spare_ << ' '
       << std::bit_cast<std::uint64_t>(spare_);
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    std::uint64_t bits = 0;
    is >> engine_ >> has_spare_ >> bits;
    spare_ = std::bit_cast<double>(bits);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

template <typename... Tags>
Rng stream(std::uint64_t seed, const Tags&... tags) {
  return Rng(derive_seed(seed, tags...));
}

}  // namespace coherence
