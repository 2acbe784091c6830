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

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "coherence/common.hpp"
#include "coherence/tape.hpp"

namespace coherence {

namespace fs = std::filesystem;

// Binary tensor files: "CTNS", u32 version, u64 count, then per tensor
// u32 name length, name bytes, i64 rows, i64 cols, rows*cols doubles in
// column-major order. Little-endian host layout; doubles are stored bit-exact.
inline constexpr std::uint32_t kTensorFileVersion = 1;

namespace detail {
template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated tensor file");
  return v;
}
}  // namespace detail

inline void write_params(const ParamSet& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write("CTNS", 4);
  detail::put<std::uint32_t>(out, kTensorFileVersion);
  detail::put<std::uint64_t>(out, params.size());
  for (const auto& t : params) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put<std::int64_t>(out, t.value.rows());
    detail::put<std::int64_t>(out, t.value.cols());
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!out) throw Error("failed writing " + path);
}

inline ParamSet read_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CTNS", 4) != 0)
    throw DataError(path + " is not a tensor file");
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kTensorFileVersion)
    throw VersionMismatch(path + ": tensor file version " +
                          std::to_string(version) + ", expected " +
                          std::to_string(kTensorFileVersion));
  const auto count = detail::get<std::uint64_t>(in);
  ParamSet params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rows = detail::get<std::int64_t>(in);
    const auto cols = detail::get<std::int64_t>(in);
    if (rows < 0 || cols < 0) throw DataError(path + ": bad tensor shape");
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw DataError(path + ": truncated tensor data");
    params.add(std::move(name), std::move(m));
  }
  return params;
}

// Copies values from `loaded` into `target`, requiring identical names and
// shapes.
inline void assign_params(ParamSet& target, const ParamSet& loaded,
                          const std::string& what) {
  if (!target.same_shape(loaded))
    throw ShapeMismatch(what + ": parameter names or shapes do not match");
  for (std::size_t i = 0; i < target.size(); ++i)
    target[i].value = loaded[i].value;
}

inline void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(2) << "\n";
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

// Bit-exact double <-> JSON via the IEEE-754 bit pattern.
inline std::uint64_t double_bits(double v) { return std::bit_cast<std::uint64_t>(v); }
inline double bits_double(std::uint64_t v) { return std::bit_cast<double>(v); }

// Writes into a sibling temporary directory and renames it into place when
// `fill` succeeds, so a failure leaves no partial output behind.
template <typename Fill>
void write_directory_atomically(const fs::path& dir, Fill&& fill) {
  fs::path tmp = dir;
  tmp += ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    fill(tmp);
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
}

// Same idea for single files.
template <typename Fill>
void write_file_atomically(const fs::path& file, Fill&& fill) {
  fs::path tmp = file;
  tmp += ".partial";
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot write " + tmp.string());
      fill(out);
      if (!out) throw Error("failed writing " + tmp.string());
    }
    fs::rename(tmp, file);
  } catch (...) {
    fs::remove(tmp);
    throw;
  }
}

}  // namespace coherence
