// Copyright 2026 The TDA Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Little-endian binary readers/writers shared by the artifact formats.

#include "tda/common.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

namespace tda::binio {

class Writer {
 public:
  enum class Mode { truncate, append };

  explicit Writer(const std::filesystem::path& path, Mode mode = Mode::truncate)
      : path_(path),
        out_(path, std::ios::binary |
                       (mode == Mode::append ? std::ios::app : std::ios::trunc)) {
    if (!out_) throw Error("cannot open for writing: " + path.string());
  }

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw Error("write failed: " + path_.string());
  }
  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  template <class T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    bytes(&v, sizeof(T));
  }
  void zeros(std::size_t n) {
    std::vector<char> z(n, 0);
    bytes(z.data(), n);
  }
  void floats(const float* data, std::size_t n) { bytes(data, n * sizeof(float)); }
  void string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void close() {
    out_.close();
    if (!out_) throw Error("close failed: " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot open for reading: " + path.string());
  }

  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!in_) throw Error("truncated file: " + path_.string());
  }
  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    bytes(got.data(), got.size());
    if (got != m) {
      throw Error("bad magic in " + path_.string() + ": expected '" + std::string(m) + "'");
    }
  }
  // True (and consumes it) if the next bytes are `m`; otherwise rewinds.
  bool try_magic(std::string_view m) {
    const auto pos = in_.tellg();
    std::string got(m.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (in_ && got == m) return true;
    in_.clear();
    in_.seekg(pos);
    return false;
  }
  template <class T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void skip(std::size_t n) {
    in_.seekg(static_cast<std::streamoff>(n), std::ios::cur);
    if (!in_) throw Error("truncated file: " + path_.string());
  }
  void floats(float* data, std::size_t n) { bytes(data, n * sizeof(float)); }
  std::string string() {
    const auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace tda::binio
