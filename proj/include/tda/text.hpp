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

// Two tokenizers. The model one maps words and punctuation to vocabulary
// ids. The lexical one (BM25, alias matching, correctness checks) casefolds,
// splits on non-alphanumerics and optionally drops stopwords.

#include "tda/common.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tda::text {

// Runs of alphanumerics, or single punctuation characters. Whitespace splits.
std::vector<std::string> split_words(std::string_view s);

// Inverse of split_words up to whitespace: no space before punctuation.
std::string join_words(std::span<const std::string> words);

std::string casefold(std::string_view s);

bool is_stopword(std::string_view casefolded);
const std::vector<std::string_view>& stopword_list();

// Casefolded alphanumeric runs.
std::vector<std::string> lexical_tokens(std::string_view s, bool drop_stopwords);

// True when `needle` occurs as a contiguous token run inside `haystack`.
bool contains_run(std::span<const std::string> haystack, std::span<const std::string> needle);

class Vocabulary {
 public:
  // Specials first (<pad>, <bos>, <eos>, <unk>), then words by descending
  // count, ties by byte order. Throws if more than max_size words are needed
  // and allow_truncate is false.
  static Vocabulary build(std::span<const std::string> texts, int max_size,
                          bool allow_truncate = false);
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(words_.size()); }
  int id(std::string_view word) const;  // kUnkId when absent
  const std::string& word(int id) const;

  // BOS is not added here.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;  // specials skipped

  std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace tda::text
