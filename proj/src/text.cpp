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

#include "tda/text.hpp"

#include "tda/tinylm.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

namespace tda::text {

namespace {

bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }
bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

// A conventional English list (articles, pronouns, auxiliaries, common
// prepositions and conjunctions).
const std::vector<std::string_view> kStopwords = {
    "a",     "about", "above",  "after", "again", "all",   "also",  "am",    "an",
    "and",   "any",   "are",    "as",    "at",    "be",    "been",  "before", "being",
    "below", "both",  "but",    "by",    "can",   "could", "did",   "do",    "does",
    "doing", "down",  "during", "each",  "few",   "for",   "from",  "further", "had",
    "has",   "have",  "having", "he",    "her",   "here",  "hers",  "him",   "his",
    "how",   "i",     "if",     "in",    "into",  "is",    "it",    "its",   "itself",
    "just",  "me",    "more",   "most",  "my",    "no",    "nor",   "not",   "now",
    "of",    "off",   "on",     "once",  "only",  "or",    "other", "our",   "out",
    "over",  "own",   "same",   "she",   "should", "so",   "some",  "such",  "than",
    "that",  "the",   "their",  "them",  "then",  "there", "these", "they",  "this",
    "those", "through", "to",   "too",   "under", "until", "up",    "very",  "was",
    "we",    "were",  "what",   "when",  "where", "which", "while", "who",   "whom",
    "why",   "will",  "with",   "would", "you",   "your"};

}  // namespace

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (is_space(s[i])) {
      ++i;
    } else if (is_alnum(s[i])) {
      std::size_t j = i;
      while (j < s.size() && is_alnum(s[j])) ++j;
      out.emplace_back(s.substr(i, j - i));
      i = j;
    } else {
      out.emplace_back(1, s[i]);
      ++i;
    }
  }
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    const bool punct = !w.empty() && !is_alnum(w.front());
    if (!out.empty() && !punct) out += ' ';
    out += w;
  }
  return out;
}

std::string casefold(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool is_stopword(std::string_view w) {
  return std::binary_search(kStopwords.begin(), kStopwords.end(), w);
}

const std::vector<std::string_view>& stopword_list() { return kStopwords; }

std::vector<std::string> lexical_tokens(std::string_view s, bool drop_stopwords) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    if (!is_alnum(s[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && is_alnum(s[j])) ++j;
    auto tok = casefold(s.substr(i, j - i));
    if (!drop_stopwords || !is_stopword(tok)) out.push_back(std::move(tok));
    i = j;
  }
  return out;
}

bool contains_run(std::span<const std::string> haystack, std::span<const std::string> needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
         haystack.end();
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, int max_size,
                             bool allow_truncate) {
  std::map<std::string, std::uint64_t> counts;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) ++counts[std::move(w)];
  }
  std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  v.words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  const std::size_t room = static_cast<std::size_t>(std::max(0, max_size - 4));
  if (ranked.size() > room && !allow_truncate) {
    throw Error("corpus needs " + std::to_string(ranked.size() + 4) +
                " vocabulary entries but model.vocab_size is " + std::to_string(max_size));
  }
  for (std::size_t i = 0; i < ranked.size() && i < room; ++i) v.words_.push_back(ranked[i].first);
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.ids_[v.words_[i]] = static_cast<int>(i);
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary " + path.string());
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (v.ids_.count(line)) throw Error("duplicate vocabulary entry '" + line + "'");
    v.ids_[line] = static_cast<int>(v.words_.size());
    v.words_.push_back(line);
  }
  if (v.words_.size() < 4 || v.words_[tinylm::kUnkId] != "<unk>")
    throw Error("vocabulary " + path.string() + " lacks the special tokens");
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& w : words_) out << w << '\n';
}

int Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? tinylm::kUnkId : it->second;
}

const std::string& Vocabulary::word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> words;
  for (int i : ids) {
    if (i < 4 && i != tinylm::kUnkId) continue;
    words.push_back(word(i));
  }
  return join_words(words);
}

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = fnv1a("vocab");
  for (const auto& w : words_) h = fnv1a(w, h ^ 0x9e);
  return h;
}

}  // namespace tda::text
