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

// Synthetic fact-tracing benchmark and its evaluation metrics.

#include "tda/index.hpp"
#include "tda/text.hpp"
#include "tda/tinylm.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace tda::facttrace {

struct Entity {
  std::string id;
  std::string canonical;
  std::vector<std::string> aliases;  // includes the canonical form
  std::string type;
};

struct FactRecord {
  std::string id;
  Entity subject;
  std::string relation;
  Entity object;
  int template_id = 0;
  std::string prompt;  // ends with ':'; the target completes it
  std::string target;
  std::string bucket;
  bool background = false;  // present in the corpus, never queried
};

enum class LabelKind : std::uint8_t { entails, both_entities, one_entity, distractor };
std::string_view to_string(LabelKind k);
LabelKind parse_label_kind(std::string_view s);

struct PassageLabel {
  LabelKind kind = LabelKind::distractor;
  std::vector<std::string> fact_ids;  // entails, both_entities
  std::string entity_id;              // one_entity
};

struct CorpusPassage {
  std::string id;
  std::string text;
  PassageLabel label;
};

struct FrequencyBucket {
  std::string name;
  int lo = 0;  // inclusive range of both-entity passage counts
  int hi = 0;
  int facts = 0;
};

struct BenchmarkSpec {
  int relations = 8;
  std::vector<FrequencyBucket> buckets = {{"1", 1, 1, 40},      {"2-3", 2, 3, 40},
                                          {"4-7", 4, 7, 40},    {"8-15", 8, 15, 40},
                                          {"16-31", 16, 31, 30}, {"32-63", 32, 63, 10}};
  int background_facts = 600;     // rendered in the query template
  int one_entity_passages = 600;
  int partial_passages = 200;     // mention a subject's last name only
  int distractor_passages = 1200;
  double long_distractor_share = 0.1;
  // Share of entailing passages rendered in the query template. The
  // lexically aligned variant sets this to 1.
  double query_template_share = 0.25;
  std::uint64_t seed = 1;

  int fact_count() const;
  void validate() const;
};

struct Benchmark {
  std::vector<FactRecord> facts;  // eval facts first, then background
  std::vector<CorpusPassage> passages;

  std::vector<const FactRecord*> eval_facts() const;
  // Passage ids entailing each fact.
  std::map<std::string, std::set<std::string>> entailing_sets() const;
};

Benchmark generate_benchmark(const BenchmarkSpec& spec);

// Line-delimited JSON. read_corpus also reports each record's byte range.
void write_corpus(const std::filesystem::path& path, std::span<const CorpusPassage> passages);
std::vector<CorpusPassage> read_corpus(const std::filesystem::path& path,
                                       std::vector<index::RowMeta>* ranges = nullptr);
void write_facts(const std::filesystem::path& path, std::span<const FactRecord> facts);
std::vector<FactRecord> read_facts(const std::filesystem::path& path);

// Model inputs: BOS + passage tokens + EOS, every token a target.
tinylm::ExampleRecord passage_example(const text::Vocabulary& vocab, const CorpusPassage& p);
// BOS + prompt tokens, then the target tokens as the only targets.
tinylm::ExampleRecord query_example(const text::Vocabulary& vocab, const FactRecord& f);
tinylm::ExampleRecord query_example(const text::Vocabulary& vocab, std::string id,
                                    std::string_view prompt, std::string_view target);

// ---------------------------------------------------------------------------
// Metrics.

using Truth = std::set<std::string>;

// Mean over queries of 1/rank of the first entailing hit within the top cap.
double mrr(std::span<const index::RetrievalResult> retrievals, std::span<const Truth> truth,
           int cap = 100);
double recall_at_k(std::span<const index::RetrievalResult> retrievals,
                   std::span<const Truth> truth, int k = 10);

struct TailPatchRow {
  int k = 0;
  double mean_delta_pp = 0.0;  // absolute, percentage points of sequence probability
  double mean_relative = 0.0;  // (after - before) / before
};

struct TailPatchResult {
  std::vector<TailPatchRow> rows;  // one per requested k
  // delta_pp[q][j]: query q, proponent j (ranked order).
  std::vector<std::vector<double>> delta_pp;
  std::vector<double> before;

  const TailPatchRow& at(int k) const;
};

// Every (query, proponent) pair restarts from the same snapshot.
TailPatchResult tail_patch_eval(const tinylm::ModelState& state, const tinylm::OptimizerState& opt,
                                const tinylm::TrainHyper& hyper,
                                std::span<const tinylm::ExampleRecord> queries,
                                const std::vector<std::vector<const tinylm::ExampleRecord*>>& proponents,
                                std::span<const int> ks, int threads = 1);

enum class Category : std::uint8_t { entailing, both_entities, one_entity, partial_match, neither };
std::string_view to_string(Category c);

Category categorize_proponent(const CorpusPassage& passage, const FactRecord& fact);

// Passages whose casefolded tokens contain an alias of each entity.
int fact_frequency(std::span<const CorpusPassage> corpus, const FactRecord& fact);

// Casefolded, stopword-free token match of the prediction against any
// target alias.
bool prediction_correct(std::string_view prediction, const FactRecord& fact);

struct CorrectnessSplit {
  std::vector<std::size_t> correct;
  std::vector<std::size_t> incorrect;
};
CorrectnessSplit split_by_correctness(std::span<const FactRecord> facts,
                                      std::span<const std::string> predictions);

// Greedy completion of the prompt, stopping at '.' or EOS.
std::string predict(const tinylm::ModelState& state, const text::Vocabulary& vocab,
                    std::string_view prompt, int max_new_tokens = 6);

}  // namespace tda::facttrace
