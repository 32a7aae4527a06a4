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

// End-to-end stages over a cache directory: gen-data, train,
// estimate-hessian, build-index, eval. Each stage writes into a directory
// keyed by the hash of the configuration sections it depends on, so reruns
// reuse finished artifacts and different configurations never mix.

#include "tda/config.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <unordered_map>

namespace tda::pipeline {

// $TDA_CACHE_DIR, or ./tda-cache.
std::filesystem::path default_cache_dir();

struct Options {
  std::filesystem::path cache_dir = default_cache_dir();
  int threads = default_threads();
  bool force = false;
  std::ostream* log = nullptr;
};

// Raised when a stage's input has not been produced yet.
class MissingArtifact : public Error {
 public:
  MissingArtifact(const std::string& what, std::string_view producer);
};

struct Dataset {
  std::vector<facttrace::CorpusPassage> passages;
  std::vector<index::RowMeta> meta;  // byte ranges into corpus.jsonl
  std::vector<facttrace::FactRecord> facts;
  text::Vocabulary vocab;
  std::vector<tinylm::ExampleRecord> examples;  // one per passage
  std::unordered_map<std::string, std::size_t> row_of;
  std::map<std::string, std::set<std::string>> entailing;  // fact id -> passage ids

  std::vector<const facttrace::FactRecord*> eval_facts() const;
  const facttrace::FactRecord* fact(std::string_view id) const;
  // Evaluated fact whose prompt matches, ignoring case and punctuation.
  const facttrace::FactRecord* fact_by_prompt(std::string_view prompt) const;
};

struct HessianSet {
  std::optional<hessian::HessianBlocks> train_raw;
  std::optional<hessian::HessianBlocks> train_corrected;
  std::optional<hessian::HessianBlocks> trak;
  std::optional<hessian::HessianBlocks> eval;
  std::optional<hessian::HessianBlocks> mixed;
};

class Workspace {
 public:
  Workspace(config::RunConfig config, Options options);

  const config::RunConfig& config() const { return config_; }
  const Options& options() const { return options_; }

  std::uint64_t data_hash() const;
  std::uint64_t model_hash() const;
  std::uint64_t features_hash() const;
  std::uint64_t eval_hash() const;

  std::filesystem::path data_dir() const;
  std::filesystem::path model_dir() const;
  std::filesystem::path features_dir() const;
  std::filesystem::path eval_dir() const;
  std::filesystem::path corpus_path() const { return data_dir() / "corpus.jsonl"; }
  std::filesystem::path checkpoint_path() const { return model_dir() / "model.ckpt"; }
  std::filesystem::path hessian_path(std::string_view name) const;
  std::filesystem::path index_path(std::string_view preset) const;
  std::filesystem::path report_path(std::string_view ext) const;

  // Stages. Each skips work whose output already exists unless forced.
  void gen_data() const;
  void train() const;
  void estimate_hessian() const;
  void build_index() const;
  void eval() const;
  void run_all() const;

  Dataset load_data() const;
  tinylm::Checkpoint load_model() const;
  HessianSet load_hessians() const;
  index::FeatureIndex load_index(std::string_view preset) const;
  gradfeat::ProjectionSpec projection_spec(const tinylm::ModelConfig& model) const;

 private:
  void log(const std::string& line) const;

  config::RunConfig config_;
  Options options_;
};

// Frozen artifacts for query-time work (eval, retrieve, tail-patch, serve).
class Engine {
 public:
  // Loads the dataset, model, Hessians and the indexes of `presets`.
  Engine(const Workspace& ws, std::vector<std::string> presets);

  const Dataset& data() const { return data_; }
  const tinylm::Checkpoint& checkpoint() const { return checkpoint_; }
  methods::Artifacts artifacts() const;
  const std::vector<std::string>& presets() const { return presets_; }
  bool has_method(std::string_view name) const;  // preset or "bm25"
  const methods::MethodConfig& method(std::string_view preset) const;
  std::string fingerprint(std::string_view method) const;
  const index::FeatureIndex& index(std::string_view preset) const;
  const methods::Bm25Index& bm25() const { return *bm25_; }
  const hessian::HessianBlocks* mixed_hessian() const;

  tinylm::ExampleRecord query(std::string id, std::string_view prompt, std::string_view target) const;
  // Greedy completion of the prompt.
  std::string predict(std::string_view prompt) const;

  // `method` is a loaded preset or "bm25". BM25 queries with prompt + target.
  index::RetrievalResult retrieve(std::string_view method, const tinylm::ExampleRecord& query,
                                  std::string_view query_text, int k) const;
  std::vector<index::RetrievalResult> retrieve_all(std::string_view method,
                                                   std::span<const tinylm::ExampleRecord> queries,
                                                   std::span<const std::string> query_texts,
                                                   int k) const;

  struct PatchOutcome {
    double before = 0.0;
    double after = 0.0;
  };
  // One tail-patch step on a corpus example from the frozen snapshot.
  PatchOutcome tail_patch(const tinylm::ExampleRecord& query, std::string_view example_id,
                          const tinylm::TrainHyper& hyper) const;

  int threads() const { return threads_; }

 private:
  Dataset data_;
  tinylm::Checkpoint checkpoint_;
  gradfeat::ProjectionSpec projection_;
  HessianSet hessians_;
  std::vector<std::string> presets_;
  std::map<std::string, methods::MethodConfig, std::less<>> methods_;
  std::map<std::string, index::FeatureIndex, std::less<>> indexes_;
  std::unique_ptr<methods::Bm25Index> bm25_;
  int threads_ = 1;
};

// ---------------------------------------------------------------------------
// Evaluation report.

struct MethodRow {
  std::string method;
  std::string fingerprint;
  std::optional<double> mrr;
  std::optional<double> recall;
  std::map<int, double> tailpatch_pp;
  std::map<int, double> tailpatch_relative;
  std::map<std::string, double> mrr_by_bucket;
  std::optional<double> mrr_correct;
  std::optional<double> mrr_incorrect;
  std::map<std::string, double> category_share;  // over the top recall_k hits
};

struct EvalReport {
  std::size_t queries = 0;
  std::size_t tailpatch_queries = 0;
  std::size_t correct = 0;
  std::size_t incorrect = 0;
  double lambda = 0.0;
  double lambda_crossover = 0.0;
  int recall_k = 10;
  std::vector<std::string> buckets;
  std::vector<MethodRow> rows;

  const MethodRow& row(std::string_view method) const;
};

EvalReport evaluate(const Engine& engine, const config::RunConfig& config);

void write_tsv(const EvalReport& r, std::ostream& out);
void write_jsonl(const EvalReport& r, std::ostream& out);
std::string format_table(const EvalReport& r);
EvalReport read_report_jsonl(const std::filesystem::path& path);

}  // namespace tda::pipeline
