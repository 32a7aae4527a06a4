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

// Named attribution presets, their fingerprints, and the BM25 baseline.

#include "tda/hessian.hpp"
#include "tda/index.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tda::methods {

using index::FeatureIndex;
using index::RetrievalResult;

enum class HessianMode : std::uint8_t { none, train, mixed };

struct MethodConfig {
  std::string name;
  tinylm::OutputFn output_fn = tinylm::OutputFn::loss;
  bool use_optimizer_correction = false;
  HessianMode hessian_mode = HessianMode::none;
  double lambda = 0.0;  // mixed only; filled from the estimated Hessian
  bool use_unit_norm = false;
  // Raw margin gradients with candidate scores scaled by 1 - mean p (TRAK).
  bool trak_example_level_Q = false;

  gradfeat::FeatureOptions feature_options(double epsilon = 1e-8) const;
};

// exp1..exp5, trackstar, trak.
MethodConfig preset(std::string_view name);
const std::vector<std::string>& preset_names();

// fn=..;opt=..;hess=none|train|mixed:<lambda>;norm=..;exq=..;proj=<seed>,<d>
std::string fingerprint(const MethodConfig& m, std::uint64_t projection_seed, std::size_t d);
MethodConfig parse_fingerprint(std::string_view fp, std::uint64_t* projection_seed = nullptr,
                               std::size_t* d = nullptr);

// Frozen inputs a preset may need. Missing pieces are reported by name.
struct Artifacts {
  const tinylm::ModelState* state = nullptr;
  const tinylm::OptimizerState* optimizer = nullptr;
  const gradfeat::ProjectionSpec* projection = nullptr;
  const hessian::HessianBlocks* train_hessian = nullptr;  // raw features
  const hessian::HessianBlocks* train_hessian_corrected = nullptr;
  const hessian::HessianBlocks* mixed_hessian = nullptr;  // corrected features
  const hessian::HessianBlocks* trak_hessian = nullptr;   // raw margin features
};

// The Hessian the preset whitens with, or null for none.
const hessian::HessianBlocks* hessian_for(const MethodConfig& m, const Artifacts& a);
std::string fingerprint(const MethodConfig& m, const Artifacts& a);

struct Featurized {
  gradfeat::FeatureVector vector;
  std::optional<float> weight;  // candidate multiplier (TRAK)
};

// Featurizer bound to one preset and artifact set; reuse it across examples.
class PresetFeaturizer {
 public:
  PresetFeaturizer(MethodConfig m, const Artifacts& a);

  Featurized candidate(const tinylm::ExampleRecord& ex) const;
  gradfeat::FeatureVector query(const tinylm::ExampleRecord& ex) const;
  const std::string& fingerprint() const { return fingerprint_; }
  const MethodConfig& method() const { return method_; }

 private:
  MethodConfig method_;
  gradfeat::Featurizer featurizer_;
  const hessian::HessianBlocks* hessian_;
  std::string fingerprint_;
};

Featurized featurize_candidate(const MethodConfig& m, const Artifacts& a,
                               const tinylm::ExampleRecord& ex);
gradfeat::FeatureVector featurize_query(const MethodConfig& m, const Artifacts& a,
                                        const tinylm::ExampleRecord& ex);

FeatureIndex build_index(const MethodConfig& m, const Artifacts& a,
                         std::span<const tinylm::ExampleRecord> candidates,
                         std::span<const index::RowMeta> meta, int threads = 1);

// Featurizes the query with the preset and retrieves from a prebuilt index
// whose fingerprint must match.
RetrievalResult score_with_method(const MethodConfig& m, const Artifacts& a,
                                  const tinylm::ExampleRecord& query, const FeatureIndex& index,
                                  int k, const index::RetrieveOptions& options = {});
// Builds a throwaway index over `candidates` first.
RetrievalResult score_with_method(const MethodConfig& m, const Artifacts& a,
                                  const tinylm::ExampleRecord& query,
                                  std::span<const tinylm::ExampleRecord> candidates, int k,
                                  const index::RetrieveOptions& options = {});

// ---------------------------------------------------------------------------
// BM25. score = sum over query tokens (repeats count) of
//   idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl)),
//   idf = ln(1 + (N - df + 0.5) / (df + 0.5)),
// with dl counted after stopword removal.

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
  bool drop_stopwords = true;

  void validate() const;
};

class Bm25Index {
 public:
  Bm25Index(std::span<const std::string> ids, std::span<const std::string> texts,
            Bm25Params params = {});

  std::size_t size() const { return ids_.size(); }
  double idf(std::string_view term) const;
  double avgdl() const { return avgdl_; }
  // Score of every document; zero where no query term occurs.
  std::vector<double> scores(std::string_view query) const;
  const Bm25Params& params() const { return params_; }
  const std::string& id(std::size_t i) const { return ids_.at(i); }

 private:
  Bm25Params params_;
  std::vector<std::string> ids_;
  std::vector<int> doc_len_;
  double avgdl_ = 0.0;
  std::map<std::string, std::vector<std::pair<std::uint32_t, std::uint32_t>>, std::less<>> postings_;
};

struct Bm25Result {
  RetrievalResult result;
  bool empty_query = false;  // nothing left after stopword removal
};

std::string bm25_fingerprint(const Bm25Params& p);

// Only documents sharing a term with the query are ranked; ties by corpus
// order.
Bm25Result bm25_retrieve(const Bm25Index& index, std::string_view query, int k);

// ---------------------------------------------------------------------------
// Externally computed embeddings (one JSON object per line: {"id", "vector"}).

struct ExternalEmbeddings {
  std::string name;
  std::vector<std::string> ids;
  MatrixF vectors;

  static ExternalEmbeddings load(const std::filesystem::path& path, std::string name);
  FeatureIndex to_index() const;
};

}  // namespace tda::methods
