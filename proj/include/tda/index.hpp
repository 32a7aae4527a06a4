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

// Flat feature store and exact top-k inner-product retrieval.

#include "tda/gradfeat.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tda::index {

using gradfeat::FeatureVector;

struct RowMeta {
  std::string id;
  std::uint64_t offset = 0;  // byte offset of the record in the corpus file
  std::uint64_t length = 0;
};

class FeatureIndex {
 public:
  FeatureIndex() = default;
  FeatureIndex(std::vector<int> block_dims, std::string fingerprint,
               std::uint64_t config_hash = 0);

  // `weight` multiplies this row's scores at retrieval time.
  void append(std::span<const float> row, RowMeta meta, std::optional<float> weight = {});
  void reserve(std::size_t n);

  std::size_t size() const { return meta_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<int>& block_dims() const { return block_dims_; }
  const std::string& fingerprint() const { return fingerprint_; }
  std::uint64_t config_hash() const { return config_hash_; }

  Eigen::Map<const MatrixF> rows() const;
  std::span<const float> data() const { return data_; }
  std::span<const float> row(std::size_t i) const;
  const RowMeta& meta(std::size_t i) const { return meta_.at(i); }
  // Empty when no row carries a weight.
  const std::vector<float>& weights() const { return weights_; }
  std::optional<std::size_t> find(std::string_view id) const;

  // Writes `path` (rows) and `path` + ".meta.jsonl" (sidecar).
  void save(const std::filesystem::path& path) const;
  static FeatureIndex load(const std::filesystem::path& path);

 private:
  friend class IndexBuilder;
  std::vector<int> block_dims_;
  std::string fingerprint_;
  std::uint64_t config_hash_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
  std::vector<RowMeta> meta_;
  std::vector<float> weights_;
};

struct Hit {
  std::string example_id;
  std::size_t row = 0;
  float score = 0.0f;
  int rank = 0;
};

struct RetrievalResult {
  std::string query_id;
  std::string fingerprint;
  std::vector<Hit> hits;
  bool truncated = false;  // fewer than k candidates were available
};

struct RetrieveOptions {
  int threads = 1;
  std::size_t shard_rows = 65536;
};

// Top-k of rows * q (times the optional per-row weights). Ties go to the
// lower row, which is corpus order.
std::vector<std::pair<std::size_t, float>> top_k(std::span<const float> rows, std::size_t d,
                                                 std::span<const float> weights,
                                                 std::span<const float> q, std::size_t k,
                                                 const RetrieveOptions& options = {});
std::vector<std::pair<std::size_t, float>> top_k(const MatrixF& rows, std::span<const float> weights,
                                                 std::span<const float> q, std::size_t k,
                                                 const RetrieveOptions& options = {});

// Checks the query fingerprint and dimension, then ranks.
RetrievalResult retrieve(const FeatureIndex& index, const FeatureVector& q,
                         std::string_view query_fingerprint, int k,
                         const RetrieveOptions& options = {});

// Scores every row of `queries` against the index; same tie rules.
std::vector<RetrievalResult> retrieve_batch(const FeatureIndex& index, const MatrixF& queries,
                                            std::span<const std::string> query_ids,
                                            std::string_view query_fingerprint, int k,
                                            const RetrieveOptions& options = {});

// Builds `path` shard by shard through a ".partial" file so an interrupted
// build resumes where it stopped. A partial file written under a different
// fingerprint is an error rather than silently reused.
class IndexBuilder {
 public:
  struct Row {
    std::vector<float> values;
    std::optional<float> weight;
  };
  using Producer = std::function<Row(std::size_t i)>;

  IndexBuilder(std::filesystem::path path, std::vector<int> block_dims, std::string fingerprint,
               std::uint64_t config_hash, std::size_t shard_rows = 65536);

  // Produces rows [0, meta.size()) with `threads` workers, writing each shard
  // before starting the next. Returns the finished index.
  FeatureIndex build(std::span<const RowMeta> meta, const Producer& produce, int threads = 1);

  // Rows already present in a compatible partial file.
  std::size_t resumable_rows(std::size_t n) const;

 private:
  std::filesystem::path path_;
  std::vector<int> block_dims_;
  std::string fingerprint_;
  std::uint64_t config_hash_;
  std::size_t shard_rows_;
};

}  // namespace tda::index
