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

// Run configuration: one JSON document with sections model, train,
// projection, hessian, method, benchmark, eval and serve. Every key has a
// built-in default; files and overrides may only replace existing keys.

#include "tda/facttrace.hpp"
#include "tda/methods.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace tda::config {

struct ProjectionSettings {
  int d_block = 1024;
  int layers_per_block = 1;
  std::uint64_t seed = 17;
};

enum class EvalTargets : std::uint8_t { truth, prediction };

// Which task queries estimate R_eval: held-out facts rendered in the query
// templates, or the evaluated queries themselves.
enum class EvalQueries : std::uint8_t { heldout, evaluated };

struct HessianSettings {
  double damping = 1e-6;
  int crossover_rank = 0;  // 0 means d / 64
  std::vector<double> lambda_grid{0.5, 0.9, 0.99, 0.999};
  EvalTargets eval_targets = EvalTargets::truth;
  EvalQueries eval_queries = EvalQueries::heldout;
};

struct MethodSettings {
  std::vector<std::string> presets;
  methods::Bm25Params bm25;
};

struct EvalSettings {
  std::vector<int> tailpatch_ks{1, 3, 5, 10};
  int tailpatch_queries = 50;
  int mrr_cap = 100;
  int recall_k = 10;
  std::uint64_t seed = 5;
};

struct ServeSettings {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string preset = "trackstar";
  int tailpatch_workers = 2;
  std::string cors_origin = "*";
};

class RunConfig {
 public:
  RunConfig();

  // Defaults overlaid with the JSON object in `path`.
  static RunConfig load(const std::filesystem::path& path);

  // Replaces one existing key, e.g. set("train.steps", "500"). The value is
  // read as JSON when it parses and as a string otherwise.
  void set(std::string_view dotted_key, std::string_view value);
  void set_value(std::string_view dotted_key, const nlohmann::json& value);
  void merge(const nlohmann::json& overrides);
  // Seeds the model, benchmark and projection from one number.
  void set_seed(std::uint64_t seed);

  const nlohmann::json& doc() const { return doc_; }
  std::string dump(int indent = 2) const { return doc_.dump(indent); }
  // Independent of key order in the source file.
  std::uint64_t hash() const;
  std::uint64_t section_hash(std::string_view section) const;

  tinylm::ModelConfig model() const;
  tinylm::TrainHyper hyper() const;
  std::int64_t train_steps() const;
  ProjectionSettings projection() const;
  HessianSettings hessian() const;
  MethodSettings method() const;
  facttrace::BenchmarkSpec benchmark() const;
  EvalSettings eval() const;
  ServeSettings serve() const;

 private:
  nlohmann::json doc_;
};

nlohmann::json default_document();

}  // namespace tda::config
