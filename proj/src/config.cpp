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

#include "tda/config.hpp"

#include <fstream>

namespace tda::config {

using json = nlohmann::json;

json default_document() {
  const tinylm::ModelConfig m;
  const tinylm::TrainHyper h;
  const ProjectionSettings p;
  const HessianSettings hs;
  const methods::Bm25Params bm;
  const facttrace::BenchmarkSpec b;
  const EvalSettings e;
  const ServeSettings s;

  json buckets = json::array();
  for (const auto& bk : b.buckets)
    buckets.push_back({{"name", bk.name}, {"lo", bk.lo}, {"hi", bk.hi}, {"facts", bk.facts}});

  return {
      {"model",
       {{"vocab_size", m.vocab_size},
        {"layers", m.layers},
        {"embed_dim", m.embed_dim},
        {"mlp_hidden", m.mlp_hidden},
        {"heads", m.heads},
        {"seq_len_max", m.seq_len_max},
        {"seed", 1}}},
      {"train",
       {{"steps", 3000},
        {"batch_size", h.batch_size},
        {"learning_rate", h.learning_rate},
        {"warmup_steps", h.warmup_steps},
        {"decay_rate", h.decay_rate},
        {"clip_threshold", h.clip_threshold},
        {"weight_decay", h.weight_decay},
        {"factored", h.factored}}},
      {"projection",
       {{"d_block", p.d_block},
        {"layers_per_block", p.layers_per_block},
        {"seed", p.seed}}},
      {"hessian",
       {{"damping", hs.damping},
        {"crossover_rank", hs.crossover_rank},
        {"lambda_grid", hs.lambda_grid},
        {"eval_targets", "truth"},
        {"eval_queries", "heldout"}}},
      {"method", {{"presets", methods::preset_names()}, {"bm25", {{"k1", bm.k1}, {"b", bm.b}}}}},
      {"benchmark",
       {{"relations", b.relations},
        {"buckets", buckets},
        {"background_facts", b.background_facts},
        {"one_entity_passages", b.one_entity_passages},
        {"partial_passages", b.partial_passages},
        {"distractor_passages", b.distractor_passages},
        {"long_distractor_share", b.long_distractor_share},
        {"query_template_share", b.query_template_share},
        {"seed", b.seed}}},
      {"eval",
       {{"tailpatch_ks", e.tailpatch_ks},
        {"tailpatch_queries", e.tailpatch_queries},
        {"mrr_cap", e.mrr_cap},
        {"recall_k", e.recall_k},
        {"seed", e.seed}}},
      {"serve",
       {{"host", s.host},
        {"port", s.port},
        {"preset", s.preset},
        {"tailpatch_workers", s.tailpatch_workers},
        {"cors_origin", s.cors_origin}}},
  };
}

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // Integers stay integers; reals accept either.
    return !a.is_number_integer() || b.is_number_integer();
  }
  return a.type() == b.type();
}

std::string kind_name(const json& j) {
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  return j.type_name();
}

void overlay(json& base, const json& src, const std::string& path) {
  if (!src.is_object()) throw Error("config: '" + path + "' must be an object");
  for (const auto& [key, value] : src.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw Error("config: unknown key '" + here + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      overlay(slot, value, here);
    } else if (!same_kind(slot, value)) {
      throw Error("config: '" + here + "' expects " + kind_name(slot) + ", got " + kind_name(value));
    } else {
      slot = value;
    }
  }
}

template <class T>
T get(const json& doc, const char* section, const char* key) {
  return doc.at(section).at(key).get<T>();
}

}  // namespace

RunConfig::RunConfig() : doc_(default_document()) {}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
  RunConfig c;
  c.merge(j);
  return c;
}

void RunConfig::merge(const json& overrides) {
  json next = doc_;
  overlay(next, overrides, "");
  RunConfig probe;
  probe.doc_ = next;
  // Typed accessors validate ranges.
  probe.model().validate();
  probe.benchmark().validate();
  probe.method().bm25.validate();
  (void)probe.hessian();
  (void)probe.projection();
  (void)probe.eval();
  doc_ = std::move(next);
}

void RunConfig::set_value(std::string_view dotted_key, const json& value) {
  json patch = value;
  std::string key(dotted_key);
  for (auto dot = key.rfind('.'); dot != std::string::npos; dot = key.rfind('.')) {
    patch = json{{key.substr(dot + 1), patch}};
    key.resize(dot);
  }
  merge(json{{key, patch}});
}

void RunConfig::set(std::string_view dotted_key, std::string_view value) {
  json v = json::parse(value, nullptr, false);
  if (v.is_discarded()) v = std::string(value);
  set_value(dotted_key, v);
}

void RunConfig::set_seed(std::uint64_t seed) {
  merge({{"model", {{"seed", seed}}}, {"benchmark", {{"seed", seed}}}, {"projection", {{"seed", seed}}}});
}

std::uint64_t RunConfig::hash() const { return fnv1a(doc_.dump()); }

std::uint64_t RunConfig::section_hash(std::string_view section) const {
  return fnv1a(doc_.at(std::string(section)).dump(), fnv1a(section));
}

tinylm::ModelConfig RunConfig::model() const {
  const auto& m = doc_.at("model");
  tinylm::ModelConfig c;
  c.vocab_size = m.at("vocab_size");
  c.layers = m.at("layers");
  c.embed_dim = m.at("embed_dim");
  c.mlp_hidden = m.at("mlp_hidden");
  c.heads = m.at("heads");
  c.seq_len_max = m.at("seq_len_max");
  c.seed = m.at("seed");
  return c;
}

tinylm::TrainHyper RunConfig::hyper() const {
  const auto& t = doc_.at("train");
  tinylm::TrainHyper h;
  h.batch_size = t.at("batch_size");
  h.learning_rate = t.at("learning_rate");
  h.warmup_steps = t.at("warmup_steps");
  h.decay_rate = t.at("decay_rate");
  h.clip_threshold = t.at("clip_threshold");
  h.weight_decay = t.at("weight_decay");
  h.factored = t.at("factored");
  if (h.batch_size < 1) throw Error("config: train.batch_size must be >= 1");
  if (h.learning_rate < 0) throw Error("config: train.learning_rate must be >= 0");
  return h;
}

std::int64_t RunConfig::train_steps() const {
  const auto steps = get<std::int64_t>(doc_, "train", "steps");
  if (steps < 0) throw Error("config: train.steps must be >= 0");
  return steps;
}

ProjectionSettings RunConfig::projection() const {
  ProjectionSettings p;
  p.d_block = get<int>(doc_, "projection", "d_block");
  p.layers_per_block = get<int>(doc_, "projection", "layers_per_block");
  p.seed = get<std::uint64_t>(doc_, "projection", "seed");
  if (p.layers_per_block < 1) throw Error("config: projection.layers_per_block must be >= 1");
  return p;
}

HessianSettings RunConfig::hessian() const {
  HessianSettings h;
  h.damping = get<double>(doc_, "hessian", "damping");
  h.crossover_rank = get<int>(doc_, "hessian", "crossover_rank");
  h.lambda_grid = doc_.at("hessian").at("lambda_grid").get<std::vector<double>>();
  const auto t = get<std::string>(doc_, "hessian", "eval_targets");
  if (t == "truth") {
    h.eval_targets = EvalTargets::truth;
  } else if (t == "prediction") {
    h.eval_targets = EvalTargets::prediction;
  } else {
    throw Error("config: hessian.eval_targets must be 'truth' or 'prediction'");
  }
  const auto q = get<std::string>(doc_, "hessian", "eval_queries");
  if (q == "heldout") {
    h.eval_queries = EvalQueries::heldout;
  } else if (q == "evaluated") {
    h.eval_queries = EvalQueries::evaluated;
  } else {
    throw Error("config: hessian.eval_queries must be 'heldout' or 'evaluated'");
  }
  if (h.damping < 0) throw Error("config: hessian.damping must be >= 0");
  if (h.crossover_rank < 0) throw Error("config: hessian.crossover_rank must be >= 0");
  if (h.lambda_grid.empty()) throw Error("config: hessian.lambda_grid is empty");
  for (double l : h.lambda_grid)
    if (l < 0 || l > 1) throw Error("config: hessian.lambda_grid values must lie in [0, 1]");
  return h;
}

MethodSettings RunConfig::method() const {
  MethodSettings m;
  m.presets = doc_.at("method").at("presets").get<std::vector<std::string>>();
  for (const auto& p : m.presets) (void)methods::preset(p);
  m.bm25.k1 = doc_.at("method").at("bm25").at("k1");
  m.bm25.b = doc_.at("method").at("bm25").at("b");
  return m;
}

facttrace::BenchmarkSpec RunConfig::benchmark() const {
  const auto& b = doc_.at("benchmark");
  facttrace::BenchmarkSpec s;
  s.relations = b.at("relations");
  s.buckets.clear();
  for (const auto& bk : b.at("buckets")) {
    s.buckets.push_back({bk.at("name"), bk.at("lo"), bk.at("hi"), bk.at("facts")});
  }
  s.background_facts = b.at("background_facts");
  s.one_entity_passages = b.at("one_entity_passages");
  s.partial_passages = b.at("partial_passages");
  s.distractor_passages = b.at("distractor_passages");
  s.long_distractor_share = b.at("long_distractor_share");
  s.query_template_share = b.at("query_template_share");
  s.seed = b.at("seed");
  return s;
}

EvalSettings RunConfig::eval() const {
  EvalSettings e;
  e.tailpatch_ks = doc_.at("eval").at("tailpatch_ks").get<std::vector<int>>();
  e.tailpatch_queries = get<int>(doc_, "eval", "tailpatch_queries");
  e.mrr_cap = get<int>(doc_, "eval", "mrr_cap");
  e.recall_k = get<int>(doc_, "eval", "recall_k");
  e.seed = get<std::uint64_t>(doc_, "eval", "seed");
  if (e.tailpatch_ks.empty()) throw Error("config: eval.tailpatch_ks is empty");
  for (int k : e.tailpatch_ks)
    if (k < 1) throw Error("config: eval.tailpatch_ks values must be >= 1");
  if (e.tailpatch_queries < 0) throw Error("config: eval.tailpatch_queries must be >= 0");
  if (e.mrr_cap < 1 || e.recall_k < 1) throw Error("config: eval.mrr_cap and eval.recall_k must be >= 1");
  return e;
}

ServeSettings RunConfig::serve() const {
  ServeSettings s;
  s.host = get<std::string>(doc_, "serve", "host");
  s.port = get<int>(doc_, "serve", "port");
  s.preset = get<std::string>(doc_, "serve", "preset");
  s.tailpatch_workers = get<int>(doc_, "serve", "tailpatch_workers");
  s.cors_origin = get<std::string>(doc_, "serve", "cors_origin");
  if (s.port < 0 || s.port > 65535) throw Error("config: serve.port out of range");
  if (s.tailpatch_workers < 1) throw Error("config: serve.tailpatch_workers must be >= 1");
  if (s.preset != "bm25") (void)methods::preset(s.preset);
  return s;
}

}  // namespace tda::config
