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

#include "tda/methods.hpp"

#include "tda/text.hpp"

#include "json.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

namespace tda::methods {

namespace {

const tinylm::OptimizerState& empty_optimizer() {
  static const tinylm::OptimizerState opt;
  return opt;
}

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw Error("cannot format number");
  return {buf, end};
}

void require(const void* p, const std::string& what, const MethodConfig& m) {
  if (p == nullptr) throw Error("method '" + m.name + "' needs " + what + ", which is not loaded");
}

}  // namespace

gradfeat::FeatureOptions MethodConfig::feature_options(double epsilon) const {
  gradfeat::FeatureOptions o;
  o.output_fn = output_fn;
  o.weighting = trak_example_level_Q ? tinylm::QWeighting::none : tinylm::QWeighting::token;
  o.use_optimizer_correction = use_optimizer_correction;
  o.use_unit_norm = use_unit_norm;
  o.epsilon = epsilon;
  return o;
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"exp1", "exp2",      "exp3", "exp4",
                                                 "exp5", "trackstar", "trak"};
  return names;
}

MethodConfig preset(std::string_view name) {
  MethodConfig m;
  m.name = std::string(name);
  if (name == "exp1") return m;
  m.use_unit_norm = true;
  if (name == "exp2") return m;
  if (name == "exp3") {
    m.hessian_mode = HessianMode::train;
    return m;
  }
  m.use_optimizer_correction = true;
  if (name == "exp4") return m;
  if (name == "exp5") {
    m.hessian_mode = HessianMode::train;
    return m;
  }
  if (name == "trackstar") {
    m.hessian_mode = HessianMode::mixed;
    return m;
  }
  if (name == "trak") {
    MethodConfig t;
    t.name = "trak";
    t.output_fn = tinylm::OutputFn::margin;
    t.hessian_mode = HessianMode::train;
    t.trak_example_level_Q = true;
    return t;
  }
  throw Error("unknown method preset '" + std::string(name) + "'");
}

std::string fingerprint(const MethodConfig& m, std::uint64_t projection_seed, std::size_t d) {
  std::string hess = "none";
  if (m.hessian_mode == HessianMode::train) hess = "train";
  if (m.hessian_mode == HessianMode::mixed) hess = "mixed:" + format_double(m.lambda);
  return "fn=" + std::string(tinylm::to_string(m.output_fn)) +
         ";opt=" + (m.use_optimizer_correction ? "1" : "0") + ";hess=" + hess +
         ";norm=" + (m.use_unit_norm ? "1" : "0") + ";exq=" + (m.trak_example_level_Q ? "1" : "0") +
         ";proj=" + std::to_string(projection_seed) + "," + std::to_string(d);
}

MethodConfig parse_fingerprint(std::string_view fp, std::uint64_t* projection_seed, std::size_t* d) {
  MethodConfig m;
  std::map<std::string, std::string, std::less<>> kv;
  std::size_t pos = 0;
  while (pos <= fp.size()) {
    auto end = fp.find(';', pos);
    if (end == std::string_view::npos) end = fp.size();
    auto item = fp.substr(pos, end - pos);
    auto eq = item.find('=');
    if (eq == std::string_view::npos) throw Error("malformed fingerprint '" + std::string(fp) + "'");
    kv[std::string(item.substr(0, eq))] = std::string(item.substr(eq + 1));
    pos = end + 1;
  }
  for (const char* key : {"fn", "opt", "hess", "norm", "exq", "proj"}) {
    if (!kv.count(key)) throw Error("fingerprint lacks '" + std::string(key) + "'");
  }
  m.output_fn = tinylm::parse_output_fn(kv["fn"]);
  m.use_optimizer_correction = kv["opt"] == "1";
  m.use_unit_norm = kv["norm"] == "1";
  m.trak_example_level_Q = kv["exq"] == "1";
  const auto& h = kv["hess"];
  if (h == "none") {
    m.hessian_mode = HessianMode::none;
  } else if (h == "train") {
    m.hessian_mode = HessianMode::train;
  } else if (h.rfind("mixed:", 0) == 0) {
    m.hessian_mode = HessianMode::mixed;
    m.lambda = std::stod(h.substr(6));
  } else {
    throw Error("fingerprint has unknown Hessian mode '" + h + "'");
  }
  const auto& proj = kv["proj"];
  const auto comma = proj.find(',');
  if (comma == std::string::npos) throw Error("fingerprint projection field malformed");
  if (projection_seed) *projection_seed = std::stoull(proj.substr(0, comma));
  if (d) *d = std::stoull(proj.substr(comma + 1));
  return m;
}

const hessian::HessianBlocks* hessian_for(const MethodConfig& m, const Artifacts& a) {
  switch (m.hessian_mode) {
    case HessianMode::none:
      return nullptr;
    case HessianMode::train:
      if (m.trak_example_level_Q) {
        require(a.trak_hessian, "the TRAK (margin-gradient) Hessian", m);
        return a.trak_hessian;
      }
      if (m.use_optimizer_correction) {
        require(a.train_hessian_corrected, "the optimizer-corrected train Hessian", m);
        return a.train_hessian_corrected;
      }
      require(a.train_hessian, "the train Hessian", m);
      return a.train_hessian;
    case HessianMode::mixed:
      require(a.mixed_hessian, "the mixed train/eval Hessian", m);
      return a.mixed_hessian;
  }
  return nullptr;
}

std::string fingerprint(const MethodConfig& m, const Artifacts& a) {
  require(a.projection, "a projection", m);
  MethodConfig copy = m;
  if (m.hessian_mode == HessianMode::mixed) copy.lambda = hessian_for(m, a)->lambda;
  return fingerprint(copy, a.projection->seed(), a.projection->dim());
}

namespace {

gradfeat::Featurizer make_featurizer(const MethodConfig& m, const Artifacts& a) {
  require(a.state, "a trained model", m);
  require(a.projection, "a projection", m);
  if (m.use_optimizer_correction) require(a.optimizer, "optimizer state", m);
  const auto& opt = a.optimizer ? *a.optimizer : empty_optimizer();
  return gradfeat::Featurizer(*a.state, opt, *a.projection, m.feature_options());
}

Featurized featurize_with(const gradfeat::Featurizer& f, const MethodConfig& m,
                          const hessian::HessianBlocks* h, const tinylm::ExampleRecord& ex) {
  Featurized out{f.featurize(ex, h), std::nullopt};
  if (m.trak_example_level_Q) out.weight = static_cast<float>(1.0 - out.vector.mean_target_prob);
  return out;
}

}  // namespace

PresetFeaturizer::PresetFeaturizer(MethodConfig m, const Artifacts& a)
    : method_(std::move(m)),
      featurizer_(make_featurizer(method_, a)),
      hessian_(hessian_for(method_, a)),
      fingerprint_(methods::fingerprint(method_, a)) {}

Featurized PresetFeaturizer::candidate(const tinylm::ExampleRecord& ex) const {
  return featurize_with(featurizer_, method_, hessian_, ex);
}

gradfeat::FeatureVector PresetFeaturizer::query(const tinylm::ExampleRecord& ex) const {
  return featurizer_.featurize(ex, hessian_);
}

Featurized featurize_candidate(const MethodConfig& m, const Artifacts& a,
                               const tinylm::ExampleRecord& ex) {
  return featurize_with(make_featurizer(m, a), m, hessian_for(m, a), ex);
}

gradfeat::FeatureVector featurize_query(const MethodConfig& m, const Artifacts& a,
                                        const tinylm::ExampleRecord& ex) {
  return make_featurizer(m, a).featurize(ex, hessian_for(m, a));
}

FeatureIndex build_index(const MethodConfig& m, const Artifacts& a,
                         std::span<const tinylm::ExampleRecord> candidates,
                         std::span<const index::RowMeta> meta, int threads) {
  if (meta.size() != candidates.size()) throw ShapeError("build_index: one meta record per candidate");
  const auto f = make_featurizer(m, a);
  const auto* h = hessian_for(m, a);
  std::vector<Featurized> rows(candidates.size());
  parallel_for(candidates.size(), threads,
               [&](std::size_t i) { rows[i] = featurize_with(f, m, h, candidates[i]); });
  FeatureIndex idx(a.projection->block_dims(), fingerprint(m, a));
  idx.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) idx.append(rows[i].vector.values, meta[i], rows[i].weight);
  return idx;
}

RetrievalResult score_with_method(const MethodConfig& m, const Artifacts& a,
                                  const tinylm::ExampleRecord& query, const FeatureIndex& index,
                                  int k, const index::RetrieveOptions& options) {
  const auto q = featurize_query(m, a, query);
  return index::retrieve(index, q, fingerprint(m, a), k, options);
}

RetrievalResult score_with_method(const MethodConfig& m, const Artifacts& a,
                                  const tinylm::ExampleRecord& query,
                                  std::span<const tinylm::ExampleRecord> candidates, int k,
                                  const index::RetrieveOptions& options) {
  std::vector<index::RowMeta> meta;
  for (const auto& c : candidates) meta.push_back({c.id, 0, 0});
  const auto idx = build_index(m, a, candidates, meta, options.threads);
  return score_with_method(m, a, query, idx, k, options);
}

// ---------------------------------------------------------------------------

void Bm25Params::validate() const {
  if (!(k1 > 0.0)) throw Error("BM25 k1 must be > 0");
  if (!(b >= 0.0 && b <= 1.0)) throw Error("BM25 b must lie in [0, 1]");
}

Bm25Index::Bm25Index(std::span<const std::string> ids, std::span<const std::string> texts,
                     Bm25Params params)
    : params_(params), ids_(ids.begin(), ids.end()) {
  params_.validate();
  if (ids.size() != texts.size()) throw ShapeError("Bm25Index: one id per text required");
  double total = 0.0;
  for (std::size_t d = 0; d < texts.size(); ++d) {
    const auto toks = text::lexical_tokens(texts[d], params_.drop_stopwords);
    doc_len_.push_back(static_cast<int>(toks.size()));
    total += static_cast<double>(toks.size());
    std::map<std::string, std::uint32_t> tf;
    for (const auto& t : toks) ++tf[t];
    for (const auto& [term, n] : tf) postings_[term].emplace_back(static_cast<std::uint32_t>(d), n);
  }
  avgdl_ = texts.empty() ? 0.0 : total / static_cast<double>(texts.size());
}

double Bm25Index::idf(std::string_view term) const {
  auto it = postings_.find(term);
  const double df = it == postings_.end() ? 0.0 : static_cast<double>(it->second.size());
  const double n = static_cast<double>(ids_.size());
  return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

std::vector<double> Bm25Index::scores(std::string_view query) const {
  std::vector<double> out(ids_.size(), 0.0);
  if (avgdl_ <= 0.0) return out;
  for (const auto& term : text::lexical_tokens(query, params_.drop_stopwords)) {
    auto it = postings_.find(term);
    if (it == postings_.end()) continue;
    const double w = idf(term);
    for (const auto& [doc, tf] : it->second) {
      const double f = tf;
      const double norm = params_.k1 * (1.0 - params_.b + params_.b * doc_len_[doc] / avgdl_);
      out[doc] += w * f * (params_.k1 + 1.0) / (f + norm);
    }
  }
  return out;
}

std::string bm25_fingerprint(const Bm25Params& p) {
  return "bm25:k1=" + format_double(p.k1) + ";b=" + format_double(p.b);
}

Bm25Result bm25_retrieve(const Bm25Index& index, std::string_view query, int k) {
  if (k < 1) throw Error("k must be >= 1");
  Bm25Result out;
  out.result.query_id = std::string(query);
  out.result.fingerprint = bm25_fingerprint(index.params());
  if (text::lexical_tokens(query, index.params().drop_stopwords).empty()) {
    out.empty_query = true;
    out.result.truncated = true;
    return out;
  }
  const auto s = index.scores(query);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] > 0.0) order.push_back(i);
  }
  const auto keep = std::min(order.size(), static_cast<std::size_t>(k));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
  for (std::size_t r = 0; r < keep; ++r) {
    out.result.hits.push_back(
        {index.id(order[r]), order[r], static_cast<float>(s[order[r]]), static_cast<int>(r + 1)});
  }
  out.result.truncated = keep < static_cast<std::size_t>(k);
  return out;
}

// ---------------------------------------------------------------------------

ExternalEmbeddings ExternalEmbeddings::load(const std::filesystem::path& path, std::string name) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open embeddings " + path.string());
  ExternalEmbeddings e;
  e.name = std::move(name);
  std::vector<std::vector<float>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    e.ids.push_back(j.at("id").get<std::string>());
    rows.push_back(j.at("vector").get<std::vector<float>>());
    if (rows.back().size() != rows.front().size())
      throw ShapeError("embedding for '" + e.ids.back() + "' has a different dimension");
  }
  if (rows.empty()) throw Error("no embeddings in " + path.string());
  e.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i].begin(), rows[i].end(), e.vectors.row(static_cast<Eigen::Index>(i)).data());
  return e;
}

FeatureIndex ExternalEmbeddings::to_index() const {
  FeatureIndex idx({static_cast<int>(vectors.cols())}, "external:" + name);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    idx.append({vectors.data() + i * static_cast<std::size_t>(vectors.cols()),
                static_cast<std::size_t>(vectors.cols())},
               {ids[i], 0, 0});
  }
  return idx;
}

}  // namespace tda::methods
