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

#include "tda/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace tda::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

fs::path default_cache_dir() {
  if (const char* env = std::getenv("TDA_CACHE_DIR"); env && *env) return env;
  return "tda-cache";
}

MissingArtifact::MissingArtifact(const std::string& what, std::string_view producer)
    : Error("missing " + what + "; run `tda " + std::string(producer) + "` first") {}

std::vector<const facttrace::FactRecord*> Dataset::eval_facts() const {
  std::vector<const facttrace::FactRecord*> out;
  for (const auto& f : facts)
    if (!f.background) out.push_back(&f);
  return out;
}

const facttrace::FactRecord* Dataset::fact(std::string_view id) const {
  for (const auto& f : facts)
    if (f.id == id) return &f;
  return nullptr;
}

const facttrace::FactRecord* Dataset::fact_by_prompt(std::string_view prompt) const {
  const auto key = text::lexical_tokens(prompt, false);
  if (key.empty()) return nullptr;
  for (const auto& f : facts)
    if (!f.background && text::lexical_tokens(f.prompt, false) == key) return &f;
  return nullptr;
}

namespace {

// Writes through a temporary sibling and renames into place.
template <class F>
void write_atomic(const fs::path& path, F&& write) {
  const fs::path tmp = path.string() + ".tmp";
  write(tmp);
  fs::rename(tmp, path);
}

void write_text(const fs::path& path, const std::string& text) {
  write_atomic(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw Error("write failed: " + tmp.string());
  });
}

std::string hexname(std::string_view stage, std::uint64_t h) {
  return std::string(stage) + "-" + hex64(h);
}

void check_hash(std::uint64_t found, std::uint64_t expected, const fs::path& path,
                std::string_view producer) {
  if (found != expected) {
    throw Error(path.string() + " was produced by a different configuration; rerun `tda " +
                std::string(producer) + " --force`");
  }
}

MatrixF project_all(const gradfeat::Featurizer& f, std::span<const tinylm::ExampleRecord> examples,
                    int threads) {
  MatrixF out(static_cast<Eigen::Index>(examples.size()),
              static_cast<Eigen::Index>(f.spec().dim()));
  parallel_for(examples.size(), threads, [&](std::size_t i) {
    const auto v = f.projected(examples[i]);
    std::copy(v.values.begin(), v.values.end(), out.row(static_cast<Eigen::Index>(i)).data());
  });
  return out;
}

hessian::HessianBlocks estimate_from(const MatrixF& rows, const std::vector<int>& dims,
                                     hessian::Provenance provenance) {
  hessian::Accumulator acc(dims);
  acc.add_rows(rows);
  return acc.finalize(provenance);
}

const char* const kHessianNames[] = {"train_raw", "train_corrected", "trak", "eval", "mixed"};

}  // namespace

// ---------------------------------------------------------------------------
// Workspace.

Workspace::Workspace(config::RunConfig config, Options options)
    : config_(std::move(config)), options_(std::move(options)) {
  if (options_.threads < 1) throw Error("--threads must be >= 1");
}

void Workspace::log(const std::string& line) const {
  if (options_.log) *options_.log << line << std::endl;
}

std::uint64_t Workspace::data_hash() const {
  return fnv1a(config_.doc().at("benchmark").dump() + "|vocab=" +
               std::to_string(config_.model().vocab_size) + "|seq=" +
               std::to_string(config_.model().seq_len_max));
}
std::uint64_t Workspace::model_hash() const {
  return fnv1a(config_.doc().at("model").dump() + config_.doc().at("train").dump(), data_hash());
}
std::uint64_t Workspace::features_hash() const {
  return fnv1a(config_.doc().at("projection").dump() + config_.doc().at("hessian").dump(),
               model_hash());
}
std::uint64_t Workspace::eval_hash() const {
  return fnv1a(config_.doc().at("method").dump() + config_.doc().at("eval").dump(), features_hash());
}

fs::path Workspace::data_dir() const { return options_.cache_dir / hexname("data", data_hash()); }
fs::path Workspace::model_dir() const { return options_.cache_dir / hexname("model", model_hash()); }
fs::path Workspace::features_dir() const {
  return options_.cache_dir / hexname("features", features_hash());
}
fs::path Workspace::eval_dir() const { return options_.cache_dir / hexname("eval", eval_hash()); }
fs::path Workspace::hessian_path(std::string_view name) const {
  return features_dir() / ("hessian_" + std::string(name) + ".hess");
}
fs::path Workspace::index_path(std::string_view preset) const {
  return features_dir() / ("index_" + std::string(preset) + ".tsix");
}
fs::path Workspace::report_path(std::string_view ext) const {
  return eval_dir() / ("report." + std::string(ext));
}

gradfeat::ProjectionSpec Workspace::projection_spec(const tinylm::ModelConfig& model) const {
  const auto p = config_.projection();
  return gradfeat::ProjectionSpec(tinylm::LayerBlockLayout::make(model, p.layers_per_block),
                                  p.d_block, p.seed);
}

void Workspace::gen_data() const {
  const auto dir = data_dir();
  if (!options_.force && fs::exists(dir / "vocab.txt")) {
    log("gen-data: up to date (" + dir.string() + ")");
    return;
  }
  fs::create_directories(dir);
  fs::remove(dir / "vocab.txt");
  const auto bench = facttrace::generate_benchmark(config_.benchmark());
  std::vector<std::string> texts;
  for (const auto& p : bench.passages) texts.push_back(p.text);
  for (const auto& f : bench.facts) texts.push_back(f.prompt + " " + f.target);
  const auto model = config_.model();
  const auto vocab = text::Vocabulary::build(texts, model.vocab_size);
  for (const auto& p : bench.passages) {
    const auto n = vocab.encode(p.text).size() + 2;
    if (n > static_cast<std::size_t>(model.seq_len_max)) {
      throw Error("passage " + p.id + " needs " + std::to_string(n) +
                  " tokens but model.seq_len_max is " + std::to_string(model.seq_len_max));
    }
  }
  write_atomic(dir / "corpus.jsonl", [&](const fs::path& t) { facttrace::write_corpus(t, bench.passages); });
  write_atomic(dir / "facts.jsonl", [&](const fs::path& t) { facttrace::write_facts(t, bench.facts); });
  write_text(dir / "stamp.json",
             json{{"stage", "gen-data"}, {"config_hash", hex64(data_hash())}, {"benchmark", config_.doc().at("benchmark")}}
                     .dump(2) +
                 "\n");
  // vocab.txt goes last and marks the stage complete.
  write_atomic(dir / "vocab.txt", [&](const fs::path& t) { vocab.save(t); });
  log("gen-data: " + std::to_string(bench.passages.size()) + " passages, " +
      std::to_string(bench.eval_facts().size()) + " eval facts, vocabulary " +
      std::to_string(vocab.size()) + " -> " + dir.string());
}

Dataset Workspace::load_data() const {
  const auto dir = data_dir();
  if (!fs::exists(dir / "vocab.txt")) throw MissingArtifact("dataset " + dir.string(), "gen-data");
  Dataset d;
  d.vocab = text::Vocabulary::load(dir / "vocab.txt");
  d.passages = facttrace::read_corpus(dir / "corpus.jsonl", &d.meta);
  d.facts = facttrace::read_facts(dir / "facts.jsonl");
  d.examples.reserve(d.passages.size());
  for (std::size_t i = 0; i < d.passages.size(); ++i) {
    const auto& p = d.passages[i];
    d.examples.push_back(facttrace::passage_example(d.vocab, p));
    if (!d.row_of.emplace(p.id, i).second) throw Error("duplicate passage id " + p.id);
    if (p.label.kind == facttrace::LabelKind::entails)
      for (const auto& f : p.label.fact_ids) d.entailing[f].insert(p.id);
  }
  return d;
}

void Workspace::train() const {
  const auto path = checkpoint_path();
  if (!options_.force && fs::exists(path)) {
    log("train: up to date (" + path.string() + ")");
    return;
  }
  const auto data = load_data();
  fs::create_directories(model_dir());
  const auto steps = config_.train_steps();
  const auto hyper = config_.hyper();
  log("train: " + std::to_string(steps) + " steps over " + std::to_string(data.examples.size()) +
      " passages");
  auto result = tinylm::train(config_.model(), data.examples, steps, hyper,
                              [&](std::int64_t step, double loss) {
                                if (step % 500 == 0 || step + 1 == steps) {
                                  std::ostringstream s;
                                  s << "  step " << step << " loss " << std::fixed
                                    << std::setprecision(4) << loss;
                                  log(s.str());
                                }
                              });
  std::ostringstream curve;
  curve << "step\tloss\n";
  for (std::size_t i = 0; i < result.loss_curve.size(); ++i)
    curve << i << '\t' << std::setprecision(9) << result.loss_curve[i] << '\n';
  write_text(model_dir() / "loss_curve.tsv", curve.str());
  tinylm::Checkpoint ckpt{std::move(result.state), std::move(result.optimizer), hyper, model_hash()};
  write_atomic(path, [&](const fs::path& t) { tinylm::save_checkpoint(t, ckpt); });
  log("train: wrote " + path.string());
}

tinylm::Checkpoint Workspace::load_model() const {
  const auto path = checkpoint_path();
  if (!fs::exists(path)) throw MissingArtifact("model checkpoint " + path.string(), "train");
  auto ckpt = tinylm::load_checkpoint(path);
  check_hash(ckpt.config_hash, model_hash(), path, "train");
  return ckpt;
}

void Workspace::estimate_hessian() const {
  bool done = true;
  for (const char* n : kHessianNames) done = done && fs::exists(hessian_path(n));
  if (!options_.force && done) {
    log("estimate-hessian: up to date (" + features_dir().string() + ")");
    return;
  }
  const auto data = load_data();
  const auto ckpt = load_model();
  const auto spec = projection_spec(ckpt.state.config);
  const auto hs = config_.hessian();
  const auto dims = spec.block_dims();
  const int threads = options_.threads;
  fs::create_directories(features_dir());

  auto finish = [&](hessian::HessianBlocks h, std::string_view name) {
    h.projection_seed = spec.seed();
    h = hessian::inverse_sqrt(std::move(h), hs.damping);
    write_atomic(hessian_path(name), [&](const fs::path& t) { hessian::save(t, h, features_hash()); });
    log("estimate-hessian: wrote " + hessian_path(name).string());
    return h;
  };
  auto train_hessian = [&](std::string_view preset_name) {
    const auto m = methods::preset(preset_name);
    gradfeat::Featurizer f(ckpt.state, ckpt.optimizer, spec, m.feature_options());
    return estimate_from(project_all(f, data.examples, threads), dims, hessian::Provenance::train);
  };

  log("estimate-hessian: d = " + std::to_string(spec.dim()) + " in " + std::to_string(dims.size()) +
      " blocks, damping " + json(hs.damping).dump());
  finish(train_hessian("exp3"), "train_raw");
  auto r_train = train_hessian("trackstar");
  finish(train_hessian("trak"), "trak");

  // Task Hessian over query-template gradients. Held-out facts keep each
  // evaluated query from damping its own direction.
  std::vector<const facttrace::FactRecord*> facts;
  if (hs.eval_queries == config::EvalQueries::evaluated) {
    facts = data.eval_facts();
  } else {
    for (const auto& f : data.facts)
      if (f.background) facts.push_back(&f);
    if (facts.empty())
      throw Error("hessian.eval_queries = heldout needs benchmark.background_facts > 0");
  }
  std::vector<tinylm::ExampleRecord> queries(facts.size());
  parallel_for(facts.size(), threads, [&](std::size_t i) {
    std::string target = facts[i]->target;
    if (hs.eval_targets == config::EvalTargets::prediction) {
      auto p = facttrace::predict(ckpt.state, data.vocab, facts[i]->prompt);
      if (!text::lexical_tokens(p, false).empty()) target = std::move(p);
    }
    queries[i] = facttrace::query_example(data.vocab, facts[i]->id, facts[i]->prompt, target);
  });
  gradfeat::Featurizer fq(ckpt.state, ckpt.optimizer, spec, methods::preset("trackstar").feature_options());
  auto r_eval = estimate_from(project_all(fq, queries, threads), dims, hessian::Provenance::eval);

  const int m = hs.crossover_rank > 0 ? hs.crossover_rank : std::max<int>(1, static_cast<int>(spec.dim() / 64));
  const auto choice = hessian::select_lambda(r_train, r_eval, m, hs.lambda_grid);
  auto mixed = hessian::mix(r_train, r_eval, choice.lambda);
  mixed.crossover_rank = m;
  {
    std::ostringstream s;
    s << "estimate-hessian: sigma_" << m << "(train) = " << choice.sigma_train << ", sigma_" << m
      << "(eval) = " << choice.sigma_eval << ", crossover " << choice.crossover << ", lambda "
      << choice.lambda;
    log(s.str());
  }
  finish(std::move(r_train), "train_corrected");
  finish(std::move(r_eval), "eval");
  finish(std::move(mixed), "mixed");
  write_text(features_dir() / "lambda.json",
             json{{"lambda", choice.lambda},
                  {"crossover", choice.crossover},
                  {"sigma_train", choice.sigma_train},
                  {"sigma_eval", choice.sigma_eval},
                  {"crossover_rank", m}}
                     .dump(2) +
                 "\n");
}

HessianSet Workspace::load_hessians() const {
  HessianSet out;
  std::optional<hessian::HessianBlocks>* slots[] = {&out.train_raw, &out.train_corrected, &out.trak,
                                                    &out.eval, &out.mixed};
  for (std::size_t i = 0; i < std::size(kHessianNames); ++i) {
    const auto path = hessian_path(kHessianNames[i]);
    if (!fs::exists(path)) throw MissingArtifact("Hessian " + path.string(), "estimate-hessian");
    std::uint64_t h = 0;
    *slots[i] = hessian::load(path, &h);
    check_hash(h, features_hash(), path, "estimate-hessian");
  }
  return out;
}

namespace {

bool needs_hessian(std::span<const std::string> presets) {
  for (const auto& p : presets)
    if (methods::preset(p).hessian_mode != methods::HessianMode::none) return true;
  return false;
}

methods::Artifacts make_artifacts(const tinylm::Checkpoint& ckpt, const gradfeat::ProjectionSpec& spec,
                                  const HessianSet& h) {
  methods::Artifacts a{&ckpt.state, &ckpt.optimizer, &spec};
  a.train_hessian = h.train_raw ? &*h.train_raw : nullptr;
  a.train_hessian_corrected = h.train_corrected ? &*h.train_corrected : nullptr;
  a.mixed_hessian = h.mixed ? &*h.mixed : nullptr;
  a.trak_hessian = h.trak ? &*h.trak : nullptr;
  return a;
}

}  // namespace

void Workspace::build_index() const {
  const auto presets = config_.method().presets;
  std::vector<std::string> todo;
  for (const auto& p : presets)
    if (options_.force || !fs::exists(index_path(p))) todo.push_back(p);
  if (todo.empty()) {
    log("build-index: up to date (" + features_dir().string() + ")");
    return;
  }
  const auto data = load_data();
  const auto ckpt = load_model();
  const auto spec = projection_spec(ckpt.state.config);
  const HessianSet hs = needs_hessian(todo) ? load_hessians() : HessianSet{};
  const auto a = make_artifacts(ckpt, spec, hs);
  fs::create_directories(features_dir());
  for (const auto& name : todo) {
    const auto m = methods::preset(name);
    const auto path = index_path(name);
    if (options_.force) {
      fs::remove(path.string() + ".partial");
      fs::remove(path.string() + ".partial.w");
    }
    const methods::PresetFeaturizer pf(m, a);
    index::IndexBuilder builder(path, spec.block_dims(), pf.fingerprint(), features_hash(), 1024);
    const auto idx = builder.build(
        data.meta,
        [&](std::size_t i) {
          auto f = pf.candidate(data.examples[i]);
          return index::IndexBuilder::Row{std::move(f.vector.values), f.weight};
        },
        options_.threads);
    log("build-index: " + name + " (" + std::to_string(idx.size()) + " rows, " + idx.fingerprint() +
        ") -> " + path.string());
  }
}

index::FeatureIndex Workspace::load_index(std::string_view preset) const {
  const auto path = index_path(preset);
  if (!fs::exists(path)) {
    throw MissingArtifact("index for preset '" + std::string(preset) + "' (" + path.string() + ")",
                          "build-index");
  }
  auto idx = index::FeatureIndex::load(path);
  check_hash(idx.config_hash(), features_hash(), path, "build-index");
  return idx;
}

void Workspace::eval() const {
  const auto tsv = report_path("tsv"), jsonl = report_path("jsonl");
  if (!options_.force && fs::exists(tsv) && fs::exists(jsonl)) {
    log("eval: up to date (" + tsv.string() + ")");
    log(format_table(read_report_jsonl(jsonl)));
    return;
  }
  Engine engine(*this, config_.method().presets);
  const auto report = evaluate(engine, config_);
  fs::create_directories(eval_dir());
  std::ostringstream t, j;
  write_tsv(report, t);
  write_jsonl(report, j);
  write_text(tsv, t.str());
  write_text(jsonl, j.str());
  log(format_table(report));
  log("eval: wrote " + tsv.string() + " and " + jsonl.string());
}

void Workspace::run_all() const {
  gen_data();
  train();
  estimate_hessian();
  build_index();
  eval();
}

// ---------------------------------------------------------------------------
// Engine.

Engine::Engine(const Workspace& ws, std::vector<std::string> presets)
    : data_(ws.load_data()),
      checkpoint_(ws.load_model()),
      projection_(ws.projection_spec(checkpoint_.state.config)),
      presets_(std::move(presets)),
      threads_(ws.options().threads) {
  if (needs_hessian(presets_)) hessians_ = ws.load_hessians();
  const auto a = artifacts();
  for (const auto& p : presets_) {
    auto m = methods::preset(p);
    if (m.hessian_mode == methods::HessianMode::mixed) m.lambda = hessians_.mixed->lambda;
    auto idx = ws.load_index(p);
    const auto fp = methods::fingerprint(m, a);
    if (idx.fingerprint() != fp) {
      throw Error("index for preset '" + p + "' has fingerprint " + idx.fingerprint() +
                  " but the loaded artifacts give " + fp + "; rerun `tda build-index --force`");
    }
    if (idx.size() != data_.passages.size()) {
      throw Error("index for preset '" + p + "' has " + std::to_string(idx.size()) +
                  " rows but the corpus has " + std::to_string(data_.passages.size()) +
                  "; rerun `tda build-index --force`");
    }
    methods_.emplace(p, std::move(m));
    indexes_.emplace(p, std::move(idx));
  }
  std::vector<std::string> ids, texts;
  for (const auto& p : data_.passages) {
    ids.push_back(p.id);
    texts.push_back(p.text);
  }
  bm25_ = std::make_unique<methods::Bm25Index>(ids, texts, ws.config().method().bm25);
}

methods::Artifacts Engine::artifacts() const { return make_artifacts(checkpoint_, projection_, hessians_); }

bool Engine::has_method(std::string_view name) const {
  return name == "bm25" || methods_.find(name) != methods_.end();
}

const methods::MethodConfig& Engine::method(std::string_view preset) const {
  const auto it = methods_.find(preset);
  if (it == methods_.end()) throw Error("preset '" + std::string(preset) + "' is not loaded");
  return it->second;
}

std::string Engine::fingerprint(std::string_view m) const {
  if (m == "bm25") return methods::bm25_fingerprint(bm25_->params());
  return index(m).fingerprint();
}

const index::FeatureIndex& Engine::index(std::string_view preset) const {
  const auto it = indexes_.find(preset);
  if (it == indexes_.end()) throw Error("preset '" + std::string(preset) + "' is not loaded");
  return it->second;
}

const hessian::HessianBlocks* Engine::mixed_hessian() const {
  return hessians_.mixed ? &*hessians_.mixed : nullptr;
}

tinylm::ExampleRecord Engine::query(std::string id, std::string_view prompt, std::string_view target) const {
  auto q = facttrace::query_example(data_.vocab, std::move(id), prompt, target);
  q.validate(checkpoint_.state.config);
  return q;
}

std::string Engine::predict(std::string_view prompt) const {
  return facttrace::predict(checkpoint_.state, data_.vocab, prompt);
}

index::RetrievalResult Engine::retrieve(std::string_view m, const tinylm::ExampleRecord& query,
                                        std::string_view query_text, int k) const {
  if (m == "bm25") {
    auto r = methods::bm25_retrieve(*bm25_, query_text, k).result;
    r.query_id = query.id;
    return r;
  }
  return methods::score_with_method(method(m), artifacts(), query, index(m), k);
}

std::vector<index::RetrievalResult> Engine::retrieve_all(std::string_view m,
                                                         std::span<const tinylm::ExampleRecord> queries,
                                                         std::span<const std::string> texts,
                                                         int k) const {
  if (m == "bm25") {
    if (texts.size() != queries.size()) throw ShapeError("one query text per query required");
    std::vector<index::RetrievalResult> out(queries.size());
    parallel_for(queries.size(), threads_,
                 [&](std::size_t i) { out[i] = retrieve(m, queries[i], texts[i], k); });
    return out;
  }
  const auto& idx = index(m);
  const methods::PresetFeaturizer pf(method(m), artifacts());
  MatrixF q(static_cast<Eigen::Index>(queries.size()), static_cast<Eigen::Index>(idx.dim()));
  std::vector<std::string> ids(queries.size());
  parallel_for(queries.size(), threads_, [&](std::size_t i) {
    const auto v = pf.query(queries[i]);
    std::copy(v.values.begin(), v.values.end(), q.row(static_cast<Eigen::Index>(i)).data());
    ids[i] = queries[i].id;
  });
  return index::retrieve_batch(idx, q, ids, pf.fingerprint(), k, {threads_, 65536});
}

namespace {

double sequence_probability(const tinylm::ModelState& s, const tinylm::ExampleRecord& q) {
  double lp = 0.0;
  for (double v : tinylm::target_token_logprobs(s, q)) lp += v;
  return std::exp(lp);
}

}  // namespace

Engine::PatchOutcome Engine::tail_patch(const tinylm::ExampleRecord& query, std::string_view example_id,
                                        const tinylm::TrainHyper& hyper) const {
  const auto it = data_.row_of.find(std::string(example_id));
  if (it == data_.row_of.end()) throw Error("unknown example '" + std::string(example_id) + "'");
  const auto& state = checkpoint_.state;
  const auto patched = tinylm::tail_patch_step(state, checkpoint_.optimizer, data_.examples[it->second], hyper);
  return {sequence_probability(state, query), sequence_probability(patched, query)};
}

// ---------------------------------------------------------------------------
// Evaluation.

const MethodRow& EvalReport::row(std::string_view method) const {
  for (const auto& r : rows)
    if (r.method == method) return r;
  throw Error("report has no row for '" + std::string(method) + "'");
}

namespace {

std::optional<double> subset_mrr(std::span<const index::RetrievalResult> r, std::span<const facttrace::Truth> t,
                                 const std::vector<std::size_t>& idx, int cap) {
  if (idx.empty()) return std::nullopt;
  std::vector<index::RetrievalResult> rr;
  std::vector<facttrace::Truth> tt;
  for (auto i : idx) {
    rr.push_back(r[i]);
    tt.push_back(t[i]);
  }
  return facttrace::mrr(rr, tt, cap);
}

}  // namespace

EvalReport evaluate(const Engine& engine, const config::RunConfig& config) {
  const auto es = config.eval();
  const auto& data = engine.data();
  const auto& ckpt = engine.checkpoint();
  const int threads = engine.threads();

  EvalReport rep;
  rep.recall_k = es.recall_k;
  for (const auto& b : config.benchmark().buckets) rep.buckets.push_back(b.name);
  if (const auto* h = engine.mixed_hessian()) rep.lambda = h->lambda;

  std::vector<const facttrace::FactRecord*> facts;
  for (const auto* f : data.eval_facts())
    if (data.entailing.count(f->id)) facts.push_back(f);
  if (facts.empty()) throw Error("the benchmark has no evaluable facts");
  rep.queries = facts.size();

  std::vector<tinylm::ExampleRecord> queries;
  std::vector<std::string> texts;
  std::vector<facttrace::Truth> truth;
  for (const auto* f : facts) {
    queries.push_back(engine.query(f->id, f->prompt, f->target));
    texts.push_back(f->prompt + " " + f->target);
    truth.push_back(data.entailing.at(f->id));
  }

  std::vector<std::string> predictions(facts.size());
  parallel_for(facts.size(), threads, [&](std::size_t i) { predictions[i] = engine.predict(facts[i]->prompt); });
  std::vector<facttrace::FactRecord> fact_values;
  for (const auto* f : facts) fact_values.push_back(*f);
  const auto split = facttrace::split_by_correctness(fact_values, predictions);
  rep.correct = split.correct.size();
  rep.incorrect = split.incorrect.size();

  std::map<std::string, std::vector<std::size_t>> by_bucket;
  for (std::size_t i = 0; i < facts.size(); ++i) by_bucket[facts[i]->bucket].push_back(i);

  // Tail-patch queries: a seeded sample, kept in benchmark order.
  std::vector<std::size_t> tp(facts.size());
  for (std::size_t i = 0; i < tp.size(); ++i) tp[i] = i;
  GaussianSource rng(mix_seed(es.seed, 0x7a11));
  tda::shuffle(tp.begin(), tp.end(), rng);
  tp.resize(std::min<std::size_t>(tp.size(), static_cast<std::size_t>(es.tailpatch_queries)));
  std::sort(tp.begin(), tp.end());
  rep.tailpatch_queries = tp.size();
  std::vector<tinylm::ExampleRecord> tp_queries;
  for (auto i : tp) tp_queries.push_back(queries[i]);
  const int max_k = *std::max_element(es.tailpatch_ks.begin(), es.tailpatch_ks.end());
  if (static_cast<std::size_t>(max_k) > data.examples.size())
    throw Error("eval.tailpatch_ks exceeds the corpus size");

  auto run_tailpatch = [&](MethodRow& row, const std::vector<std::vector<const tinylm::ExampleRecord*>>& props) {
    if (tp.empty()) return;
    const auto r = facttrace::tail_patch_eval(ckpt.state, ckpt.optimizer, ckpt.hyper, tp_queries, props,
                                              es.tailpatch_ks, threads);
    for (const auto& k : r.rows) {
      row.tailpatch_pp[k.k] = k.mean_delta_pp;
      row.tailpatch_relative[k.k] = k.mean_relative;
    }
  };

  const int depth = std::max({es.mrr_cap, es.recall_k, max_k});
  std::vector<std::string> methods_list = engine.presets();
  methods_list.push_back("bm25");
  for (const auto& name : methods_list) {
    MethodRow row;
    row.method = name;
    const auto results = engine.retrieve_all(name, queries, texts, depth);
    row.fingerprint = results.front().fingerprint;
    row.mrr = facttrace::mrr(results, truth, es.mrr_cap);
    row.recall = facttrace::recall_at_k(results, truth, es.recall_k);
    for (const auto& [b, idx] : by_bucket) row.mrr_by_bucket[b] = *subset_mrr(results, truth, idx, es.mrr_cap);
    row.mrr_correct = subset_mrr(results, truth, split.correct, es.mrr_cap);
    row.mrr_incorrect = subset_mrr(results, truth, split.incorrect, es.mrr_cap);

    std::map<std::string, double> counts;
    for (auto c : {facttrace::Category::entailing, facttrace::Category::both_entities,
                   facttrace::Category::one_entity, facttrace::Category::partial_match,
                   facttrace::Category::neither})
      counts[std::string(facttrace::to_string(c))] = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      for (const auto& h : results[i].hits) {
        if (h.rank > es.recall_k) break;
        counts[std::string(facttrace::to_string(
            facttrace::categorize_proponent(data.passages[h.row], *facts[i])))] += 1.0;
        total += 1.0;
      }
    }
    for (auto& [c, v] : counts) row.category_share[c] = total > 0 ? v / total : 0.0;

    // BM25 ranks only passages sharing a term; shorter lists are completed
    // in corpus order, as a full ranking with zero scores would be.
    std::vector<std::vector<const tinylm::ExampleRecord*>> props;
    for (auto qi : tp) {
      std::vector<const tinylm::ExampleRecord*> p;
      std::set<std::size_t> used;
      for (const auto& h : results[qi].hits) {
        if (static_cast<int>(p.size()) == max_k) break;
        p.push_back(&data.examples[h.row]);
        used.insert(h.row);
      }
      for (std::size_t r = 0; static_cast<int>(p.size()) < max_k; ++r)
        if (!used.count(r)) p.push_back(&data.examples[r]);
      props.push_back(std::move(p));
    }
    run_tailpatch(row, props);
    rep.rows.push_back(std::move(row));
  }

  MethodRow random;
  random.method = "random";
  random.fingerprint = "random:seed=" + std::to_string(es.seed);
  std::vector<std::vector<const tinylm::ExampleRecord*>> props;
  for (auto qi : tp) {
    GaussianSource r(mix_seed(es.seed, qi));
    std::vector<std::size_t> rows(data.examples.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    tda::shuffle(rows.begin(), rows.end(), r);
    std::vector<const tinylm::ExampleRecord*> p;
    for (int j = 0; j < max_k; ++j) p.push_back(&data.examples[rows[static_cast<std::size_t>(j)]]);
    props.push_back(std::move(p));
  }
  run_tailpatch(random, props);
  rep.rows.push_back(std::move(random));
  return rep;
}

// ---------------------------------------------------------------------------
// Report formats.

namespace {

std::string num(double v, int precision = 6) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, precision);
  if (ec != std::errc()) throw Error("number formatting failed");
  std::string s(buf, end);
  if (s == "-0." + std::string(static_cast<std::size_t>(precision), '0')) s.erase(0, 1);
  return s;
}

std::string num(const std::optional<double>& v, int precision = 6) {
  return v ? num(*v, precision) : "-";
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

template <class K>
json map_json(const std::map<K, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) {
    if constexpr (std::is_same_v<K, int>) {
      j[std::to_string(k)] = v;
    } else {
      j[k] = v;
    }
  }
  return j;
}

const char* const kCategories[] = {"entailing", "both_entities", "one_entity", "partial_match", "neither"};

std::vector<int> report_ks(const EvalReport& r) {
  std::set<int> ks;
  for (const auto& row : r.rows)
    for (const auto& [k, v] : row.tailpatch_pp) ks.insert(k);
  return {ks.begin(), ks.end()};
}

}  // namespace

void write_tsv(const EvalReport& r, std::ostream& out) {
  const auto ks = report_ks(r);
  out << "method\tmrr\trecall@" << r.recall_k;
  for (int k : ks) out << "\ttailpatch@" << k << "_pp";
  for (int k : ks) out << "\ttailpatch@" << k << "_rel";
  for (const auto& b : r.buckets) out << "\tmrr[" << b << "]";
  out << "\tmrr_correct\tmrr_incorrect";
  for (const char* c : kCategories) out << "\ttop" << r.recall_k << "_" << c;
  out << "\tfingerprint\n";
  for (const auto& row : r.rows) {
    out << row.method << '\t' << num(row.mrr) << '\t' << num(row.recall);
    for (int k : ks) {
      auto it = row.tailpatch_pp.find(k);
      out << '\t' << (it == row.tailpatch_pp.end() ? "-" : num(it->second));
    }
    for (int k : ks) {
      auto it = row.tailpatch_relative.find(k);
      out << '\t' << (it == row.tailpatch_relative.end() ? "-" : num(it->second));
    }
    for (const auto& b : r.buckets) {
      auto it = row.mrr_by_bucket.find(b);
      out << '\t' << (it == row.mrr_by_bucket.end() ? "-" : num(it->second));
    }
    out << '\t' << num(row.mrr_correct) << '\t' << num(row.mrr_incorrect);
    for (const char* c : kCategories) {
      auto it = row.category_share.find(c);
      out << '\t' << (it == row.category_share.end() ? "-" : num(it->second));
    }
    out << '\t' << row.fingerprint << '\n';
  }
}

void write_jsonl(const EvalReport& r, std::ostream& out) {
  out << json{{"type", "summary"},
              {"queries", r.queries},
              {"tailpatch_queries", r.tailpatch_queries},
              {"correct", r.correct},
              {"incorrect", r.incorrect},
              {"lambda", r.lambda},
              {"recall_k", r.recall_k},
              {"buckets", r.buckets}}
             .dump()
      << '\n';
  for (const auto& row : r.rows) {
    out << json{{"type", "method"},
                {"method", row.method},
                {"fingerprint", row.fingerprint},
                {"mrr", opt_json(row.mrr)},
                {"recall", opt_json(row.recall)},
                {"tailpatch_pp", map_json(row.tailpatch_pp)},
                {"tailpatch_relative", map_json(row.tailpatch_relative)},
                {"mrr_by_bucket", map_json(row.mrr_by_bucket)},
                {"mrr_correct", opt_json(row.mrr_correct)},
                {"mrr_incorrect", opt_json(row.mrr_incorrect)},
                {"category_share", map_json(row.category_share)}}
               .dump()
        << '\n';
  }
}

EvalReport read_report_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open report " + path.string());
  EvalReport r;
  std::string line;
  auto opt = [](const json& j) -> std::optional<double> {
    return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (j.at("type") == "summary") {
      r.queries = j.at("queries");
      r.tailpatch_queries = j.at("tailpatch_queries");
      r.correct = j.at("correct");
      r.incorrect = j.at("incorrect");
      r.lambda = j.at("lambda");
      r.recall_k = j.at("recall_k");
      r.buckets = j.at("buckets").get<std::vector<std::string>>();
      continue;
    }
    MethodRow row;
    row.method = j.at("method");
    row.fingerprint = j.at("fingerprint");
    row.mrr = opt(j.at("mrr"));
    row.recall = opt(j.at("recall"));
    for (const auto& [k, v] : j.at("tailpatch_pp").items()) row.tailpatch_pp[std::stoi(k)] = v;
    for (const auto& [k, v] : j.at("tailpatch_relative").items()) row.tailpatch_relative[std::stoi(k)] = v;
    for (const auto& [k, v] : j.at("mrr_by_bucket").items()) row.mrr_by_bucket[k] = v;
    row.mrr_correct = opt(j.at("mrr_correct"));
    row.mrr_incorrect = opt(j.at("mrr_incorrect"));
    for (const auto& [k, v] : j.at("category_share").items()) row.category_share[k] = v;
    r.rows.push_back(std::move(row));
  }
  return r;
}

std::string format_table(const EvalReport& r) {
  const auto ks = report_ks(r);
  std::ostringstream out;
  out << std::left << std::setw(11) << "method" << std::right << std::setw(8) << "MRR" << std::setw(9)
      << ("R@" + std::to_string(r.recall_k));
  for (int k : ks) out << std::setw(10) << ("TP@" + std::to_string(k));
  out << std::setw(10) << "MRR ok" << std::setw(10) << "MRR bad" << '\n';
  for (const auto& row : r.rows) {
    out << std::left << std::setw(11) << row.method << std::right << std::setw(8) << num(row.mrr, 3)
        << std::setw(9) << num(row.recall, 3);
    for (int k : ks) {
      auto it = row.tailpatch_pp.find(k);
      out << std::setw(10) << (it == row.tailpatch_pp.end() ? "-" : num(it->second, 3));
    }
    out << std::setw(10) << num(row.mrr_correct, 3) << std::setw(10) << num(row.mrr_incorrect, 3) << '\n';
  }
  out << r.queries << " queries (" << r.correct << " predicted correctly), tail-patch over "
      << r.tailpatch_queries << " queries in percentage points; lambda " << num(r.lambda, 3);
  return out.str();
}

}  // namespace tda::pipeline
