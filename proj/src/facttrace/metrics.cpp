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

#include "tda/facttrace.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace tda::facttrace {

using json = nlohmann::json;

std::string_view to_string(LabelKind k) {
  switch (k) {
    case LabelKind::entails: return "entails";
    case LabelKind::both_entities: return "both_entities";
    case LabelKind::one_entity: return "one_entity";
    case LabelKind::distractor: return "distractor";
  }
  return "?";
}

LabelKind parse_label_kind(std::string_view s) {
  for (auto k : {LabelKind::entails, LabelKind::both_entities, LabelKind::one_entity, LabelKind::distractor})
    if (to_string(k) == s) return k;
  throw Error("unknown passage label '" + std::string(s) + "'");
}

std::string_view to_string(Category c) {
  switch (c) {
    case Category::entailing: return "entailing";
    case Category::both_entities: return "both_entities";
    case Category::one_entity: return "one_entity";
    case Category::partial_match: return "partial_match";
    case Category::neither: return "neither";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Files.

namespace {

json entity_json(const Entity& e) {
  return {{"id", e.id}, {"name", e.canonical}, {"aliases", e.aliases}, {"type", e.type}};
}

Entity entity_from(const json& j) {
  Entity e{j.at("id"), j.at("name"), j.at("aliases").get<std::vector<std::string>>(), j.value("type", "")};
  if (e.aliases.empty()) throw Error("entity '" + e.id + "' has no aliases");
  return e;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_corpus(const std::filesystem::path& path, std::span<const CorpusPassage> passages) {
  auto out = open_out(path);
  for (const auto& p : passages) {
    json label{{"kind", to_string(p.label.kind)}};
    if (!p.label.fact_ids.empty()) label["facts"] = p.label.fact_ids;
    if (!p.label.entity_id.empty()) label["entity"] = p.label.entity_id;
    out << json{{"id", p.id}, {"text", p.text}, {"labels", label}}.dump() << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<CorpusPassage> read_corpus(const std::filesystem::path& path,
                                       std::vector<index::RowMeta>* ranges) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open corpus " + path.string());
  std::vector<CorpusPassage> out;
  std::string line;
  std::uint64_t offset = 0;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::uint64_t len = line.size();
    if (!line.empty()) {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
      CorpusPassage p;
      p.id = j.at("id").get<std::string>();
      p.text = j.at("text").get<std::string>();
      if (j.contains("labels")) {
        const auto& l = j["labels"];
        p.label.kind = parse_label_kind(l.value("kind", "distractor"));
        if (l.contains("facts")) p.label.fact_ids = l["facts"].get<std::vector<std::string>>();
        p.label.entity_id = l.value("entity", "");
      }
      if (ranges) ranges->push_back({p.id, offset, len});
      out.push_back(std::move(p));
    }
    offset += len + 1;
  }
  return out;
}

void write_facts(const std::filesystem::path& path, std::span<const FactRecord> facts) {
  auto out = open_out(path);
  for (const auto& f : facts) {
    out << json{{"id", f.id},
                {"subject", entity_json(f.subject)},
                {"relation", f.relation},
                {"object", entity_json(f.object)},
                {"template", f.template_id},
                {"prompt", f.prompt},
                {"target", f.target},
                {"bucket", f.bucket},
                {"background", f.background}}
               .dump()
        << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<FactRecord> read_facts(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open facts " + path.string());
  std::vector<FactRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    FactRecord f;
    f.id = j.at("id");
    f.subject = entity_from(j.at("subject"));
    f.relation = j.at("relation");
    f.object = entity_from(j.at("object"));
    f.template_id = j.value("template", 0);
    f.prompt = j.at("prompt");
    f.target = j.at("target");
    f.bucket = j.value("bucket", "");
    f.background = j.value("background", false);
    out.push_back(std::move(f));
  }
  return out;
}

tinylm::ExampleRecord passage_example(const text::Vocabulary& vocab, const CorpusPassage& p) {
  std::vector<int> toks{tinylm::kBosId};
  for (int t : vocab.encode(p.text)) toks.push_back(t);
  toks.push_back(tinylm::kEosId);
  return tinylm::make_training_example(p.id, std::move(toks));
}

tinylm::ExampleRecord query_example(const text::Vocabulary& vocab, std::string id,
                                    std::string_view prompt, std::string_view target) {
  std::vector<int> p{tinylm::kBosId};
  for (int t : vocab.encode(prompt)) p.push_back(t);
  const auto tgt = vocab.encode(target);
  if (tgt.empty()) throw Error("query '" + id + "' has an empty target");
  return tinylm::make_prompted_example(std::move(id), p, tgt);
}

tinylm::ExampleRecord query_example(const text::Vocabulary& vocab, const FactRecord& f) {
  return query_example(vocab, f.id, f.prompt, f.target);
}

// ---------------------------------------------------------------------------
// Metrics.

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a == 0) throw Error("metric over an empty query set");
  if (a != b) throw ShapeError("one truth set per retrieval required");
}

// Rank of the first hit in `truth`, or 0.
int first_hit(const index::RetrievalResult& r, const Truth& truth, int cap) {
  for (const auto& h : r.hits) {
    if (h.rank > cap) break;
    if (truth.count(h.example_id)) return h.rank;
  }
  return 0;
}

}  // namespace

double mrr(std::span<const index::RetrievalResult> retrievals, std::span<const Truth> truth, int cap) {
  check_lengths(retrievals.size(), truth.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < retrievals.size(); ++i) {
    const int r = first_hit(retrievals[i], truth[i], cap);
    if (r > 0) sum += 1.0 / r;
  }
  return sum / static_cast<double>(retrievals.size());
}

double recall_at_k(std::span<const index::RetrievalResult> retrievals, std::span<const Truth> truth,
                   int k) {
  check_lengths(retrievals.size(), truth.size());
  int hits = 0;
  for (std::size_t i = 0; i < retrievals.size(); ++i) hits += first_hit(retrievals[i], truth[i], k) > 0;
  return static_cast<double>(hits) / static_cast<double>(retrievals.size());
}

const TailPatchRow& TailPatchResult::at(int k) const {
  for (const auto& r : rows)
    if (r.k == k) return r;
  throw Error("tail-patch result has no row for k=" + std::to_string(k));
}

TailPatchResult tail_patch_eval(const tinylm::ModelState& state, const tinylm::OptimizerState& opt,
                                const tinylm::TrainHyper& hyper,
                                std::span<const tinylm::ExampleRecord> queries,
                                const std::vector<std::vector<const tinylm::ExampleRecord*>>& proponents,
                                std::span<const int> ks, int threads) {
  if (queries.size() != proponents.size()) throw ShapeError("one proponent list per query required");
  if (queries.empty()) throw Error("tail-patch evaluation over an empty query set");
  if (opt.moments.size() != 2 + 6 * state.params.layers.size()) {
    throw Error("optimizer state does not belong to this model snapshot");
  }
  int max_k = 0;
  for (int k : ks) {
    if (k < 1) throw Error("tail-patch k must be >= 1");
    max_k = std::max(max_k, k);
  }

  TailPatchResult out;
  out.before.resize(queries.size());
  out.delta_pp.resize(queries.size());
  std::vector<double> rel_flat;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto n = std::min<std::size_t>(proponents[q].size(), static_cast<std::size_t>(max_k));
    if (n < static_cast<std::size_t>(max_k)) {
      throw Error("query '" + queries[q].id + "' has " + std::to_string(proponents[q].size()) +
                  " proponents; tail-patch needs " + std::to_string(max_k));
    }
    out.delta_pp[q].assign(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) pairs.emplace_back(q, j);
  }

  auto prob = [](const tinylm::ModelState& s, const tinylm::ExampleRecord& q) {
    double lp = 0.0;
    for (double v : tinylm::target_token_logprobs(s, q)) lp += v;
    return std::exp(lp);
  };
  parallel_for(queries.size(), threads, [&](std::size_t q) { out.before[q] = prob(state, queries[q]); });

  std::vector<std::vector<double>> relative(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) relative[q].assign(out.delta_pp[q].size(), 0.0);
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const auto [q, j] = pairs[i];
    const auto patched = tinylm::tail_patch_step(state, opt, *proponents[q][j], hyper);
    const double after = prob(patched, queries[q]);
    out.delta_pp[q][j] = 100.0 * (after - out.before[q]);
    relative[q][j] = out.before[q] > 0.0 ? (after - out.before[q]) / out.before[q] : 0.0;
  });

  for (int k : ks) {
    TailPatchRow row{k, 0.0, 0.0};
    for (std::size_t q = 0; q < queries.size(); ++q) {
      double a = 0.0, r = 0.0;
      for (int j = 0; j < k; ++j) {
        a += out.delta_pp[q][static_cast<std::size_t>(j)];
        r += relative[q][static_cast<std::size_t>(j)];
      }
      row.mean_delta_pp += a / k;
      row.mean_relative += r / k;
    }
    row.mean_delta_pp /= static_cast<double>(queries.size());
    row.mean_relative /= static_cast<double>(queries.size());
    out.rows.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// String matching.

namespace {

bool mentions(const std::vector<std::string>& toks, const Entity& e) {
  for (const auto& a : e.aliases) {
    if (text::contains_run(toks, text::lexical_tokens(a, false))) return true;
  }
  return false;
}

bool partially_mentions(const std::vector<std::string>& toks, const Entity& e) {
  for (const auto& a : e.aliases) {
    for (const auto& t : text::lexical_tokens(a, true)) {
      if (std::find(toks.begin(), toks.end(), t) != toks.end()) return true;
    }
  }
  return false;
}

}  // namespace

Category categorize_proponent(const CorpusPassage& passage, const FactRecord& fact) {
  if (passage.label.kind == LabelKind::entails &&
      std::find(passage.label.fact_ids.begin(), passage.label.fact_ids.end(), fact.id) !=
          passage.label.fact_ids.end()) {
    return Category::entailing;
  }
  const auto toks = text::lexical_tokens(passage.text, false);
  const bool s = mentions(toks, fact.subject), o = mentions(toks, fact.object);
  if (s && o) return Category::both_entities;
  if (s || o) return Category::one_entity;
  if (partially_mentions(toks, fact.subject) || partially_mentions(toks, fact.object))
    return Category::partial_match;
  return Category::neither;
}

int fact_frequency(std::span<const CorpusPassage> corpus, const FactRecord& fact) {
  int n = 0;
  for (const auto& p : corpus) {
    const auto toks = text::lexical_tokens(p.text, false);
    n += mentions(toks, fact.subject) && mentions(toks, fact.object);
  }
  return n;
}

bool prediction_correct(std::string_view prediction, const FactRecord& fact) {
  const auto pred = text::lexical_tokens(prediction, true);
  if (pred.empty()) return false;
  for (const auto& a : fact.object.aliases) {
    if (text::lexical_tokens(a, true) == pred) return true;
  }
  return text::lexical_tokens(fact.target, true) == pred;
}

CorrectnessSplit split_by_correctness(std::span<const FactRecord> facts,
                                      std::span<const std::string> predictions) {
  if (facts.size() != predictions.size()) throw ShapeError("one prediction per fact required");
  CorrectnessSplit out;
  for (std::size_t i = 0; i < facts.size(); ++i)
    (prediction_correct(predictions[i], facts[i]) ? out.correct : out.incorrect).push_back(i);
  return out;
}

std::string predict(const tinylm::ModelState& state, const text::Vocabulary& vocab,
                    std::string_view prompt, int max_new_tokens) {
  std::vector<int> p{tinylm::kBosId};
  for (int t : vocab.encode(prompt)) p.push_back(t);
  const int stops[] = {tinylm::kEosId, vocab.id(".")};
  const auto out = tinylm::greedy_complete(state, p, max_new_tokens, stops);
  return vocab.decode(out);
}

}  // namespace tda::facttrace
