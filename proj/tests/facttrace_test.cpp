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

#include "doctest.h"
#include "fixtures.hpp"
#include "tda/facttrace.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

using namespace tda;
using namespace tda::facttrace;
using namespace tda::testing;

namespace {

index::RetrievalResult ranked(std::vector<std::string> ids) {
  index::RetrievalResult r;
  int rank = 1;
  for (auto& id : ids) r.hits.push_back({std::move(id), 0, 0.0f, rank++});
  return r;
}

Entity entity(std::string id, std::vector<std::string> aliases) {
  return {std::move(id), aliases.front(), aliases, ""};
}

FactRecord karo_fact() {
  FactRecord f;
  f.id = "f1";
  f.subject = entity("e1", {"Ada Karo", "A. Karo"});
  f.relation = "born_in";
  f.object = entity("e2", {"Dunmore"});
  f.prompt = "Ada Karo place of birth:";
  f.target = "Dunmore";
  return f;
}

CorpusPassage passage(std::string id, std::string text, LabelKind kind = LabelKind::distractor,
                      std::vector<std::string> facts = {}) {
  return {std::move(id), std::move(text), {kind, std::move(facts), ""}};
}

}  // namespace

TEST_CASE("MRR and recall fixtures") {
  const std::vector<Truth> truth{{"p3"}, {"p7"}};
  std::vector<index::RetrievalResult> r{ranked({"p3", "x"}), ranked({"p7"})};
  CHECK(mrr(r, truth) == doctest::Approx(1.0));
  r = {ranked({"p3"}), ranked({"x", "p7"})};
  CHECK(mrr(r, truth) == doctest::Approx(0.75));
  r = {ranked({"x"}), ranked({"y"})};
  CHECK(mrr(r, truth) == 0.0);

  std::vector<index::RetrievalResult> four{ranked({"a"}), ranked({"b"}), ranked({"c"}), ranked({"d"})};
  const std::vector<Truth> all{{"a"}, {"b"}, {"c"}, {"d"}};
  CHECK(recall_at_k(four, all, 10) == 1.0);
  const std::vector<Truth> none{{"z"}, {"z"}, {"z"}, {"z"}};
  CHECK(recall_at_k(four, none, 10) == 0.0);
  const std::vector<Truth> one{{"a"}, {"z"}, {"z"}, {"z"}};
  CHECK(recall_at_k(four, one, 10) == 0.25);

  std::vector<std::string> long_list;
  for (int i = 0; i < 12; ++i) long_list.push_back("n" + std::to_string(i));
  long_list.push_back("hit");
  std::vector<index::RetrievalResult> late{ranked(long_list)};
  const std::vector<Truth> hit{{"hit"}};
  CHECK(recall_at_k(late, hit, 10) == 0.0);
  CHECK(mrr(late, hit) == doctest::Approx(1.0 / 13));
  CHECK(mrr(late, hit, 12) == 0.0);

  CHECK_THROWS_AS(mrr({}, {}), Error);
  CHECK_THROWS_AS(mrr(r, one), ShapeError);
}

TEST_CASE("proponent categories") {
  const auto f = karo_fact();
  CHECK(categorize_proponent(passage("a", "Ada Karo was born in Dunmore.", LabelKind::entails, {"f1"}), f) ==
        Category::entailing);
  CHECK(categorize_proponent(passage("b", "A. Karo visited Dunmore once."), f) == Category::both_entities);
  CHECK(categorize_proponent(passage("c", "ada karo likes tea."), f) == Category::one_entity);
  CHECK(categorize_proponent(passage("d", "The Karo family arrived late."), f) == Category::partial_match);
  CHECK(categorize_proponent(passage("e", "Nothing to see here."), f) == Category::neither);
  // Entailment labels for another fact do not count.
  CHECK(categorize_proponent(passage("g", "Ada Karo lives in Dunmore.", LabelKind::entails, {"f9"}), f) ==
        Category::both_entities);
  // Token boundaries: "Dunmoreville" is not "Dunmore".
  CHECK(categorize_proponent(passage("h", "Ada Karo saw Dunmoreville."), f) == Category::one_entity);
}

TEST_CASE("fact frequency counts co-mentions") {
  const auto f = karo_fact();
  const std::vector<CorpusPassage> corpus{
      passage("1", "ADA KARO and dunmore."), passage("2", "A. Karo left Dunmore."),
      passage("3", "Ada Karo alone."), passage("4", "Dunmore alone."), passage("5", "Karo Ada in Dunmore")};
  CHECK(fact_frequency(corpus, f) == 2);
}

TEST_CASE("prediction correctness") {
  FactRecord f;
  f.object = entity("o", {"USA", "United States"});
  f.target = "USA";
  CHECK(prediction_correct("the USA", f));
  CHECK(prediction_correct("usa", f));
  CHECK(prediction_correct("United States", f));
  CHECK_FALSE(prediction_correct("", f));
  CHECK_FALSE(prediction_correct("the", f));
  CHECK_FALSE(prediction_correct("USA today", f));
  const std::vector<FactRecord> facts{f, f, f};
  const std::vector<std::string> preds{"USA", "Canada", "the usa"};
  const auto split = split_by_correctness(facts, preds);
  CHECK(split.correct == std::vector<std::size_t>{0, 2});
  CHECK(split.incorrect == std::vector<std::size_t>{1});
}

TEST_CASE("generator is deterministic and fills buckets exactly") {
  BenchmarkSpec spec;
  spec.buckets = {{"1", 1, 1, 6}, {"2-3", 2, 3, 6}, {"8-15", 8, 15, 4}};
  spec.background_facts = 30;
  spec.one_entity_passages = 20;
  spec.partial_passages = 10;
  spec.distractor_passages = 40;
  spec.seed = 3;
  const auto a = generate_benchmark(spec);
  const auto b = generate_benchmark(spec);
  REQUIRE(a.passages.size() == b.passages.size());
  for (std::size_t i = 0; i < a.passages.size(); ++i) CHECK(a.passages[i].text == b.passages[i].text);

  const auto eval = a.eval_facts();
  CHECK(eval.size() == 16);
  std::map<std::string, int> per_bucket;
  const auto truth = a.entailing_sets();
  for (const auto* f : eval) {
    ++per_bucket[f->bucket];
    const int freq = fact_frequency(a.passages, *f);
    for (const auto& bk : spec.buckets) {
      if (bk.name == f->bucket) {
        CHECK(freq >= bk.lo);
        CHECK(freq <= bk.hi);
      }
    }
    CHECK_FALSE(truth.at(f->id).empty());
    CHECK(f->prompt.back() == ':');
  }
  CHECK(per_bucket["1"] == 6);
  CHECK(per_bucket["2-3"] == 6);
  CHECK(per_bucket["8-15"] == 4);

  spec.seed = 4;
  const auto c = generate_benchmark(spec);
  CHECK(c.passages[0].text != a.passages[0].text);

  spec.buckets[0].lo = 5;
  CHECK_THROWS_AS(spec.validate(), Error);
}

TEST_CASE("corpus and facts files round trip with byte ranges") {
  BenchmarkSpec spec;
  spec.buckets = {{"2-3", 2, 3, 4}};
  spec.background_facts = 5;
  spec.one_entity_passages = 5;
  spec.partial_passages = 2;
  spec.distractor_passages = 5;
  const auto bm = generate_benchmark(spec);
  const auto dir = std::filesystem::temp_directory_path() / "tda_facttrace_test";
  std::filesystem::create_directories(dir);
  write_corpus(dir / "corpus.jsonl", bm.passages);
  write_facts(dir / "facts.jsonl", bm.facts);
  std::vector<index::RowMeta> ranges;
  const auto back = read_corpus(dir / "corpus.jsonl", &ranges);
  REQUIRE(back.size() == bm.passages.size());
  std::ifstream in(dir / "corpus.jsonl", std::ios::binary);
  const std::string all{std::istreambuf_iterator<char>(in), {}};
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].text == bm.passages[i].text);
    CHECK(back[i].label.kind == bm.passages[i].label.kind);
    CHECK(back[i].label.fact_ids == bm.passages[i].label.fact_ids);
    CHECK(all.substr(ranges[i].offset, ranges[i].length).find(back[i].id) != std::string::npos);
  }
  const auto facts = read_facts(dir / "facts.jsonl");
  REQUIRE(facts.size() == bm.facts.size());
  CHECK(facts[0].subject.aliases == bm.facts[0].subject.aliases);
  CHECK(facts.back().background);
  std::filesystem::remove_all(dir);
}

TEST_CASE("zero learning rate tail-patch leaves probabilities unchanged") {
  const auto config = small_config();
  const auto corpus = random_corpus(config, 12, 2);
  auto trained = tinylm::train(config, corpus, 10, tinylm::TrainHyper{.batch_size = 4});
  std::vector<tinylm::ExampleRecord> queries;
  std::vector<std::vector<const tinylm::ExampleRecord*>> props;
  for (int q = 0; q < 3; ++q) {
    const std::vector<int> prompt{tinylm::kBosId, 5 + q}, target{7, 8};
    queries.push_back(tinylm::make_prompted_example("q" + std::to_string(q), prompt, target));
    props.push_back({&corpus[0], &corpus[1], &corpus[2]});
  }
  tinylm::TrainHyper zero{.batch_size = 1, .learning_rate = 0.0};
  const int ks[] = {1, 3};
  auto r = tail_patch_eval(trained.state, trained.optimizer, zero, queries, props, ks, 2);
  CHECK(std::abs(r.at(1).mean_delta_pp) < 1e-9);
  CHECK(std::abs(r.at(3).mean_relative) < 1e-9);

  tinylm::TrainHyper hot{.batch_size = 1, .learning_rate = 0.05};
  auto moved = tail_patch_eval(trained.state, trained.optimizer, hot, queries, props, ks, 1);
  double total = 0;
  for (const auto& row : moved.delta_pp)
    for (double d : row) total += std::abs(d);
  CHECK(total > 0.0);
  CHECK_THROWS_AS(r.at(5), Error);
  const int too_many[] = {4};
  CHECK_THROWS_AS(tail_patch_eval(trained.state, trained.optimizer, zero, queries, props, too_many), Error);
}

TEST_CASE("query examples mask the prompt") {
  const std::vector<std::string> texts{"Ada Karo place of birth: Dunmore."};
  const auto vocab = text::Vocabulary::build(texts, 64);
  const auto q = query_example(vocab, karo_fact());
  CHECK(q.target_count() == 1);
  const auto p = passage_example(vocab, passage("x", texts[0]));
  CHECK(p.token_ids.front() == tinylm::kBosId);
  CHECK(p.token_ids.back() == tinylm::kEosId);
}
