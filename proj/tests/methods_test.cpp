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
#include "tda/methods.hpp"

#include <cmath>
#include <set>

using namespace tda;
using namespace tda::methods;
using namespace tda::testing;

TEST_CASE("preset fingerprints are injective and round trip") {
  std::set<std::string> seen;
  for (const auto& name : preset_names()) {
    auto m = preset(name);
    if (m.hessian_mode == HessianMode::mixed) m.lambda = 0.9;
    const auto fp = fingerprint(m, 42, 4096);
    CHECK(seen.insert(fp).second);
    std::uint64_t seed = 0;
    std::size_t d = 0;
    auto back = parse_fingerprint(fp, &seed, &d);
    CHECK(seed == 42);
    CHECK(d == 4096);
    CHECK(fingerprint(back, seed, d) == fp);
  }
  CHECK(fingerprint(preset("trackstar"), 1, 16) != fingerprint(preset("exp5"), 1, 16));
  CHECK(fingerprint(preset("exp2"), 1, 16) ==
        "fn=loss;opt=0;hess=none;norm=1;exq=0;proj=1,16");
  CHECK_THROWS_AS(preset("exp9"), Error);
  CHECK_THROWS_AS(parse_fingerprint("fn=loss"), Error);
}

TEST_CASE("presets follow the ablation grid") {
  auto e1 = preset("exp1"), e2 = preset("exp2"), e3 = preset("exp3"), e4 = preset("exp4"),
       e5 = preset("exp5"), ts = preset("trackstar"), tk = preset("trak");
  CHECK_FALSE(e1.use_unit_norm);
  CHECK(e2.use_unit_norm);
  CHECK(e3.hessian_mode == HessianMode::train);
  CHECK_FALSE(e3.use_optimizer_correction);
  CHECK(e4.use_optimizer_correction);
  CHECK(e4.hessian_mode == HessianMode::none);
  CHECK(e5.hessian_mode == HessianMode::train);
  CHECK(ts.hessian_mode == HessianMode::mixed);
  CHECK(ts.use_optimizer_correction);
  CHECK(tk.output_fn == tinylm::OutputFn::margin);
  CHECK(tk.trak_example_level_Q);
  CHECK_FALSE(tk.use_unit_norm);
  CHECK(tk.feature_options().weighting == tinylm::QWeighting::none);
}

namespace {

struct Toy {
  tinylm::ModelConfig config = small_config();
  tinylm::TrainResult trained;
  tinylm::LayerBlockLayout layout;
  gradfeat::ProjectionSpec spec;
  std::vector<tinylm::ExampleRecord> corpus;

  Toy()
      : trained(tinylm::train(config, random_corpus(config, 24, 1), 30,
                              tinylm::TrainHyper{.batch_size = 4})),
        layout(tinylm::LayerBlockLayout::make(config, 1)),
        spec(layout, 16, 5),
        corpus(random_corpus(config, 24, 1)) {}
};

}  // namespace

TEST_CASE("missing artifacts are named") {
  Toy t;
  Artifacts a{&t.trained.state, &t.trained.optimizer, &t.spec};
  CHECK_THROWS_WITH_AS(featurize_query(preset("exp5"), a, t.corpus[0]),
                       doctest::Contains("optimizer-corrected train Hessian"), Error);
  CHECK_THROWS_WITH_AS(featurize_query(preset("trackstar"), a, t.corpus[0]),
                       doctest::Contains("mixed"), Error);
  Artifacts no_opt{&t.trained.state, nullptr, &t.spec};
  CHECK_THROWS_WITH_AS(featurize_query(preset("exp4"), no_opt, t.corpus[0]),
                       doctest::Contains("optimizer state"), Error);
  CHECK_NOTHROW(featurize_query(preset("exp2"), no_opt, t.corpus[0]));
}

TEST_CASE("TRAK with a unit multiplier equals raw margin scores") {
  Toy t;
  const auto trak = preset("trak");
  gradfeat::Featurizer f(t.trained.state, t.trained.optimizer, t.spec, trak.feature_options());
  std::vector<gradfeat::FeatureVector> raw;
  for (const auto& ex : t.corpus) raw.push_back(f.projected(ex));
  auto h = hessian::inverse_sqrt(hessian::estimate_R(raw, t.spec.block_dims()), 1e-6);
  Artifacts a{&t.trained.state, &t.trained.optimizer, &t.spec};
  a.trak_hessian = &h;

  std::vector<index::RowMeta> meta;
  for (const auto& ex : t.corpus) meta.push_back({ex.id});
  auto idx = build_index(trak, a, t.corpus, meta);
  REQUIRE(idx.weights().size() == t.corpus.size());
  const auto q = featurize_query(trak, a, t.corpus[3]);
  for (std::size_t i = 0; i < t.corpus.size(); ++i) {
    const auto w = hessian::whiten(raw[i], h);
    double manual = 0;
    for (std::size_t j = 0; j < w.values.size(); ++j) manual += static_cast<double>(w.values[j]) * q.values[j];
    const double stored = dot_pairwise(idx.row(i).data(), q.values.data(), q.values.size());
    CHECK(stored == doctest::Approx(manual).epsilon(1e-4));
    CHECK(idx.weights()[i] == doctest::Approx(1.0 - raw[i].mean_target_prob));
  }
  auto r = score_with_method(trak, a, t.corpus[3], idx, 5);
  CHECK(r.fingerprint == fingerprint(trak, a));
  const auto top = r.hits[0].row;
  const double expect = dot_pairwise(idx.row(top).data(), q.values.data(), q.values.size()) *
                        idx.weights()[top];
  CHECK(r.hits[0].score == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("unit-normalized presets ignore candidate gradient scale") {
  Toy t;
  const auto m = preset("exp4");
  gradfeat::Featurizer f(t.trained.state, t.trained.optimizer, t.spec, m.feature_options());
  const auto q = f.featurize(t.corpus[0], nullptr);
  std::vector<float> plain, scaled;
  for (std::size_t i = 1; i < t.corpus.size(); ++i) {
    auto sk = tinylm::per_example_gradient(t.trained.state, t.corpus[i], tinylm::OutputFn::loss, t.layout);
    auto sk3 = sk;
    for (auto& b : sk3.blocks) b *= (i == 5 ? 37.0f : 1.0f);
    const auto v = gradfeat::moment_blocks(t.trained.optimizer, t.config, t.layout);
    auto a = gradfeat::normalize(gradfeat::project(gradfeat::second_moment_correct(sk, v, 1e-8), t.spec));
    auto b = gradfeat::normalize(gradfeat::project(gradfeat::second_moment_correct(sk3, v, 1e-8), t.spec));
    plain.insert(plain.end(), a.values.begin(), a.values.end());
    scaled.insert(scaled.end(), b.values.begin(), b.values.end());
  }
  const auto d = t.spec.dim();
  const auto r1 = index::top_k(plain, d, {}, q.values, 10);
  const auto r2 = index::top_k(scaled, d, {}, q.values, 10);
  REQUIRE(r1.size() == r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i].first == r2[i].first);
}

TEST_CASE("BM25 containment and saturation") {
  std::vector<std::string> ids{"A", "B"}, texts{"karo river bridge", "dunmore hills"};
  Bm25Index bm(ids, texts);
  auto r = bm25_retrieve(bm, "the karo", 10);
  REQUIRE(r.result.hits.size() == 1);
  CHECK(r.result.hits[0].example_id == "A");
  CHECK(r.result.truncated);
  CHECK(bm25_retrieve(bm, "the of and", 3).empty_query);

  std::string many;
  for (int i = 0; i < 100; ++i) many += "karo ";
  std::vector<std::string> ids2{"one", "many", "other"}, texts2{"karo", many, "x"};
  Bm25Index sat(ids2, texts2);
  const auto s = sat.scores("karo");
  CHECK(s[1] < 2.0 * s[0]);
  CHECK(s[1] > s[0]);
  CHECK_THROWS_AS(Bm25Index(ids2, texts2, Bm25Params{0.0, 0.5}), Error);
}

TEST_CASE("BM25 matches a direct formula evaluation") {
  std::vector<std::string> ids{"d0", "d1", "d2"};
  std::vector<std::string> texts{"apple banana apple", "banana cherry", "cherry cherry cherry date"};
  Bm25Index bm(ids, texts);
  const double n = 3, k1 = 1.2, b = 0.75, avgdl = (3 + 2 + 4) / 3.0;
  auto idf = [&](double df) { return std::log(1 + (n - df + 0.5) / (df + 0.5)); };
  auto term = [&](double tf, double dl, double df) {
    return idf(df) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl));
  };
  const auto s = bm.scores("apple cherry cherry");
  CHECK(std::abs(s[0] - term(2, 3, 1)) < 1e-9);
  CHECK(std::abs(s[1] - 2 * term(1, 2, 2)) < 1e-9);
  CHECK(std::abs(s[2] - 2 * term(3, 4, 2)) < 1e-9);
  for (double v : s) CHECK(v >= 0.0);
  auto r = bm25_retrieve(bm, "apple cherry cherry", 3);
  CHECK(r.result.hits[0].example_id == "d2");
}

TEST_CASE("external embeddings become an index") {
  methods::ExternalEmbeddings e;
  e.name = "demo";
  e.ids = {"a", "b"};
  e.vectors = MatrixF::Identity(2, 2);
  auto idx = e.to_index();
  CHECK(idx.size() == 2);
  CHECK(idx.fingerprint() == "external:demo");
  gradfeat::FeatureVector q{{0.0f, 1.0f}, "q", gradfeat::Stage::normalized, 0};
  CHECK(index::retrieve(idx, q, "external:demo", 1).hits[0].example_id == "b");
}
