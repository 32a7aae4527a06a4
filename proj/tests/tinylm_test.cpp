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
#include "tda/tinylm.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace tda;
using namespace tda::tinylm;
using namespace tda::testing;

namespace {

double total_loss(const ModelConfig& c, const Params<double>& p, const ExampleRecord& ex) {
  const ExampleRecord* batch[] = {&ex};
  return forward_backward<double>(c, p, batch, OutputFn::loss, QWeighting::token, nullptr)
      .total_loss;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.embed_dim = 9;
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.vocab_size = 3;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("loss gradient matches central differences in float64") {
  const auto c = small_config();
  auto state = init_model(c);
  auto corpus = random_corpus(c, 3, 11);
  // Train a little so the gradients are not those of a symmetric init.
  auto trained = train(c, corpus, 5, TrainHyper{.batch_size = 2});
  const Params<double> p = trained.state.params.cast<double>();

  GaussianSource rng(99);
  double worst = 0.0;
  for (const auto& ex : corpus) {
    auto grad = Params<double>::zeros(c);
    const ExampleRecord* batch[] = {&ex};
    forward_backward<double>(c, p, batch, OutputFn::loss, QWeighting::token, &grad);
    std::vector<MatrixD*> grads;
    grad.for_each([&](const std::string&, MatrixD& m) { grads.push_back(&m); });
    for (int trial = 0; trial < 10; ++trial) {
      Params<double> q = p;
      std::vector<MatrixD*> qs;
      q.for_each([&](const std::string&, MatrixD& m) { qs.push_back(&m); });
      const auto mi = rng.below(qs.size());
      const auto k = static_cast<Eigen::Index>(rng.below(qs[mi]->size()));
      const double h = 1e-5;
      const double orig = qs[mi]->data()[k];
      qs[mi]->data()[k] = orig + h;
      const double up = total_loss(c, q, ex);
      qs[mi]->data()[k] = orig - h;
      const double down = total_loss(c, q, ex);
      const double fd = (up - down) / (2 * h);
      const double an = grads[mi]->data()[k];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7});
      worst = std::max(worst, rel);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("target probability of an untrained model with uniform logits") {
  const auto c = small_config();
  auto state = init_model(c);
  state.params.head.setZero();
  const int prompt[] = {kBosId, 5, 6};
  const int target[] = {9};
  CHECK(target_probability(state, prompt, target) == doctest::Approx(1.0 / c.vocab_size).epsilon(1e-6));
}

TEST_CASE("target probability law and repetition") {
  const auto c = small_config();
  auto state = init_model(c);
  const int prompt[] = {kBosId, 5, 6};
  const int target[] = {9, 10};
  const double p = target_probability(state, prompt, target);
  CHECK(p > 0.0);
  CHECK(p <= 1.0);
  auto ex = make_prompted_example("q", prompt, target);
  const ExampleRecord* batch[] = {&ex};
  auto res = forward_backward<float>(c, state.params, batch, OutputFn::loss, QWeighting::token,
                                     nullptr);
  const auto lps = target_token_logprobs(state, ex);
  const double sum = std::accumulate(lps.begin(), lps.end(), 0.0);
  CHECK(std::abs(p - std::exp(sum)) < 1e-9);
  CHECK(std::abs(std::log(p) + res.total_loss) < 1e-4);

  // Target repeated twice: product of the per-token conditionals.
  const int twice[] = {9, 10, 9, 10};
  auto ex2 = make_prompted_example("q2", prompt, twice);
  const auto lp2 = target_token_logprobs(state, ex2);
  REQUIRE(lp2.size() == 4);
  const double direct = target_probability(state, prompt, twice);
  CHECK(direct == doctest::Approx(std::exp(lp2[0] + lp2[1] + lp2[2] + lp2[3])).epsilon(1e-9));

  CHECK_THROWS_AS(target_probability(state, prompt, std::span<const int>{}), Error);
}

TEST_CASE("training lowers the loss and is deterministic") {
  const auto c = small_config(3);
  auto corpus = random_corpus(c, 64, 5);
  TrainHyper h{.batch_size = 8, .learning_rate = 0.01, .warmup_steps = 20};
  auto a = train(c, corpus, 60, h);
  auto b = train(c, corpus, 60, h);
  CHECK(a.loss_curve.back() < a.loss_curve.front());
  bool identical = true;
  std::vector<const MatrixF*> am, bm;
  a.state.params.for_each([&](const std::string&, const MatrixF& m) { am.push_back(&m); });
  b.state.params.for_each([&](const std::string&, const MatrixF& m) { bm.push_back(&m); });
  for (std::size_t i = 0; i < am.size(); ++i) {
    identical = identical &&
                std::memcmp(am[i]->data(), bm[i]->data(), am[i]->size() * sizeof(float)) == 0;
  }
  CHECK(identical);
  CHECK(a.optimizer.step == 60);
}

TEST_CASE("zero training steps returns the initial state; empty corpus is an error") {
  const auto c = small_config();
  auto corpus = random_corpus(c, 4, 1);
  auto r = train(c, corpus, 0, TrainHyper{});
  CHECK(r.state.params.head == init_model(c).params.head);
  CHECK(r.loss_curve.empty());
  CHECK_THROWS_AS(train(c, std::span<const ExampleRecord>{}, 5, TrainHyper{}), Error);
}

TEST_CASE("margin gradient with token-level Q equals the loss gradient") {
  const auto c = small_config();
  auto state = init_model(c);
  const int prompt[] = {kBosId, 5};
  const int target[] = {7};
  auto ex = make_prompted_example("one", prompt, target);
  auto layout = LayerBlockLayout::make(c, 1);
  auto loss = per_example_gradient(state, ex, OutputFn::loss, layout);
  auto margin = per_example_gradient(state, ex, OutputFn::margin, layout);
  auto raw_margin = per_example_gradient(state, ex, OutputFn::margin, layout, QWeighting::none);
  const double p = std::exp(target_token_logprobs(state, ex)[0]);
  for (std::size_t b = 0; b < loss.blocks.size(); ++b) {
    CHECK((loss.blocks[b] - margin.blocks[b]).norm() <= 1e-5 * (1 + loss.blocks[b].norm()));
    // Q = p - 1 composed with the raw margin gradient.
    MatrixF composed = raw_margin.blocks[b] * static_cast<float>(p - 1.0);
    CHECK((composed - loss.blocks[b]).norm() <= 1e-4 * (1 + loss.blocks[b].norm()));
  }
  auto logit = per_example_gradient(state, ex, OutputFn::logit, layout);
  auto raw_logit = per_example_gradient(state, ex, OutputFn::logit, layout, QWeighting::none);
  for (std::size_t b = 0; b < logit.blocks.size(); ++b) {
    MatrixF composed = raw_logit.blocks[b] * static_cast<float>(p - 1.0);
    CHECK((composed - logit.blocks[b]).norm() <= 1e-4 * (1 + logit.blocks[b].norm()));
  }
}

TEST_CASE("float64 accumulation agrees with the float32 path") {
  const auto c = small_config();
  auto state = init_model(c);
  auto corpus = random_corpus(c, 2, 3);
  auto layout = LayerBlockLayout::make(c, 1);
  auto f = per_example_gradient(state, corpus[0], OutputFn::loss, layout);
  auto d = per_example_gradient(state, corpus[0], OutputFn::loss, layout, QWeighting::token,
                                Accumulate::f64);
  CHECK(d.mean_target_prob == doctest::Approx(f.mean_target_prob).epsilon(1e-5));
  for (std::size_t b = 0; b < f.blocks.size(); ++b)
    CHECK((f.blocks[b] - d.blocks[b]).norm() <= 1e-4 * (1 + d.blocks[b].norm()));
}

TEST_CASE("token-level and example-level Q differ when token probabilities differ") {
  const auto c = small_config();
  auto state = init_model(c);
  const int prompt[] = {kBosId, 5};
  const int target[] = {7, 12, 3};
  auto ex = make_prompted_example("multi", prompt, target);
  auto layout = LayerBlockLayout::make(c, 1);
  auto token = per_example_gradient(state, ex, OutputFn::margin, layout, QWeighting::token);
  auto raw = per_example_gradient(state, ex, OutputFn::margin, layout, QWeighting::none);
  const float q_example = static_cast<float>(raw.mean_target_prob - 1.0);
  double diff = 0.0;
  for (std::size_t b = 0; b < token.blocks.size(); ++b)
    diff += (token.blocks[b] - raw.blocks[b] * q_example).norm();
  CHECK(diff > 1e-4);
}

TEST_CASE("sketch layout excludes the input embedding and groups blocks") {
  ModelConfig c;  // default desk-scale config
  auto layout = LayerBlockLayout::make(c, 1);
  REQUIRE(layout.size() == 4);
  CHECK(layout.blocks()[0].kind == BlockKind::attention);
  CHECK(layout.blocks()[0].rows == 4 * c.embed_dim);
  CHECK(layout.blocks()[1].rows == 2 * c.mlp_hidden);
  CHECK(layout.blocks()[3].rows == 2 * c.mlp_hidden + c.vocab_size);
  std::size_t covered = 0;
  for (const auto& b : layout.blocks()) covered += static_cast<std::size_t>(b.rows) * b.cols;
  const auto p = Params<float>::zeros(c);
  CHECK(covered == p.parameter_count() - static_cast<std::size_t>(p.embed.size()));
  CHECK_THROWS_AS(LayerBlockLayout::make(c, 3), Error);
}

TEST_CASE("gradient of a memorized sequence is near zero") {
  const auto c = small_config(4);
  std::vector<ExampleRecord> corpus{make_training_example("m", {kBosId, 5, 9, 13, 17})};
  auto layout = LayerBlockLayout::make(c, 1);
  auto init = init_model(c);
  auto g0 = per_example_gradient(init, corpus[0], OutputFn::loss, layout);
  auto fit = train(c, corpus, 400, TrainHyper{.batch_size = 1, .learning_rate = 0.05, .warmup_steps = 400});
  auto g1 = per_example_gradient(fit.state, corpus[0], OutputFn::loss, layout);
  double n0 = 0, n1 = 0;
  for (auto& b : g0.blocks) n0 += b.squaredNorm();
  for (auto& b : g1.blocks) n1 += b.squaredNorm();
  CHECK(std::sqrt(n1) < 1e-3 * std::sqrt(n0));
}

TEST_CASE("tail-patch step is pure and raises the probability of its own text") {
  const auto c = small_config(5);
  auto corpus = random_corpus(c, 32, 8);
  TrainHyper h{.batch_size = 4, .learning_rate = 0.01, .warmup_steps = 10};
  auto trained = train(c, corpus, 40, h);
  const auto& prop = corpus[3];
  std::span<const int> toks(prop.token_ids);
  const auto prompt = toks.first(2);
  const auto target = toks.subspan(2);
  const double before = target_probability(trained.state, prompt, target);
  const auto snapshot = trained.state.params.head;
  auto a = tail_patch_step(trained.state, trained.optimizer, prop, h);
  auto b = tail_patch_step(trained.state, trained.optimizer, prop, h);
  CHECK(trained.state.params.head == snapshot);
  CHECK(a.params.head == b.params.head);
  CHECK(target_probability(a, prompt, target) > before);

  TrainHyper frozen = h;
  frozen.learning_rate = 0.0;
  auto z = tail_patch_step(trained.state, trained.optimizer, prop, frozen);
  CHECK(std::abs(target_probability(z, prompt, target) - before) < 1e-9);
}

TEST_CASE("an update with zero gradient is a fixed point without weight decay") {
  const auto c = small_config(6);
  auto corpus = random_corpus(c, 8, 2);
  TrainHyper h{.batch_size = 2};
  auto trained = train(c, corpus, 5, h);
  auto params = trained.state.params;
  auto opt = trained.optimizer;
  adafactor_update(params, opt, Params<float>::zeros(c), h);
  CHECK(params.head == trained.state.params.head);
  CHECK(params.layers[0].wq == trained.state.params.layers[0].wq);

  h.weight_decay = 0.1;
  params = trained.state.params;
  opt = trained.optimizer;
  adafactor_update(params, opt, Params<float>::zeros(c), h);
  const MatrixF expected = (trained.state.params.head.cast<double>() *
                            (1.0 - learning_rate_at(h, opt.step) * 0.1)).cast<float>();
  CHECK((params.head - expected).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("checkpoint round trip") {
  const auto c = small_config(9);
  auto corpus = random_corpus(c, 8, 3);
  TrainHyper h{.batch_size = 2, .warmup_steps = 3};
  auto trained = train(c, corpus, 6, h);
  const auto path = std::filesystem::temp_directory_path() / "tda_ckpt_test.bin";
  save_checkpoint(path, Checkpoint{trained.state, trained.optimizer, h, 0xabcdef});
  auto loaded = load_checkpoint(path);
  CHECK(loaded.state.config == c);
  CHECK(loaded.config_hash == 0xabcdef);
  CHECK(loaded.hyper == h);
  CHECK(loaded.optimizer.step == 6);
  CHECK(loaded.state.params.layers[1].w_out == trained.state.params.layers[1].w_out);
  CHECK(loaded.optimizer.moments[3].row == trained.optimizer.moments[3].row);
  std::filesystem::remove(path);
}
