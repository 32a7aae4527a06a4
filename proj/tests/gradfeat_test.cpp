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
#include "tda/gradfeat.hpp"
#include "tda/hessian.hpp"

#include <cmath>

using namespace tda;
using namespace tda::gradfeat;
using namespace tda::testing;

namespace {

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

double flat_dot(const GradientSketch& a, const GradientSketch& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.blocks.size(); ++i)
    s += (a.blocks[i].cast<double>().array() * b.blocks[i].cast<double>().array()).sum();
  return s;
}

double dot(const FeatureVector& a, const FeatureVector& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += static_cast<double>(a.values[i]) * b.values[i];
  return s;
}

GradientSketch one_block(MatrixF m) {
  GradientSketch s;
  s.blocks.push_back(std::move(m));
  return s;
}

}  // namespace

TEST_CASE("second-moment correction identities") {
  MatrixF g(1, 2);
  g << 2.0f, -3.0f;
  MatrixF v(1, 2);
  v << 4.0f, 9.0f;
  auto out = second_moment_correct(one_block(g), {v}, 0.0);
  CHECK(out.blocks[0](0, 0) == doctest::Approx(1.0));
  CHECK(out.blocks[0](0, 1) == doctest::Approx(-1.0));

  MatrixF zero = MatrixF::Zero(1, 2);
  auto z = second_moment_correct(one_block(g), {zero}, 1e-8);
  CHECK(z.blocks[0](0, 0) == doctest::Approx(2e8).epsilon(1e-6));

  CHECK_THROWS_AS(second_moment_correct(one_block(g), {}, 1e-8), ShapeError);
  CHECK_THROWS_AS(second_moment_correct(one_block(g), {MatrixF::Ones(2, 1)}, 1e-8), ShapeError);
}

TEST_CASE("projection spec validates and regenerates") {
  const auto c = small_config();
  const auto layout = tinylm::LayerBlockLayout::make(c, 1);
  CHECK_THROWS_AS(ProjectionSpec(layout, 10, 1), Error);
  ProjectionSpec a(layout, 16, 42), b(layout, 16, 42), other(layout, 16, 43);
  CHECK(a.dim() == 16 * layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    CHECK(a.left(i) == b.left(i));
    CHECK(a.right(i) == b.right(i));
    CHECK(a.left(i) != other.left(i));
  }
  // Distinct blocks draw distinct matrices even with equal shapes.
  CHECK(a.left(0).row(0) != a.left(2).row(0));
}

TEST_CASE("projection is linear and preserves inner products in expectation") {
  const auto c = small_config();
  auto state = tinylm::init_model(c);
  const auto layout = tinylm::LayerBlockLayout::make(c, 1);
  auto corpus = random_corpus(c, 24, 5);
  ProjectionSpec spec(layout, 256, 9);

  std::vector<GradientSketch> sk;
  std::vector<FeatureVector> fv;
  for (const auto& ex : corpus) {
    sk.push_back(tinylm::per_example_gradient(state, ex, tinylm::OutputFn::loss, layout));
    fv.push_back(project(sk.back(), spec, ex.id));
  }

  // Linearity: P(a + 2b) = P(a) + 2 P(b).
  GradientSketch combo = sk[0];
  for (std::size_t b = 0; b < combo.blocks.size(); ++b) combo.blocks[b] += 2.0f * sk[1].blocks[b];
  auto pc = project(combo, spec);
  for (std::size_t i = 0; i < pc.values.size(); ++i) {
    CHECK(pc.values[i] == doctest::Approx(fv[0].values[i] + 2.0f * fv[1].values[i]).epsilon(1e-4));
  }

  std::vector<double> exact, approx;
  for (std::size_t i = 0; i < sk.size(); ++i) {
    for (std::size_t j = i + 1; j < sk.size(); ++j) {
      exact.push_back(flat_dot(sk[i], sk[j]));
      approx.push_back(dot(fv[i], fv[j]));
    }
  }
  CHECK(pearson(exact, approx) >= 0.8);
}

TEST_CASE("unit normalization") {
  FeatureVector v{{3.0f, 4.0f}, "a", Stage::projected, 0.0};
  auto n = normalize(v);
  CHECK(n.values[0] == doctest::Approx(0.6));
  CHECK(n.values[1] == doctest::Approx(0.8));
  CHECK(n.norm() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(n.stage == Stage::normalized);

  FeatureVector z{{0.0f, 0.0f}, "zero-example", Stage::projected, 0.0};
  CHECK_THROWS_WITH_AS(normalize(z), doctest::Contains("zero-example"), Error);
  FeatureVector bad{{NAN, 1.0f}, "nan", Stage::projected, 0.0};
  CHECK_THROWS_AS(normalize(bad), Error);
}

TEST_CASE("featurize is deterministic and stage-tagged") {
  const auto c = small_config();
  auto trained = tinylm::train(c, random_corpus(c, 16, 3), 20, tinylm::TrainHyper{.batch_size = 4});
  const auto layout = tinylm::LayerBlockLayout::make(c, 1);
  ProjectionSpec spec(layout, 16, 1);
  const auto ex = random_corpus(c, 1, 99)[0];
  FeatureOptions opt{.use_optimizer_correction = true, .use_unit_norm = true};
  auto a = featurize(trained.state, trained.optimizer, ex, spec, nullptr, opt);
  auto b = featurize(trained.state, trained.optimizer, ex, spec, nullptr, opt);
  CHECK(a.values == b.values);
  CHECK(a.stage == Stage::normalized);
  CHECK(a.norm() == doctest::Approx(1.0).epsilon(1e-5));

  Featurizer f(trained.state, trained.optimizer, spec, opt);
  auto p = f.projected(ex);
  CHECK(p.stage == Stage::projected);
  // Whitening refuses anything but a projected vector.
  auto h = hessian::inverse_sqrt(
      hessian::estimate_R(std::vector<FeatureVector>{p, f.projected(random_corpus(c, 1, 7)[0])},
                          spec.block_dims()),
      1e-3);
  CHECK_THROWS_AS(hessian::whiten(a, h), Error);
  CHECK(f.finish(p, &h).stage == Stage::normalized);
}
