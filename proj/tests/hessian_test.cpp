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
#include "tda/hessian.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <filesystem>

using namespace tda;
using namespace tda::hessian;
using gradfeat::Stage;

namespace {

FeatureVector fv(std::vector<float> v, std::string id = "x") {
  return FeatureVector{std::move(v), std::move(id), Stage::projected, 0.0};
}

std::vector<FeatureVector> random_vectors(int n, int d, std::uint64_t seed, double scale = 1.0) {
  GaussianSource rng(seed);
  std::vector<FeatureVector> out;
  for (int i = 0; i < n; ++i) {
    std::vector<float> v(static_cast<std::size_t>(d));
    for (auto& x : v) x = static_cast<float>(rng.next() * scale);
    out.push_back(fv(std::move(v), "r" + std::to_string(i)));
  }
  return out;
}

HessianBlocks diagonal(std::vector<int> dims, double value) {
  HessianBlocks h;
  h.block_dims = dims;
  for (int d : dims) h.r.push_back(value * MatrixD::Identity(d, d));
  h.count = 1;
  return h;
}

}  // namespace

TEST_CASE("R of a single vector is its outer product") {
  auto h = estimate_R(std::vector{fv({1.0f, 2.0f, 3.0f})}, {3});
  MatrixD expect(3, 3);
  expect << 1, 2, 3, 2, 4, 6, 3, 6, 9;
  CHECK((h.r[0] - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(h.count == 1);
}

TEST_CASE("R of two basis vectors averages") {
  auto h = estimate_R(std::vector{fv({1, 0, 0, 0}), fv({0, 1, 0, 0})}, {2, 2});
  REQUIRE(h.r.size() == 2);
  MatrixD e(2, 2);
  e << 0.5, 0, 0, 0.5;
  CHECK((h.r[0] - e).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(h.r[1].cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sharded accumulation matches single pass") {
  auto vs = random_vectors(50, 12, 3);
  Accumulator whole({4, 8}), a({4, 8}), b({4, 8});
  for (std::size_t i = 0; i < vs.size(); ++i) {
    whole.add(vs[i]);
    (i % 3 == 0 ? a : b).add(vs[i]);
  }
  a.merge(b);
  auto h1 = whole.finalize(Provenance::train);
  auto h2 = a.finalize(Provenance::train);
  for (std::size_t k = 0; k < 2; ++k) CHECK((h1.r[k] - h2.r[k]).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(h2.count == 50);
  CHECK_THROWS_AS(a.merge(Accumulator({12})), ShapeError);
}

TEST_CASE("estimate_R rejects non-projected vectors and bad dims") {
  auto v = fv({1, 2});
  v.stage = Stage::normalized;
  CHECK_THROWS_AS(estimate_R(std::vector{v}, {2}), Error);
  CHECK_THROWS_AS(estimate_R(std::vector{fv({1, 2, 3})}, {2}), ShapeError);
  CHECK_THROWS_AS(estimate_R(std::vector<FeatureVector>{}, {2}), Error);
}

TEST_CASE("inverse square root") {
  auto h = inverse_sqrt(diagonal({3}, 4.0), 0.0);
  CHECK((h.inv_sqrt[0] - 0.5 * MatrixD::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);

  auto r = estimate_R(random_vectors(200, 16, 8), {16});
  auto w = inverse_sqrt(r, 1e-6);
  const MatrixD id = w.inv_sqrt[0] * r.r[0] * w.inv_sqrt[0];
  CHECK((id - MatrixD::Identity(16, 16)).norm() / 4.0 < 1e-3);

  // Rank-deficient without damping is an error; damping fixes it.
  auto singular = estimate_R(std::vector{fv({1, 0})}, {2});
  CHECK_THROWS_AS(inverse_sqrt(singular, 0.0), Error);
  CHECK_NOTHROW(inverse_sqrt(singular, 1e-6));

  auto asym = diagonal({2}, 1.0);
  asym.r[0](0, 1) = 0.5;
  CHECK_THROWS_AS(inverse_sqrt(asym, 1e-6), Error);
}

TEST_CASE("mixing") {
  auto t = diagonal({2, 2}, 1.0), e = diagonal({2, 2}, 1.2);
  auto m0 = mix(t, e, 0.0), m1 = mix(t, e, 1.0), mh = mix(t, e, 0.5);
  CHECK(m0.r[0] == t.r[0]);
  CHECK(m1.r[1] == e.r[1]);
  CHECK((mh.r[0] - 1.1 * MatrixD::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(mh.provenance == Provenance::mixed);
  CHECK(mh.lambda == 0.5);
  CHECK_THROWS_AS(mix(t, diagonal({4}, 1.0), 0.5), ShapeError);
  CHECK_THROWS_AS(mix(t, e, 1.5), Error);
}

TEST_CASE("lambda selection at the spectral crossover") {
  const std::vector<double> grid{0.5, 0.9, 0.99, 0.999};
  auto c = select_lambda(diagonal({4}, 9.0), diagonal({4}, 1.0), 2, grid);
  CHECK(c.crossover == doctest::Approx(0.9));
  CHECK(c.lambda == 0.9);
  auto eq = select_lambda(diagonal({4}, 3.0), diagonal({4}, 3.0), 1, grid);
  CHECK(eq.crossover == doctest::Approx(0.5));
  CHECK(eq.lambda == 0.5);

  // An eval spectrum that decays faster pushes lambda up.
  auto train = estimate_R(random_vectors(100, 8, 1, 1.0), {8});
  auto small_eval = estimate_R(random_vectors(100, 8, 2, 0.1), {8});
  auto big_eval = estimate_R(random_vectors(100, 8, 2, 1.0), {8});
  CHECK(select_lambda(train, small_eval, 2, grid).crossover >
        select_lambda(train, big_eval, 2, grid).crossover);

  CHECK_THROWS_AS(select_lambda(diagonal({4}, 0.0), diagonal({4}, 0.0), 1, grid), Error);
  CHECK_THROWS_AS(kth_eigenvalue(diagonal({4}, 1.0), 5), Error);
  CHECK(kth_eigenvalue(diagonal({2, 2}, 1.0), 4) == doctest::Approx(1.0));
}

TEST_CASE("whitening is inverse-scale equivariant and unit norm cancels it") {
  auto vs = random_vectors(40, 8, 4);
  auto r = estimate_R(vs, {4, 4});
  auto scaled = r;
  for (auto& m : scaled.r) m *= 16.0;
  auto h1 = inverse_sqrt(r, 1e-6), h16 = inverse_sqrt(scaled, 1e-6);
  auto a = whiten(vs[0], h1), b = whiten(vs[0], h16);
  CHECK(a.stage == Stage::whitened);
  for (std::size_t i = 0; i < a.values.size(); ++i)
    CHECK(b.values[i] == doctest::Approx(a.values[i] / 4.0).epsilon(1e-4));
  auto na = gradfeat::normalize(a), nb = gradfeat::normalize(b);
  for (std::size_t i = 0; i < a.values.size(); ++i)
    CHECK(na.values[i] == doctest::Approx(nb.values[i]).epsilon(1e-4));

  CHECK_THROWS_AS(whiten(vs[0], r), Error);  // no inverse cached
  CHECK_THROWS_AS(whiten(fv({1, 2}), h1), ShapeError);
}

TEST_CASE("hessian file round trip") {
  auto h = inverse_sqrt(mix(estimate_R(random_vectors(20, 6, 1), {3, 3}),
                            estimate_R(random_vectors(20, 6, 2), {3, 3}, Provenance::eval), 0.9),
                        1e-6);
  h.crossover_rank = 2;
  h.projection_seed = 77;
  const auto path = std::filesystem::temp_directory_path() / "tda_hessian_test.bin";
  save(path, h, 1234);
  std::uint64_t hash = 0;
  auto back = load(path, &hash);
  std::filesystem::remove(path);
  CHECK(hash == 1234);
  CHECK(back.block_dims == h.block_dims);
  CHECK(back.provenance == Provenance::mixed);
  CHECK(back.lambda == 0.9);
  CHECK(back.crossover_rank == 2);
  CHECK(back.train_count == 20);
  CHECK(back.eval_count == 20);
  CHECK(back.projection_seed == 77);
  REQUIRE(back.has_inverse_sqrt());
  CHECK((back.inv_sqrt[1] - h.inv_sqrt[1]).cwiseAbs().maxCoeff() < 1e-5);
}
