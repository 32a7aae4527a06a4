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
#include "tda/index.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>

using namespace tda;
using namespace tda::index;

namespace {

MatrixF random_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  GaussianSource rng(seed);
  MatrixF m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.next());
  return m;
}

FeatureIndex make_index(const MatrixF& rows, std::string fp = "fp") {
  FeatureIndex idx({static_cast<int>(rows.cols())}, std::move(fp), 7);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    idx.append({rows.row(i).data(), static_cast<std::size_t>(rows.cols())},
               {"row" + std::to_string(i), static_cast<std::uint64_t>(i), 1});
  }
  return idx;
}

FeatureVector query(std::span<const float> v) {
  return FeatureVector{{v.begin(), v.end()}, "q", gradfeat::Stage::normalized, 0.0};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::pair<std::size_t, float>> full_sort(const MatrixF& rows, std::span<const float> q) {
  std::vector<std::pair<std::size_t, float>> all;
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    all.emplace_back(static_cast<std::size_t>(i), dot_pairwise(rows.row(i).data(), q.data(), q.size()));
  std::stable_sort(all.begin(), all.end(), [](auto& a, auto& b) { return a.second > b.second; });
  return all;
}

}  // namespace

TEST_CASE("self similarity and orthogonality") {
  MatrixF rows = random_rows(50, 16, 1);
  rows.rowwise().normalize();
  auto idx = make_index(rows);
  auto r = retrieve(idx, query(idx.row(17)), "fp", 3);
  CHECK(r.hits[0].example_id == "row17");
  CHECK(r.hits[0].score == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(r.hits[0].rank == 1);
  CHECK(r.hits[2].rank == 3);
  for (std::size_t i = 1; i < r.hits.size(); ++i) CHECK(r.hits[i - 1].score >= r.hits[i].score);

  MatrixF axis = MatrixF::Zero(3, 4);
  axis(0, 0) = axis(1, 1) = axis(2, 2) = 1.0f;
  auto ax = make_index(axis);
  std::vector<float> e3{0, 0, 0, 1};
  for (const auto& h : retrieve(ax, query(e3), "fp", 3).hits) CHECK(h.score == doctest::Approx(0.0));
}

TEST_CASE("top-k matches a full sort on 10k rows, sharded or not") {
  const MatrixF rows = random_rows(10000, 64, 3);
  const MatrixF qs = random_rows(5, 64, 4);
  for (Eigen::Index qi = 0; qi < qs.rows(); ++qi) {
    std::span<const float> q(qs.row(qi).data(), 64);
    const auto oracle = full_sort(rows, q);
    for (std::size_t k : {1u, 10u, 100u}) {
      const auto single = top_k(rows, {}, q, k);
      REQUIRE(single.size() == k);
      for (std::size_t i = 0; i < k; ++i) CHECK(single[i] == oracle[i]);
      for (std::size_t shard : {7u, 1000u, 4096u}) {
        CHECK(top_k(rows, {}, q, k, {1, shard}) == single);
        CHECK(top_k(rows, {}, q, k, {3, shard}) == single);
      }
    }
  }
}

TEST_CASE("ties break by row and short results are flagged") {
  MatrixF rows = MatrixF::Ones(5, 2);
  auto idx = make_index(rows);
  std::vector<float> q{1, 1};
  auto r = retrieve(idx, query(q), "fp", 8);
  CHECK(r.truncated);
  REQUIRE(r.hits.size() == 5);
  for (int i = 0; i < 5; ++i) CHECK(r.hits[static_cast<std::size_t>(i)].row == static_cast<std::size_t>(i));
}

TEST_CASE("retrieval errors") {
  auto idx = make_index(random_rows(4, 3, 2));
  std::vector<float> q2{1, 2}, q3{1, 2, 3};
  CHECK_THROWS_AS(retrieve(idx, query(q2), "fp", 1), ShapeError);
  CHECK_THROWS_AS(retrieve(idx, query(q3), "other", 1), Error);
  CHECK_THROWS_AS(retrieve(idx, query(q3), "fp", 0), Error);
  CHECK_THROWS_AS(idx.append(q2, {"x"}), ShapeError);
}

TEST_CASE("weights scale scores") {
  FeatureIndex idx({2}, "w");
  std::vector<float> a{1, 0}, b{1, 0};
  idx.append(a, {"a"}, 0.5f);
  idx.append(b, {"b"}, 2.0f);
  auto r = retrieve(idx, query(a), "w", 2);
  CHECK(r.hits[0].example_id == "b");
  CHECK(r.hits[0].score == doctest::Approx(2.0));
  CHECK(r.hits[1].score == doctest::Approx(0.5));
  CHECK_THROWS_AS(idx.append(a, {"c"}), Error);
}

TEST_CASE("batch retrieval equals single retrieval") {
  auto idx = make_index(random_rows(300, 8, 5));
  const MatrixF qs = random_rows(6, 8, 6);
  std::vector<std::string> ids;
  for (int i = 0; i < 6; ++i) ids.push_back("q" + std::to_string(i));
  auto batch = retrieve_batch(idx, qs, ids, "fp", 10, {2, 64});
  for (Eigen::Index i = 0; i < qs.rows(); ++i) {
    auto one = retrieve(idx, query({qs.row(i).data(), 8}), "fp", 10);
    REQUIRE(one.hits.size() == batch[static_cast<std::size_t>(i)].hits.size());
    for (std::size_t j = 0; j < one.hits.size(); ++j)
      CHECK(one.hits[j].row == batch[static_cast<std::size_t>(i)].hits[j].row);
  }
}

TEST_CASE("save and load round trip") {
  const MatrixF rows = random_rows(3, 6, 8);
  FeatureIndex idx({2, 4}, "fn=loss", 99);
  for (int i = 0; i < 3; ++i) idx.append({rows.row(i).data(), 6}, {"id" + std::to_string(i), 10u * i, 10});
  const auto dir = std::filesystem::temp_directory_path() / "tda_index_test";
  std::filesystem::create_directories(dir);
  idx.save(dir / "a.tsix");
  auto back = FeatureIndex::load(dir / "a.tsix");
  CHECK(back.size() == 3);
  CHECK(back.block_dims() == std::vector<int>{2, 4});
  CHECK(back.fingerprint() == "fn=loss");
  CHECK(back.config_hash() == 99);
  CHECK(back.meta(2).id == "id2");
  CHECK(back.meta(2).offset == 20);
  CHECK(std::equal(back.data().begin(), back.data().end(), idx.data().begin()));
  back.save(dir / "b.tsix");
  CHECK(slurp(dir / "a.tsix") == slurp(dir / "b.tsix"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("builder resumes an interrupted build") {
  const auto dir = std::filesystem::temp_directory_path() / "tda_builder_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const MatrixF rows = random_rows(10, 4, 9);
  std::vector<RowMeta> meta;
  for (int i = 0; i < 10; ++i) meta.push_back({"m" + std::to_string(i)});
  auto produce = [&](std::size_t i) {
    return IndexBuilder::Row{{rows.row(static_cast<Eigen::Index>(i)).data(),
                              rows.row(static_cast<Eigen::Index>(i)).data() + 4},
                             std::nullopt};
  };

  IndexBuilder whole(dir / "whole.tsix", {4}, "fp", 1, 4);
  auto full = whole.build(meta, produce);
  CHECK(full.size() == 10);

  IndexBuilder b(dir / "resumed.tsix", {4}, "fp", 1, 4);
  CHECK_THROWS(b.build(meta, [&](std::size_t i) {
    if (i == 6) throw Error("interrupted");
    return produce(i);
  }));
  CHECK(b.resumable_rows(10) == 4);
  std::vector<std::size_t> produced;
  auto resumed = b.build(meta, [&](std::size_t i) {
    produced.push_back(i);
    return produce(i);
  });
  CHECK(produced.front() == 4);
  CHECK(slurp(dir / "whole.tsix") == slurp(dir / "resumed.tsix"));
  CHECK(slurp(dir / "whole.tsix.meta.jsonl") == slurp(dir / "resumed.tsix.meta.jsonl"));

  // A stale partial from a different configuration is refused.
  IndexBuilder c(dir / "c.tsix", {4}, "fp", 1, 4);
  CHECK_THROWS(c.build(meta, [&](std::size_t i) {
    if (i == 5) throw Error("interrupted");
    return produce(i);
  }));
  IndexBuilder other(dir / "c.tsix", {4}, "different", 1, 4);
  CHECK_THROWS_WITH_AS(other.build(meta, produce), doctest::Contains("different configuration"), Error);
  std::filesystem::remove_all(dir);
}
