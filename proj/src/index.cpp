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

#include "tda/index.hpp"

#include "tda/binio.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace tda::index {

using json = nlohmann::json;

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kReserved = 64;

std::filesystem::path sidecar_path(const std::filesystem::path& p) {
  return p.string() + ".meta.jsonl";
}

struct Header {
  std::uint32_t d = 0;
  std::vector<int> block_dims;
  std::uint64_t n = 0;
  std::uint64_t fingerprint_hash = 0;
  std::uint64_t config_hash = 0;

  std::size_t bytes() const { return 5 + 4 + 4 + 2 + 4 * block_dims.size() + 8 + kReserved; }
};

void write_header(binio::Writer& w, const Header& h) {
  w.magic("TSIX1");
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(h.d);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(h.block_dims.size()));
  for (int b : h.block_dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(b));
  w.put<std::uint64_t>(h.n);
  // Reserved: fingerprint hash, config hash, zero padding.
  w.put<std::uint64_t>(h.fingerprint_hash);
  w.put<std::uint64_t>(h.config_hash);
  w.zeros(kReserved - 16);
}

Header read_header(binio::Reader& r) {
  r.expect_magic("TSIX1");
  if (r.get<std::uint32_t>() != kVersion) throw Error("unsupported index version in " + r.path().string());
  Header h;
  h.d = r.get<std::uint32_t>();
  const auto nb = r.get<std::uint16_t>();
  for (int i = 0; i < nb; ++i) h.block_dims.push_back(static_cast<int>(r.get<std::uint32_t>()));
  h.n = r.get<std::uint64_t>();
  h.fingerprint_hash = r.get<std::uint64_t>();
  h.config_hash = r.get<std::uint64_t>();
  r.skip(kReserved - 16);
  return h;
}

std::uint32_t sum_dims(const std::vector<int>& dims) {
  std::uint32_t d = 0;
  for (int b : dims) {
    if (b < 1) throw ShapeError("block dims must be positive");
    d += static_cast<std::uint32_t>(b);
  }
  return d;
}

void write_sidecar(const std::filesystem::path& path, const std::string& fingerprint,
                   std::uint64_t config_hash, std::span<const RowMeta> meta,
                   const std::vector<float>& weights) {
  std::ofstream out(sidecar_path(path), std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + sidecar_path(path).string());
  out << json{{"fingerprint", fingerprint}, {"config_hash", hex64(config_hash)},
              {"n", meta.size()}}.dump()
      << '\n';
  for (std::size_t i = 0; i < meta.size(); ++i) {
    json j{{"id", meta[i].id}, {"offset", meta[i].offset}, {"length", meta[i].length}};
    if (!weights.empty()) j["weight"] = weights[i];
    out << j.dump() << '\n';
  }
  if (!out) throw Error("write failed: " + sidecar_path(path).string());
}

// "Better" ordering: higher score, then lower row.
bool better(const std::pair<std::size_t, float>& a, const std::pair<std::size_t, float>& b) {
  if (a.second != b.second) return a.second > b.second;
  return a.first < b.first;
}

std::vector<std::pair<std::size_t, float>> shard_top_k(const float* rows, std::size_t d,
                                                       std::span<const float> weights,
                                                       std::span<const float> q, std::size_t lo,
                                                       std::size_t hi, std::size_t k) {
  std::vector<std::pair<std::size_t, float>> heap;
  heap.reserve(k + 1);
  for (std::size_t i = lo; i < hi; ++i) {
    float s = dot_pairwise(rows + i * d, q.data(), d);
    if (!weights.empty()) s *= weights[i];
    std::pair<std::size_t, float> cand{i, s};
    if (heap.size() < k) {
      heap.push_back(cand);
      std::push_heap(heap.begin(), heap.end(), better);
    } else if (better(cand, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), better);
      heap.back() = cand;
      std::push_heap(heap.begin(), heap.end(), better);
    }
  }
  return heap;
}

}  // namespace

FeatureIndex::FeatureIndex(std::vector<int> block_dims, std::string fingerprint,
                           std::uint64_t config_hash)
    : block_dims_(std::move(block_dims)),
      fingerprint_(std::move(fingerprint)),
      config_hash_(config_hash),
      dim_(sum_dims(block_dims_)) {}

void FeatureIndex::reserve(std::size_t n) {
  data_.reserve(n * dim_);
  meta_.reserve(n);
}

Eigen::Map<const MatrixF> FeatureIndex::rows() const {
  return {data_.data(), static_cast<Eigen::Index>(size()), static_cast<Eigen::Index>(dim_)};
}

void FeatureIndex::append(std::span<const float> row, RowMeta meta, std::optional<float> weight) {
  if (row.size() != dim()) {
    throw ShapeError("row of dimension " + std::to_string(row.size()) + " appended to index of dimension " +
                     std::to_string(dim()));
  }
  if (weight && weights_.empty() && size() > 0) {
    throw Error("index rows must either all carry a weight or none");
  }
  if (!weight && !weights_.empty()) throw Error("index rows must either all carry a weight or none");
  data_.insert(data_.end(), row.begin(), row.end());
  meta_.push_back(std::move(meta));
  if (weight) weights_.push_back(*weight);
}

std::span<const float> FeatureIndex::row(std::size_t i) const {
  if (i >= size()) throw Error("row " + std::to_string(i) + " out of range");
  return {data_.data() + i * dim_, dim_};
}

std::optional<std::size_t> FeatureIndex::find(std::string_view id) const {
  for (std::size_t i = 0; i < meta_.size(); ++i) {
    if (meta_[i].id == id) return i;
  }
  return std::nullopt;
}

void FeatureIndex::save(const std::filesystem::path& path) const {
  Header h{static_cast<std::uint32_t>(dim()), block_dims_, size(), fnv1a(fingerprint_), config_hash_};
  binio::Writer w(path);
  write_header(w, h);
  w.floats(data_.data(), data_.size());
  w.close();
  write_sidecar(path, fingerprint_, config_hash_, meta_, weights_);
}

FeatureIndex FeatureIndex::load(const std::filesystem::path& path) {
  binio::Reader r(path);
  const Header h = read_header(r);
  if (sum_dims(h.block_dims) != h.d) throw Error("index header block dims do not sum to d");

  std::ifstream side(sidecar_path(path));
  if (!side) throw Error("missing index sidecar " + sidecar_path(path).string());
  std::string line;
  if (!std::getline(side, line)) throw Error("empty index sidecar");
  const json head = json::parse(line);
  FeatureIndex idx(h.block_dims, head.at("fingerprint").get<std::string>(), h.config_hash);
  if (fnv1a(idx.fingerprint_) != h.fingerprint_hash)
    throw Error("index sidecar fingerprint does not match " + path.string());

  idx.data_.resize(h.n * h.d);
  r.floats(idx.data_.data(), idx.data_.size());
  while (std::getline(side, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    idx.meta_.push_back({j.at("id").get<std::string>(), j.value("offset", std::uint64_t{0}),
                         j.value("length", std::uint64_t{0})});
    if (j.contains("weight")) idx.weights_.push_back(j["weight"].get<float>());
  }
  if (idx.meta_.size() != h.n) throw Error("index sidecar has " + std::to_string(idx.meta_.size()) +
                                           " rows, index has " + std::to_string(h.n));
  if (!idx.weights_.empty() && idx.weights_.size() != h.n) throw Error("index sidecar weights incomplete");
  return idx;
}

std::vector<std::pair<std::size_t, float>> top_k(const MatrixF& rows, std::span<const float> weights,
                                                 std::span<const float> q, std::size_t k,
                                                 const RetrieveOptions& options) {
  return top_k({rows.data(), static_cast<std::size_t>(rows.size())},
               static_cast<std::size_t>(rows.cols()), weights, q, k, options);
}

std::vector<std::pair<std::size_t, float>> top_k(std::span<const float> rows, std::size_t d,
                                                 std::span<const float> weights,
                                                 std::span<const float> q, std::size_t k,
                                                 const RetrieveOptions& options) {
  if (d != q.size()) {
    throw ShapeError("query dimension " + std::to_string(q.size()) + " does not match index dimension " +
                     std::to_string(d));
  }
  const std::size_t n = d == 0 ? 0 : rows.size() / d;
  if (!weights.empty() && weights.size() != n) throw ShapeError("one weight per row required");
  if (k == 0 || n == 0) return {};
  k = std::min(k, n);
  std::size_t shard = std::max<std::size_t>(1, options.shard_rows);
  if (options.threads > 1) {
    shard = std::min(shard, (n + static_cast<std::size_t>(options.threads) - 1) /
                                static_cast<std::size_t>(options.threads));
  }
  const std::size_t shards = (n + shard - 1) / shard;
  std::vector<std::vector<std::pair<std::size_t, float>>> parts(shards);
  parallel_for(shards, options.threads, [&](std::size_t s) {
    parts[s] = shard_top_k(rows.data(), d, weights, q, s * shard, std::min(n, (s + 1) * shard), k);
  });
  std::vector<std::pair<std::size_t, float>> all;
  for (auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  std::sort(all.begin(), all.end(), better);
  all.resize(std::min(k, all.size()));
  return all;
}

namespace {

RetrievalResult to_result(const FeatureIndex& index, std::string query_id,
                          const std::vector<std::pair<std::size_t, float>>& top, int k) {
  RetrievalResult out;
  out.query_id = std::move(query_id);
  out.fingerprint = index.fingerprint();
  out.truncated = static_cast<std::size_t>(k) > index.size();
  int rank = 1;
  for (const auto& [row, score] : top) out.hits.push_back({index.meta(row).id, row, score, rank++});
  return out;
}

void check_query(const FeatureIndex& index, std::string_view fp, int k) {
  if (k < 1) throw Error("k must be >= 1");
  if (fp != index.fingerprint()) {
    throw Error("query fingerprint '" + std::string(fp) + "' does not match index fingerprint '" +
                index.fingerprint() + "'");
  }
}

}  // namespace

RetrievalResult retrieve(const FeatureIndex& index, const FeatureVector& q,
                         std::string_view query_fingerprint, int k, const RetrieveOptions& options) {
  check_query(index, query_fingerprint, k);
  return to_result(index, q.example_id,
                   top_k(index.data(), index.dim(), index.weights(), q.values,
                         static_cast<std::size_t>(k), options),
                   k);
}

std::vector<RetrievalResult> retrieve_batch(const FeatureIndex& index, const MatrixF& queries,
                                            std::span<const std::string> query_ids,
                                            std::string_view query_fingerprint, int k,
                                            const RetrieveOptions& options) {
  check_query(index, query_fingerprint, k);
  if (query_ids.size() != static_cast<std::size_t>(queries.rows()))
    throw ShapeError("retrieve_batch: one id per query row required");
  std::vector<RetrievalResult> out(query_ids.size());
  RetrieveOptions inner = options;
  inner.threads = 1;
  parallel_for(query_ids.size(), options.threads, [&](std::size_t i) {
    std::span<const float> q(queries.data() + i * static_cast<std::size_t>(queries.cols()),
                             static_cast<std::size_t>(queries.cols()));
    out[i] = to_result(index, query_ids[i],
                       top_k(index.data(), index.dim(), index.weights(), q,
                             static_cast<std::size_t>(k), inner),
                       k);
  });
  return out;
}

IndexBuilder::IndexBuilder(std::filesystem::path path, std::vector<int> block_dims,
                           std::string fingerprint, std::uint64_t config_hash,
                           std::size_t shard_rows)
    : path_(std::move(path)),
      block_dims_(std::move(block_dims)),
      fingerprint_(std::move(fingerprint)),
      config_hash_(config_hash),
      shard_rows_(std::max<std::size_t>(1, shard_rows)) {}

std::size_t IndexBuilder::resumable_rows(std::size_t n) const {
  const auto partial = std::filesystem::path(path_.string() + ".partial");
  const auto wpartial = std::filesystem::path(path_.string() + ".partial.w");
  if (!std::filesystem::exists(partial)) return 0;
  binio::Reader r(partial);
  const Header h = read_header(r);
  if (h.fingerprint_hash != fnv1a(fingerprint_) || h.config_hash != config_hash_ ||
      h.block_dims != block_dims_ || h.n != n) {
    throw Error("partial index " + partial.string() +
                " was written by a different configuration; rerun with --force to discard it");
  }
  const std::size_t row_bytes = 4ULL * h.d;
  const auto size = std::filesystem::file_size(partial);
  std::size_t rows = size > h.bytes() ? (size - h.bytes()) / row_bytes : 0;
  if (std::filesystem::exists(wpartial)) {
    rows = std::min<std::size_t>(rows, std::filesystem::file_size(wpartial) / 4);
  } else {
    rows = 0;
  }
  return rows / shard_rows_ * shard_rows_;
}

FeatureIndex IndexBuilder::build(std::span<const RowMeta> meta, const Producer& produce,
                                 int threads) {
  const std::size_t n = meta.size();
  const auto partial = std::filesystem::path(path_.string() + ".partial");
  const auto wpartial = std::filesystem::path(path_.string() + ".partial.w");
  const std::uint32_t d = sum_dims(block_dims_);
  const Header h{d, block_dims_, n, fnv1a(fingerprint_), config_hash_};

  std::size_t done = resumable_rows(n);
  if (done == 0) {
    binio::Writer w(partial);
    write_header(w, h);
    w.close();
    binio::Writer(wpartial).close();
  } else {
    std::filesystem::resize_file(partial, h.bytes() + done * 4ULL * d);
    std::filesystem::resize_file(wpartial, done * 4ULL);
  }

  while (done < n) {
    const std::size_t hi = std::min(n, done + shard_rows_);
    std::vector<Row> rows(hi - done);
    parallel_for(rows.size(), threads, [&](std::size_t i) {
      rows[i] = produce(done + i);
      if (rows[i].values.size() != d) throw ShapeError("producer returned a row of the wrong dimension");
    });
    binio::Writer w(partial, binio::Writer::Mode::append);
    binio::Writer ww(wpartial, binio::Writer::Mode::append);
    for (const auto& r : rows) {
      w.floats(r.values.data(), r.values.size());
      ww.put<float>(r.weight ? *r.weight : std::nanf(""));
    }
    w.close();
    ww.close();
    done = hi;
  }

  // Read the finished rows back so resumed and fresh builds are identical.
  FeatureIndex idx(block_dims_, fingerprint_, config_hash_);
  {
    binio::Reader r(partial);
    read_header(r);
    idx.data_.resize(n * d);
    r.floats(idx.data_.data(), idx.data_.size());
    binio::Reader rw(wpartial);
    std::vector<float> w(n);
    if (n > 0) rw.floats(w.data(), n);
    const bool weighted = n > 0 && !std::isnan(w[0]);
    for (std::size_t i = 0; i < n; ++i) {
      if (weighted == std::isnan(w[i])) throw Error("partial index mixes weighted and unweighted rows");
    }
    if (weighted) idx.weights_ = std::move(w);
  }
  idx.meta_.assign(meta.begin(), meta.end());
  write_sidecar(path_, fingerprint_, config_hash_, idx.meta_, idx.weights_);
  std::filesystem::rename(partial, path_);
  std::filesystem::remove(wpartial);
  return idx;
}

}  // namespace tda::index
