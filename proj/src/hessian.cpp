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

#include "tda/hessian.hpp"

#include "tda/binio.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

namespace tda::hessian {

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::train: return "train";
    case Provenance::eval: return "eval";
    case Provenance::mixed: return "mixed";
  }
  return "?";
}

std::size_t HessianBlocks::dim() const {
  return static_cast<std::size_t>(std::accumulate(block_dims.begin(), block_dims.end(), 0));
}

Accumulator::Accumulator(std::vector<int> block_dims) : dims_(std::move(block_dims)) {
  for (int d : dims_) {
    if (d < 1) throw Error("Accumulator: block dims must be positive");
    sums_.push_back(MatrixD::Zero(d, d));
  }
}

void Accumulator::add(const FeatureVector& v) {
  if (v.stage != gradfeat::Stage::projected) {
    throw Error("estimate_R expects projected (not whitened or normalized) vectors; '" +
                v.example_id + "' is " + std::string(gradfeat::to_string(v.stage)));
  }
  MatrixF row(1, static_cast<Eigen::Index>(v.values.size()));
  std::copy(v.values.begin(), v.values.end(), row.data());
  add_rows(row);
}

void Accumulator::add_rows(const MatrixF& rows) {
  const auto d = std::accumulate(dims_.begin(), dims_.end(), 0);
  if (rows.cols() != d) {
    throw ShapeError("vector of dimension " + std::to_string(rows.cols()) +
                     " does not match Hessian layout of dimension " + std::to_string(d));
  }
  Eigen::Index off = 0;
  for (std::size_t b = 0; b < dims_.size(); ++b) {
    const MatrixD blk = rows.middleCols(off, dims_[b]).cast<double>();
    sums_[b].selfadjointView<Eigen::Lower>().rankUpdate(blk.transpose());
    off += dims_[b];
  }
  count_ += static_cast<std::uint64_t>(rows.rows());
}

void Accumulator::merge(const Accumulator& other) {
  if (other.dims_ != dims_) throw ShapeError("Accumulator::merge: layout mismatch");
  for (std::size_t b = 0; b < sums_.size(); ++b) sums_[b] += other.sums_[b];
  count_ += other.count_;
}

HessianBlocks Accumulator::finalize(Provenance provenance) const {
  if (count_ == 0) throw Error("estimate_R: no vectors");
  HessianBlocks h;
  h.block_dims = dims_;
  h.count = count_;
  h.provenance = provenance;
  (provenance == Provenance::eval ? h.eval_count : h.train_count) = count_;
  for (const auto& s : sums_) {
    MatrixD full = s.selfadjointView<Eigen::Lower>();
    h.r.push_back(full / static_cast<double>(count_));
  }
  return h;
}

HessianBlocks estimate_R(std::span<const FeatureVector> vectors, const std::vector<int>& block_dims,
                         Provenance provenance) {
  if (vectors.empty()) throw Error("estimate_R: empty stream");
  Accumulator acc(block_dims);
  for (const auto& v : vectors) acc.add(v);
  return acc.finalize(provenance);
}

namespace {

void check_symmetric(const MatrixD& m, std::size_t block) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (!(asym < 1e-6 * scale)) {
    throw Error("Hessian block " + std::to_string(block) + " is not symmetric (max |R - R^T| = " +
                std::to_string(asym) + ")");
  }
}

}  // namespace

HessianBlocks inverse_sqrt(HessianBlocks h, double damping) {
  if (damping < 0.0) throw Error("inverse_sqrt: damping must be >= 0");
  h.inv_sqrt.clear();
  h.damping = damping;
  for (std::size_t b = 0; b < h.r.size(); ++b) {
    const MatrixD& r = h.r[b];
    check_symmetric(r, b);
    const MatrixD sym = 0.5 * (r + r.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success)
      throw Error("eigendecomposition failed for Hessian block " + std::to_string(b));
    const double floor = damping * sym.trace() / static_cast<double>(sym.rows());
    Eigen::VectorXd inv = eig.eigenvalues();
    for (Eigen::Index i = 0; i < inv.size(); ++i) {
      const double lam = std::max(inv[i], floor);
      if (!(lam > 0.0)) {
        throw Error("Hessian block " + std::to_string(b) +
                    " is singular; use a positive damping");
      }
      inv[i] = 1.0 / std::sqrt(lam);
    }
    const Eigen::MatrixXd& u = eig.eigenvectors();
    MatrixD out = u * inv.asDiagonal() * u.transpose();
    h.inv_sqrt.push_back(0.5 * (out + out.transpose()));
  }
  return h;
}

HessianBlocks mix(const HessianBlocks& r_train, const HessianBlocks& r_eval, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("mix: lambda must lie in [0, 1]");
  if (r_train.block_dims != r_eval.block_dims)
    throw ShapeError("mix: train and eval Hessians have different layouts");
  HessianBlocks out;
  out.block_dims = r_train.block_dims;
  out.provenance = Provenance::mixed;
  out.lambda = lambda;
  out.train_count = r_train.count;
  out.eval_count = r_eval.count;
  out.count = r_train.count + r_eval.count;
  out.projection_seed = r_train.projection_seed;
  for (std::size_t b = 0; b < r_train.r.size(); ++b) {
    if (lambda == 0.0) {
      out.r.push_back(r_train.r[b]);
    } else if (lambda == 1.0) {
      out.r.push_back(r_eval.r[b]);
    } else {
      out.r.push_back(lambda * r_eval.r[b] + (1.0 - lambda) * r_train.r[b]);
    }
  }
  return out;
}

double kth_eigenvalue(const HessianBlocks& h, int m) {
  std::vector<double> all;
  for (const auto& r : h.r) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (r + r.transpose()),
                                                       Eigen::EigenvaluesOnly);
    for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) all.push_back(eig.eigenvalues()[i]);
  }
  if (m < 1 || static_cast<std::size_t>(m) > all.size()) {
    throw Error("crossover rank m=" + std::to_string(m) + " outside [1, " +
                std::to_string(all.size()) + "]");
  }
  std::nth_element(all.begin(), all.begin() + (m - 1), all.end(), std::greater<>());
  return std::max(0.0, all[static_cast<std::size_t>(m - 1)]);
}

LambdaChoice select_lambda(const HessianBlocks& r_train, const HessianBlocks& r_eval, int m,
                           std::span<const double> grid) {
  if (grid.empty()) throw Error("select_lambda: empty grid");
  if (r_train.block_dims != r_eval.block_dims)
    throw ShapeError("select_lambda: layout mismatch");
  LambdaChoice c;
  c.sigma_train = kth_eigenvalue(r_train, m);
  c.sigma_eval = kth_eigenvalue(r_eval, m);
  if (!(c.sigma_train + c.sigma_eval > 0.0))
    throw Error("select_lambda: both spectra are zero at rank " + std::to_string(m));
  c.crossover = c.sigma_train / (c.sigma_eval + c.sigma_train);
  double best = std::numeric_limits<double>::infinity();
  for (double lam : grid) {
    if (!(lam >= 0.0 && lam <= 1.0)) throw Error("select_lambda: grid value outside [0, 1]");
    const double gap = std::abs(lam * c.sigma_eval - (1.0 - lam) * c.sigma_train);
    if (gap < best) {
      best = gap;
      c.lambda = lam;
    }
  }
  return c;
}

FeatureVector whiten(const FeatureVector& v, const HessianBlocks& h) {
  if (v.stage != gradfeat::Stage::projected) {
    throw Error("whitening requires a projected vector; '" + v.example_id + "' is " +
                std::string(gradfeat::to_string(v.stage)));
  }
  MatrixF row(1, static_cast<Eigen::Index>(v.values.size()));
  std::copy(v.values.begin(), v.values.end(), row.data());
  whiten_rows(row, h);
  FeatureVector out = v;
  std::copy(row.data(), row.data() + row.size(), out.values.begin());
  out.stage = gradfeat::Stage::whitened;
  return out;
}

void whiten_rows(MatrixF& rows, const HessianBlocks& h) {
  if (!h.has_inverse_sqrt()) throw Error("Hessian has no cached inverse square root");
  if (static_cast<std::size_t>(rows.cols()) != h.dim()) {
    throw ShapeError("feature dimension " + std::to_string(rows.cols()) +
                     " does not match Hessian dimension " + std::to_string(h.dim()));
  }
  Eigen::Index off = 0;
  for (std::size_t b = 0; b < h.block_dims.size(); ++b) {
    const int d = h.block_dims[b];
    const MatrixF w = h.inv_sqrt[b].cast<float>();
    // R^{-1/2} is symmetric, so row-vector form is x^T R^{-1/2}.
    MatrixF blk = rows.middleCols(off, d) * w;
    rows.middleCols(off, d) = blk;
    off += d;
  }
}

namespace {

constexpr std::uint32_t kHessianVersion = 1;

void write_block(binio::Writer& w, const MatrixD& m) {
  const MatrixF f = m.cast<float>();
  w.floats(f.data(), static_cast<std::size_t>(f.size()));
}

MatrixD read_block(binio::Reader& r, int d) {
  MatrixF f(d, d);
  r.floats(f.data(), static_cast<std::size_t>(f.size()));
  return f.cast<double>();
}

}  // namespace

void save(const std::filesystem::path& path, const HessianBlocks& h, std::uint64_t config_hash) {
  binio::Writer w(path);
  w.magic("HESS1");
  w.put<std::uint32_t>(kHessianVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(h.block_dims.size()));
  for (int d : h.block_dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.put<std::uint8_t>(h.has_inverse_sqrt() ? 1 : 0);
  for (const auto& r : h.r) write_block(w, r);
  for (const auto& r : h.inv_sqrt) write_block(w, r);
  // Provenance record.
  w.put<std::uint8_t>(static_cast<std::uint8_t>(h.provenance));
  w.put<double>(h.lambda);
  w.put<std::int32_t>(h.crossover_rank);
  w.put<std::uint64_t>(h.count);
  w.put<std::uint64_t>(h.train_count);
  w.put<std::uint64_t>(h.eval_count);
  w.put<std::uint64_t>(h.projection_seed);
  w.put<double>(h.damping);
  w.put<std::uint64_t>(config_hash);
  w.close();
}

HessianBlocks load(const std::filesystem::path& path, std::uint64_t* config_hash) {
  binio::Reader r(path);
  r.expect_magic("HESS1");
  if (r.get<std::uint32_t>() != kHessianVersion) throw Error("unsupported Hessian file version");
  HessianBlocks h;
  const auto nb = r.get<std::uint16_t>();
  for (int i = 0; i < nb; ++i) h.block_dims.push_back(static_cast<int>(r.get<std::uint32_t>()));
  const bool has_inv = r.get<std::uint8_t>() != 0;
  for (int d : h.block_dims) h.r.push_back(read_block(r, d));
  if (has_inv) {
    for (int d : h.block_dims) h.inv_sqrt.push_back(read_block(r, d));
  }
  h.provenance = static_cast<Provenance>(r.get<std::uint8_t>());
  h.lambda = r.get<double>();
  h.crossover_rank = r.get<std::int32_t>();
  h.count = r.get<std::uint64_t>();
  h.train_count = r.get<std::uint64_t>();
  h.eval_count = r.get<std::uint64_t>();
  h.projection_seed = r.get<std::uint64_t>();
  h.damping = r.get<double>();
  const auto hash = r.get<std::uint64_t>();
  if (config_hash) *config_hash = hash;
  return h;
}

}  // namespace tda::hessian
