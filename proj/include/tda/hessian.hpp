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

#pragma once

// Block-diagonal Gauss-Newton approximation R (mean outer product of
// projected gradients), its inverse square root, and train/eval mixing.

#include "tda/gradfeat.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace tda::hessian {

using gradfeat::FeatureVector;

enum class Provenance : std::uint8_t { train, eval, mixed };
std::string_view to_string(Provenance p);

class HessianBlocks {
 public:
  std::vector<int> block_dims;
  std::vector<MatrixD> r;         // per block, symmetric PSD
  std::vector<MatrixD> inv_sqrt;  // empty until inverse_sqrt() runs
  std::uint64_t count = 0;
  Provenance provenance = Provenance::train;
  double lambda = 0.0;            // mixed only
  int crossover_rank = 0;         // mixed only
  std::uint64_t train_count = 0;
  std::uint64_t eval_count = 0;
  std::uint64_t projection_seed = 0;
  double damping = 0.0;

  std::size_t dim() const;
  bool has_inverse_sqrt() const { return !inv_sqrt.empty(); }
};

// Streaming sum of outer products; merge() combines shards exactly.
class Accumulator {
 public:
  explicit Accumulator(std::vector<int> block_dims);

  void add(const FeatureVector& v);
  // Adds every row of a (n x d) matrix.
  void add_rows(const MatrixF& rows);
  void merge(const Accumulator& other);
  std::uint64_t count() const { return count_; }
  HessianBlocks finalize(Provenance provenance) const;

 private:
  std::vector<int> dims_;
  std::vector<MatrixD> sums_;
  std::uint64_t count_ = 0;
};

// R_b = (1/n) sum phi_b phi_b^T. Inputs must be projected, not whitened or normalized.
HessianBlocks estimate_R(std::span<const FeatureVector> vectors, const std::vector<int>& block_dims,
                         Provenance provenance = Provenance::train);

// Eigenvalues are clamped below at damping * trace(R_b) / d_b.
HessianBlocks inverse_sqrt(HessianBlocks r, double damping);

// lambda * R_eval + (1 - lambda) * R_train, per block.
HessianBlocks mix(const HessianBlocks& r_train, const HessianBlocks& r_eval, double lambda);

struct LambdaChoice {
  double lambda = 0.0;          // grid value
  double crossover = 0.0;       // exact sigma_train / (sigma_eval + sigma_train)
  double sigma_train = 0.0;
  double sigma_eval = 0.0;
};

// m-th largest eigenvalue over the concatenated block spectra (1-based m).
double kth_eigenvalue(const HessianBlocks& r, int m);

LambdaChoice select_lambda(const HessianBlocks& r_train, const HessianBlocks& r_eval, int m,
                           std::span<const double> grid);

// Applies R_b^{-1/2} per block.
FeatureVector whiten(const FeatureVector& v, const HessianBlocks& h);
// Same for every row of a (n x d) matrix, in place.
void whiten_rows(MatrixF& rows, const HessianBlocks& h);

// "HESS1" file: layout header, per-block float32 R then optional R^{-1/2},
// provenance record.
void save(const std::filesystem::path& path, const HessianBlocks& h,
          std::uint64_t config_hash = 0);
HessianBlocks load(const std::filesystem::path& path, std::uint64_t* config_hash = nullptr);

}  // namespace tda::hessian
