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

// Gradient featurization: per-parameter second-moment correction, two-sided
// Gaussian projection per layer block, optional whitening and unit norm.

#include "tda/tinylm.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tda::hessian {
class HessianBlocks;
}

namespace tda::gradfeat {

using tinylm::GradientSketch;
using tinylm::LayerBlockLayout;

enum class Stage : std::uint8_t { projected, whitened, normalized };
std::string_view to_string(Stage s);

struct FeatureVector {
  std::vector<float> values;
  std::string example_id;
  Stage stage = Stage::projected;
  double mean_target_prob = 0.0;

  double norm() const;
};

// Left (side x rows) and right (side x cols) Gaussian matrices for every
// block, regenerated from `seed`. Entries have variance 1/sqrt(d_block), so
// the two-sided map preserves squared norms in expectation.
class ProjectionSpec {
 public:
  ProjectionSpec(const LayerBlockLayout& layout, int d_block, std::uint64_t seed);

  const LayerBlockLayout& layout() const { return layout_; }
  int d_block() const { return d_block_; }
  int side() const { return side_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t dim() const { return static_cast<std::size_t>(d_block_) * left_.size(); }
  std::vector<int> block_dims() const;

  const MatrixF& left(std::size_t block) const { return left_.at(block); }
  const MatrixF& right(std::size_t block) const { return right_.at(block); }

 private:
  LayerBlockLayout layout_;
  int d_block_ = 0;
  int side_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<MatrixF> left_;
  std::vector<MatrixF> right_;
};

// Second-moment estimates gathered into the sketch's block layout.
std::vector<MatrixF> moment_blocks(const tinylm::OptimizerState& opt,
                                   const tinylm::ModelConfig& config,
                                   const LayerBlockLayout& layout);

// g / (sqrt(v) + epsilon), entry-wise.
GradientSketch second_moment_correct(const GradientSketch& sketch,
                                     const std::vector<MatrixF>& v_blocks, double epsilon);

// Per block: flatten_row_major(P_left * W * P_right^T), blocks concatenated.
FeatureVector project(const GradientSketch& sketch, const ProjectionSpec& spec,
                      std::string example_id = {});

FeatureVector normalize(const FeatureVector& v);

struct FeatureOptions {
  tinylm::OutputFn output_fn = tinylm::OutputFn::loss;
  tinylm::QWeighting weighting = tinylm::QWeighting::token;
  bool use_optimizer_correction = false;
  bool use_unit_norm = false;
  double epsilon = 1e-8;
};

// Holds the frozen inputs of the featurization pipeline. Safe to share
// across threads.
class Featurizer {
 public:
  Featurizer(const tinylm::ModelState& state, const tinylm::OptimizerState& opt,
             const ProjectionSpec& spec, FeatureOptions options);

  // gradient -> [second-moment correction] -> projection.
  FeatureVector projected(const tinylm::ExampleRecord& example) const;
  // projected -> [whitening] -> [unit norm].
  FeatureVector finish(FeatureVector projected, const hessian::HessianBlocks* hessian) const;
  FeatureVector featurize(const tinylm::ExampleRecord& example,
                          const hessian::HessianBlocks* hessian) const;

  const FeatureOptions& options() const { return options_; }
  const ProjectionSpec& spec() const { return spec_; }

 private:
  const tinylm::ModelState& state_;
  const ProjectionSpec& spec_;
  FeatureOptions options_;
  std::vector<MatrixF> moments_;
};

FeatureVector featurize(const tinylm::ModelState& state, const tinylm::OptimizerState& opt,
                        const tinylm::ExampleRecord& example, const ProjectionSpec& spec,
                        const hessian::HessianBlocks* hessian, const FeatureOptions& options);

}  // namespace tda::gradfeat
