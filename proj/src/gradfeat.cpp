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

#include "tda/gradfeat.hpp"

#include "tda/hessian.hpp"

#include <cmath>

namespace tda::gradfeat {

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::projected: return "projected";
    case Stage::whitened: return "whitened";
    case Stage::normalized: return "normalized";
  }
  return "?";
}

double FeatureVector::norm() const {
  double s = 0.0;
  for (float v : values) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

ProjectionSpec::ProjectionSpec(const LayerBlockLayout& layout, int d_block, std::uint64_t seed)
    : layout_(layout), d_block_(d_block), seed_(seed) {
  side_ = static_cast<int>(std::lround(std::sqrt(static_cast<double>(d_block))));
  if (d_block < 1 || side_ * side_ != d_block) {
    throw Error("d_block must be a positive perfect square, got " + std::to_string(d_block));
  }
  const double stddev = 1.0 / std::sqrt(std::sqrt(static_cast<double>(d_block)));
  for (std::size_t b = 0; b < layout.size(); ++b) {
    const auto& blk = layout.blocks()[b];
    GaussianSource rng(mix_seed(seed, b));
    MatrixF left(side_, blk.rows), right(side_, blk.cols);
    for (Eigen::Index i = 0; i < left.size(); ++i)
      left.data()[i] = static_cast<float>(rng.next() * stddev);
    for (Eigen::Index i = 0; i < right.size(); ++i)
      right.data()[i] = static_cast<float>(rng.next() * stddev);
    left_.push_back(std::move(left));
    right_.push_back(std::move(right));
  }
}

std::vector<int> ProjectionSpec::block_dims() const {
  return std::vector<int>(left_.size(), d_block_);
}

std::vector<MatrixF> moment_blocks(const tinylm::OptimizerState& opt,
                                   const tinylm::ModelConfig& config,
                                   const LayerBlockLayout& layout) {
  return layout.assemble(opt.second_moment(config));
}

GradientSketch second_moment_correct(const GradientSketch& sketch,
                                     const std::vector<MatrixF>& v_blocks, double epsilon) {
  if (epsilon < 0.0) throw Error("second_moment_correct: epsilon must be >= 0");
  if (v_blocks.size() != sketch.blocks.size()) {
    throw ShapeError("second moments have " + std::to_string(v_blocks.size()) +
                     " blocks, sketch has " + std::to_string(sketch.blocks.size()));
  }
  GradientSketch out = sketch;
  for (std::size_t b = 0; b < out.blocks.size(); ++b) {
    const auto& v = v_blocks[b];
    auto& g = out.blocks[b];
    if (v.rows() != g.rows() || v.cols() != g.cols())
      throw ShapeError("second moment block " + std::to_string(b) + " shape mismatch");
    g.array() /= (v.array().sqrt() + static_cast<float>(epsilon));
  }
  return out;
}

FeatureVector project(const GradientSketch& sketch, const ProjectionSpec& spec,
                      std::string example_id) {
  const auto& blocks = spec.layout().blocks();
  if (sketch.blocks.size() != blocks.size()) {
    throw ShapeError("sketch has " + std::to_string(sketch.blocks.size()) +
                     " blocks, projection expects " + std::to_string(blocks.size()));
  }
  FeatureVector out;
  out.example_id = std::move(example_id);
  out.stage = Stage::projected;
  out.mean_target_prob = sketch.mean_target_prob;
  out.values.resize(spec.dim());
  const int k = spec.side();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& w = sketch.blocks[b];
    if (w.rows() != blocks[b].rows || w.cols() != blocks[b].cols)
      throw ShapeError("sketch block " + std::to_string(b) + " shape mismatch");
    MatrixF tmp = spec.left(b) * w;              // (k x n)
    MatrixF proj = tmp * spec.right(b).transpose();  // (k x k), row-major
    std::copy(proj.data(), proj.data() + static_cast<std::ptrdiff_t>(k) * k,
              out.values.begin() + static_cast<std::ptrdiff_t>(b * spec.d_block()));
  }
  return out;
}

FeatureVector normalize(const FeatureVector& v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw Error("cannot unit-normalize feature vector of example '" + v.example_id +
                "' (norm " + std::to_string(n) + ")");
  }
  FeatureVector out = v;
  for (float& x : out.values) x = static_cast<float>(x / n);
  out.stage = Stage::normalized;
  return out;
}

Featurizer::Featurizer(const tinylm::ModelState& state, const tinylm::OptimizerState& opt,
                       const ProjectionSpec& spec, FeatureOptions options)
    : state_(state), spec_(spec), options_(options) {
  if (options_.use_optimizer_correction) {
    moments_ = moment_blocks(opt, state.config, spec.layout());
  }
}

FeatureVector Featurizer::projected(const tinylm::ExampleRecord& example) const {
  auto sketch = tinylm::per_example_gradient(state_, example, options_.output_fn,
                                             spec_.layout(), options_.weighting);
  if (options_.use_optimizer_correction) {
    sketch = second_moment_correct(sketch, moments_, options_.epsilon);
  }
  return project(sketch, spec_, example.id);
}

FeatureVector Featurizer::finish(FeatureVector v, const hessian::HessianBlocks* h) const {
  if (h != nullptr) v = hessian::whiten(v, *h);
  if (options_.use_unit_norm) v = normalize(v);
  return v;
}

FeatureVector Featurizer::featurize(const tinylm::ExampleRecord& example,
                                    const hessian::HessianBlocks* h) const {
  return finish(projected(example), h);
}

FeatureVector featurize(const tinylm::ModelState& state, const tinylm::OptimizerState& opt,
                        const tinylm::ExampleRecord& example, const ProjectionSpec& spec,
                        const hessian::HessianBlocks* h, const FeatureOptions& options) {
  return Featurizer(state, opt, spec, options).featurize(example, h);
}

}  // namespace tda::gradfeat
