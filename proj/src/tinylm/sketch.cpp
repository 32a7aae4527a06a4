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

#include "tda/tinylm.hpp"

#include <sstream>

namespace tda::tinylm {

std::string_view to_string(BlockKind k) {
  return k == BlockKind::attention ? "attention" : "mlp";
}

LayerBlockLayout LayerBlockLayout::make(const ModelConfig& config, int layers_per_block) {
  config.validate();
  if (layers_per_block < 1 || config.layers % layers_per_block != 0) {
    throw Error("layers_per_block=" + std::to_string(layers_per_block) +
                " must be >= 1 and divide layers=" + std::to_string(config.layers));
  }
  const int E = config.embed_dim, H = config.mlp_hidden;
  LayerBlockLayout layout;
  layout.layers_per_block_ = layers_per_block;
  const int groups = config.layers / layers_per_block;
  for (int g = 0; g < groups; ++g) {
    LayerBlock attn{BlockKind::attention, {}, {}, 0, E};
    LayerBlock mlp{BlockKind::mlp, {}, {}, 0, E};
    for (int l = g * layers_per_block; l < (g + 1) * layers_per_block; ++l) {
      attn.layers.push_back(l);
      mlp.layers.push_back(l);
      for (Slot s : {Slot::wq, Slot::wk, Slot::wv, Slot::wo}) {
        attn.members.push_back({l, s, false, E, attn.rows});
        attn.rows += E;
      }
      mlp.members.push_back({l, Slot::w_in, false, H, mlp.rows});
      mlp.rows += H;
      mlp.members.push_back({l, Slot::w_out, true, H, mlp.rows});
      mlp.rows += H;
    }
    if (g == groups - 1) {
      mlp.members.push_back({-1, Slot::wq, false, config.vocab_size, mlp.rows});
      mlp.rows += config.vocab_size;
    }
    layout.blocks_.push_back(std::move(attn));
    layout.blocks_.push_back(std::move(mlp));
  }
  return layout;
}

namespace {

template <class T>
std::vector<Matrix<T>> assemble_impl(const std::vector<LayerBlock>& blocks, const Params<T>& p) {
  std::vector<Matrix<T>> out;
  out.reserve(blocks.size());
  for (const auto& b : blocks) {
    Matrix<T> m(b.rows, b.cols);
    for (const auto& mem : b.members) {
      if (mem.layer < 0) {
        m.block(mem.row_offset, 0, mem.rows, b.cols) = p.head;
        continue;
      }
      if (mem.layer >= static_cast<int>(p.layers.size()))
        throw ShapeError("layout references missing layer " + std::to_string(mem.layer));
      const auto& src = p.layers[mem.layer].slot(mem.slot);
      if (mem.transposed) {
        m.block(mem.row_offset, 0, mem.rows, b.cols) = src.transpose();
      } else {
        m.block(mem.row_offset, 0, mem.rows, b.cols) = src;
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

std::vector<MatrixF> LayerBlockLayout::assemble(const Params<float>& p) const {
  return assemble_impl(blocks_, p);
}

std::vector<MatrixD> LayerBlockLayout::assemble(const Params<double>& p) const {
  return assemble_impl(blocks_, p);
}

std::string LayerBlockLayout::describe() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    if (i) os << ';';
    os << to_string(b.kind) << '[';
    for (std::size_t j = 0; j < b.layers.size(); ++j) os << (j ? "," : "") << b.layers[j];
    os << "]=" << b.rows << 'x' << b.cols;
  }
  return os.str();
}

bool LayerBlockLayout::operator==(const LayerBlockLayout& o) const {
  return layers_per_block_ == o.layers_per_block_ && describe() == o.describe();
}

GradientSketch per_example_gradient(const ModelState& state, const ExampleRecord& example,
                                    OutputFn fn, const LayerBlockLayout& layout,
                                    QWeighting weighting, Accumulate acc) {
  GradientSketch sketch;
  sketch.output_fn = fn;
  sketch.weighting = weighting;
  auto grad = example_gradient(state, example, fn, weighting, &sketch.mean_target_prob, acc);
  sketch.blocks = layout.assemble(grad);
  for (std::size_t b = 0; b < sketch.blocks.size(); ++b) {
    if (!sketch.blocks[b].allFinite()) {
      const auto& blk = layout.blocks()[b];
      std::string layers;
      for (int l : blk.layers) layers += (layers.empty() ? "" : ",") + std::to_string(l);
      throw Error("non-finite gradient in " + std::string(to_string(blk.kind)) +
                  " block " + std::to_string(b) + " (layers " + layers + ") for example '" +
                  example.id + "'");
    }
  }
  return sketch;
}

}  // namespace tda::tinylm
