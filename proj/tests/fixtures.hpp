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

#include "tda/tinylm.hpp"

#include <string>
#include <vector>

namespace tda::testing {

inline tinylm::ModelConfig small_config(std::uint64_t seed = 7) {
  tinylm::ModelConfig c;
  c.vocab_size = 24;
  c.layers = 2;
  c.embed_dim = 8;
  c.mlp_hidden = 16;
  c.heads = 2;
  c.seq_len_max = 16;
  c.seed = seed;
  return c;
}

inline std::vector<tinylm::ExampleRecord> random_corpus(const tinylm::ModelConfig& c, int n, std::uint64_t seed,
                                         int min_len = 4, int max_len = 9) {
  GaussianSource rng(seed);
  std::vector<tinylm::ExampleRecord> out;
  for (int i = 0; i < n; ++i) {
    const int len = min_len + static_cast<int>(rng.below(max_len - min_len + 1));
    std::vector<int> toks{tinylm::kBosId};
    for (int j = 1; j < len; ++j) toks.push_back(4 + static_cast<int>(rng.below(c.vocab_size - 4)));
    out.push_back(tinylm::make_training_example("ex" + std::to_string(i), toks));
  }
  return out;
}

}  // namespace tda::testing
