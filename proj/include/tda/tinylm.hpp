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

// Desk-scale decoder-only language model with hand-written backprop, an
// Adafactor optimizer that exposes its second-moment estimates, per-example
// gradient extraction and the single-step "tail-patch" update.

#include "tda/common.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tda::tinylm {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

struct ModelConfig {
  int vocab_size = 512;
  int layers = 2;
  int embed_dim = 64;
  int mlp_hidden = 256;
  int heads = 2;
  int seq_len_max = 128;
  std::uint64_t seed = 0;

  void validate() const;
  int head_dim() const { return embed_dim / heads; }
  bool operator==(const ModelConfig&) const = default;
};

enum class Slot : std::uint8_t { wq, wk, wv, wo, w_in, w_out };
inline constexpr Slot kAllSlots[] = {Slot::wq, Slot::wk,   Slot::wv,
                                     Slot::wo, Slot::w_in, Slot::w_out};
std::string_view slot_name(Slot s);

// Row-major weight convention: y = x * W^T, so W is (out x in).
template <class T>
struct LayerParams {
  Matrix<T> wq, wk, wv, wo;  // (E x E)
  Matrix<T> w_in;            // (H x E)
  Matrix<T> w_out;           // (E x H)

  Matrix<T>& slot(Slot s);
  const Matrix<T>& slot(Slot s) const;
};

template <class T>
struct Params {
  Matrix<T> embed;  // input token embedding (V x E)
  std::vector<LayerParams<T>> layers;
  Matrix<T> head;   // untied output projection (V x E)

  static Params zeros(const ModelConfig& config);

  // Visits every matrix in declaration order: embed, layer{i}.{wq..w_out}, head.
  template <class F>
  void for_each(F&& f) {
    f(std::string("embed"), embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (Slot s : kAllSlots) {
        f("layer" + std::to_string(l) + "." + std::string(slot_name(s)),
          layers[l].slot(s));
      }
    }
    f(std::string("head"), head);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<Params*>(this)->for_each(
        [&](const std::string& name, Matrix<T>& m) { f(name, std::as_const(m)); });
  }

  std::size_t parameter_count() const;
  bool all_finite() const;

  template <class U>
  Params<U> cast() const {
    Params<U> out;
    out.embed = embed.template cast<U>();
    out.head = head.template cast<U>();
    out.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (Slot s : kAllSlots) out.layers[l].slot(s) = layers[l].slot(s).template cast<U>();
    }
    return out;
  }
};

struct ModelState {
  ModelConfig config;
  Params<float> params;
};

// Deterministic initialization from config.seed.
ModelState init_model(const ModelConfig& config);

struct ExampleRecord {
  std::string id;
  std::vector<int> token_ids;
  // target_mask[j] != 0 means token j is predicted (from tokens < j) and
  // contributes to the loss. target_mask[0] is always 0.
  std::vector<std::uint8_t> target_mask;

  void validate(const ModelConfig& config) const;
  int target_count() const;
};

// Every token after the first is a target (training passages).
ExampleRecord make_training_example(std::string id, std::vector<int> tokens);
// Only the completion tokens are targets.
ExampleRecord make_prompted_example(std::string id, std::span<const int> prompt,
                                    std::span<const int> target);

enum class OutputFn : std::uint8_t { loss, margin, logit };
std::string_view to_string(OutputFn fn);
OutputFn parse_output_fn(std::string_view s);

// Where Q = dLoss/df is applied. `token` multiplies every token's f-gradient by
// its own Q; `none` leaves the raw f-gradient (the TRAK route, which applies
// an example-level factor to scores instead).
enum class QWeighting : std::uint8_t { token, none };

// Arithmetic width of the forward/backward pass behind a gradient. Results are
// stored as float32 either way; f64 is the checking path.
enum class Accumulate : std::uint8_t { f32, f64 };

template <class T>
struct PassResult {
  T total_loss = 0;           // sum over target tokens of -log p
  int target_tokens = 0;
  std::vector<T> example_loss;       // per example, summed over its targets
  std::vector<T> example_mean_prob;  // per example, mean target-token p
};

// Forward pass over a packed batch and, when `grad` is non-null, accumulation
// of grad_scale * d(sum of per-token weighted f)/d(theta) into it.
// Throws tda::Error naming the example when a loss is non-finite.
template <class T>
PassResult<T> forward_backward(const ModelConfig& config, const Params<T>& params,
                               std::span<const ExampleRecord* const> batch,
                               OutputFn fn, QWeighting weighting, Params<T>* grad,
                               T grad_scale = T(1));

// Log-probabilities of each masked-in target token.
std::vector<double> target_token_logprobs(const ModelState& state,
                                          const ExampleRecord& example);

// Product of teacher-forced next-token probabilities over `target`.
double target_probability(const ModelState& state, std::span<const int> prompt,
                          std::span<const int> target);

// Greedy decoding; stops after max_new_tokens or on any stop token (which is
// not included in the result).
std::vector<int> greedy_complete(const ModelState& state, std::span<const int> prompt,
                                 int max_new_tokens, std::span<const int> stop_tokens);

// ---------------------------------------------------------------------------
// Layer blocks and gradient sketches.

enum class BlockKind : std::uint8_t { attention, mlp };
std::string_view to_string(BlockKind k);

struct BlockMember {
  int layer = -1;  // -1 for the output head
  Slot slot = Slot::wq;
  bool transposed = false;
  int rows = 0;    // rows contributed to the block
  int row_offset = 0;
};

struct LayerBlock {
  BlockKind kind = BlockKind::attention;
  std::vector<int> layers;
  std::vector<BlockMember> members;
  int rows = 0;
  int cols = 0;
};

// Partition of every non-embedding matrix into blocks. Attention and MLP
// matrices go to separate blocks; consecutive layers are grouped
// `layers_per_block` at a time. Matrices are stacked along rows with the
// embedding dimension as the shared column axis (w_out is transposed), and
// the output head joins the last MLP block.
class LayerBlockLayout {
 public:
  static LayerBlockLayout make(const ModelConfig& config, int layers_per_block);

  const std::vector<LayerBlock>& blocks() const { return blocks_; }
  std::size_t size() const { return blocks_.size(); }
  int layers_per_block() const { return layers_per_block_; }

  // Gathers the member matrices of each block from a parameter-shaped set.
  std::vector<MatrixF> assemble(const Params<float>& p) const;
  std::vector<MatrixD> assemble(const Params<double>& p) const;

  std::string describe() const;
  bool operator==(const LayerBlockLayout& o) const;

 private:
  std::vector<LayerBlock> blocks_;
  int layers_per_block_ = 1;
};

struct GradientSketch {
  std::vector<MatrixF> blocks;
  OutputFn output_fn = OutputFn::loss;
  QWeighting weighting = QWeighting::token;
  double mean_target_prob = 0.0;  // p-bar, used by the TRAK score multiplier
};

// Full gradient (including the input embedding) of the weighted output
// function summed over target tokens.
Params<float> example_gradient(const ModelState& state, const ExampleRecord& example,
                               OutputFn fn, QWeighting weighting = QWeighting::token,
                               double* mean_target_prob = nullptr,
                               Accumulate acc = Accumulate::f32);

// Gradient grouped into layout blocks; the input embedding is dropped.
// Throws naming the block when an entry is non-finite.
GradientSketch per_example_gradient(const ModelState& state, const ExampleRecord& example,
                                    OutputFn fn, const LayerBlockLayout& layout,
                                    QWeighting weighting = QWeighting::token,
                                    Accumulate acc = Accumulate::f32);

// ---------------------------------------------------------------------------
// Adafactor.

struct TrainHyper {
  int batch_size = 16;
  double learning_rate = 0.01;  // peak rate
  int warmup_steps = 100;       // constant rate until here, then 1/sqrt(step)
  double decay_rate = 0.8;      // beta2_t = 1 - t^-decay_rate
  double clip_threshold = 1.0;
  double epsilon1 = 1e-30;
  double weight_decay = 0.0;
  bool factored = true;

  bool operator==(const TrainHyper&) const = default;
};

double learning_rate_at(const TrainHyper& hyper, std::int64_t step);

struct MomentSlot {
  Vector<float> row;  // factored: mean of g^2 over columns, per row
  Vector<float> col;  // factored: mean of g^2 over rows, per column
  MatrixF full;       // unfactored accumulator
};

struct OptimizerState {
  std::int64_t step = 0;
  bool factored = true;
  std::vector<MomentSlot> moments;  // declaration order, one per matrix

  static OptimizerState init(const ModelConfig& config, bool factored);
  // Per-parameter second-moment estimate V (reconstructed from factors).
  Params<float> second_moment(const ModelConfig& config) const;
};

// One Adafactor update; increments opt.step.
void adafactor_update(Params<float>& params, OptimizerState& opt,
                      const Params<float>& grad, const TrainHyper& hyper);

struct TrainResult {
  ModelState state;
  OptimizerState optimizer;
  std::vector<double> loss_curve;  // mean per-token loss of each step's batch
};

using ProgressFn = std::function<void(std::int64_t step, double loss)>;

TrainResult train(const ModelConfig& config, std::span<const ExampleRecord> corpus,
                  std::int64_t steps, const TrainHyper& hyper,
                  const ProgressFn& progress = {});

// One optimizer update on a batch holding only `proponent`. Inputs are not
// modified.
ModelState tail_patch_step(const ModelState& state, const OptimizerState& opt,
                           const ExampleRecord& proponent, const TrainHyper& hyper);

// ---------------------------------------------------------------------------
// Checkpoints: "TLM1" + config + float32 tensors, then "OPT1" + optimizer.

struct Checkpoint {
  ModelState state;
  OptimizerState optimizer;
  TrainHyper hyper;
  std::uint64_t config_hash = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tda::tinylm
