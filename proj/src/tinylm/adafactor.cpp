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

#include <algorithm>
#include <cmath>

namespace tda::tinylm {

double learning_rate_at(const TrainHyper& hyper, std::int64_t step) {
  const double warm = static_cast<double>(std::max(hyper.warmup_steps, 1));
  const double t = static_cast<double>(std::max<std::int64_t>(step, 1));
  return hyper.learning_rate * std::sqrt(warm / std::max(t, warm));
}

OptimizerState OptimizerState::init(const ModelConfig& config, bool factored) {
  OptimizerState opt;
  opt.factored = factored;
  const auto shapes = Params<float>::zeros(config);
  shapes.for_each([&](const std::string&, const MatrixF& m) {
    MomentSlot slot;
    if (factored) {
      slot.row = Vector<float>::Zero(m.rows());
      slot.col = Vector<float>::Zero(m.cols());
    } else {
      slot.full = MatrixF::Zero(m.rows(), m.cols());
    }
    opt.moments.push_back(std::move(slot));
  });
  return opt;
}

namespace {

MatrixD reconstruct(const MomentSlot& slot, bool factored) {
  if (!factored) return slot.full.cast<double>();
  const Eigen::VectorXd r = slot.row.cast<double>();
  const Eigen::VectorXd c = slot.col.cast<double>();
  const double mean_r = r.mean();
  if (mean_r <= 0.0) return MatrixD::Zero(r.size(), c.size());
  return (r * c.transpose()) / mean_r;
}

}  // namespace

Params<float> OptimizerState::second_moment(const ModelConfig& config) const {
  auto v = Params<float>::zeros(config);
  std::size_t i = 0;
  v.for_each([&](const std::string& name, MatrixF& m) {
    if (i >= moments.size()) throw ShapeError("optimizer state lacks slot for " + name);
    m = reconstruct(moments[i], factored).cast<float>();
    if (m.rows() == 0 || m.cols() == 0) throw ShapeError("empty moment slot for " + name);
    ++i;
  });
  return v;
}

void adafactor_update(Params<float>& params, OptimizerState& opt, const Params<float>& grad,
                      const TrainHyper& hyper) {
  const std::int64_t t = opt.step + 1;
  const double beta2 = 1.0 - std::pow(static_cast<double>(t), -hyper.decay_rate);
  const double lr = learning_rate_at(hyper, t);

  std::vector<const MatrixF*> grads;
  grad.for_each([&](const std::string&, const MatrixF& g) { grads.push_back(&g); });
  if (grads.size() != opt.moments.size()) throw ShapeError("optimizer/parameter slot mismatch");

  std::size_t i = 0;
  params.for_each([&](const std::string& name, MatrixF& w) {
    const MatrixD g = grads[i]->cast<double>();
    if (g.rows() != w.rows() || g.cols() != w.cols())
      throw ShapeError("gradient shape mismatch for " + name);
    auto& slot = opt.moments[i];
    const MatrixD g2 = g.array().square() + hyper.epsilon1;
    MatrixD v;
    if (opt.factored) {
      const Eigen::VectorXd r =
          beta2 * slot.row.cast<double>() + (1.0 - beta2) * g2.rowwise().mean();
      const Eigen::VectorXd c =
          beta2 * slot.col.cast<double>() + (1.0 - beta2) * g2.colwise().mean().transpose();
      slot.row = r.cast<float>();
      slot.col = c.cast<float>();
      v = (r * c.transpose()) / r.mean();
    } else {
      v = beta2 * slot.full.cast<double>() + (1.0 - beta2) * g2;
      slot.full = v.cast<float>();
    }
    MatrixD u = g;
    for (Eigen::Index k = 0; k < u.size(); ++k) {
      const double vk = v.data()[k];
      u.data()[k] = vk > 0.0 ? u.data()[k] / std::sqrt(vk) : 0.0;
    }
    const double rms = std::sqrt(u.squaredNorm() / static_cast<double>(u.size()));
    u /= std::max(1.0, rms / hyper.clip_threshold);
    MatrixD wd = w.cast<double>();
    if (hyper.weight_decay != 0.0) wd *= (1.0 - lr * hyper.weight_decay);
    wd -= lr * u;
    w = wd.cast<float>();
    if (!w.allFinite()) {
      throw Error("non-finite parameter update for " + name + " at step " + std::to_string(t));
    }
    ++i;
  });
  opt.step = t;
}

TrainResult train(const ModelConfig& config, std::span<const ExampleRecord> corpus,
                  std::int64_t steps, const TrainHyper& hyper, const ProgressFn& progress) {
  config.validate();
  if (corpus.empty()) throw Error("train: empty corpus");
  if (hyper.batch_size < 1) throw Error("train: batch_size must be >= 1");
  for (const auto& ex : corpus) ex.validate(config);

  TrainResult result{init_model(config), OptimizerState::init(config, hyper.factored), {}};
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  GaussianSource rng(mix_seed(config.seed, 0x5eed));
  shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  std::vector<const ExampleRecord*> batch;
  for (std::int64_t step = 0; step < steps; ++step) {
    batch.clear();
    for (int b = 0; b < hyper.batch_size; ++b) {
      if (cursor == order.size()) {
        shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&corpus[order[cursor++]]);
    }
    int tokens = 0;
    for (auto* ex : batch) tokens += ex->target_count();
    auto grad = Params<float>::zeros(config);
    PassResult<float> res;
    try {
      res = forward_backward<float>(config, result.state.params, batch, OutputFn::loss,
                                    QWeighting::token, &grad,
                                    1.0f / static_cast<float>(tokens));
    } catch (const Error& e) {
      throw Error("train step " + std::to_string(step) + ": " + e.what());
    }
    const double mean_loss = static_cast<double>(res.total_loss) / tokens;
    if (!std::isfinite(mean_loss)) {
      throw Error("train step " + std::to_string(step) + ": non-finite batch loss (first example '" +
                  batch.front()->id + "')");
    }
    adafactor_update(result.state.params, result.optimizer, grad, hyper);
    result.loss_curve.push_back(mean_loss);
    if (progress) progress(step, mean_loss);
  }
  return result;
}

ModelState tail_patch_step(const ModelState& state, const OptimizerState& opt,
                           const ExampleRecord& proponent, const TrainHyper& hyper) {
  ModelState next = state;
  OptimizerState next_opt = opt;
  const ExampleRecord* batch[] = {&proponent};
  auto grad = Params<float>::zeros(state.config);
  forward_backward<float>(state.config, state.params, batch, OutputFn::loss, QWeighting::token,
                          &grad, 1.0f / static_cast<float>(proponent.target_count()));
  try {
    adafactor_update(next.params, next_opt, grad, hyper);
  } catch (const Error& e) {
    throw Error("tail-patch on '" + proponent.id + "': " + e.what());
  }
  return next;
}

}  // namespace tda::tinylm
