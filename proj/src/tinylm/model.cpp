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
#include <limits>
#include <sstream>

namespace tda::tinylm {

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw Error(std::string("invalid ModelConfig: ") + what);
  };
  need(vocab_size >= 4, "vocab_size must be >= 4 (pad/bos/eos/unk reserved)");
  need(layers >= 1, "layers must be >= 1");
  need(embed_dim >= 1, "embed_dim must be >= 1");
  need(mlp_hidden >= 1, "mlp_hidden must be >= 1");
  need(heads >= 1, "heads must be >= 1");
  need(seq_len_max >= 2, "seq_len_max must be >= 2");
  need(embed_dim % heads == 0, "embed_dim must be divisible by heads");
}

std::string_view slot_name(Slot s) {
  switch (s) {
    case Slot::wq: return "wq";
    case Slot::wk: return "wk";
    case Slot::wv: return "wv";
    case Slot::wo: return "wo";
    case Slot::w_in: return "w_in";
    case Slot::w_out: return "w_out";
  }
  return "?";
}

template <class T>
Matrix<T>& LayerParams<T>::slot(Slot s) {
  switch (s) {
    case Slot::wq: return wq;
    case Slot::wk: return wk;
    case Slot::wv: return wv;
    case Slot::wo: return wo;
    case Slot::w_in: return w_in;
    case Slot::w_out: return w_out;
  }
  throw Error("bad slot");
}

template <class T>
const Matrix<T>& LayerParams<T>::slot(Slot s) const {
  return const_cast<LayerParams*>(this)->slot(s);
}

template <class T>
Params<T> Params<T>::zeros(const ModelConfig& c) {
  Params p;
  const int E = c.embed_dim, H = c.mlp_hidden, V = c.vocab_size;
  p.embed = Matrix<T>::Zero(V, E);
  p.head = Matrix<T>::Zero(V, E);
  p.layers.resize(c.layers);
  for (auto& l : p.layers) {
    l.wq = Matrix<T>::Zero(E, E);
    l.wk = Matrix<T>::Zero(E, E);
    l.wv = Matrix<T>::Zero(E, E);
    l.wo = Matrix<T>::Zero(E, E);
    l.w_in = Matrix<T>::Zero(H, E);
    l.w_out = Matrix<T>::Zero(E, H);
  }
  return p;
}

template <class T>
std::size_t Params<T>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix<T>& m) { n += m.size(); });
  return n;
}

template <class T>
bool Params<T>::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Matrix<T>& m) { ok = ok && m.allFinite(); });
  return ok;
}

template struct LayerParams<float>;
template struct LayerParams<double>;
template struct Params<float>;
template struct Params<double>;

ModelState init_model(const ModelConfig& config) {
  config.validate();
  ModelState s{config, Params<float>::zeros(config)};
  GaussianSource rng(mix_seed(config.seed, 0x1417));
  auto fill = [&](MatrixF& m, double stddev) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = static_cast<float>(rng.next() * stddev);
  };
  const double in_e = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  const double in_h = 1.0 / std::sqrt(static_cast<double>(config.mlp_hidden));
  const double resid = 1.0 / std::sqrt(2.0 * config.layers);
  fill(s.params.embed, 1.0);
  for (auto& l : s.params.layers) {
    fill(l.wq, in_e);
    fill(l.wk, in_e);
    fill(l.wv, in_e);
    fill(l.wo, in_e * resid);
    fill(l.w_in, in_e);
    fill(l.w_out, in_h * resid);
  }
  fill(s.params.head, in_e);
  return s;
}

void ExampleRecord::validate(const ModelConfig& config) const {
  if (token_ids.empty()) throw Error("example '" + id + "' has no tokens");
  if (static_cast<int>(token_ids.size()) > config.seq_len_max) {
    throw Error("example '" + id + "' has " + std::to_string(token_ids.size()) +
                " tokens, more than seq_len_max=" + std::to_string(config.seq_len_max));
  }
  if (target_mask.size() != token_ids.size())
    throw Error("example '" + id + "' target_mask length mismatch");
  if (target_mask[0] != 0) throw Error("example '" + id + "' masks in its first token");
  if (target_count() < 1) throw Error("example '" + id + "' has no target tokens");
  for (int t : token_ids) {
    if (t < 0 || t >= config.vocab_size)
      throw Error("example '" + id + "' token id out of range: " + std::to_string(t));
  }
}

int ExampleRecord::target_count() const {
  return static_cast<int>(std::count_if(target_mask.begin(), target_mask.end(),
                                        [](std::uint8_t m) { return m != 0; }));
}

ExampleRecord make_training_example(std::string id, std::vector<int> tokens) {
  ExampleRecord r{std::move(id), std::move(tokens), {}};
  r.target_mask.assign(r.token_ids.size(), 1);
  if (!r.target_mask.empty()) r.target_mask[0] = 0;
  return r;
}

ExampleRecord make_prompted_example(std::string id, std::span<const int> prompt,
                                    std::span<const int> target) {
  ExampleRecord r;
  r.id = std::move(id);
  r.token_ids.assign(prompt.begin(), prompt.end());
  r.token_ids.insert(r.token_ids.end(), target.begin(), target.end());
  r.target_mask.assign(r.token_ids.size(), 0);
  for (std::size_t i = prompt.size(); i < r.token_ids.size(); ++i) r.target_mask[i] = 1;
  if (!r.target_mask.empty()) r.target_mask[0] = 0;
  return r;
}

std::string_view to_string(OutputFn fn) {
  switch (fn) {
    case OutputFn::loss: return "loss";
    case OutputFn::margin: return "margin";
    case OutputFn::logit: return "logit";
  }
  return "?";
}

OutputFn parse_output_fn(std::string_view s) {
  if (s == "loss") return OutputFn::loss;
  if (s == "margin") return OutputFn::margin;
  if (s == "logit") return OutputFn::logit;
  throw Error("unknown output function: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Forward / backward.

namespace {

template <class T>
constexpr T kRmsEps = T(1e-6);

// y = x / rms(x), row-wise. Returns per-row 1/rms.
template <class T>
Vector<T> rms_norm(const Matrix<T>& x, Matrix<T>& y) {
  const auto n = x.rows();
  Vector<T> inv(n);
  y.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const T ms = x.row(i).squaredNorm() / static_cast<T>(x.cols());
    inv[i] = T(1) / std::sqrt(ms + kRmsEps<T>);
    y.row(i) = x.row(i) * inv[i];
  }
  return inv;
}

// Accumulates into dx the gradient through y = rms_norm(x).
template <class T>
void rms_norm_backward(const Matrix<T>& dy, const Matrix<T>& y, const Vector<T>& inv,
                       Matrix<T>& dx) {
  const T cols = static_cast<T>(y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const T proj = dy.row(i).dot(y.row(i)) / cols;
    dx.row(i) += inv[i] * (dy.row(i) - proj * y.row(i));
  }
}

template <class T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)

template <class T>
T gelu(T u) {
  const T t = std::tanh(kGeluC<T> * (u + T(0.044715) * u * u * u));
  return T(0.5) * u * (T(1) + t);
}

template <class T>
T gelu_grad(T u) {
  const T t = std::tanh(kGeluC<T> * (u + T(0.044715) * u * u * u));
  return T(0.5) * (T(1) + t) +
         T(0.5) * u * (T(1) - t * t) * kGeluC<T> * (T(1) + T(3) * T(0.044715) * u * u);
}

template <class T>
T positional(int pos, int dim, int embed_dim) {
  const int pair = dim / 2;
  const double freq =
      std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(embed_dim));
  const double angle = static_cast<double>(pos) * freq;
  return static_cast<T>(dim % 2 == 0 ? std::sin(angle) : std::cos(angle));
}

struct Segment {
  Eigen::Index offset;
  Eigen::Index length;
};

template <class T>
struct LayerCache {
  Matrix<T> a;  // rms_norm input to attention
  Vector<T> a_inv;
  Matrix<T> q, k, v;
  std::vector<Matrix<T>> probs;  // [segment * heads + head]
  Matrix<T> attn;                // concatenated head outputs
  Matrix<T> b;                   // rms_norm input to the MLP
  Vector<T> b_inv;
  Matrix<T> u, g;                // pre/post activation
};

template <class T>
struct Forward {
  std::vector<Segment> segments;
  std::vector<LayerCache<T>> layers;
  Matrix<T> x;     // residual stream after the last layer
  Matrix<T> f;     // final rms_norm output
  Vector<T> f_inv;
};

template <class T>
Forward<T> run_forward(const ModelConfig& c, const Params<T>& p,
                       std::span<const std::vector<int>* const> seqs) {
  Forward<T> fw;
  Eigen::Index total = 0;
  for (auto* s : seqs) {
    fw.segments.push_back({total, static_cast<Eigen::Index>(s->size())});
    total += static_cast<Eigen::Index>(s->size());
  }
  const int E = c.embed_dim, heads = c.heads, dh = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T>& x = fw.x;
  x.resize(total, E);
  for (std::size_t si = 0; si < seqs.size(); ++si) {
    const auto& toks = *seqs[si];
    for (std::size_t pos = 0; pos < toks.size(); ++pos) {
      const auto row = fw.segments[si].offset + static_cast<Eigen::Index>(pos);
      for (int d = 0; d < E; ++d) {
        x(row, d) = p.embed(toks[pos], d) + positional<T>(static_cast<int>(pos), d, E);
      }
    }
  }

  fw.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& w = p.layers[l];
    auto& cache = fw.layers[l];
    cache.a_inv = rms_norm(x, cache.a);
    cache.q.noalias() = cache.a * w.wq.transpose();
    cache.k.noalias() = cache.a * w.wk.transpose();
    cache.v.noalias() = cache.a * w.wv.transpose();
    cache.attn = Matrix<T>::Zero(total, E);
    cache.probs.resize(fw.segments.size() * heads);
    for (std::size_t si = 0; si < fw.segments.size(); ++si) {
      const auto [off, len] = fw.segments[si];
      for (int h = 0; h < heads; ++h) {
        auto qh = cache.q.block(off, h * dh, len, dh);
        auto kh = cache.k.block(off, h * dh, len, dh);
        auto vh = cache.v.block(off, h * dh, len, dh);
        Matrix<T>& pr = cache.probs[si * heads + h];
        pr.noalias() = (qh * kh.transpose()) * scale;
        for (Eigen::Index i = 0; i < len; ++i) {
          T mx = pr.row(i).head(i + 1).maxCoeff();
          T sum = 0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            pr(i, j) = std::exp(pr(i, j) - mx);
            sum += pr(i, j);
          }
          pr.row(i).head(i + 1) /= sum;
          for (Eigen::Index j = i + 1; j < len; ++j) pr(i, j) = 0;
        }
        cache.attn.block(off, h * dh, len, dh).noalias() = pr * vh;
      }
    }
    x.noalias() += cache.attn * w.wo.transpose();

    cache.b_inv = rms_norm(x, cache.b);
    cache.u.noalias() = cache.b * w.w_in.transpose();
    cache.g = cache.u.unaryExpr([](T u) { return gelu(u); });
    x.noalias() += cache.g * w.w_out.transpose();
  }
  fw.f_inv = rms_norm(x, fw.f);
  return fw;
}

template <class T>
void run_backward(const ModelConfig& c, const Params<T>& p,
                  std::span<const std::vector<int>* const> seqs, const Forward<T>& fw,
                  Matrix<T> dx, Params<T>& grad) {
  const int E = c.embed_dim, heads = c.heads, dh = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const auto total = fw.x.rows();

  {
    Matrix<T> df = std::move(dx);
    dx = Matrix<T>::Zero(total, E);
    rms_norm_backward(df, fw.f, fw.f_inv, dx);
  }

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& w = p.layers[li];
    auto& gw = grad.layers[li];
    const auto& cache = fw.layers[li];

    // MLP: x += gelu(b W_in^T) W_out^T
    gw.w_out.noalias() += dx.transpose() * cache.g;
    Matrix<T> du = dx * w.w_out;
    for (Eigen::Index i = 0; i < du.size(); ++i) du.data()[i] *= gelu_grad(cache.u.data()[i]);
    gw.w_in.noalias() += du.transpose() * cache.b;
    Matrix<T> db = du * w.w_in;
    rms_norm_backward(db, cache.b, cache.b_inv, dx);

    // Attention: x += attn W_o^T
    gw.wo.noalias() += dx.transpose() * cache.attn;
    Matrix<T> dattn = dx * w.wo;
    Matrix<T> dq = Matrix<T>::Zero(total, E);
    Matrix<T> dk = Matrix<T>::Zero(total, E);
    Matrix<T> dv = Matrix<T>::Zero(total, E);
    for (std::size_t si = 0; si < fw.segments.size(); ++si) {
      const auto [off, len] = fw.segments[si];
      for (int h = 0; h < heads; ++h) {
        const Matrix<T>& pr = cache.probs[si * heads + h];
        auto qh = cache.q.block(off, h * dh, len, dh);
        auto kh = cache.k.block(off, h * dh, len, dh);
        auto vh = cache.v.block(off, h * dh, len, dh);
        auto doh = dattn.block(off, h * dh, len, dh);
        Matrix<T> dp = doh * vh.transpose();
        dv.block(off, h * dh, len, dh).noalias() += pr.transpose() * doh;
        for (Eigen::Index i = 0; i < len; ++i) {
          const T rowdot = dp.row(i).dot(pr.row(i));
          dp.row(i) = (pr.row(i).array() * (dp.row(i).array() - rowdot)).matrix() * scale;
        }
        dq.block(off, h * dh, len, dh).noalias() += dp * kh;
        dk.block(off, h * dh, len, dh).noalias() += dp.transpose() * qh;
      }
    }
    gw.wq.noalias() += dq.transpose() * cache.a;
    gw.wk.noalias() += dk.transpose() * cache.a;
    gw.wv.noalias() += dv.transpose() * cache.a;
    Matrix<T> da = dq * w.wq;
    da.noalias() += dk * w.wk;
    da.noalias() += dv * w.wv;
    rms_norm_backward(da, cache.a, cache.a_inv, dx);
  }

  for (std::size_t si = 0; si < seqs.size(); ++si) {
    const auto& toks = *seqs[si];
    for (std::size_t pos = 0; pos < toks.size(); ++pos) {
      grad.embed.row(toks[pos]) += dx.row(fw.segments[si].offset + static_cast<Eigen::Index>(pos));
    }
  }
}

}  // namespace

template <class T>
PassResult<T> forward_backward(const ModelConfig& config, const Params<T>& params,
                               std::span<const ExampleRecord* const> batch, OutputFn fn,
                               QWeighting weighting, Params<T>* grad, T grad_scale) {
  std::vector<const std::vector<int>*> seqs;
  seqs.reserve(batch.size());
  for (const auto* ex : batch) {
    ex->validate(config);
    seqs.push_back(&ex->token_ids);
  }
  Forward<T> fw = run_forward(config, params, std::span<const std::vector<int>* const>(seqs));

  // Rows that predict a target token.
  std::vector<Eigen::Index> rows;
  std::vector<int> targets;
  std::vector<std::size_t> owner;
  for (std::size_t si = 0; si < batch.size(); ++si) {
    const auto& ex = *batch[si];
    for (std::size_t j = 1; j < ex.token_ids.size(); ++j) {
      if (!ex.target_mask[j]) continue;
      rows.push_back(fw.segments[si].offset + static_cast<Eigen::Index>(j) - 1);
      targets.push_back(ex.token_ids[j]);
      owner.push_back(si);
    }
  }
  const auto nt = static_cast<Eigen::Index>(rows.size());
  const int E = config.embed_dim;
  Matrix<T> ft(nt, E);
  for (Eigen::Index r = 0; r < nt; ++r) ft.row(r) = fw.f.row(rows[r]);
  Matrix<T> z = ft * params.head.transpose();  // logits -> probabilities in place

  PassResult<T> res;
  res.example_loss.assign(batch.size(), T(0));
  res.example_mean_prob.assign(batch.size(), T(0));
  std::vector<int> counts(batch.size(), 0);
  for (Eigen::Index r = 0; r < nt; ++r) {
    auto row = z.row(r);
    const int y = targets[r];
    const T mx = row.maxCoeff();
    const T shifted_y = row[y] - mx;
    row = (row.array() - mx).exp().matrix();
    const T sum = row.sum();
    row /= sum;
    const T p = row[y];
    const T logp = shifted_y - std::log(sum);
    res.example_loss[owner[r]] -= logp;
    res.example_mean_prob[owner[r]] += p;
    counts[owner[r]]++;
  }
  for (std::size_t si = 0; si < batch.size(); ++si) {
    if (!std::isfinite(static_cast<double>(res.example_loss[si]))) {
      throw Error("non-finite loss for example '" + batch[si]->id + "'");
    }
    res.total_loss += res.example_loss[si];
    res.target_tokens += counts[si];
    if (counts[si] > 0) res.example_mean_prob[si] /= static_cast<T>(counts[si]);
  }
  if (grad == nullptr) return res;

  // z now holds probabilities; turn each row into Q-weighted df/dlogits.
  for (Eigen::Index r = 0; r < nt; ++r) {
    auto row = z.row(r);
    const int y = targets[r];
    const T p = row[y];
    // 1 - p from the complement mass keeps precision when p -> 1.
    T one_minus_p = 0;
    for (Eigen::Index v = 0; v < row.size(); ++v) {
      if (v != y) one_minus_p += row[v];
    }
    switch (fn) {
      case OutputFn::loss:
        // f = -log p, Q = 1.
        row[y] -= T(1);
        break;
      case OutputFn::margin: {
        // f = log(p / (1 - p)), df/dz = (e_y - p_vec) / (1 - p), Q = p - 1.
        if (one_minus_p <= T(0)) {
          row.setZero();
          break;
        }
        row = -row / one_minus_p;
        row[y] = T(1);
        if (weighting == QWeighting::token) row *= (p - T(1));
        break;
      }
      case OutputFn::logit: {
        // f = z_y, df/dz = e_y, Q = p - 1.
        row.setZero();
        row[y] = weighting == QWeighting::token ? (p - T(1)) : T(1);
        break;
      }
    }
  }
  z *= grad_scale;

  grad->head.noalias() += z.transpose() * ft;
  Matrix<T> dft = z * params.head;
  Matrix<T> df = Matrix<T>::Zero(fw.x.rows(), E);
  for (Eigen::Index r = 0; r < nt; ++r) df.row(rows[r]) += dft.row(r);
  run_backward(config, params, std::span<const std::vector<int>* const>(seqs), fw,
               std::move(df), *grad);
  return res;
}

template PassResult<float> forward_backward<float>(const ModelConfig&, const Params<float>&,
                                                   std::span<const ExampleRecord* const>,
                                                   OutputFn, QWeighting, Params<float>*,
                                                   float);
template PassResult<double> forward_backward<double>(const ModelConfig&, const Params<double>&,
                                                     std::span<const ExampleRecord* const>,
                                                     OutputFn, QWeighting, Params<double>*,
                                                     double);

std::vector<double> target_token_logprobs(const ModelState& state,
                                          const ExampleRecord& example) {
  example.validate(state.config);
  std::vector<const std::vector<int>*> seqs{&example.token_ids};
  auto fw = run_forward(state.config, state.params,
                        std::span<const std::vector<int>* const>(seqs));
  std::vector<double> out;
  for (std::size_t j = 1; j < example.token_ids.size(); ++j) {
    if (!example.target_mask[j]) continue;
    Eigen::VectorXf logits = state.params.head * fw.f.row(static_cast<Eigen::Index>(j) - 1).transpose();
    const Eigen::VectorXd zd = logits.cast<double>();
    const double mx = zd.maxCoeff();
    const double lse = mx + std::log((zd.array() - mx).exp().sum());
    out.push_back(zd[example.token_ids[j]] - lse);
  }
  return out;
}

double target_probability(const ModelState& state, std::span<const int> prompt,
                          std::span<const int> target) {
  if (target.empty()) throw Error("target_probability: empty target");
  std::vector<int> pr(prompt.begin(), prompt.end());
  if (pr.empty()) pr.push_back(kBosId);
  auto ex = make_prompted_example("query", pr, target);
  double sum = 0.0;
  for (double lp : target_token_logprobs(state, ex)) sum += lp;
  return std::exp(sum);
}

std::vector<int> greedy_complete(const ModelState& state, std::span<const int> prompt,
                                 int max_new_tokens, std::span<const int> stop_tokens) {
  std::vector<int> seq(prompt.begin(), prompt.end());
  if (seq.empty()) seq.push_back(kBosId);
  std::vector<int> out;
  for (int step = 0; step < max_new_tokens; ++step) {
    if (static_cast<int>(seq.size()) >= state.config.seq_len_max) break;
    std::vector<const std::vector<int>*> seqs{&seq};
    auto fw = run_forward(state.config, state.params,
                          std::span<const std::vector<int>* const>(seqs));
    Eigen::VectorXf logits =
        state.params.head * fw.f.row(static_cast<Eigen::Index>(seq.size()) - 1).transpose();
    Eigen::Index best = 0;
    logits.maxCoeff(&best);  // first maximum wins ties
    const int tok = static_cast<int>(best);
    if (std::find(stop_tokens.begin(), stop_tokens.end(), tok) != stop_tokens.end()) break;
    out.push_back(tok);
    seq.push_back(tok);
  }
  return out;
}

Params<float> example_gradient(const ModelState& state, const ExampleRecord& example,
                               OutputFn fn, QWeighting weighting, double* mean_target_prob,
                               Accumulate acc) {
  const ExampleRecord* batch[] = {&example};
  if (acc == Accumulate::f64) {
    auto grad = Params<double>::zeros(state.config);
    auto res = forward_backward<double>(state.config, state.params.cast<double>(), batch, fn,
                                        weighting, &grad);
    if (mean_target_prob) *mean_target_prob = res.example_mean_prob[0];
    return grad.cast<float>();
  }
  auto grad = Params<float>::zeros(state.config);
  auto res = forward_backward<float>(state.config, state.params, batch, fn, weighting, &grad);
  if (mean_target_prob) *mean_target_prob = res.example_mean_prob[0];
  return grad;
}

}  // namespace tda::tinylm
