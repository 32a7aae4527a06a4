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

#include "tda/binio.hpp"
#include "tda/tinylm.hpp"

namespace tda::tinylm {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void write_matrix(binio::Writer& w, const MatrixF& m) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
  w.floats(m.data(), static_cast<std::size_t>(m.size()));
}

void read_matrix(binio::Reader& r, MatrixF& m, const std::string& name) {
  const auto rows = r.get<std::uint32_t>();
  const auto cols = r.get<std::uint32_t>();
  if (rows != m.rows() || cols != m.cols()) {
    throw ShapeError("checkpoint tensor " + name + " has shape " + std::to_string(rows) + "x" +
                     std::to_string(cols) + ", config expects " + std::to_string(m.rows()) +
                     "x" + std::to_string(m.cols()));
  }
  r.floats(m.data(), static_cast<std::size_t>(m.size()));
}

void write_vector(binio::Writer& w, const Vector<float>& v) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(v.size()));
  w.floats(v.data(), static_cast<std::size_t>(v.size()));
}

Vector<float> read_vector(binio::Reader& r) {
  Vector<float> v(r.get<std::uint32_t>());
  r.floats(v.data(), static_cast<std::size_t>(v.size()));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto& c = ckpt.state.config;
  binio::Writer w(path);
  w.magic("TLM1");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.vocab_size));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.layers));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.embed_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.mlp_hidden));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.heads));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.seq_len_max));
  w.put<std::uint64_t>(c.seed);
  w.put<std::uint64_t>(ckpt.config_hash);
  ckpt.state.params.for_each([&](const std::string&, const MatrixF& m) { write_matrix(w, m); });

  const auto& opt = ckpt.optimizer;
  const auto& h = ckpt.hyper;
  w.magic("OPT1");
  w.put<std::int64_t>(opt.step);
  w.put<std::uint8_t>(opt.factored ? 1 : 0);
  w.put<std::int32_t>(h.batch_size);
  w.put<double>(h.learning_rate);
  w.put<std::int32_t>(h.warmup_steps);
  w.put<double>(h.decay_rate);
  w.put<double>(h.clip_threshold);
  w.put<double>(h.epsilon1);
  w.put<double>(h.weight_decay);
  w.put<std::uint8_t>(h.factored ? 1 : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(opt.moments.size()));
  for (const auto& slot : opt.moments) {
    if (opt.factored) {
      write_vector(w, slot.row);
      write_vector(w, slot.col);
    } else {
      write_matrix(w, slot.full);
    }
  }
  w.close();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("TLM1");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw Error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  auto& c = ckpt.state.config;
  c.vocab_size = static_cast<int>(r.get<std::uint32_t>());
  c.layers = static_cast<int>(r.get<std::uint32_t>());
  c.embed_dim = static_cast<int>(r.get<std::uint32_t>());
  c.mlp_hidden = static_cast<int>(r.get<std::uint32_t>());
  c.heads = static_cast<int>(r.get<std::uint32_t>());
  c.seq_len_max = static_cast<int>(r.get<std::uint32_t>());
  c.seed = r.get<std::uint64_t>();
  ckpt.config_hash = r.get<std::uint64_t>();
  c.validate();
  ckpt.state.params = Params<float>::zeros(c);
  ckpt.state.params.for_each([&](const std::string& name, MatrixF& m) { read_matrix(r, m, name); });

  r.expect_magic("OPT1");
  auto& opt = ckpt.optimizer;
  auto& h = ckpt.hyper;
  opt.step = r.get<std::int64_t>();
  opt.factored = r.get<std::uint8_t>() != 0;
  h.batch_size = r.get<std::int32_t>();
  h.learning_rate = r.get<double>();
  h.warmup_steps = r.get<std::int32_t>();
  h.decay_rate = r.get<double>();
  h.clip_threshold = r.get<double>();
  h.epsilon1 = r.get<double>();
  h.weight_decay = r.get<double>();
  h.factored = r.get<std::uint8_t>() != 0;
  const auto slots = r.get<std::uint32_t>();
  auto shapes = OptimizerState::init(c, opt.factored);
  if (slots != shapes.moments.size())
    throw ShapeError("optimizer slot count " + std::to_string(slots) + " does not match model");
  opt.moments = std::move(shapes.moments);
  for (auto& slot : opt.moments) {
    if (opt.factored) {
      const auto rows = slot.row.size(), cols = slot.col.size();
      slot.row = read_vector(r);
      slot.col = read_vector(r);
      if (slot.row.size() != rows || slot.col.size() != cols)
        throw ShapeError("optimizer factor shape mismatch");
    } else {
      read_matrix(r, slot.full, "optimizer");
    }
  }
  return ckpt;
}

}  // namespace tda::tinylm
