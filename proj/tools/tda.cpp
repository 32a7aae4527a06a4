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

// Command-line entry point for the attribution pipeline.

#include "tda/pipeline.hpp"
#include "tda/service.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fstream>
#include <iostream>

namespace {

using namespace tda;
using json = nlohmann::json;

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  bool force = false;
  int threads = 0;
  std::optional<std::uint64_t> seed;
};

config::RunConfig resolve(const Common& c) {
  auto cfg = c.config_path.empty() ? config::RunConfig{} : config::RunConfig::load(c.config_path);
  if (c.seed) cfg.set_seed(*c.seed);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("--set expects key=value, got '" + s + "'");
    cfg.set(std::string_view(s).substr(0, eq), std::string_view(s).substr(eq + 1));
  }
  return cfg;
}

pipeline::Workspace workspace(const Common& c) {
  pipeline::Options o;
  o.force = c.force;
  if (c.threads > 0) o.threads = c.threads;
  o.log = &std::cerr;
  return pipeline::Workspace(resolve(c), o);
}

struct QueryLine {
  std::string id;
  std::string prompt;
  std::optional<std::string> target;
};

std::vector<QueryLine> read_queries(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open query file " + path);
  std::vector<QueryLine> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(path + ":" + std::to_string(n) + ": " + e.what());
    }
    QueryLine q;
    q.id = j.value("id", "q" + std::to_string(out.size()));
    q.prompt = j.at("prompt").get<std::string>();
    if (j.contains("target") && !j["target"].is_null()) q.target = j["target"].get<std::string>();
    if (q.prompt.empty()) throw Error(path + ":" + std::to_string(n) + ": empty prompt");
    out.push_back(std::move(q));
  }
  if (out.empty()) throw Error("query file " + path + " has no queries");
  return out;
}

std::vector<std::string> engine_presets(const std::string& method) {
  if (method == "bm25") return {};
  (void)methods::preset(method);
  return {method};
}

int retrieve(const Common& c, const std::string& file, const std::string& method_arg, int k) {
  if (k < 1) throw Error("--k must be >= 1");
  const auto ws = workspace(c);
  const auto method = method_arg.empty() ? ws.config().serve().preset : method_arg;
  pipeline::Engine engine(ws, engine_presets(method));
  std::cout << "query_id\trank\texample_id\tscore\tcategory\n";
  for (const auto& q : read_queries(file)) {
    const auto target = q.target ? *q.target : engine.predict(q.prompt);
    if (!q.target) std::cerr << q.id << ": predicted '" << target << "'\n";
    const auto ex = engine.query(q.id, q.prompt, target);
    const auto r = engine.retrieve(method, ex, q.prompt + " " + target, k);
    if (r.truncated) std::cerr << q.id << ": only " << r.hits.size() << " results\n";
    const auto* known = engine.data().fact(q.id);
    if (!known) known = engine.data().fact_by_prompt(q.prompt);
    for (const auto& h : r.hits) {
      std::string category = "-";
      if (known) category = std::string(facttrace::to_string(facttrace::categorize_proponent(engine.data().passages[h.row], *known)));
      std::cout << q.id << '\t' << h.rank << '\t' << h.example_id << '\t' << h.score << '\t' << category << '\n';
    }
  }
  return 0;
}

int tailpatch(const Common& c, const std::string& file, const std::string& method_arg, int k,
              const std::string& example) {
  const auto ws = workspace(c);
  const auto method = method_arg.empty() ? ws.config().serve().preset : method_arg;
  pipeline::Engine engine(ws, example.empty() ? engine_presets(method) : std::vector<std::string>{});
  const auto& hyper = engine.checkpoint().hyper;
  std::cout << "query_id\texample_id\trank\tbefore\tafter\tdelta_pp\n";
  for (const auto& q : read_queries(file)) {
    const auto target = q.target ? *q.target : engine.predict(q.prompt);
    const auto ex = engine.query(q.id, q.prompt, target);
    std::vector<std::pair<std::string, int>> targets;
    if (!example.empty()) {
      targets.emplace_back(example, 0);
    } else {
      for (const auto& h : engine.retrieve(method, ex, q.prompt + " " + target, k).hits)
        targets.emplace_back(h.example_id, h.rank);
    }
    for (const auto& [id, rank] : targets) {
      const auto o = engine.tail_patch(ex, id, hyper);
      std::cout << q.id << '\t' << id << '\t' << rank << '\t' << o.before << '\t' << o.after << '\t'
                << 100.0 * (o.after - o.before) << '\n';
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-data attribution pipeline: gradient features, proponent retrieval and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Common c;
  app.add_option("--config", c.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--set", c.sets, "Override a config key, e.g. --set train.steps=500")->take_all();
  app.add_flag("--force", c.force, "Rebuild artifacts that already exist");
  app.add_option("--threads", c.threads, "Worker threads (default: hardware concurrency)")->check(CLI::PositiveNumber);
  app.add_option("--seed", c.seed, "Seed for the benchmark, model and projection");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic fact-tracing corpus");
  auto* train = app.add_subcommand("train", "Train the language model");
  auto* hess = app.add_subcommand("estimate-hessian", "Estimate train, TRAK, eval and mixed Hessians");
  auto* build = app.add_subcommand("build-index", "Featurize the corpus for every configured preset");
  auto* eval = app.add_subcommand("eval", "Evaluate every preset plus BM25 and write the report");
  auto* all = app.add_subcommand("run", "Run gen-data, train, estimate-hessian, build-index and eval");
  auto* show = app.add_subcommand("config", "Print the resolved configuration and artifact directories");

  std::string query_file, method, example;
  int k = 10;
  auto* ret = app.add_subcommand("retrieve", "Retrieve proponents for queries");
  ret->add_option("--query-file", query_file, "JSON lines with prompt and optional id, target")
      ->required()
      ->check(CLI::ExistingFile);
  ret->add_option("--k", k, "Proponents per query");
  ret->add_option("--method", method, "Preset name or bm25 (default: serve.preset)");

  auto* tp = app.add_subcommand("tailpatch", "Tail-patch each query's proponents, or one given example");
  tp->add_option("--query-file", query_file, "JSON lines with prompt and optional id, target")
      ->required()
      ->check(CLI::ExistingFile);
  tp->add_option("--k", k, "Proponents per query");
  tp->add_option("--method", method, "Preset name or bm25 (default: serve.preset)");
  tp->add_option("--example", example, "Patch on this corpus example instead of retrieved proponents");

  std::optional<int> port;
  auto* serve = app.add_subcommand("serve", "Serve the JSON API");
  serve->add_option("--port", port, "Port (default: serve.port)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*show) {
      const auto ws = workspace(c);
      std::cout << ws.config().dump() << '\n'
                << "config hash " << hex64(ws.config().hash()) << '\n'
                << "data        " << ws.data_dir().string() << '\n'
                << "model       " << ws.model_dir().string() << '\n'
                << "features    " << ws.features_dir().string() << '\n'
                << "eval        " << ws.eval_dir().string() << '\n';
      return 0;
    }
    if (*gen) workspace(c).gen_data();
    if (*train) workspace(c).train();
    if (*hess) workspace(c).estimate_hessian();
    if (*build) workspace(c).build_index();
    if (*eval) workspace(c).eval();
    if (*all) workspace(c).run_all();
    if (*ret) return retrieve(c, query_file, method, k);
    if (*tp) return tailpatch(c, query_file, method, k, example);
    if (*serve) {
      auto cfg = resolve(c);
      if (port) cfg.set_value("serve.port", json(*port));
      pipeline::Options o;
      if (c.threads > 0) o.threads = c.threads;
      o.log = &std::cerr;
      service::Server server(pipeline::Workspace(std::move(cfg), o));
      server.start_loading();
      return server.listen() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
