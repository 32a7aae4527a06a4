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

#include "tda/service.hpp"

#include "httplib.h"

#include <algorithm>
#include <fstream>

namespace tda::service {

using json = nlohmann::json;

namespace {

Response error(int status, std::string message) { return {status, json{{"error", std::move(message)}}}; }

std::string normalized(std::string_view s) {
  std::string out;
  for (const auto& t : text::lexical_tokens(s, false)) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::string snippet(const std::string& text, std::size_t limit = 160) {
  if (text.size() <= limit) return text;
  auto cut = text.rfind(' ', limit);
  if (cut == std::string::npos || cut < limit / 2) cut = limit;
  return text.substr(0, cut) + " ...";
}

json label_json(const facttrace::PassageLabel& l) {
  json j{{"kind", facttrace::to_string(l.kind)}, {"facts", l.fact_ids}};
  j["entity"] = l.entity_id.empty() ? json(nullptr) : json(l.entity_id);
  return j;
}

json bucket_of(const pipeline::Dataset& d, const facttrace::CorpusPassage& p) {
  for (const auto& id : p.label.fact_ids)
    if (const auto* f = d.fact(id); f && !f->background) return f->bucket;
  return nullptr;
}

struct QueryText {
  std::string prompt;
  std::optional<std::string> target;
};

// Accepts a string prompt or an object with prompt and optional target.
std::optional<QueryText> parse_query(const json& j, std::string* why) {
  QueryText q;
  if (j.is_string()) {
    q.prompt = j.get<std::string>();
  } else if (j.is_object()) {
    if (!j.contains("prompt") || !j["prompt"].is_string()) {
      *why = "prompt must be a string";
      return std::nullopt;
    }
    q.prompt = j["prompt"].get<std::string>();
    if (j.contains("target") && !j["target"].is_null()) {
      if (!j["target"].is_string()) {
        *why = "target must be a string";
        return std::nullopt;
      }
      q.target = j["target"].get<std::string>();
    }
  } else {
    *why = "query must be a string or an object";
    return std::nullopt;
  }
  if (text::lexical_tokens(q.prompt, false).empty()) {
    *why = "prompt is empty";
    return std::nullopt;
  }
  if (q.target && text::lexical_tokens(*q.target, false).empty()) q.target.reset();
  return q;
}

}  // namespace

Server::Server(pipeline::Workspace ws)
    : ws_(std::move(ws)),
      settings_(ws_.config().serve()),
      http_(std::make_unique<httplib::Server>()),
      patch_slots_(std::min(settings_.tailpatch_workers, 64)) {
  install_routes();
}

Server::~Server() {
  stop();
  if (loader_.joinable()) loader_.join();
}

void Server::start_loading() {
  loader_ = std::thread([this] { load(); });
}

void Server::load() {
  try {
    engine_ = std::make_unique<pipeline::Engine>(ws_, ws_.config().method().presets);
    ready_ = true;
  } catch (const std::exception& e) {
    std::lock_guard lock(error_mutex_);
    load_error_ = e.what();
    if (ws_.options().log) *ws_.options().log << "serve: loading failed: " << e.what() << std::endl;
  }
}

std::string Server::load_error() const {
  std::lock_guard lock(error_mutex_);
  return load_error_;
}

std::optional<Response> Server::unavailable() const {
  if (ready_) return std::nullopt;
  const auto e = load_error();
  return error(503, e.empty() ? "artifacts are loading" : "artifacts failed to load: " + e);
}

Response Server::query(const json& req) const {
  if (auto u = unavailable()) return *u;
  if (!req.is_object()) return error(400, "request body must be a JSON object");
  std::string why;
  const auto q = parse_query(req, &why);
  if (!q) return error(400, why);
  int k = 10;
  if (req.contains("k")) {
    if (!req["k"].is_number_integer()) return error(400, "k must be an integer");
    k = req["k"].get<int>();
  }
  if (k < 1 || k > 100) return error(400, "k must lie in [1, 100]");
  std::string method = settings_.preset;
  if (req.contains("method")) {
    if (!req["method"].is_string()) return error(400, "method must be a string");
    method = req["method"].get<std::string>();
  }
  const auto& e = *engine_;
  if (!e.has_method(method)) return error(400, "unknown or unloaded method '" + method + "'");
  const auto fp = e.fingerprint(method);
  if (req.contains("fingerprint") && req["fingerprint"] != fp) {
    return error(409, "fingerprint mismatch: the loaded index for '" + method + "' has " + fp);
  }

  const auto& data = e.data();
  const auto* fact = data.fact_by_prompt(q->prompt);
  const auto prediction = e.predict(q->prompt);
  const bool from_request = q->target.has_value();
  const std::string target = from_request ? *q->target : prediction;
  json correct = nullptr;
  if (fact) {
    correct = facttrace::prediction_correct(prediction, *fact);
  } else if (from_request) {
    correct = text::lexical_tokens(prediction, true) == text::lexical_tokens(target, true) &&
              !text::lexical_tokens(prediction, true).empty();
  }
  if (text::lexical_tokens(target, false).empty()) {
    return error(400, "no target given and the model's prediction is empty");
  }

  index::RetrievalResult r;
  try {
    const auto ex = e.query(fact ? fact->id : "query", q->prompt, target);
    r = e.retrieve(method, ex, q->prompt + " " + target, k);
  } catch (const ShapeError& ex) {
    return error(400, ex.what());
  }

  json props = json::array();
  for (const auto& h : r.hits) {
    const auto& p = data.passages[h.row];
    json cat = nullptr;
    if (fact) {
      auto scored = *fact;
      if (from_request && normalized(*q->target) != normalized(fact->target)) scored.id.clear();
      cat = facttrace::to_string(facttrace::categorize_proponent(p, scored));
    }
    props.push_back({{"example_id", h.example_id},
                     {"rank", h.rank},
                     {"score", h.score},
                     {"snippet", snippet(p.text)},
                     {"category", cat},
                     {"bucket", bucket_of(data, p)}});
  }
  json body{{"method", method},
            {"fingerprint", r.fingerprint},
            {"k", k},
            {"truncated", r.truncated},
            {"prompt", q->prompt},
            {"target", target},
            {"target_source", from_request ? "request" : "prediction"},
            {"prediction", prediction},
            {"correct", correct},
            {"proponents", props}};
  body["fact"] = fact ? json{{"id", fact->id}, {"bucket", fact->bucket}, {"target", fact->target}} : json(nullptr);
  return {200, body};
}

Response Server::tailpatch(const json& req) const {
  if (auto u = unavailable()) return *u;
  if (!req.is_object()) return error(400, "request body must be a JSON object");
  if (!req.contains("query")) return error(400, "query is required");
  std::string why;
  const auto q = parse_query(req["query"], &why);
  if (!q) return error(400, why);
  if (!req.contains("example_id") || !req["example_id"].is_string())
    return error(400, "example_id must be a string");
  const auto id = req["example_id"].get<std::string>();
  const auto& e = *engine_;
  if (!e.data().row_of.count(id)) return error(404, "unknown example '" + id + "'");

  auto hyper = e.checkpoint().hyper;
  if (req.contains("learning_rate")) {
    if (!req["learning_rate"].is_number() || req["learning_rate"].get<double>() < 0)
      return error(400, "learning_rate must be a non-negative number");
    hyper.learning_rate = req["learning_rate"].get<double>();
  }
  const std::string target = q->target ? *q->target : e.predict(q->prompt);
  if (text::lexical_tokens(target, false).empty())
    return error(400, "no target given and the model's prediction is empty");

  patch_slots_.acquire();
  pipeline::Engine::PatchOutcome o;
  try {
    o = e.tail_patch(e.query("query", q->prompt, target), id, hyper);
  } catch (...) {
    patch_slots_.release();
    throw;
  }
  patch_slots_.release();
  return {200, json{{"example_id", id},
                    {"target", target},
                    {"before", o.before},
                    {"after", o.after},
                    {"delta_probability", o.after - o.before},
                    {"delta_pp", 100.0 * (o.after - o.before)}}};
}

Response Server::example(std::string_view id) const {
  if (auto u = unavailable()) return *u;
  const auto& d = engine_->data();
  const auto it = d.row_of.find(std::string(id));
  if (it == d.row_of.end()) return error(404, "unknown example '" + std::string(id) + "'");
  const auto& p = d.passages[it->second];
  const auto& m = d.meta[it->second];
  json facts = json::array();
  for (const auto& fid : p.label.fact_ids) {
    if (const auto* f = d.fact(fid)) {
      facts.push_back({{"id", f->id},
                       {"prompt", f->prompt},
                       {"target", f->target},
                       {"bucket", f->background ? json(nullptr) : json(f->bucket)}});
    }
  }
  return {200, json{{"id", p.id},
                    {"row", it->second},
                    {"text", p.text},
                    {"labels", label_json(p.label)},
                    {"facts", facts},
                    {"offset", m.offset},
                    {"length", m.length}}};
}

Response Server::stats() const {
  if (auto u = unavailable()) return *u;
  const auto& e = *engine_;
  const auto& d = e.data();
  json presets = json::object();
  std::size_t dim = 0;
  for (const auto& p : e.presets()) {
    presets[p] = e.fingerprint(p);
    dim = e.index(p).dim();
  }
  presets["bm25"] = e.fingerprint("bm25");
  json eval = nullptr;
  const auto report = ws_.report_path("jsonl");
  if (std::filesystem::exists(report)) {
    const auto r = pipeline::read_report_jsonl(report);
    eval = json::object();
    for (const auto& row : r.rows) {
      eval[row.method] = {{"mrr", row.mrr ? json(*row.mrr) : json(nullptr)},
                          {"recall", row.recall ? json(*row.recall) : json(nullptr)},
                          {"tailpatch_pp", row.tailpatch_pp.count(10) ? json(row.tailpatch_pp.at(10)) : json(nullptr)}};
    }
  }
  std::map<std::string, int> buckets;
  for (const auto* f : d.eval_facts()) ++buckets[f->bucket];
  const auto* mixed = e.mixed_hessian();
  return {200, json{{"n", d.passages.size()},
                    {"d", dim},
                    {"facts", d.eval_facts().size()},
                    {"buckets", buckets},
                    {"vocab_size", d.vocab.size()},
                    {"presets", presets},
                    {"default_method", settings_.preset},
                    {"lambda", mixed ? json(mixed->lambda) : json(nullptr)},
                    {"eval", eval}}};
}

void Server::install_routes() {
  auto& s = *http_;
  const std::string origin = settings_.cors_origin;
  s.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", origin);
  });
  s.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });

  auto send = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  auto guarded = [send](auto&& fn) {
    return [send, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        send(res, fn(req));
      } catch (const json::exception& e) {
        send(res, error(400, e.what()));
      } catch (const std::exception& e) {
        send(res, error(500, e.what()));
      }
    };
  };
  auto body = [](const httplib::Request& req) -> std::optional<json> {
    json j = json::parse(req.body, nullptr, false);
    if (j.is_discarded()) return std::nullopt;
    return j;
  };

  s.Post("/api/query", guarded([this, body](const httplib::Request& req) {
    const auto j = body(req);
    return j ? query(*j) : error(400, "request body is not valid JSON");
  }));
  s.Post("/api/tailpatch", guarded([this, body](const httplib::Request& req) {
    const auto j = body(req);
    return j ? tailpatch(*j) : error(400, "request body is not valid JSON");
  }));
  s.Get(R"(/api/examples/([^/]+))", guarded([this](const httplib::Request& req) {
    return example(req.matches[1].str());
  }));
  s.Get("/api/stats", guarded([this](const httplib::Request&) { return stats(); }));
}

bool Server::listen() {
  if (ws_.options().log) {
    *ws_.options().log << "serve: listening on http://" << settings_.host << ":" << settings_.port
                       << std::endl;
  }
  return http_->listen(settings_.host, settings_.port);
}

int Server::bind_any_port() { return http_->bind_to_any_port(settings_.host); }

bool Server::listen_after_bind() { return http_->listen_after_bind(); }

void Server::stop() {
  if (http_) http_->stop();
}

}  // namespace tda::service
