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

// HTTP JSON API over a loaded Engine:
//   POST /api/query       ranked proponents for a prompt (and optional target)
//   POST /api/tailpatch   probability change after one step on an example
//   GET  /api/examples/ID passage text and construction labels
//   GET  /api/stats       corpus, index and evaluation summary
// Every endpoint answers 503 until the artifacts finish loading.

#include "tda/pipeline.hpp"

#include <atomic>
#include <memory>
#include <mutex>
#include <semaphore>
#include <thread>

namespace httplib {
class Server;
}

namespace tda::service {

struct Response {
  int status = 200;
  nlohmann::json body;
};

class Server {
 public:
  explicit Server(pipeline::Workspace ws);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Loads artifacts on a background thread.
  void start_loading();
  // Loads artifacts on the calling thread.
  void load();
  bool ready() const { return ready_.load(); }
  // Non-empty when loading failed.
  std::string load_error() const;

  // Blocking; host and port come from the serve config section.
  bool listen();
  // Binds an ephemeral port on the configured host and returns it.
  int bind_any_port();
  bool listen_after_bind();
  void stop();

  // Transport-independent handlers.
  Response query(const nlohmann::json& request) const;
  Response tailpatch(const nlohmann::json& request) const;
  Response example(std::string_view id) const;
  Response stats() const;

 private:
  void install_routes();
  std::optional<Response> unavailable() const;

  pipeline::Workspace ws_;
  config::ServeSettings settings_;
  std::unique_ptr<pipeline::Engine> engine_;
  std::atomic<bool> ready_{false};
  mutable std::mutex error_mutex_;
  std::string load_error_;
  std::thread loader_;
  std::unique_ptr<httplib::Server> http_;
  mutable std::counting_semaphore<64> patch_slots_;
};

}  // namespace tda::service
