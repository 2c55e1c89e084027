// Copyright (C) 2026 The refrank Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License"); you may not use this file except in compliance
// with the License. You may obtain a copy of the License at
//
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software distributed under the License
// is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express
// or implied. See the License for the specific language governing permissions and limitations under the License.

// JSON-over-HTTP session API.
//
//   POST /sessions                 {query_id | caption_id, strategy, params}
//   POST /sessions/{id}/feedback   {item_marks, region_boxes, explicit_caption_id}
//   GET  /sessions/{id}
//   GET  /items/{item_id}
//   GET  /healthz
//
// Errors are {"code": <status>, "message": <text>}.

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>

#include "json.hpp"
#include "refrank/afs.h"
#include "refrank/session.h"
#include "refrank/store.h"

namespace httplib {
class Server;
}

namespace refrank {

struct ApiResponse {
  int status = 200;
  nlohmann::ordered_json body;
};

// Routing-free core of the service; every handler is safe to call concurrently.
class SessionService {
 public:
  // `store` and `afs` must outlive the service; `afs` may be null.
  SessionService(const EmbeddingStore& store, const afs::Checkpoint* afs, SessionParams defaults = {});

  ApiResponse create_session(const std::string& body);
  ApiResponse submit_feedback(const std::string& session_id, const std::string& body);
  ApiResponse get_session(const std::string& session_id) const;
  ApiResponse get_item(const std::string& item_id) const;
  ApiResponse health() const;

  std::size_t session_count() const;
  // Every session with its history, in creation order.
  nlohmann::ordered_json snapshot() const;
  void flush(const std::filesystem::path& path) const;

  void mount(httplib::Server& server);

 private:
  struct Entry {
    std::mutex mutex;
    std::string id;
    std::string created_at;
    std::string updated_at;
    std::size_t sequence = 0;
    SessionState state;
  };

  std::shared_ptr<Entry> find(const std::string& session_id) const;
  nlohmann::ordered_json session_json(const Entry& e) const;
  std::string next_id();

  const EmbeddingStore& store_;
  const afs::Checkpoint* afs_;
  SessionParams defaults_;
  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::size_t created_ = 0;
  std::uint64_t id_salt_ = 0;
};

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  // Sessions are written here on shutdown; empty disables the log.
  std::filesystem::path session_log;
};

// Serves until SIGINT or SIGTERM, then writes the session log. Throws Error if the port cannot be bound.
void serve(const EmbeddingStore& store, const afs::Checkpoint* afs, const SessionParams& defaults,
           const ServeConfig& config);

}  // namespace refrank
