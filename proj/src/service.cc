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

#include "refrank/service.h"

#include <pthread.h>
#include <signal.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <random>
#include <thread>

#include "httplib.h"

namespace refrank {

namespace {

using ordered_json = nlohmann::ordered_json;

class NotFound : public Error {
 public:
  using Error::Error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof(out), "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

ApiResponse error_response(int status, const std::string& message) {
  return {status, ordered_json{{"code", status}, {"message", message}}};
}

nlohmann::json parse_body(const std::string& body) {
  if (body.empty()) return nlohmann::json::object();
  auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw InvalidArgument("request body is not valid JSON");
  if (!j.is_object()) throw InvalidArgument("request body must be a JSON object");
  return j;
}

// Maps library errors onto HTTP status codes; order matters because FeedbackError is an InvalidArgument.
template <typename Fn>
ApiResponse guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const NotFound& e) {
    return error_response(404, e.what());
  } catch (const FeedbackError& e) {
    return error_response(422, e.what());
  } catch (const StrategyError& e) {
    return error_response(409, e.what());
  } catch (const InvalidArgument& e) {
    return error_response(400, e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_response(400, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

void reply(httplib::Response& res, const ApiResponse& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

}  // namespace

SessionService::SessionService(const EmbeddingStore& store, const afs::Checkpoint* afs, SessionParams defaults)
    : store_(store), afs_(afs), defaults_(std::move(defaults)) {
  defaults_.validate();
  id_salt_ = std::random_device{}();
}

std::string SessionService::next_id() {
  // Caller holds sessions_mutex_ exclusively.
  std::mt19937_64 rng(id_salt_ ^ (0x9e3779b97f4a7c15ULL * (created_ + 1)));
  char buf[40];
  std::snprintf(buf, sizeof(buf), "s%06zu-%08llx", created_ + 1,
                static_cast<unsigned long long>(rng() & 0xffffffffULL));
  ++created_;
  return buf;
}

std::shared_ptr<SessionService::Entry> SessionService::find(const std::string& session_id) const {
  std::shared_lock lock(sessions_mutex_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFound("unknown session " + session_id);
  return it->second;
}

ordered_json SessionService::session_json(const Entry& e) const {
  ordered_json j;
  j["session_id"] = e.id;
  j["created_at"] = e.created_at;
  j["updated_at"] = e.updated_at;
  const auto state = to_json(e.state, store_);
  for (const auto& [k, v] : state.items()) j[k] = v;
  return j;
}

ApiResponse SessionService::create_session(const std::string& body) {
  return guarded([&] {
    const auto j = parse_body(body);
    std::string query;
    if (j.contains("query_id")) {
      query = j.at("query_id").get<std::string>();
    } else if (j.contains("caption_id")) {
      query = j.at("caption_id").get<std::string>();
    } else {
      throw InvalidArgument("missing query_id");
    }
    const auto row = store_.find_caption(query);
    if (!row) throw NotFound("unknown query " + query);
    const auto strategy = parse_strategy(j.value("strategy", std::string("none")));
    const auto params = session_params_from_json(j.value("params", nlohmann::json::object()), defaults_);
    if (needs_checkpoint(strategy) && afs_ == nullptr) {
      throw StrategyError("strategy " + to_string(strategy) + " needs an AFS checkpoint and none is loaded");
    }

    auto entry = std::make_shared<Entry>();
    entry->state = start_session(store_, *row, strategy, params);
    run_turn(entry->state, store_, afs_);
    entry->created_at = entry->updated_at = utc_now();
    {
      std::unique_lock lock(sessions_mutex_);
      entry->id = next_id();
      entry->sequence = created_;
      sessions_.emplace(entry->id, entry);
    }
    ordered_json out;
    out["session_id"] = entry->id;
    out["strategy"] = to_string(strategy);
    out["turn"] = to_json(entry->state.history.back(), store_);
    return ApiResponse{201, out};
  });
}

ApiResponse SessionService::submit_feedback(const std::string& session_id, const std::string& body) {
  return guarded([&] {
    const auto entry = find(session_id);
    const auto j = parse_body(body);
    const auto fb = feedback_from_json(j, store_);
    std::lock_guard lock(entry->mutex);
    // run_turn only appends on success, so a rejected request leaves the session unchanged.
    const auto& turn = run_turn(entry->state, store_, afs_, fb);
    entry->updated_at = utc_now();
    ordered_json out;
    out["session_id"] = entry->id;
    out["turn"] = to_json(turn, store_);
    return ApiResponse{200, out};
  });
}

ApiResponse SessionService::get_session(const std::string& session_id) const {
  return guarded([&] {
    const auto entry = find(session_id);
    std::lock_guard lock(entry->mutex);
    return ApiResponse{200, session_json(*entry)};
  });
}

ApiResponse SessionService::get_item(const std::string& item_id) const {
  return guarded([&] {
    const auto idx = store_.find_item(item_id);
    if (!idx) throw NotFound("unknown item " + item_id);
    const auto& item = store_.items[*idx];
    ordered_json j;
    j["item_id"] = item.item_id;
    j["image_ref"] = item.image_ref;
    auto& caps = j["captions"] = ordered_json::array();
    for (const auto& c : item.human_captions) caps.push_back({{"caption_id", c.caption_id}, {"text", c.text}});
    j["synthetic_caption"] = item.synthetic_caption;
    return ApiResponse{200, j};
  });
}

ApiResponse SessionService::health() const {
  ordered_json j;
  j["status"] = "ok";
  j["items"] = store_.size();
  j["queries"] = store_.caption_count();
  j["afs_loaded"] = afs_ != nullptr;
  j["sessions"] = session_count();
  return {200, j};
}

std::size_t SessionService::session_count() const {
  std::shared_lock lock(sessions_mutex_);
  return sessions_.size();
}

ordered_json SessionService::snapshot() const {
  std::vector<std::shared_ptr<Entry>> entries;
  {
    std::shared_lock lock(sessions_mutex_);
    for (const auto& [id, e] : sessions_) entries.push_back(e);
  }
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a->sequence < b->sequence; });
  ordered_json out;
  out["sessions"] = ordered_json::array();
  for (const auto& e : entries) {
    std::lock_guard lock(e->mutex);
    out["sessions"].push_back(session_json(*e));
  }
  return out;
}

void SessionService::flush(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot write session log " + tmp);
    out << snapshot().dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

void SessionService::mount(httplib::Server& server) {
  server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, create_session(req.body));
  });
  server.Post(R"(/sessions/([^/]+)/feedback)", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, submit_feedback(req.matches[1], req.body));
  });
  server.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_session(req.matches[1]));
  });
  server.Get(R"(/items/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_item(req.matches[1]));
  });
  server.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) reply(res, error_response(res.status, httplib::status_message(res.status)));
  });
}

void serve(const EmbeddingStore& store, const afs::Checkpoint* afs, const SessionParams& defaults,
           const ServeConfig& config) {
  SessionService service(store, afs, defaults);
  httplib::Server server;
  service.mount(server);

  // Block the shutdown signals in every thread; a dedicated thread waits for them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  sigset_t previous;
  pthread_sigmask(SIG_BLOCK, &signals, &previous);

  int port = config.port;
  if (port == 0) {
    port = server.bind_to_any_port(config.host);
  } else if (!server.bind_to_port(config.host, port)) {
    port = -1;
  }
  if (port < 0) {
    pthread_sigmask(SIG_SETMASK, &previous, nullptr);
    throw Error("serve: cannot bind " + config.host + ":" + std::to_string(config.port) + " (port in use?)");
  }
  std::cout << "listening on http://" << config.host << ':' << port << std::endl;

  std::atomic<bool> signalled{false};
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    signalled = true;
    server.stop();
  });
  server.listen_after_bind();
  // listen returned on its own (e.g. a socket error): wake the waiter.
  if (!signalled) pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  pthread_sigmask(SIG_SETMASK, &previous, nullptr);

  if (!config.session_log.empty()) {
    service.flush(config.session_log);
    std::cout << "wrote " << service.session_count() << " sessions to " << config.session_log.string() << std::endl;
  }
}

}  // namespace refrank
