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

#include <gtest/gtest.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <thread>

#include "refrank/ranker.h"
#include "refrank/service.h"
#include "refrank/synth.h"
#include "test_support.h"

// After Eigen: a system header pulled in here defines a macro that collides with Eigen parameter names.
#include "httplib.h"

namespace refrank {
namespace {

using nlohmann::json;
using testing::TempDir;

const EmbeddingStore& store() {
  static const EmbeddingStore s = [] {
    synth::SynthConfig c;
    c.n_items = 80;
    return synth::generate(c);
  }();
  return s;
}

const afs::Checkpoint& checkpoint() {
  static const afs::Checkpoint ck = [] {
    afs::Checkpoint c;
    c.config = afs::config_for_store(store());
    c.params = afs::init_params(c.config);
    return c;
  }();
  return ck;
}

std::string create_body(std::size_t row, const std::string& strategy) {
  return json{{"query_id", store().caption_id(row)}, {"strategy", strategy}}.dump();
}

std::vector<std::string> ranked_ids(const nlohmann::ordered_json& turn) {
  std::vector<std::string> out;
  for (const auto& it : turn.at("items")) out.push_back(it.at("item_id").get<std::string>());
  return out;
}

TEST(Service, CreateNoneMatchesBaselineRanking) {
  SessionService svc(store(), nullptr);
  const auto r = svc.create_session(create_body(11, "none"));
  ASSERT_EQ(r.status, 201) << r.body.dump();
  EXPECT_EQ(r.body["strategy"], "none");
  EXPECT_EQ(r.body["turn"]["turn"], 1);
  const VectorF q = store().caption_vector(11).transpose();
  const auto expected = rank(q, store(), 10);
  std::vector<std::string> want;
  for (const auto& c : expected.entries) want.push_back(c.item_id);
  EXPECT_EQ(ranked_ids(r.body["turn"]), want);
  EXPECT_EQ(r.body["turn"]["items"][0]["rank"], 1);
}

TEST(Service, SessionIdsAreDistinct) {
  SessionService svc(store(), nullptr);
  std::set<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.insert(svc.create_session(create_body(0, "none")).body["session_id"]);
  EXPECT_EQ(ids.size(), 20U);
  EXPECT_EQ(svc.session_count(), 20U);
}

TEST(Service, ErrorStatuses) {
  SessionService svc(store(), nullptr);
  auto r = svc.create_session(create_body(0, "afs"));
  EXPECT_EQ(r.status, 409);
  EXPECT_EQ(r.body["code"], 409);
  EXPECT_FALSE(r.body["message"].get<std::string>().empty());
  EXPECT_EQ(svc.session_count(), 0U);

  EXPECT_EQ(svc.create_session(R"({"query_id":"nope"})").status, 404);
  EXPECT_EQ(svc.create_session(R"({"strategy":"none"})").status, 400);
  EXPECT_EQ(svc.create_session("{not json").status, 400);
  EXPECT_EQ(svc.create_session(create_body(0, "warp")).status, 400);
  EXPECT_EQ(svc.submit_feedback("s999999-00000000", "{}").status, 404);
  EXPECT_EQ(svc.get_session("missing").status, 404);
  EXPECT_EQ(svc.get_item("missing").status, 404);

  const std::string id = svc.create_session(create_body(0, "grf")).body["session_id"];
  EXPECT_EQ(svc.submit_feedback(id, R"({"item_marks":[{"item_id":"nope","relevance":"relevant"}]})").status, 422);
  EXPECT_EQ(svc.submit_feedback(id, "[1]").status, 400);
}

TEST(Service, BadPatchOnAfsSessionIs422AndLeavesSessionUnchanged) {
  SessionService svc(store(), &checkpoint());
  const auto created = svc.create_session(create_body(3, "afs"));
  ASSERT_EQ(created.status, 201) << created.body.dump();
  const std::string id = created.body["session_id"];
  const std::string first = created.body["turn"]["items"][0]["item_id"];
  const auto bad = json{{"region_boxes", {{{"item_id", first}, {"patches", {99}}, {"polarity", "relevant"}}}}};
  const auto r = svc.submit_feedback(id, bad.dump());
  EXPECT_EQ(r.status, 422) << r.body.dump();
  EXPECT_EQ(svc.get_session(id).body["turns"].size(), 1U);

  const auto good = json{{"region_boxes", {{{"item_id", first}, {"patches", {0, 8}}, {"polarity", "irrelevant"}}}}};
  const auto ok = svc.submit_feedback(id, good.dump());
  ASSERT_EQ(ok.status, 200) << ok.body.dump();
  EXPECT_EQ(ok.body["turn"]["turn"], 2);
  EXPECT_EQ(ok.body["turn"]["saliency"]["items"].size(), 5U);
}

TEST(Service, ItemAndHealth) {
  SessionService svc(store(), nullptr);
  const auto item = svc.get_item(store().items[4].item_id);
  ASSERT_EQ(item.status, 200);
  EXPECT_EQ(item.body["captions"].size(), 5U);
  EXPECT_EQ(item.body["image_ref"], store().items[4].image_ref);
  const auto h = svc.health();
  EXPECT_EQ(h.status, 200);
  EXPECT_EQ(h.body["status"], "ok");
  EXPECT_EQ(h.body["afs_loaded"], false);
}

TEST(Service, EmptyFeedbackRunsAnAutomaticTurn) {
  SessionService svc(store(), nullptr);
  const std::string id = svc.create_session(create_body(21, "prf_extended")).body["session_id"];
  const auto r = svc.submit_feedback(id, "");
  ASSERT_EQ(r.status, 200) << r.body.dump();

  auto s = start_session(store(), 21, Strategy::kPrfExtended, {});
  run_multi_turn(s, store(), 2);
  std::vector<std::string> want;
  for (const auto& c : s.history[1].candidates.entries) want.push_back(c.item_id);
  EXPECT_EQ(ranked_ids(r.body["turn"]), want);
}

TEST(Service, ConcurrentSessionsStayIsolated) {
  SessionService svc(store(), nullptr);
  constexpr std::size_t kSessions = 32;
  std::vector<nlohmann::ordered_json> finals(kSessions);
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < kSessions; ++i) {
    workers.emplace_back([&, i] {
      const auto created = svc.create_session(create_body(i * 7, i % 2 ? "grf" : "explicit"));
      const std::string id = created.body["session_id"];
      svc.submit_feedback(id, "{}");
      svc.submit_feedback(id, "{}");
      finals[i] = svc.get_session(id).body;
    });
  }
  for (auto& w : workers) w.join();
  for (std::size_t i = 0; i < kSessions; ++i) {
    auto s = start_session(store(), i * 7, i % 2 ? Strategy::kGrf : Strategy::kExplicit, {});
    run_multi_turn(s, store(), 3);
    ASSERT_EQ(finals[i]["turns"].size(), 3U);
    for (std::size_t t = 0; t < 3; ++t) {
      std::vector<std::string> want;
      for (const auto& c : s.history[t].candidates.entries) want.push_back(c.item_id);
      EXPECT_EQ(ranked_ids(finals[i]["turns"][t]), want) << "session " << i << " turn " << t + 1;
    }
  }
  EXPECT_EQ(svc.snapshot()["sessions"].size(), kSessions);
}

TEST(Service, SnapshotReplaysToIdenticalRankings) {
  TempDir dir;
  SessionService svc(store(), &checkpoint());
  const std::string a = svc.create_session(create_body(5, "afs")).body["session_id"];
  const auto first = svc.get_session(a).body["turns"][0];
  const auto marks = json{{"item_marks",
                           {{{"item_id", first["items"][1]["item_id"]}, {"relevance", "relevant"}},
                            {{"item_id", first["items"][3]["item_id"]}, {"relevance", "irrelevant"}}}}};
  ASSERT_EQ(svc.submit_feedback(a, marks.dump()).status, 200);
  ASSERT_EQ(svc.submit_feedback(a, "{}").status, 200);
  const std::string b = svc.create_session(create_body(9, "explicit")).body["session_id"];
  ASSERT_EQ(svc.submit_feedback(b, "{}").status, 200);

  const auto log = dir / "sessions.json";
  svc.flush(log);
  std::ifstream in(log);
  const auto snap = json::parse(in);
  ASSERT_EQ(snap["sessions"].size(), 2U);
  EXPECT_EQ(snap["sessions"][0]["session_id"], a);
  for (const auto& session : snap["sessions"]) {
    const auto again = replay(session, store(), &checkpoint());
    ASSERT_EQ(again.turn(), session["turns"].size());
    for (std::size_t t = 0; t < again.turn(); ++t) {
      std::vector<std::string> got;
      for (const auto& c : again.history[t].candidates.entries) got.push_back(c.item_id);
      std::vector<std::string> want;
      for (const auto& it : session["turns"][t]["items"]) want.push_back(it["item_id"]);
      EXPECT_EQ(got, want);
    }
  }
}

TEST(Service, MarkingTheTargetRelevantNeverHurtsIt) {
  // Large enough that many targets miss rank 1 but stay on screen.
  const auto big = synth::generate(synth::SynthConfig{});
  SessionService svc(big, nullptr);
  std::size_t checked = 0;
  for (std::size_t row = 0; row < big.caption_count() && checked < 20; ++row) {
    const auto body = json{{"query_id", big.caption_id(row)}, {"strategy", "explicit"}}.dump();
    const auto created = svc.create_session(body);
    const auto& turn = created.body["turn"];
    const std::size_t rank = turn["gt_rank"];
    if (rank == 1 || rank > 10) continue;
    const auto target = big.items[big.item_of_caption(row)].item_id;
    const auto fb = json{{"item_marks", {{{"item_id", target}, {"relevance", "relevant"}}}}};
    const auto r = svc.submit_feedback(created.body["session_id"], fb.dump());
    ASSERT_EQ(r.status, 200);
    EXPECT_LE(r.body["turn"]["gt_rank"].get<std::size_t>(), rank) << big.caption_id(row);
    ++checked;
  }
  EXPECT_GT(checked, 0U);
}

TEST(Service, HttpRoutesCarryStatusAndErrorBody) {
  SessionService svc(store(), nullptr);
  httplib::Server server;
  svc.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread loop([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  auto created = client.Post("/sessions", create_body(2, "grf"), "application/json");
  ASSERT_TRUE(created);
  EXPECT_EQ(created->status, 201);
  const std::string id = json::parse(created->body)["session_id"];
  auto fb = client.Post("/sessions/" + id + "/feedback", "{}", "application/json");
  ASSERT_TRUE(fb);
  EXPECT_EQ(fb->status, 200);
  auto got = client.Get("/sessions/" + id);
  ASSERT_TRUE(got);
  EXPECT_EQ(json::parse(got->body)["turns"].size(), 2U);
  auto missing = client.Get("/sessions/nope");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body)["code"], 404);
  auto item = client.Get("/items/" + store().items[0].item_id);
  ASSERT_TRUE(item);
  EXPECT_EQ(item->status, 200);
  auto health = client.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(json::parse(health->body)["sessions"], 1);
  auto unknown_route = client.Get("/nowhere");
  ASSERT_TRUE(unknown_route);
  EXPECT_EQ(unknown_route->status, 404);
  EXPECT_EQ(json::parse(unknown_route->body)["code"], 404);

  server.stop();
  loop.join();
}

TEST(ServeCommand, WritesSessionLogOnSigterm) {
  TempDir dir;
  write_store(store(), dir / "store");
  const auto log = dir / "logs" / "sessions.json";

  int out[2];
  ASSERT_EQ(pipe(out), 0);
  const pid_t pid = fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    dup2(out[1], STDOUT_FILENO);
    close(out[0]);
    close(out[1]);
    const std::string store_dir = (dir / "store").string();
    const std::string log_path = log.string();
    execl(REFRANK_CLI_PATH, REFRANK_CLI_PATH, "serve", "--store", store_dir.c_str(), "--port", "0", "--session-log",
          log_path.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  close(out[1]);
  FILE* stream = fdopen(out[0], "r");
  char line[256] = {0};
  ASSERT_NE(std::fgets(line, sizeof(line), stream), nullptr);
  const std::string banner(line);
  const auto colon = banner.rfind(':');
  ASSERT_EQ(banner.rfind("listening on http://127.0.0.1:", 0), 0U) << banner;
  const int port = std::stoi(banner.substr(colon + 1));

  httplib::Client client("127.0.0.1", port);
  auto created = client.Post("/sessions", create_body(0, "none"), "application/json");
  ASSERT_TRUE(created);
  EXPECT_EQ(created->status, 201);

  kill(pid, SIGTERM);
  int status = 0;
  waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  ASSERT_NE(std::fgets(line, sizeof(line), stream), nullptr);
  EXPECT_EQ(std::string(line).rfind("wrote 1 sessions to ", 0), 0U) << line;
  std::fclose(stream);

  std::ifstream in(log);
  ASSERT_TRUE(in.good());
  const auto snap = json::parse(in);
  ASSERT_EQ(snap["sessions"].size(), 1U);
  EXPECT_EQ(snap["sessions"][0]["strategy"], "none");
}

}  // namespace
}  // namespace refrank
