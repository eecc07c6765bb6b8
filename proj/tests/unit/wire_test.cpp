#include <gtest/gtest.h>

#include <fstream>

#include "csl/error.hpp"
#include "csl/serialize.hpp"
#include "csl/wire.hpp"
#include "fixtures.hpp"

using namespace csl;
using wire::Channel;

namespace {

std::string frame(const std::string& type, const std::string& session, Json body = Json::object(),
                  std::optional<std::string> anon = {}) {
  Json j{{"v", 1}, {"type", type}, {"session", session}, {"body", std::move(body)}};
  if (anon) j["anon_id"] = *anon;
  return j.dump();
}

Json parse(const std::string& f) { return Json::parse(f); }

// "error:<code>", the type of the last reply, or "none".
std::string outcome(const wire::HandleResult& r) {
  if (r.reply.empty()) return "none";
  Json last = parse(r.reply.back());
  if (last.at("type") == "error") return "error:" + last.at("body").at("code").get<std::string>();
  return last.at("type").get<std::string>();
}

struct Client {
  wire::Gateway& gw;
  Channel ch;

  wire::HandleResult send(const std::string& f) { return gw.handle(ch, f); }
  wire::HandleResult join() { return send(frame("join", ch.session_id)); }
  wire::HandleResult submit(std::size_t stage, Json action) {
    return send(frame("stage_submit", ch.session_id, Json{{"stage", stage}, {"action", std::move(action)}}));
  }
};

}  // namespace

TEST(Envelope, EncodeDecodeRoundTrip) {
  wire::Envelope e;
  e.type = "stage_submit";
  e.session = "s1";
  e.anon_id = AnonId{"abc"};
  e.seq = 9;
  e.body = {{"stage", 2}};
  auto back = wire::decode(wire::encode(e));
  EXPECT_EQ(wire::to_json(back), wire::to_json(e));
}

TEST(Envelope, RejectsMalformedFrames) {
  for (const char* bad : {"", "not json", "[1,2]", R"({"type":"join"})", R"({"v":"1","type":"join"})",
                          R"({"v":1})", R"({"v":1,"type":""})", R"({"v":1,"type":"join","body":[]})",
                          R"({"v":1,"type":"join","seq":-1})"}) {
    try {
      wire::decode(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::bad_frame) << bad;
    }
  }
}

TEST(Envelope, VersionMismatchListsSupported) {
  fixtures::Harness h;
  auto s = h.open_session(fixtures::dyadic_experiment(1, 1), 1);
  Client c{*h.gateway, {s->meta().id, {}}};
  auto r = c.send(R"({"v":99,"type":"join","session":"s1","body":{}})");
  ASSERT_EQ(r.reply.size(), 1u);
  auto j = parse(r.reply[0]);
  EXPECT_EQ(j.at("body").at("code"), "version_mismatch");
  EXPECT_EQ(j.at("body").at("supported"), Json::array({1}));
  EXPECT_FALSE(r.close);
}

TEST(Channel, JoinGetsIntroAndBadFrameCloses) {
  fixtures::Harness h;
  auto s = h.open_session(fixtures::load_experiment("climate_game.json"), 1);
  Client c{*h.gateway, {s->meta().id, {}}};
  auto r = c.join();
  ASSERT_EQ(r.reply.size(), 1u);
  auto j = parse(r.reply[0]);
  EXPECT_EQ(j.at("type"), "stage_payload");
  EXPECT_EQ(j.at("body").at("kind"), "intro");
  EXPECT_EQ(j.at("anon_id").get<std::string>(), c.ch.anon_id->value);
  EXPECT_EQ(j.at("seq"), s->last_seq());

  auto bad = c.send("{oops");
  EXPECT_EQ(outcome(bad), "error:bad_frame");
  EXPECT_TRUE(bad.close);
}

TEST(Channel, SimultaneousDecisionGetsWait) {
  fixtures::Harness h;
  auto s = h.open_session(fixtures::dyadic_experiment(1, 1), 1);
  Client a{*h.gateway, {s->meta().id, {}}};
  Client b{*h.gateway, {s->meta().id, {}}};
  a.join();
  b.join();
  a.submit(0, {{"navigate", "continue"}});
  auto paired = b.submit(0, {{"navigate", "continue"}});
  EXPECT_EQ(outcome(paired), "game_state");
  ASSERT_EQ(paired.others.size(), 1u);
  EXPECT_EQ(paired.others[0].to, *a.ch.anon_id);

  auto r = a.submit(1, {{"decision", {{"move", "D"}}}});
  EXPECT_EQ(outcome(r), "wait");
  EXPECT_TRUE(r.others.empty());
  auto done = b.submit(1, {{"decision", {{"move", "C"}}}});
  bool a_result = false;
  for (const auto& d : done.others) {
    auto j = parse(d.frame);
    if (j.at("type") == "round_result") {
      a_result = true;
      EXPECT_EQ(j.at("body").at("outcome").at("opponent_move"), "C");
    }
  }
  EXPECT_TRUE(a_result);
}

TEST(Channel, ResumeRestoresTheSameView) {
  fixtures::Harness h;
  auto s = h.open_session(fixtures::dyadic_experiment(1, 2), 1);
  Client a{*h.gateway, {s->meta().id, {}}};
  Client b{*h.gateway, {s->meta().id, {}}};
  a.join();
  b.join();
  a.submit(0, {{"navigate", "continue"}});
  b.submit(0, {{"navigate", "continue"}});
  a.submit(1, {{"decision", {{"move", "C"}}}});
  auto before = s->current_view(*a.ch.anon_id);

  Client again{*h.gateway, {s->meta().id, {}}};
  auto r = again.send(frame("resume", s->meta().id, Json::object(), a.ch.anon_id->value));
  ASSERT_FALSE(r.reply.empty());
  auto view = parse(r.reply.back());
  EXPECT_EQ(view.at("type"), before.type);
  EXPECT_EQ(view.at("body"), before.body);
  EXPECT_EQ(view.at("body").at("your_decision"), (Json{{"move", "C"}}));

  Client stranger{*h.gateway, {s->meta().id, {}}};
  auto unknown = stranger.send(frame("resume", s->meta().id, Json::object(), std::string(32, 'f')));
  EXPECT_EQ(outcome(unknown), "error:unknown_participant");
}

// Every client message type in every session state gets a defined outcome.
TEST(Protocol, TotalityTable) {
  struct Row {
    std::string state;
    bool bound;
    std::string msg;
    std::string expected;
  };
  const std::vector<Row> table = {
      {"draft", false, "join", "error:session_closed"},
      {"draft", false, "resume", "error:unknown_participant"},
      {"draft", false, "heartbeat", "error:protocol_violation"},
      {"draft", false, "stage_submit", "error:protocol_violation"},
      {"draft", false, "dance", "error:protocol_violation"},
      {"draft", false, "v99", "error:version_mismatch"},
      {"draft", false, "garbage", "error:bad_frame"},
      {"open", false, "join", "stage_payload"},
      {"open", false, "resume", "error:unknown_participant"},
      {"open", false, "heartbeat", "error:protocol_violation"},
      {"open", false, "stage_submit", "error:protocol_violation"},
      {"open", false, "dance", "error:protocol_violation"},
      {"open", false, "v99", "error:version_mismatch"},
      {"open", false, "garbage", "error:bad_frame"},
      {"running", true, "join", "error:protocol_violation"},
      {"running", true, "resume", "stage_payload"},
      {"running", true, "heartbeat", "none"},
      {"running", true, "stage_submit", "wait"},
      {"running", true, "dance", "error:protocol_violation"},
      {"running", true, "v99", "error:version_mismatch"},
      {"running", true, "garbage", "error:bad_frame"},
      {"closed", true, "join", "error:protocol_violation"},
      {"closed", true, "resume", "stage_payload"},
      {"closed", true, "heartbeat", "none"},
      {"closed", true, "stage_submit", "error:session_closed"},
      {"closed", true, "dance", "error:protocol_violation"},
      {"closed", true, "v99", "error:version_mismatch"},
      {"closed", true, "garbage", "error:bad_frame"},
      {"closed", false, "join", "error:session_closed"},
      {"closed", false, "heartbeat", "error:protocol_violation"},
  };
  for (const auto& row : table) {
    fixtures::Harness h;
    auto def = fixtures::dyadic_experiment(1, 1);
    if (!h.registry->experiment(def.id)) h.registry->put_experiment(def);
    auto s = h.registry->create_session(def.id, Json::object(), 1);
    if (row.state != "draft") s->open();
    Client c{*h.gateway, {s->meta().id, {}}};
    if (row.bound) c.join();
    if (row.state == "closed") s->close();
    std::string sid = s->meta().id;
    std::string f;
    if (row.msg == "join") f = frame("join", sid);
    else if (row.msg == "resume") f = frame("resume", sid, Json::object(), c.ch.anon_id ? c.ch.anon_id->value : std::string(32, '0'));
    else if (row.msg == "heartbeat") f = frame("heartbeat", sid);
    else if (row.msg == "stage_submit") f = frame("stage_submit", sid, Json{{"stage", 0}, {"action", {{"navigate", "continue"}}}});
    else if (row.msg == "dance") f = frame("dance", sid);
    else if (row.msg == "v99") f = R"({"v":99,"type":"join","session":")" + sid + R"(","body":{}})";
    else f = "\x01\x02";
    auto r = c.send(f);
    EXPECT_EQ(outcome(r), row.expected) << row.state << (row.bound ? "/bound " : "/unbound ") << row.msg;
    EXPECT_EQ(r.close, row.msg == "garbage") << row.state << " " << row.msg;
  }
}

TEST(InfoHiding, GameStateNeverCarriesCoPlayerDecision) {
  fixtures::Harness h;
  auto s = h.open_session(fixtures::dyadic_experiment(1, 3), 1);
  Client a{*h.gateway, {s->meta().id, {}}};
  Client b{*h.gateway, {s->meta().id, {}}};
  a.join();
  b.join();
  a.submit(0, {{"navigate", "continue"}});
  b.submit(0, {{"navigate", "continue"}});
  for (int round = 0; round < 3; ++round) {
    auto r = a.submit(1, {{"decision", {{"move", "D"}}}});
    for (const auto& f : r.reply) EXPECT_EQ(f.find("opponent_move"), std::string::npos) << f;
    for (const auto& d : r.others) ADD_FAILURE() << "co-player was sent " << d.frame;
    auto peek = s->current_view(*b.ch.anon_id);
    EXPECT_FALSE(peek.body.contains("your_decision"));
    auto pending = peek.body;
    if (pending.contains("last_outcome") && !pending["last_outcome"].is_null()) {
      EXPECT_LT(pending["last_outcome"].at("round").get<int>(), pending.at("round").get<int>());
    }
    pending.erase("last_outcome");
    EXPECT_EQ(pending.dump().find("\"D\""), std::string::npos) << peek.body.dump();
    b.submit(1, {{"decision", {{"move", "C"}}}});
  }
}

class AdminTest : public ::testing::Test {
 protected:
  wire::HttpResponse call(const std::string& method, const std::string& target, const std::string& body = {},
                          const std::string& token = fixtures::Harness::kToken) {
    return h.gateway->admin(method, target, token, body);
  }
  fixtures::Harness h;
};

TEST_F(AdminTest, RejectsBadToken) {
  EXPECT_EQ(call("GET", "/api/sessions", {}, "nope").status, 401);
  EXPECT_EQ(call("GET", "/api/sessions", {}, "").status, 401);
}

TEST_F(AdminTest, ExperimentValidation) {
  auto def = Json(fixtures::load_experiment("dyadic.json"));
  EXPECT_EQ(call("POST", "/api/experiments", def.dump()).status, 201);
  EXPECT_EQ(call("GET", "/api/experiments/dyadic").status, 200);
  EXPECT_EQ(call("GET", "/api/experiments/none").status, 404);
  def["stages"][1]["ref"] = "missing";
  auto bad = call("POST", "/api/experiments", def.dump());
  EXPECT_EQ(bad.status, 422);
  EXPECT_EQ(Json::parse(bad.body).at("error").at("violations")[0].at("code"), "stage.unknown_game");
  EXPECT_EQ(call("POST", "/api/experiments", "{nope").status, 400);
}

TEST_F(AdminTest, SessionLifecycleAndParameters) {
  call("POST", "/api/experiments", Json(fixtures::dyadic_experiment(1, 1)).dump());
  auto created = call("POST", "/api/sessions", R"({"experiment_id":"pd-1x1","seed":4})");
  ASSERT_EQ(created.status, 201);
  std::string sid = Json::parse(created.body).at("id");
  EXPECT_EQ(call("POST", "/api/sessions/" + sid + "/open").status, 200);
  EXPECT_EQ(call("POST", "/api/sessions/" + sid + "/params", R"({"group":"control"})").status, 200);
  EXPECT_EQ(h.registry->session(sid)->meta().parameters, (Json{{"group", "control"}}));

  Client c{*h.gateway, {sid, {}}};
  c.join();
  EXPECT_EQ(call("POST", "/api/sessions/" + sid + "/params", R"({"group":"x"})").status, 409);
  auto snap = call("GET", "/api/sessions/" + sid + "/snapshot");
  EXPECT_EQ(Json::parse(snap.body).at("participants"), 1);

  auto events = call("GET", "/api/sessions/" + sid + "/export?kind=events");
  EXPECT_EQ(events.content_type, "text/csv");
  EXPECT_EQ(events_from_csv(events.body).size(), h.registry->session(sid)->last_seq());
  EXPECT_TRUE(std::filesystem::exists(h.registry->paths(sid).exports() / "events.csv"));
  EXPECT_EQ(call("GET", "/api/sessions/" + sid + "/export?kind=anonymized_bundle").status, 409);
  EXPECT_EQ(call("POST", "/api/sessions/" + sid + "/close").status, 200);
  auto bundle = call("GET", "/api/sessions/" + sid + "/export?kind=anonymized_bundle");
  EXPECT_EQ(bundle.status, 200);
  EXPECT_EQ(bundle.body.find(c.ch.anon_id->value), std::string::npos);
  EXPECT_EQ(call("GET", "/api/sessions/" + sid + "/export?kind=pdf").status, 400);
  EXPECT_EQ(call("GET", "/api/sessions/zzz").status, 404);

  std::ifstream audit(h.registry->paths(sid).audit());
  std::string line;
  int lines = 0;
  while (std::getline(audit, line)) ++lines;
  EXPECT_EQ(lines, 4);
}

TEST_F(AdminTest, PersonalErasure) {
  auto s = h.open_session(fixtures::load_experiment("climate_game.json"), 3);
  Client c{*h.gateway, {s->meta().id, {}}};
  c.join();
  c.submit(0, {{"navigate", "continue"}});
  c.submit(1, {{"answer", {{"question", "email"}, {"value", "x@example.org"}}}});
  auto target = "/api/sessions/" + s->meta().id + "/participants/" + c.ch.anon_id->value + "/personal";
  auto r = call("DELETE", target);
  EXPECT_EQ(Json::parse(r.body).at("erased"), 1);
  EXPECT_TRUE(s->personal_store()->all().empty());
  auto surveys = call("GET", "/api/sessions/" + s->meta().id + "/export?kind=surveys");
  EXPECT_EQ(surveys.body.find("x@example.org"), std::string::npos);
}

TEST(Registry, ReloadsSessionsFromDisk) {
  fixtures::TempDir dir;
  ManualClock clock(5);
  std::string sid;
  Json before;
  {
    wire::Registry reg({dir.path(), true}, clock);
    reg.put_experiment(fixtures::dyadic_experiment(1, 1));
    auto s = reg.create_session("pd-1x1", Json::object(), 3);
    s->open();
    reg.save_meta(*s);
    s->join();
    s->join();
    sid = s->meta().id;
    before = s->state_json();
  }
  wire::Registry again({dir.path(), true}, clock);
  EXPECT_TRUE(again.load_warnings().empty());
  auto s = again.session(sid);
  ASSERT_TRUE(s);
  EXPECT_EQ(s->state_json(), before);
  EXPECT_EQ(again.experiment_ids(), std::vector<std::string>{"pd-1x1"});
}

TEST(Registry, ChangingAnExperimentInUseConflicts) {
  fixtures::Harness h;
  auto def = fixtures::dyadic_experiment(1, 1);
  h.open_session(def, 1);
  EXPECT_NO_THROW(h.registry->put_experiment(def));
  def.title = "renamed";
  try {
    h.registry->put_experiment(def);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::conflict);
  }
}
