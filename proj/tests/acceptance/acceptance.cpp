// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Optional arguments select criteria by name.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fcntl.h>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "csl/analysis.hpp"
#include "csl/bots.hpp"
#include "csl/engine.hpp"
#include "csl/error.hpp"
#include "csl/net.hpp"
#include "csl/persistence.hpp"
#include "csl/serialize.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace csl;
using namespace std::chrono_literals;
namespace fs = std::filesystem;
using Clk = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double ms_since(Clk::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clk::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<bots::BotSpec> swarm(int n, const std::string& strategy, std::uint64_t base) {
  std::vector<bots::BotSpec> specs;
  for (int i = 0; i < n; ++i) specs.push_back({bots::parse_strategy(strategy), base + static_cast<std::uint64_t>(i)});
  return specs;
}

bool is_game_decision(const Session& s, const ActionEvent& e) {
  return e.kind == ActionKind::Decision && !e.synthetic && s.definition().stages.at(e.stage).kind == StageKind::Game;
}

// ---------------------------------------------------------------------------

Outcome classification() {
  auto t0 = Clk::now();
  std::size_t n = 0, disagreements = 0;
  for (Units r = -2; r <= 2; ++r)
    for (Units s = -2; s <= 2; ++s)
      for (Units t = -2; t <= 2; ++t)
        for (Units p = -2; p <= 2; ++p) {
          ++n;
          if (classify_dyadic({r, s, t, p}) != oracle::classify(r, s, t, p)) ++disagreements;
        }
  double ms = ms_since(t0);
  return {disagreements == 0 && n == 625 && ms < 1000,
          fmt("%zu matrices, %zu disagreements, %.3f ms (limit 1000 ms)", n, disagreements, ms)};
}

// ---------------------------------------------------------------------------

struct Tally {
  std::size_t sequences = 0;
  std::size_t violations = 0;
  std::string first;
  void bad(const std::string& what) {
    if (violations++ == 0) first = what;
  }
};

GameAction random_legal(const GameInstance& g, std::size_t idx, std::mt19937_64& rng) {
  auto acts = legal_actions(g, idx);
  if (acts.empty()) fail(Errc::internal_inconsistency, "no legal action for a due player");
  return acts[rng() % acts.size()];
}

std::optional<std::size_t> due_player(const GameInstance& g) {
  for (std::size_t i = 0; i < g.players.size(); ++i) {
    if (awaiting(g, i)) return i;
  }
  return std::nullopt;
}

std::vector<AnonId> seats(std::size_t n) {
  std::vector<AnonId> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(AnonId{"p" + std::to_string(i)});
  return v;
}

void trust_sequence(std::mt19937_64& rng, Tally& tally) {
  TrustGameSpec s;
  s.send_granularity = 1 + static_cast<Units>(rng() % 3);
  s.sender_endowment = s.send_granularity * static_cast<Units>(rng() % 8);
  s.receiver_endowment = static_cast<Units>(rng() % 6);
  s.multiplier = 1 + static_cast<int>(rng() % 4);
  s.rounds = 1 + static_cast<int>(rng() % 4);
  auto g = create_instance("t", GameSpec{"trust", s}, seats(2), rng());
  Units want[2] = {0, 0};
  Units total = 0;
  Units x = 0;
  std::size_t sender = 0;
  int round = 1;
  while (!g.over()) {
    auto idx = due_player(g);
    if (!idx) return tally.bad("trust: nobody due");
    auto act = random_legal(g, *idx, rng);
    if (auto* send = std::get_if<TrustSend>(&act)) {
      x = send->amount;
      sender = *idx;
      if (sender != static_cast<std::size_t>((round - 1) % 2)) tally.bad("trust: roles did not alternate");
    } else if (auto* ret = std::get_if<TrustReturn>(&act)) {
      Units y = ret->amount;
      want[sender] += s.sender_endowment - x + y;
      want[1 - sender] += s.receiver_endowment + s.multiplier * x - y;
      total += s.sender_endowment + s.receiver_endowment + (s.multiplier - 1) * x;
      ++round;
    }
    AnonId who = g.players[*idx].anon_id;
    g = advance(std::move(g), who, act).instance;
  }
  if (round != s.rounds + 1) tally.bad("trust: wrong number of rounds");
  if (g.players[0].balance != want[0] || g.players[1].balance != want[1]) tally.bad("trust: per-player payoff");
  if (g.players[0].balance + g.players[1].balance != total) tally.bad("trust: total");
}

void dictator_sequence(std::mt19937_64& rng, Tally& tally) {
  DictatorGameSpec s;
  s.endowment = static_cast<Units>(rng() % 21);
  bool observer = rng() & 1;
  if (observer) s.third_party = ThirdPartySpec{static_cast<Units>(rng() % 11), 1 + static_cast<int>(rng() % 4)};
  auto g = create_instance("d", GameSpec{"dict", s}, seats(observer ? 3 : 2), rng());
  Units o = 0, c = 0;
  while (!g.over()) {
    auto idx = due_player(g);
    if (!idx) return tally.bad("dictator: nobody due");
    auto act = random_legal(g, *idx, rng);
    if (auto* offer = std::get_if<DictatorOffer>(&act)) o = offer->amount;
    if (auto* punish = std::get_if<DictatorPunish>(&act)) c = punish->amount;
    AnonId who = g.players[*idx].anon_id;
    g = advance(std::move(g), who, act).instance;
  }
  Units sum = 0;
  for (const auto& p : g.players) sum += p.balance;
  Units e = s.endowment;
  if (!observer) {
    if (sum != e || g.players[1].balance != o || g.players[0].balance != e - o) tally.bad("dictator: total without observer");
    return;
  }
  Units e3 = s.third_party->observer_endowment;
  Units k = s.third_party->punishment_ratio;
  if (sum != e + e3 - c - std::min(k * c, e - o)) tally.bad("dictator: total with observer");
  if (g.players[0].balance != std::max<Units>(0, e - o - k * c) || g.players[1].balance != o ||
      g.players[2].balance != e3 - c) {
    tally.bad("dictator: per-player payoff");
  }
}

void crd_sequence(std::mt19937_64& rng, Tally& tally) {
  CollectiveRiskSpec s;
  s.group_size = 2 + static_cast<int>(rng() % 5);
  s.rounds = 1 + static_cast<int>(rng() % 10);
  s.endowments.clear();
  for (int i = 0; i < s.group_size; ++i) s.endowments.push_back(static_cast<Units>(rng() % 41));
  s.allowed_contributions = {0};
  for (Units a = 1; a <= 6; ++a) {
    if (rng() & 1) s.allowed_contributions.push_back(a);
  }
  s.target = 1 + static_cast<Units>(rng() % 120);
  s.risk = static_cast<double>(rng() % 11) / 10;
  auto n = static_cast<std::size_t>(s.group_size);
  auto g = create_instance("c", GameSpec{"crd", s}, seats(n), rng());
  std::vector<Units> given(n, 0);
  while (!g.over()) {
    auto idx = due_player(g);
    if (!idx) return tally.bad("crd: nobody due");
    auto act = random_legal(g, *idx, rng);
    given[*idx] += std::get<Contribution>(act).amount;
    AnonId who = g.players[*idx].anon_id;
    g = advance(std::move(g), who, act).instance;
    Units sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sum += given[i];
      if (g.players[i].balance < 0) tally.bad("crd: negative balance");
    }
    if (g.pot > sum) tally.bad("crd: pot exceeds contributions");
    if (g.over()) break;
    // Balances are reduced when a round resolves, so compare at round boundaries.
    if (g.phase == Phase::AwaitingBoth) {
      if (g.pot != sum) tally.bad("crd: contributions do not sum to the pot");
      for (std::size_t i = 0; i < n; ++i) {
        if (g.players[i].balance != s.endowments[i] - given[i]) tally.bad("crd: balance is not endowment minus contributions");
      }
    }
  }
  Units sum = 0;
  for (Units v : given) sum += v;
  if (sum != g.pot) tally.bad("crd: contributions do not sum to the final pot");
  if (!g.crd_outcome) return tally.bad("crd: no outcome");
  if ((g.pot >= s.target) != (*g.crd_outcome == CrdOutcome::GoalReached)) tally.bad("crd: goal outcome");
  if ((s.risk == 0 && *g.crd_outcome == CrdOutcome::Catastrophe) ||
      (s.risk == 1 && *g.crd_outcome == CrdOutcome::Spared)) {
    tally.bad("crd: risk bounds");
  }
  for (std::size_t i = 0; i < n; ++i) {
    Units kept = *g.crd_outcome == CrdOutcome::Catastrophe ? 0 : s.endowments[i] - given[i];
    if (g.players[i].balance != kept) tally.bad("crd: final payoff");
  }
}

Outcome conservation() {
  auto t0 = Clk::now();
  std::mt19937_64 rng(20240601);
  Tally tally;
  for (int i = 0; i < 10'000; ++i) {
    switch (i % 3) {
      case 0: trust_sequence(rng, tally); break;
      case 1: dictator_sequence(rng, tally); break;
      default: crd_sequence(rng, tally); break;
    }
    ++tally.sequences;
  }
  double ms = ms_since(t0);
  return {tally.violations == 0 && ms < 5000,
          fmt("%zu sequences (trust/dictator/crd), %zu violations%s%s, %.0f ms (limit 5000 ms)", tally.sequences,
              tally.violations, tally.first.empty() ? "" : ", first: ", tally.first.c_str(), ms)};
}

// ---------------------------------------------------------------------------

Outcome replay_fixpoint() {
  struct Family {
    const char* file;
    int bots;
  };
  const Family families[] = {{"climate_game.json", 12}, {"mental_health.json", 12}, {"dyadic.json", 6}, {"market.json", 4}};
  std::size_t equal = 0, with_disconnects = 0, disconnects = 0, events = 0;
  std::string first_mismatch;
  for (int i = 0; i < 100; ++i) {
    const Family& f = families[i % 4];
    fixtures::Harness h;
    auto s = h.open_session(fixtures::load_experiment(f.file), 1000 + static_cast<std::uint64_t>(i));
    bots::LoopbackOptions opt;
    opt.seed = 77 + static_cast<std::uint64_t>(i);
    opt.drop_probability = 0.15 + 0.05 * (i % 3);
    const char* strategies[] = {"random", "cooperate", "defect"};
    bots::run_loopback(*h.gateway, h.clock, s->meta().id, swarm(f.bots, strategies[i % 3], 500 + 31 * i), opt);
    auto log = s->events();
    events += log.size();
    std::size_t dropped = 0;
    for (const auto& e : log) {
      if (e.kind == ActionKind::ConnectionChange && e.payload.value("state", "") == "disconnected") ++dropped;
    }
    disconnects += dropped;
    with_disconnects += dropped > 0;
    wire::Registry reloaded({h.dir.path(), true}, h.clock);
    auto again = reloaded.session(s->meta().id);
    if (again && again->state_json().dump() == s->state_json().dump()) {
      ++equal;
    } else if (first_mismatch.empty()) {
      first_mismatch = " first mismatch: " + std::string(f.file) + " seed " + std::to_string(1000 + i);
    }
  }
  return {equal == 100 && with_disconnects == 100,
          fmt("%zu/100 replays byte-identical, %zu/100 sessions with injected disconnects (%zu total), %zu events%s",
              equal, with_disconnects, disconnects, events, first_mismatch.c_str())};
}

// ---------------------------------------------------------------------------

Outcome decision_counts() {
  fixtures::Harness h;
  auto climate = fixtures::load_experiment("climate_game.json");
  const auto& crd = std::get<CollectiveRiskSpec>(climate.games.at("crd").rules);
  auto s = h.open_session(climate, 42);
  auto report = bots::run_loopback(*h.gateway, h.clock, s->meta().id, swarm(30, "random", 1));
  std::size_t climate_total = 0;
  std::map<AnonId, std::size_t> per;
  for (const auto& e : s->events()) {
    if (is_game_decision(*s, e)) ++climate_total, ++per[e.anon_id];
  }
  bool climate_ok = report.completed == 30 && climate_total == 300 && per.size() == 30 && crd.group_size == 6 &&
                    crd.rounds == 10;
  for (const auto& [who, n] : per) climate_ok = climate_ok && n == 10;

  fixtures::Harness h2;
  auto s2 = h2.open_session(fixtures::load_experiment("mental_health.json"), 43);
  auto report2 = bots::run_loopback(*h2.gateway, h2.clock, s2->meta().id, swarm(12, "random", 100));
  std::map<AnonId, std::size_t> per2;
  for (const auto& e : s2->events()) {
    if (is_game_decision(*s2, e)) ++per2[e.anon_id];
  }
  std::size_t mh_total = 0;
  bool mh_ok = report2.completed == 12 && per2.size() == 12;
  for (const auto& [who, n] : per2) mh_total += n, mh_ok = mh_ok && n == 14;
  return {climate_ok && mh_ok,
          fmt("climate: %zu valid decisions from 30 bots, G=%d, %d rounds (want 300, 10 each); mental health: %zu "
              "decisions from %zu participants, %.2f each (want 14)",
              climate_total, crd.group_size, crd.rounds, mh_total, per2.size(),
              per2.empty() ? 0.0 : static_cast<double>(mh_total) / static_cast<double>(per2.size()))};
}

// ---------------------------------------------------------------------------

std::string run_capture(const std::string& command, int& status) {
  std::string out;
  FILE* pipe = ::popen(command.c_str(), "r");
  if (pipe == nullptr) {
    status = -1;
    return out;
  }
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  status = ::pclose(pipe);
  return out;
}

struct CliTable {
  double p = -1;
  std::size_t total = 0;
  std::string error;
};

CliTable analyze_via_cli(const std::string& subcommand, const fs::path& csv, const std::string& row,
                         const std::string& col) {
  int status = 0;
  std::string out = run_capture(std::string(CSL_ANALYZE_EXE) + " " + subcommand + " --events '" + csv.string() +
                                    "' --format json",
                                status);
  CliTable t;
  if (status != 0) {
    t.error = "csl-analyze exited with " + std::to_string(status);
    return t;
  }
  Json j = Json::parse(out, nullptr, false);
  if (j.is_discarded()) {
    t.error = "unparseable csl-analyze output";
    return t;
  }
  t.total = j.at("total").get<std::size_t>();
  for (const auto& r : j.at("rows")) {
    if (r.at("given") == row) t.p = r.at(col).get<double>();
  }
  return t;
}

Outcome strategy_recovery() {
  fixtures::TempDir out;
  struct Case {
    const char* strategy;
    const char* subcommand;
    const char* row;
    const char* col;
    double want;
  };
  const Case cases[] = {{"imitation:0.71,0.53", "imitation", "up", "up", 0.71},
                        {"wsls:0.68,0.58", "wsls", "win", "stay", 0.68}};
  bool pass = true;
  std::string detail;
  std::uint64_t seed = 901;
  for (const auto& c : cases) {
    fixtures::Harness h;
    auto s = h.open_session(fixtures::market_experiment(200, seed, 60), seed);
    auto report = bots::run_loopback(*h.gateway, h.clock, s->meta().id, swarm(60, c.strategy, seed * 100));
    ++seed;
    fs::path csv = out.path() / (std::string(c.subcommand) + ".csv");
    write_file_atomic(csv, events_to_csv(s->events()));
    auto t = analyze_via_cli(c.subcommand, csv, c.row, c.col);
    bool ok = t.error.empty() && report.completed == 60 && t.total >= 10'000 && std::abs(t.p - c.want) <= 0.02;
    pass = pass && ok;
    if (!detail.empty()) detail += "; ";
    detail += t.error.empty() ? fmt("%s %s|%s = %.4f over %zu conditioned decisions (want %.2f +/- 0.02)", c.subcommand,
                                    c.col, c.row, t.p, t.total, c.want)
                              : std::string(c.subcommand) + ": " + t.error;
  }
  return {pass, detail + " via csl-analyze on exported CSV"};
}

// ---------------------------------------------------------------------------

Outcome significance() {
  std::mt19937_64 rng(4242);
  std::size_t binom_checked = 0, binom_bad = 0;
  for (int i = 0; i < 200'000; ++i) {
    std::int64_t n1 = 1 + static_cast<std::int64_t>(rng() % 500);
    std::int64_t n2 = 1 + static_cast<std::int64_t>(rng() % 500);
    std::int64_t k1 = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n1 + 1));
    std::int64_t k2 = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n2 + 1));
    if (k1 + k2 == 0 || k1 + k2 == n1 + n2) continue;
    auto d = analysis::binomial_diff(static_cast<double>(k1) / static_cast<double>(n1), static_cast<std::size_t>(n1),
                                     static_cast<double>(k2) / static_cast<double>(n2), static_cast<std::size_t>(n2));
    ++binom_checked;
    if (d.significant != oracle::binomial_exceeds(k1, n1, k2, n2)) ++binom_bad;
  }
  double worst_h = 0, worst_p = 0;
  for (int instance = 0; instance < 1000; ++instance) {
    std::size_t k = 2 + rng() % 4;
    std::vector<std::vector<double>> groups(k);
    for (auto& g : groups) {
      std::size_t n = 1 + rng() % 15;
      for (std::size_t i = 0; i < n; ++i) {
        g.push_back(instance % 2 ? static_cast<double>(rng() % 7)
                                 : std::uniform_real_distribution<double>(0, 100)(rng));
      }
    }
    auto want = oracle::kruskal_wallis(groups);
    auto got = analysis::kruskal_wallis(groups);
    worst_h = std::max(worst_h, std::abs(got.h - want.h));
    worst_p = std::max(worst_p, std::abs(got.p - want.p));
  }
  auto flat = analysis::kruskal_wallis({{4, 4, 4}, {4, 4}, {4, 4, 4, 4}});
  bool pass = binom_bad == 0 && binom_checked > 100'000 && worst_h <= 1e-9 && worst_p <= 1e-9 && flat.h == 0 &&
              flat.p == 1;
  return {pass, fmt("binomial: %zu/%zu disagree with exact threshold; kruskal-wallis: max |dH| %.2e, max |dp| %.2e over "
                    "1000 instances (tol 1e-9); all-equal H=%g p=%g",
                    binom_bad, binom_checked, worst_h, worst_p, flat.h, flat.p)};
}

// ---------------------------------------------------------------------------

Outcome satisfaction() {
  // Per-game counts for very positive, positive, neutral,
  // negative and very negative; empty cells are zero.
  const std::size_t counts[3][5] = {{0, 125, 91, 18, 0}, {245, 217, 0, 49, 13}, {204, 184, 0, 25, 7}};
  const char* labels[5] = {"Very Positive", "Positive", "Neutral", "Negative", "Very Negative"};
  std::vector<ActionEvent> events;
  std::uint64_t seq = 0;
  for (const auto& game : counts) {
    for (std::size_t b = 0; b < 5; ++b) {
      for (std::size_t i = 0; i < game[b]; ++i) {
        ActionEvent e;
        e.seq = ++seq;
        e.anon_id = AnonId{"r" + std::to_string(seq)};
        e.kind = ActionKind::SurveyAnswer;
        e.payload = {{"survey", "feedback"}, {"question", "satisfaction"}, {"value", labels[b]}};
        events.push_back(e);
      }
    }
  }
  // Through the survey export, as a session would be analyzed.
  auto rows = surveys_from_csv(surveys_to_csv(events));
  auto s = analysis::summarize({}, rows);
  double pct = std::round(s.satisfaction.positive_share() * 10000) / 100;
  return {s.satisfaction.total() == 1178 && pct == 82.77,
          fmt("%zu responses, %.2f%% positive (want 82.77%%), %.2f%% negative, %.2f%% neutral", s.satisfaction.total(),
              pct, s.satisfaction.negative_share() * 100, s.satisfaction.share(2) * 100)};
}

// ---------------------------------------------------------------------------

bool has_move_value(const Json& j) {
  if (j.is_string()) return j == "C" || j == "D";
  if (j.is_array() || j.is_object()) {
    for (const auto& v : j) {
      if (has_move_value(v)) return true;
    }
  }
  return false;
}

// A payload for the round in body["round"] may show the player's own pending
// move and earlier outcomes, nothing else that names a move.
bool leaky(Json body) {
  int round = body.at("round");
  if (body.contains("last_outcome") && !body["last_outcome"].is_null() &&
      body["last_outcome"].at("round").get<int>() >= round) {
    return true;
  }
  body.erase("last_outcome");
  body.erase("your_decision");
  return has_move_value(body);
}

Outcome information_hiding() {
  // The inspector itself must catch planted leaks.
  bool inspector_ok = leaky({{"instance", "g"}, {"round", 2}, {"last_outcome", nullptr}, {"opponent", {{"move", "D"}}}}) &&
                      leaky({{"instance", "g"}, {"round", 2}, {"last_outcome", {{"round", 2}, {"opponent_move", "C"}}}}) &&
                      !leaky({{"instance", "g"}, {"round", 2}, {"your_decision", {{"move", "C"}}},
                              {"last_outcome", {{"round", 1}, {"opponent_move", "D"}}}});

  constexpr int kGames = 1000;
  constexpr int kRounds = 10;
  fixtures::Harness h;
  auto def = fixtures::dyadic_experiment(1, kRounds);
  def.capacity = 2 * kGames;
  auto s = h.open_session(def, 5);
  std::vector<std::pair<AnonId, std::string>> frames;
  bots::LoopbackOptions opt;
  opt.think_min_ms = 1000;
  opt.think_max_ms = 2000;
  // Reconnects make the server re-send the pending round after the
  // co-player may already have decided.
  opt.drop_probability = 0.05;
  opt.drop_min_ms = 3000;
  opt.drop_max_ms = 6000;
  opt.tap = [&](const AnonId& to, std::string_view f) { frames.emplace_back(to, std::string(f)); };
  auto report = bots::run_loopback(*h.gateway, h.clock, s->meta().id, swarm(2 * kGames, "random", 1), opt);

  // Who played what, when, from the log.
  struct Seen {
    std::string move;
    std::uint64_t seq = 0;
  };
  std::map<std::tuple<std::string, int, AnonId>, Seen> decided;
  std::map<std::string, std::set<AnonId>> members;
  std::map<std::string, std::pair<Millis, Millis>> span;
  for (const auto& e : s->events()) {
    if (!e.game_instance_id) continue;
    auto [it, fresh] = span.emplace(*e.game_instance_id, std::make_pair(e.server_ts, e.server_ts));
    it->second.second = e.server_ts;
    if (e.kind != ActionKind::Decision) continue;
    members[*e.game_instance_id].insert(e.anon_id);
    decided[{*e.game_instance_id, *e.round, e.anon_id}] = {e.payload.at("action").at("move"), e.seq};
  }
  // Largest number of games running at one instant.
  std::vector<std::pair<Millis, int>> edges;
  for (const auto& [id, sp] : span) edges.push_back({sp.first, 1}), edges.push_back({sp.second + 1, -1});
  std::sort(edges.begin(), edges.end());
  int running = 0, peak = 0;
  for (const auto& [t, d] : edges) peak = std::max(peak, running += d);

  std::size_t checked = 0, armed = 0, leaks = 0;
  std::string first_leak;
  for (const auto& [to, text] : frames) {
    Json env = Json::parse(text);
    if (env.at("type") == "round_result") continue;
    Json body = env.at("body");
    if (!body.contains("instance") || !body.contains("round")) continue;
    std::string game = body.at("instance");
    int round = body.at("round");
    auto mem = members.find(game);
    if (mem == members.end()) continue;
    std::optional<AnonId> co;
    for (const auto& m : mem->second) {
      if (m != to) co = m;
    }
    ++checked;
    bool leak = leaky(body);
    if (co) {
      auto d = decided.find({game, round, *co});
      if (d != decided.end() && env.value("seq", std::uint64_t{0}) >= d->second.seq) ++armed;
    }
    if (leak) {
      ++leaks;
      if (first_leak.empty()) first_leak = " first: " + text;
    }
  }
  bool pass = inspector_ok && leaks == 0 && peak >= kGames && members.size() == static_cast<std::size_t>(kGames) && armed > 0 &&
              report.completed == static_cast<std::size_t>(2 * kGames);
  return {pass, fmt("%zu games (peak %d simultaneous), %zu pre-resolution payloads inspected, %zu sent after the "
                    "co-player had decided, %zu leaks%s%s",
                    members.size(), peak, checked, armed, leaks, first_leak.substr(0, 300).c_str(),
              inspector_ok ? "" : "; inspector missed a planted leak")};
}

// ---------------------------------------------------------------------------

unsigned short free_port() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  return ntohs(addr.sin_port);
}

class ServerProcess {
 public:
  ServerProcess(fs::path data_dir, unsigned short port, fs::path log)
      : data_dir_(std::move(data_dir)), port_(port), log_(std::move(log)) {}
  ~ServerProcess() { kill(); }

  bool start() {
    pid_ = ::fork();
    if (pid_ == 0) {
      int fd = ::open(log_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
      ::dup2(fd, 1);
      ::dup2(fd, 2);
      ::setenv("CSL_ADMIN_TOKEN", fixtures::Harness::kToken, 1);
      std::string bind = "127.0.0.1:" + std::to_string(port_);
      std::string dir = data_dir_.string();
      ::execl(CSL_SERVER_EXE, CSL_SERVER_EXE, "--bind", bind.c_str(), "--data-dir", dir.c_str(), "--deterministic",
              "--tick-ms", "100", static_cast<char*>(nullptr));
      ::_exit(127);
    }
    auto deadline = Clk::now() + 10s;
    while (Clk::now() < deadline) {
      try {
        if (net::http_request(endpoint(), "GET", "/healthz", {}, {}, 500ms).status == 200) return true;
      } catch (const std::exception&) {
      }
      std::this_thread::sleep_for(20ms);
    }
    return false;
  }

  void kill() {
    if (pid_ <= 0) return;
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, nullptr, 0);
    pid_ = -1;
  }

  net::Endpoint endpoint() const { return {"127.0.0.1", port_}; }

 private:
  fs::path data_dir_;
  unsigned short port_;
  fs::path log_;
  pid_t pid_ = -1;
};

// A bot on a real channel that reconnects and resumes whenever the server
// goes away, and remembers the highest sequence number it was sent.
struct RemoteBot {
  RemoteBot(std::string session, bots::BotSpec spec) : bot(std::move(session), spec.strategy, spec.seed) {}

  void run(const net::Endpoint& ep, std::atomic<std::uint64_t>& acked, std::chrono::milliseconds pace) {
    bool first = true;
    while (!bot.finished() && !stop.load()) {
      try {
        net::WsClient ws;
        ws.connect(ep, "/ws/" + bot.session_id(), 1s);
        ws.send(first ? bot.join_frame() : bot.resume_frame());
        ++connects;
        while (!bot.finished() && !stop.load()) {
          auto f = ws.receive(200ms);
          if (!f) continue;
          Json env = Json::parse(*f, nullptr, false);
          if (env.is_object() && env.contains("seq")) {
            auto seq = env["seq"].get<std::uint64_t>();
            auto cur = acked.load();
            while (seq > cur && !acked.compare_exchange_weak(cur, seq)) {
            }
          }
          for (const auto& reply : bot.on_frame(*f)) {
            if (pace.count() > 0) std::this_thread::sleep_for(pace);
            ws.send(reply);
          }
          if (first && bot.anon_id()) {
            first = false;
            joined.store(true);
          }
        }
      } catch (const std::exception&) {
        std::this_thread::sleep_for(30ms);
      }
    }
    done.store(bot.finished());
  }

  bots::Bot bot;
  std::atomic<bool> joined{false};
  std::atomic<bool> stop{false};
  std::atomic<bool> done{false};
  std::size_t connects = 0;
};

struct RemoteSession {
  std::string id;
  std::size_t expected_decisions = 0;  // per participant
  std::vector<std::unique_ptr<RemoteBot>> bots;
  std::vector<std::thread> threads;
  std::atomic<std::uint64_t> acked{0};
};

std::optional<std::vector<ActionEvent>> export_events(const net::Endpoint& ep, const std::string& id) {
  try {
    auto r = net::http_request(ep, "GET", "/api/sessions/" + id + "/export?kind=events", {}, fixtures::Harness::kToken);
    if (r.status != 200) return std::nullopt;
    return events_from_csv(r.body);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

Outcome robustness() {
  constexpr int kKills = 20;
  fixtures::TempDir dir;
  unsigned short port = free_port();
  ServerProcess server(dir.path() / "data", port, dir.path() / "server.log");
  if (!server.start()) return {false, "csl-server did not come up"};
  auto ep = server.endpoint();
  auto admin = [&](const std::string& method, const std::string& target, const std::string& body = {}) {
    return net::http_request(ep, method, target, body, fixtures::Harness::kToken);
  };

  struct Plan {
    ExperimentDefinition def;
    int bots;
    const char* strategy;
    std::size_t decisions;
  };
  std::vector<Plan> plans{{fixtures::market_experiment(400, 31, 8), 8, "imitation:0.7,0.5", 400},
                          {fixtures::dyadic_experiment(3, 80), 8, "random", 240}};
  std::vector<std::unique_ptr<RemoteSession>> sessions;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    auto& p = plans[i];
    p.def.capacity = p.bots;
    if (admin("POST", "/api/experiments", Json(p.def).dump()).status != 201) return {false, "experiment rejected"};
    std::string id = "rs" + std::to_string(i);
    if (admin("POST", "/api/sessions", Json{{"experiment_id", p.def.id}, {"id", id}}.dump()).status != 201 ||
        admin("POST", "/api/sessions/" + id + "/open").status != 200) {
      return {false, "could not open session " + id};
    }
    auto rs = std::make_unique<RemoteSession>();
    rs->id = id;
    rs->expected_decisions = p.decisions;
    for (int b = 0; b < p.bots; ++b) {
      rs->bots.push_back(std::make_unique<RemoteBot>(
          id, bots::BotSpec{bots::parse_strategy(p.strategy), 7000 + 100 * i + static_cast<std::uint64_t>(b)}));
    }
    sessions.push_back(std::move(rs));
  }
  for (auto& rs : sessions) {
    for (auto& b : rs->bots) {
      RemoteBot* bot = b.get();
      RemoteSession* owner = rs.get();
      rs->threads.emplace_back([bot, owner, ep] { bot->run(ep, owner->acked, 15ms); });
    }
  }
  // Kills start once every participant exists on the server.
  auto join_deadline = Clk::now() + 20s;
  auto all_joined = [&] {
    for (auto& rs : sessions)
      for (auto& b : rs->bots)
        if (!b->joined.load()) return false;
    return true;
  };
  while (!all_joined() && Clk::now() < join_deadline) std::this_thread::sleep_for(20ms);

  std::mt19937_64 rng(99);
  std::size_t kills = 0, kills_mid_session = 0, lost = 0, prefix_changes = 0, gaps = 0, restart_failures = 0;
  std::string first_problem;
  auto problem = [&](const std::string& what) {
    if (first_problem.empty()) first_problem = what;
  };
  auto verify = [&](const std::string& id, const std::vector<ActionEvent>& before, std::uint64_t acked) {
    auto after = export_events(ep, id);
    if (!after) {
      ++restart_failures;
      problem(id + ": export failed after restart");
      return;
    }
    for (std::size_t k = 0; k < after->size(); ++k) {
      if ((*after)[k].seq != k + 1) {
        ++gaps;
        problem(id + ": log is not dense");
        break;
      }
    }
    if (after->size() < acked) {
      ++lost;
      problem(fmt("%s: %zu events after restart but seq %llu was acknowledged", id.c_str(), after->size(),
                  static_cast<unsigned long long>(acked)));
    }
    if (after->size() < before.size() || !std::equal(before.begin(), before.end(), after->begin())) {
      ++prefix_changes;
      problem(id + ": previously exported events changed");
    }
  };

  for (int k = 0; k < kKills; ++k) {
    std::this_thread::sleep_for(std::chrono::milliseconds(150 + rng() % 250));
    std::vector<std::vector<ActionEvent>> before;
    for (auto& rs : sessions) before.push_back(export_events(ep, rs->id).value_or(std::vector<ActionEvent>{}));
    std::this_thread::sleep_for(std::chrono::milliseconds(rng() % 60));
    bool unfinished = false;
    for (auto& rs : sessions)
      for (auto& b : rs->bots) unfinished = unfinished || !b->done.load();
    server.kill();
    ++kills;
    kills_mid_session += unfinished;
    // Frames already in flight count as acknowledged too.
    std::this_thread::sleep_for(100ms);
    std::vector<std::uint64_t> acked;
    for (auto& rs : sessions) acked.push_back(rs->acked.load());
    if (!server.start()) {
      ++restart_failures;
      problem("restart failed");
      break;
    }
    for (std::size_t i = 0; i < sessions.size(); ++i) verify(sessions[i]->id, before[i], acked[i]);
  }

  auto finish_deadline = Clk::now() + 120s;
  auto all_done = [&] {
    for (auto& rs : sessions)
      for (auto& b : rs->bots)
        if (!b->done.load()) return false;
    return true;
  };
  while (!all_done() && Clk::now() < finish_deadline) std::this_thread::sleep_for(50ms);
  std::size_t finished = 0, total_bots = 0, wrong_counts = 0;
  for (auto& rs : sessions) {
    for (auto& b : rs->bots) b->stop.store(true);
    for (auto& t : rs->threads) t.join();
    for (auto& b : rs->bots) finished += b->bot.finished(), ++total_bots;
    auto events = export_events(ep, rs->id);
    if (!events) {
      ++restart_failures;
      continue;
    }
    verify(rs->id, {}, rs->acked.load());
    std::map<AnonId, std::size_t> per;
    for (const auto& e : *events) {
      if (e.kind == ActionKind::Decision && !e.synthetic) ++per[e.anon_id];
    }
    for (const auto& b : rs->bots) {
      if (!b->bot.anon_id() || per[*b->bot.anon_id()] != rs->expected_decisions) ++wrong_counts;
    }
  }
  bool pass = kills == kKills && kills_mid_session == kKills && lost == 0 && prefix_changes == 0 && gaps == 0 &&
              restart_failures == 0 && finished == total_bots && wrong_counts == 0;
  return {pass, fmt("%zu SIGKILL restarts (%zu mid-session), %zu lost acknowledged events, %zu altered prefixes, %zu "
                    "gaps, %zu/%zu participants resumed to the end, %zu with wrong decision counts%s%s",
                    kills, kills_mid_session, lost, prefix_changes, gaps, finished, total_bots, wrong_counts,
                    first_problem.empty() ? "" : "; ", first_problem.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGPIPE, SIG_IGN);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"classification", classification},
      {"conservation", conservation},
      {"replay-fixpoint", replay_fixpoint},
      {"decision-counts", decision_counts},
      {"strategy-recovery", strategy_recovery},
      {"significance", significance},
      {"satisfaction", satisfaction},
      {"information-hiding", information_hiding},
      {"robustness", robustness},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && !only.contains(name)) continue;
    Outcome o;
    auto t0 = Clk::now();
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << static_cast<long>(ms_since(t0))
              << " ms]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
