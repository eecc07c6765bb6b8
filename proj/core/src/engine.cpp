#include "csl/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "csl/error.hpp"
#include "csl/rng.hpp"

namespace csl {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string units(Units u) { return std::to_string(u); }

std::size_t trust_sender(const GameInstance& g) { return static_cast<std::size_t>((g.round - 1) % 2); }

std::size_t require_member(const GameInstance& g, const AnonId& player) {
  auto idx = g.index_of(player);
  if (!idx) fail(Errc::unknown_player, "player is not a member of game " + g.id);
  return *idx;
}

void require_live(const GameInstance& g) {
  if (g.over()) fail(Errc::protocol_violation, "game " + g.id + " is over");
}

template <typename Spec>
const Spec& rules_as(const GameInstance& g) {
  const Spec* spec = std::get_if<Spec>(&g.spec.rules);
  if (spec == nullptr) fail(Errc::protocol_violation, "action does not belong to a " + std::string(to_string(g.family())) + " game");
  return *spec;
}

Json spec_public_view(const GameSpec& spec) {
  return std::visit(
      overloaded{
          [](const DyadicGameSpec& s) {
            return Json{{"reward", s.matrix.reward},
                        {"sucker", s.matrix.sucker},
                        {"temptation", s.matrix.temptation},
                        {"punishment", s.matrix.punishment}};
          },
          [](const TrustGameSpec& s) {
            return Json{{"sender_endowment", s.sender_endowment},
                        {"receiver_endowment", s.receiver_endowment},
                        {"multiplier", s.multiplier},
                        {"send_granularity", s.send_granularity}};
          },
          [](const DictatorGameSpec& s) {
            Json j{{"endowment", s.endowment}};
            if (s.third_party) {
              j["observer_endowment"] = s.third_party->observer_endowment;
              j["punishment_ratio"] = s.third_party->punishment_ratio;
            }
            return j;
          },
          [](const CollectiveRiskSpec& s) {
            return Json{{"group_size", s.group_size},
                        {"target", s.target},
                        {"risk", s.risk},
                        {"allowed_contributions", s.allowed_contributions}};
          },
          [](const MarketGameSpec& s) {
            Json panels = Json::array();
            for (const auto& p : s.info_panels) panels.push_back({{"id", p.id}, {"cost", p.cost}});
            return Json{{"reward_correct", s.reward_correct}, {"info_panels", panels}};
          },
      },
      spec.rules);
}

Json round_result_body(const GameInstance& g, std::size_t idx, bool final) {
  Json body{{"instance", g.id},
            {"round", g.players[idx].last_outcome.value("round", g.round)},
            {"outcome", g.players[idx].last_outcome},
            {"balance", g.players[idx].balance},
            {"final", final}};
  if (g.crd_outcome) body["crd_outcome"] = to_string(*g.crd_outcome);
  return body;
}

Json wait_body(const GameInstance& g, std::string_view reason) {
  return Json{{"instance", g.id}, {"round", g.round}, {"reason", reason}};
}

// After a round resolves: result to everyone, then the next round's state
// unless the game just finished.
void announce_resolution(const GameInstance& g, std::vector<Notification>& out) {
  for (std::size_t i = 0; i < g.players.size(); ++i) {
    out.push_back({g.players[i].anon_id, NoticeKind::RoundResult, round_result_body(g, i, g.over())});
  }
  if (!g.over()) {
    for (const auto& p : g.players) out.push_back({p.anon_id, NoticeKind::GameState, player_view(g, p.anon_id)});
  }
}

void next_round_or_finish(GameInstance& g) {
  if (g.round < g.spec.rounds()) {
    ++g.round;
    g.phase = Phase::AwaitingBoth;
  } else {
    g.phase = Phase::Finished;
  }
}

void start_trust_round(GameInstance& g) {
  const auto& spec = std::get<TrustGameSpec>(g.spec.rules);
  std::size_t sender = trust_sender(g);
  g.players[sender].balance += spec.sender_endowment;
  g.players[1 - sender].balance += spec.receiver_endowment;
  g.first_move = 0;
}

void check_trust_send(const TrustGameSpec& spec, Units sent) {
  if (sent < 0 || sent > spec.sender_endowment) {
    fail(Errc::invalid_action, "sent amount " + units(sent) + " outside [0, " + units(spec.sender_endowment) + "]");
  }
  if (spec.send_granularity > 0 && sent % spec.send_granularity != 0) {
    fail(Errc::invalid_action, "sent amount " + units(sent) + " is not a multiple of " + units(spec.send_granularity));
  }
}

void check_trust_return(const TrustGameSpec& spec, Units sent, Units returned) {
  Units available = spec.multiplier * sent;
  if (returned < 0 || returned > available) {
    fail(Errc::invalid_action, "returned amount " + units(returned) + " outside [0, " + units(available) + "]");
  }
}

AdvanceResult advance_dyadic(GameInstance g, std::size_t idx, const DyadicChoice& choice) {
  const auto& spec = rules_as<DyadicGameSpec>(g);
  AdvanceResult r;
  if (g.players[idx].pending) fail(Errc::duplicate_action, "decision already submitted for round " + std::to_string(g.round));
  g.players[idx].pending = choice;
  ++g.decisions;
  if (!g.players[1 - idx].pending) {
    g.phase = Phase::AwaitingSecond;
    r.notifications.push_back({g.players[idx].anon_id, NoticeKind::Wait, wait_body(g, "co_player")});
    r.instance = std::move(g);
    return r;
  }
  Move a = std::get<DyadicChoice>(*g.players[0].pending).move;
  Move b = std::get<DyadicChoice>(*g.players[1].pending).move;
  auto [pa, pb] = dyadic_payoff(spec.matrix, a, b);
  g.players[0].balance += pa;
  g.players[1].balance += pb;
  g.players[0].last_outcome = {{"round", g.round}, {"you", to_string(a)}, {"opponent_move", to_string(b)}, {"payoff", pa}};
  g.players[1].last_outcome = {{"round", g.round}, {"you", to_string(b)}, {"opponent_move", to_string(a)}, {"payoff", pb}};
  for (auto& p : g.players) p.pending.reset();
  next_round_or_finish(g);
  announce_resolution(g, r.notifications);
  r.round_resolved = true;
  r.instance = std::move(g);
  return r;
}

AdvanceResult advance_trust(GameInstance g, std::size_t idx, const GameAction& action) {
  const auto& spec = rules_as<TrustGameSpec>(g);
  AdvanceResult r;
  std::size_t sender = trust_sender(g);
  std::size_t receiver = 1 - sender;
  if (const auto* send = std::get_if<TrustSend>(&action)) {
    if (g.phase != Phase::AwaitingBoth || idx != sender) fail(Errc::protocol_violation, "not the sender's turn");
    check_trust_send(spec, send->amount);
    g.first_move = send->amount;
    g.players[sender].balance -= send->amount;
    g.players[receiver].balance += spec.multiplier * send->amount;
    g.phase = Phase::AwaitingSecond;
    ++g.decisions;
    r.notifications.push_back({g.players[sender].anon_id, NoticeKind::Wait, wait_body(g, "co_player")});
    r.notifications.push_back({g.players[receiver].anon_id, NoticeKind::GameState, player_view(g, g.players[receiver].anon_id)});
    r.instance = std::move(g);
    return r;
  }
  const auto& ret = std::get<TrustReturn>(action);
  if (g.phase != Phase::AwaitingSecond || idx != receiver) fail(Errc::protocol_violation, "not the receiver's turn");
  check_trust_return(spec, g.first_move, ret.amount);
  g.players[sender].balance += ret.amount;
  g.players[receiver].balance -= ret.amount;
  ++g.decisions;
  auto pay = trust_payoffs(spec, g.first_move, ret.amount);
  Json common{{"round", g.round}, {"sent", g.first_move}, {"returned", ret.amount}};
  g.players[sender].last_outcome = common;
  g.players[sender].last_outcome["role"] = "sender";
  g.players[sender].last_outcome["payoff"] = pay.sender;
  g.players[receiver].last_outcome = common;
  g.players[receiver].last_outcome["role"] = "receiver";
  g.players[receiver].last_outcome["payoff"] = pay.receiver;
  next_round_or_finish(g);
  if (!g.over()) start_trust_round(g);
  announce_resolution(g, r.notifications);
  r.round_resolved = true;
  r.instance = std::move(g);
  return r;
}

void resolve_dictator(GameInstance& g, std::optional<Units> punishment) {
  const auto& spec = std::get<DictatorGameSpec>(g.spec.rules);
  auto pay = dictator_payoffs(spec, g.first_move, punishment);
  g.players[0].balance = pay.dictator;
  g.players[1].balance = pay.recipient;
  if (pay.observer) g.players[2].balance = *pay.observer;
  Json common{{"round", 1}, {"offer", g.first_move}};
  if (punishment) common["punishment"] = *punishment;
  static constexpr const char* kRoles[] = {"dictator", "recipient", "observer"};
  for (std::size_t i = 0; i < g.players.size(); ++i) {
    g.players[i].last_outcome = common;
    g.players[i].last_outcome["role"] = kRoles[i];
    g.players[i].last_outcome["payoff"] = g.players[i].balance;
  }
  g.phase = Phase::Finished;
}

AdvanceResult advance_dictator(GameInstance g, std::size_t idx, const GameAction& action) {
  const auto& spec = rules_as<DictatorGameSpec>(g);
  AdvanceResult r;
  if (const auto* offer = std::get_if<DictatorOffer>(&action)) {
    if (g.phase != Phase::AwaitingBoth || idx != 0) fail(Errc::protocol_violation, "only the dictator offers, once");
    if (offer->amount < 0 || offer->amount > spec.endowment) {
      fail(Errc::invalid_action, "offer " + units(offer->amount) + " outside [0, " + units(spec.endowment) + "]");
    }
    g.first_move = offer->amount;
    g.players[0].balance = spec.endowment - offer->amount;
    g.players[1].balance = offer->amount;
    ++g.decisions;
    if (spec.third_party) {
      g.phase = Phase::AwaitingSecond;
      r.notifications.push_back({g.players[0].anon_id, NoticeKind::Wait, wait_body(g, "observer")});
      r.notifications.push_back({g.players[1].anon_id, NoticeKind::Wait, wait_body(g, "observer")});
      r.notifications.push_back({g.players[2].anon_id, NoticeKind::GameState, player_view(g, g.players[2].anon_id)});
      r.instance = std::move(g);
      return r;
    }
    resolve_dictator(g, std::nullopt);
  } else {
    const auto& punish = std::get<DictatorPunish>(action);
    if (!spec.third_party || g.phase != Phase::AwaitingSecond || idx != 2) {
      fail(Errc::protocol_violation, "punishment only by the observer after the offer");
    }
    if (punish.amount < 0 || punish.amount > spec.third_party->observer_endowment) {
      fail(Errc::invalid_action, "punishment " + units(punish.amount) + " outside [0, " +
                                     units(spec.third_party->observer_endowment) + "]");
    }
    ++g.decisions;
    resolve_dictator(g, punish.amount);
  }
  announce_resolution(g, r.notifications);
  r.round_resolved = true;
  r.instance = std::move(g);
  return r;
}

void check_contribution(const GameInstance& g, std::size_t idx, Units amount) {
  const auto& spec = std::get<CollectiveRiskSpec>(g.spec.rules);
  const auto& allowed = spec.allowed_contributions;
  if (std::find(allowed.begin(), allowed.end(), amount) == allowed.end()) {
    fail(Errc::invalid_action, "contribution " + units(amount) + " is not an allowed amount");
  }
  if (amount > g.players[idx].balance) {
    fail(Errc::invalid_action, "contribution " + units(amount) + " exceeds balance " + units(g.players[idx].balance));
  }
}

AdvanceResult advance_crd(GameInstance g, std::size_t idx, const Contribution& c) {
  rules_as<CollectiveRiskSpec>(g);
  AdvanceResult r;
  if (g.phase == Phase::Resolved) fail(Errc::protocol_violation, "all rounds already played");
  if (g.players[idx].pending) fail(Errc::duplicate_action, "contribution already submitted for round " + std::to_string(g.round));
  check_contribution(g, idx, c.amount);
  g.players[idx].pending = c;
  ++g.decisions;
  bool all_in = std::all_of(g.players.begin(), g.players.end(), [](const PlayerState& p) { return p.pending.has_value(); });
  if (!all_in) {
    g.phase = Phase::AwaitingSecond;
    r.notifications.push_back({g.players[idx].anon_id, NoticeKind::Wait, wait_body(g, "group")});
    r.instance = std::move(g);
    return r;
  }
  std::map<AnonId, Units> contributions;
  for (const auto& p : g.players) contributions[p.anon_id] = std::get<Contribution>(*p.pending).amount;
  int decisions = g.decisions;
  g = crd_step(std::move(g), contributions);
  g.decisions = decisions;
  if (g.phase == Phase::Resolved) {
    double u = to_unit_interval(counter_draw(g.rng_seed, g.rng_counter++));
    CrdFinal fin = crd_final(g, u);
    for (std::size_t i = 0; i < g.players.size(); ++i) {
      g.players[i].balance = fin.payoffs[i];
      g.players[i].last_outcome["final_payoff"] = fin.payoffs[i];
    }
    g.crd_outcome = fin.outcome;
    g.phase = Phase::Finished;
  }
  announce_resolution(g, r.notifications);
  r.round_resolved = true;
  r.instance = std::move(g);
  return r;
}

AdvanceResult advance_market(GameInstance g, const MarketPrediction& p) {
  rules_as<MarketGameSpec>(g);
  int decisions = g.decisions + 1;
  MarketRound m = market_step(std::move(g), p.prediction, p.info);
  m.instance.decisions = decisions;
  AdvanceResult r;
  announce_resolution(m.instance, r.notifications);
  r.round_resolved = true;
  r.instance = std::move(m.instance);
  return r;
}

}  // namespace

std::string_view to_string(DyadicClass c) noexcept {
  switch (c) {
    case DyadicClass::Harmony: return "harmony";
    case DyadicClass::Snowdrift: return "snowdrift";
    case DyadicClass::StagHunt: return "stag_hunt";
    case DyadicClass::PrisonersDilemma: return "prisoners_dilemma";
    case DyadicClass::Boundary: return "boundary";
  }
  return "unknown";
}

std::string_view to_string(Move m) noexcept { return m == Move::Cooperate ? "C" : "D"; }
std::string_view to_string(PriceMove m) noexcept { return m == PriceMove::Up ? "up" : "down"; }

std::string_view to_string(Phase p) noexcept {
  switch (p) {
    case Phase::AwaitingBoth: return "awaiting_both";
    case Phase::AwaitingSecond: return "awaiting_second";
    case Phase::Resolved: return "resolved";
    case Phase::Finished: return "finished";
    case Phase::Aborted: return "aborted";
  }
  return "unknown";
}

std::string_view to_string(CrdOutcome o) noexcept {
  switch (o) {
    case CrdOutcome::GoalReached: return "goal_reached";
    case CrdOutcome::Spared: return "spared";
    case CrdOutcome::Catastrophe: return "catastrophe";
  }
  return "unknown";
}

std::string_view to_string(NoticeKind k) noexcept {
  switch (k) {
    case NoticeKind::Wait: return "wait";
    case NoticeKind::GameState: return "game_state";
    case NoticeKind::RoundResult: return "round_result";
  }
  return "unknown";
}

DyadicClass classify_dyadic(const PayoffMatrix2x2& m) noexcept {
  if (m.reward == m.temptation || m.sucker == m.punishment) return DyadicClass::Boundary;
  bool reward_wins = m.reward > m.temptation;
  bool sucker_wins = m.sucker > m.punishment;
  if (reward_wins) return sucker_wins ? DyadicClass::Harmony : DyadicClass::StagHunt;
  return sucker_wins ? DyadicClass::Snowdrift : DyadicClass::PrisonersDilemma;
}

std::pair<Units, Units> dyadic_payoff(const PayoffMatrix2x2& m, Move first, Move second) noexcept {
  if (first == Move::Cooperate) {
    return second == Move::Cooperate ? std::pair{m.reward, m.reward} : std::pair{m.sucker, m.temptation};
  }
  return second == Move::Cooperate ? std::pair{m.temptation, m.sucker} : std::pair{m.punishment, m.punishment};
}

TrustPayoffs trust_payoffs(const TrustGameSpec& spec, Units sent, Units returned) {
  check_trust_send(spec, sent);
  check_trust_return(spec, sent, returned);
  return {spec.sender_endowment - sent + returned, spec.receiver_endowment + spec.multiplier * sent - returned};
}

DictatorPayoffs dictator_payoffs(const DictatorGameSpec& spec, Units offer, std::optional<Units> punishment) {
  if (offer < 0 || offer > spec.endowment) {
    fail(Errc::invalid_action, "offer " + units(offer) + " outside [0, " + units(spec.endowment) + "]");
  }
  DictatorPayoffs out;
  out.recipient = offer;
  out.dictator = spec.endowment - offer;
  if (spec.third_party) {
    Units c = punishment.value_or(0);
    if (c < 0 || c > spec.third_party->observer_endowment) {
      fail(Errc::invalid_action,
           "punishment " + units(c) + " outside [0, " + units(spec.third_party->observer_endowment) + "]");
    }
    out.dictator = std::max<Units>(0, out.dictator - spec.third_party->punishment_ratio * c);
    out.observer = spec.third_party->observer_endowment - c;
  } else if (punishment && *punishment != 0) {
    fail(Errc::invalid_action, "no third party to punish");
  }
  return out;
}

std::vector<std::string> validate_game_spec(const GameSpec& spec) {
  std::vector<std::string> out;
  std::visit(
      overloaded{
          [&](const DyadicGameSpec& s) {
            if (s.rounds < 1) out.push_back("rounds must be >= 1");
          },
          [&](const TrustGameSpec& s) {
            if (s.sender_endowment < 0) out.push_back("sender_endowment must be >= 0");
            if (s.receiver_endowment < 0) out.push_back("receiver_endowment must be >= 0");
            if (s.multiplier < 1) out.push_back("multiplier must be >= 1");
            if (s.send_granularity < 1) out.push_back("send_granularity must be >= 1");
            else if (s.sender_endowment % s.send_granularity != 0) out.push_back("send_granularity must divide sender_endowment");
            if (s.rounds < 1) out.push_back("rounds must be >= 1");
          },
          [&](const DictatorGameSpec& s) {
            if (s.endowment < 0) out.push_back("endowment must be >= 0");
            if (s.third_party) {
              if (s.third_party->observer_endowment < 0) out.push_back("observer_endowment must be >= 0");
              if (s.third_party->punishment_ratio < 1) out.push_back("punishment_ratio must be >= 1");
            }
          },
          [&](const CollectiveRiskSpec& s) {
            if (s.group_size < 2) out.push_back("group_size must be >= 2");
            if (s.rounds < 1) out.push_back("rounds must be >= 1");
            if (static_cast<int>(s.endowments.size()) != s.group_size) out.push_back("one endowment per group member");
            if (std::any_of(s.endowments.begin(), s.endowments.end(), [](Units e) { return e < 0; })) {
              out.push_back("endowments must be >= 0");
            }
            if (s.target <= 0) out.push_back("target must be > 0");
            if (!(s.risk >= 0.0 && s.risk <= 1.0)) out.push_back("risk must lie in [0,1]");
            const auto& a = s.allowed_contributions;
            if (std::find(a.begin(), a.end(), Units{0}) == a.end()) out.push_back("0 must be an allowed contribution");
            if (std::any_of(a.begin(), a.end(), [](Units u) { return u < 0; })) out.push_back("contributions must be >= 0");
          },
          [&](const MarketGameSpec& s) {
            if (s.rounds < 1) out.push_back("rounds must be >= 1");
            if (s.rounds > static_cast<int>(s.price_moves.size())) out.push_back("rounds exceed the price series");
            if (s.endowment < 0) out.push_back("endowment must be >= 0");
            for (const auto& p : s.info_panels) {
              if (p.cost < 0) out.push_back("panel '" + p.id + "' has negative cost");
            }
          },
      },
      spec.rules);
  return out;
}

Json action_to_json(const GameAction& action) {
  return std::visit(
      overloaded{
          [](const DyadicChoice& a) { return Json{{"move", to_string(a.move)}}; },
          [](const TrustSend& a) { return Json{{"send", a.amount}}; },
          [](const TrustReturn& a) { return Json{{"return", a.amount}}; },
          [](const DictatorOffer& a) { return Json{{"offer", a.amount}}; },
          [](const DictatorPunish& a) { return Json{{"punish", a.amount}}; },
          [](const Contribution& a) { return Json{{"contribute", a.amount}}; },
          [](const MarketPrediction& a) { return Json{{"predict", to_string(a.prediction)}, {"info", a.info}}; },
      },
      action);
}

GameAction action_from_json(const Json& body) {
  if (!body.is_object() || body.size() == 0) fail(Errc::invalid_action, "decision must be a non-empty object");
  auto amount = [&](const char* key) -> Units {
    const Json& v = body.at(key);
    if (!v.is_number_integer()) fail(Errc::invalid_action, std::string(key) + " must be an integer");
    return v.get<Units>();
  };
  if (body.contains("move")) {
    const Json& m = body.at("move");
    if (m == "C") return DyadicChoice{Move::Cooperate};
    if (m == "D") return DyadicChoice{Move::Defect};
    fail(Errc::invalid_action, "move must be \"C\" or \"D\"");
  }
  if (body.contains("send")) return TrustSend{amount("send")};
  if (body.contains("return")) return TrustReturn{amount("return")};
  if (body.contains("offer")) return DictatorOffer{amount("offer")};
  if (body.contains("punish")) return DictatorPunish{amount("punish")};
  if (body.contains("contribute")) return Contribution{amount("contribute")};
  if (body.contains("predict")) {
    MarketPrediction p;
    const Json& d = body.at("predict");
    if (d == "up") p.prediction = PriceMove::Up;
    else if (d == "down") p.prediction = PriceMove::Down;
    else fail(Errc::invalid_action, "predict must be \"up\" or \"down\"");
    if (body.contains("info")) {
      const Json& info = body.at("info");
      if (!info.is_array()) fail(Errc::invalid_action, "info must be a list of panel ids");
      for (const Json& id : info) {
        if (!id.is_string()) fail(Errc::invalid_action, "panel ids must be strings");
        p.info.push_back(id.get<std::string>());
      }
    }
    return p;
  }
  fail(Errc::invalid_action, "unrecognised decision");
}

std::optional<std::size_t> GameInstance::index_of(const AnonId& id) const noexcept {
  for (std::size_t i = 0; i < players.size(); ++i) {
    if (players[i].anon_id == id) return i;
  }
  return std::nullopt;
}

GameInstance create_instance(std::string id, GameSpec spec, std::vector<AnonId> players, std::uint64_t seed) {
  if (static_cast<int>(players.size()) != spec.player_count()) {
    fail(Errc::internal_inconsistency, "game " + spec.id + " needs " + std::to_string(spec.player_count()) +
                                           " players, got " + std::to_string(players.size()));
  }
  GameInstance g;
  g.id = std::move(id);
  g.spec = std::move(spec);
  g.rng_seed = seed;
  for (auto& p : players) g.players.push_back(PlayerState{std::move(p), 0, std::nullopt, nullptr});
  std::visit(overloaded{
                 [&](const DyadicGameSpec& s) {
                   for (auto& p : g.players) p.balance = s.endowment;
                 },
                 [&](const TrustGameSpec&) { start_trust_round(g); },
                 [&](const DictatorGameSpec& s) {
                   g.players[0].balance = s.endowment;
                   if (s.third_party) g.players[2].balance = s.third_party->observer_endowment;
                 },
                 [&](const CollectiveRiskSpec& s) {
                   for (std::size_t i = 0; i < g.players.size(); ++i) g.players[i].balance = s.endowments[i];
                   g.contributed.assign(g.players.size(), 0);
                 },
                 [&](const MarketGameSpec& s) { g.players[0].balance = s.endowment; },
             },
             g.spec.rules);
  return g;
}

AdvanceResult advance(GameInstance g, const AnonId& player, const GameAction& action) {
  std::size_t idx = require_member(g, player);
  require_live(g);
  return std::visit(
      overloaded{
          [&](const DyadicChoice& a) { return advance_dyadic(std::move(g), idx, a); },
          [&](const TrustSend&) { return advance_trust(std::move(g), idx, action); },
          [&](const TrustReturn&) { return advance_trust(std::move(g), idx, action); },
          [&](const DictatorOffer&) { return advance_dictator(std::move(g), idx, action); },
          [&](const DictatorPunish&) { return advance_dictator(std::move(g), idx, action); },
          [&](const Contribution& a) { return advance_crd(std::move(g), idx, a); },
          [&](const MarketPrediction& a) { return advance_market(std::move(g), a); },
      },
      action);
}

GameInstance crd_step(GameInstance g, const std::map<AnonId, Units>& contributions) {
  const auto& spec = rules_as<CollectiveRiskSpec>(g);
  require_live(g);
  if (g.phase == Phase::Resolved) fail(Errc::protocol_violation, "all rounds already played");
  if (contributions.size() != g.players.size()) {
    fail(Errc::protocol_violation, "every group member contributes exactly once per round");
  }
  std::vector<Units> amounts(g.players.size());
  for (const auto& [id, amount] : contributions) {
    std::size_t idx = require_member(g, id);
    check_contribution(g, idx, amount);
    amounts[idx] = amount;
  }
  Units round_total = std::accumulate(amounts.begin(), amounts.end(), Units{0});
  if (g.contributed.size() != g.players.size()) g.contributed.assign(g.players.size(), 0);
  for (std::size_t i = 0; i < g.players.size(); ++i) {
    g.players[i].balance -= amounts[i];
    g.contributed[i] += amounts[i];
    g.players[i].pending.reset();
  }
  g.pot += round_total;
  for (std::size_t i = 0; i < g.players.size(); ++i) {
    g.players[i].last_outcome = {{"round", g.round},
                                 {"you", amounts[i]},
                                 {"contributions", amounts},
                                 {"pot", g.pot},
                                 {"target", spec.target}};
  }
  if (g.round < spec.rounds) {
    ++g.round;
    g.phase = Phase::AwaitingBoth;
  } else {
    g.phase = Phase::Resolved;
  }
  return g;
}

CrdFinal crd_final(const GameInstance& g, double u) {
  const auto& spec = rules_as<CollectiveRiskSpec>(g);
  if (g.phase != Phase::Resolved) fail(Errc::protocol_violation, "final draw requested before the last round resolved");
  CrdFinal out;
  out.payoffs.reserve(g.players.size());
  if (g.pot >= spec.target) out.outcome = CrdOutcome::GoalReached;
  else if (u < spec.risk) out.outcome = CrdOutcome::Catastrophe;
  else out.outcome = CrdOutcome::Spared;
  for (const auto& p : g.players) out.payoffs.push_back(out.outcome == CrdOutcome::Catastrophe ? 0 : p.balance);
  return out;
}

MarketRound market_step(GameInstance g, PriceMove prediction, const std::vector<std::string>& purchased_info) {
  const auto& spec = rules_as<MarketGameSpec>(g);
  require_live(g);
  Units cost = 0;
  std::vector<std::string> seen;
  Json contents = Json::object();
  for (const auto& id : purchased_info) {
    if (std::find(seen.begin(), seen.end(), id) != seen.end()) fail(Errc::invalid_action, "panel '" + id + "' bought twice");
    auto it = std::find_if(spec.info_panels.begin(), spec.info_panels.end(), [&](const InfoPanel& p) { return p.id == id; });
    if (it == spec.info_panels.end()) fail(Errc::invalid_action, "unknown info panel '" + id + "'");
    seen.push_back(id);
    cost += it->cost;
    contents[id] = it->content;
  }
  PlayerState& player = g.players[0];
  if (cost > player.balance) {
    fail(Errc::invalid_action, "info costs " + units(cost) + " but balance is " + units(player.balance));
  }
  PriceMove actual = spec.price_moves.at(static_cast<std::size_t>(g.round - 1));
  MarketRound out;
  out.correct = prediction == actual;
  out.delta = (out.correct ? spec.reward_correct : 0) - cost;
  player.balance += out.delta;
  player.last_outcome = {{"round", g.round},          {"prediction", to_string(prediction)},
                         {"market", to_string(actual)}, {"correct", out.correct},
                         {"delta", out.delta},          {"info", contents}};
  next_round_or_finish(g);
  out.instance = std::move(g);
  return out;
}

GameInstance abort_game(GameInstance g) {
  if (g.phase != Phase::Finished) g.phase = Phase::Aborted;
  for (auto& p : g.players) p.pending.reset();
  return g;
}

bool awaiting(const GameInstance& g, std::size_t idx) noexcept {
  if (g.over() || idx >= g.players.size()) return false;
  switch (g.family()) {
    case GameFamily::Dyadic:
      return !g.players[idx].pending;
    case GameFamily::CollectiveRisk:
      return g.phase != Phase::Resolved && !g.players[idx].pending;
    case GameFamily::Trust:
      return g.phase == Phase::AwaitingBoth ? idx == trust_sender(g) : idx == 1 - trust_sender(g);
    case GameFamily::Dictator:
      return g.phase == Phase::AwaitingBoth ? idx == 0 : idx == 2;
    case GameFamily::Market:
      return true;
  }
  return false;
}

std::vector<GameAction> legal_actions(const GameInstance& g, std::size_t idx) {
  std::vector<GameAction> out;
  if (!awaiting(g, idx)) return out;
  std::visit(overloaded{
                 [&](const DyadicGameSpec&) {
                   out.emplace_back(DyadicChoice{Move::Cooperate});
                   out.emplace_back(DyadicChoice{Move::Defect});
                 },
                 [&](const TrustGameSpec& s) {
                   if (g.phase == Phase::AwaitingBoth) {
                     for (Units x = 0; x <= s.sender_endowment; x += s.send_granularity) out.emplace_back(TrustSend{x});
                   } else {
                     for (Units y = 0; y <= s.multiplier * g.first_move; ++y) out.emplace_back(TrustReturn{y});
                   }
                 },
                 [&](const DictatorGameSpec& s) {
                   if (g.phase == Phase::AwaitingBoth) {
                     for (Units o = 0; o <= s.endowment; ++o) out.emplace_back(DictatorOffer{o});
                   } else {
                     for (Units c = 0; c <= s.third_party->observer_endowment; ++c) out.emplace_back(DictatorPunish{c});
                   }
                 },
                 [&](const CollectiveRiskSpec& s) {
                   for (Units a : s.allowed_contributions) {
                     if (a <= g.players[idx].balance) out.emplace_back(Contribution{a});
                   }
                 },
                 [&](const MarketGameSpec&) {
                   out.emplace_back(MarketPrediction{PriceMove::Up, {}});
                   out.emplace_back(MarketPrediction{PriceMove::Down, {}});
                 },
             },
             g.spec.rules);
  return out;
}

std::string role_of(const GameInstance& g, std::size_t idx) {
  switch (g.family()) {
    case GameFamily::Dyadic: return "player";
    case GameFamily::Trust: return idx == trust_sender(g) ? "sender" : "receiver";
    case GameFamily::Dictator: return idx == 0 ? "dictator" : idx == 1 ? "recipient" : "observer";
    case GameFamily::CollectiveRisk: return "member";
    case GameFamily::Market: return "trader";
  }
  return "player";
}

Json player_view(const GameInstance& g, const AnonId& player) {
  std::size_t idx = require_member(g, player);
  const PlayerState& me = g.players[idx];
  Json view{{"instance", g.id},
            {"family", to_string(g.family())},
            {"game", g.spec.id},
            {"round", g.round},
            {"rounds", g.spec.rounds()},
            {"phase", to_string(g.phase)},
            {"role", role_of(g, idx)},
            {"balance", me.balance},
            {"your_turn", awaiting(g, idx)},
            {"players", g.players.size()},
            {"rules", spec_public_view(g.spec)},
            {"last_outcome", me.last_outcome}};
  if (me.pending) view["your_decision"] = action_to_json(*me.pending);
  switch (g.family()) {
    case GameFamily::Trust:
      if (g.phase == Phase::AwaitingSecond && role_of(g, idx) == "receiver") {
        const auto& s = std::get<TrustGameSpec>(g.spec.rules);
        view["sent"] = g.first_move;
        view["available"] = s.multiplier * g.first_move;
      }
      break;
    case GameFamily::Dictator:
      if (g.phase != Phase::AwaitingBoth && idx != 0) view["offer"] = g.first_move;
      break;
    case GameFamily::CollectiveRisk:
      view["pot"] = g.pot;
      if (!g.contributed.empty()) view["contributed"] = g.contributed[idx];
      break;
    case GameFamily::Market: {
      const auto& s = std::get<MarketGameSpec>(g.spec.rules);
      Json history = Json::array();
      for (int r = 1; r < g.round || (g.over() && r <= g.spec.rounds()); ++r) {
        history.push_back(to_string(s.price_moves[static_cast<std::size_t>(r - 1)]));
      }
      view["market_history"] = history;
      break;
    }
    case GameFamily::Dyadic:
      break;
  }
  if (g.crd_outcome) view["crd_outcome"] = to_string(*g.crd_outcome);
  return view;
}

}  // namespace csl
