#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "csl/game_types.hpp"
#include "csl/model.hpp"

namespace csl {

// ---------------------------------------------------------------------------
// Payoff arithmetic
// ---------------------------------------------------------------------------

enum class DyadicClass { Harmony, Snowdrift, StagHunt, PrisonersDilemma, Boundary };

// Ties on either deciding comparison (R vs T, S vs P) give Boundary.
DyadicClass classify_dyadic(const PayoffMatrix2x2& m) noexcept;

std::pair<Units, Units> dyadic_payoff(const PayoffMatrix2x2& m, Move first, Move second) noexcept;

struct TrustPayoffs {
  Units sender = 0;
  Units receiver = 0;
};

// Throws invalid_action when sent/returned are outside their bounds.
TrustPayoffs trust_payoffs(const TrustGameSpec& spec, Units sent, Units returned);

struct DictatorPayoffs {
  Units dictator = 0;
  Units recipient = 0;
  std::optional<Units> observer;
};

// The dictator's balance floors at zero when punished.
DictatorPayoffs dictator_payoffs(const DictatorGameSpec& spec, Units offer, std::optional<Units> punishment = {});

std::vector<std::string> validate_game_spec(const GameSpec& spec);

std::string_view to_string(DyadicClass c) noexcept;
std::string_view to_string(Move m) noexcept;
std::string_view to_string(PriceMove m) noexcept;

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

struct DyadicChoice {
  Move move = Move::Cooperate;
  bool operator==(const DyadicChoice&) const = default;
};
struct TrustSend {
  Units amount = 0;
  bool operator==(const TrustSend&) const = default;
};
struct TrustReturn {
  Units amount = 0;
  bool operator==(const TrustReturn&) const = default;
};
struct DictatorOffer {
  Units amount = 0;
  bool operator==(const DictatorOffer&) const = default;
};
struct DictatorPunish {
  Units amount = 0;
  bool operator==(const DictatorPunish&) const = default;
};
struct Contribution {
  Units amount = 0;
  bool operator==(const Contribution&) const = default;
};
struct MarketPrediction {
  PriceMove prediction = PriceMove::Up;
  std::vector<std::string> info;  // purchased panel ids
  bool operator==(const MarketPrediction&) const = default;
};

using GameAction =
    std::variant<DyadicChoice, TrustSend, TrustReturn, DictatorOffer, DictatorPunish, Contribution, MarketPrediction>;

// Wire form: {"move":"C"}, {"send":5}, {"return":6}, {"offer":4},
// {"punish":2}, {"contribute":4}, {"predict":"up","info":["p1"]}.
Json action_to_json(const GameAction& action);
GameAction action_from_json(const Json& body);  // throws invalid_action

// ---------------------------------------------------------------------------
// Game instances
// ---------------------------------------------------------------------------

// Simultaneous and collective games: AwaitingBoth = no decision buffered yet,
// AwaitingSecond = some but not all buffered. Sequential games: AwaitingBoth =
// first mover's turn, AwaitingSecond = second mover's turn. Resolved marks a
// collective-risk game whose rounds are done but not yet drawn.
enum class Phase { AwaitingBoth, AwaitingSecond, Resolved, Finished, Aborted };

enum class CrdOutcome { GoalReached, Spared, Catastrophe };

struct PlayerState {
  AnonId anon_id;
  Units balance = 0;
  std::optional<GameAction> pending;
  Json last_outcome;  // null until a round resolves

  bool operator==(const PlayerState&) const = default;
};

struct GameInstance {
  std::string id;
  GameSpec spec;
  std::vector<PlayerState> players;
  int round = 1;
  Phase phase = Phase::AwaitingBoth;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  Units pot = 0;              // collective risk: common pot
  Units first_move = 0;       // trust: amount sent; dictator: offer
  int decisions = 0;          // accepted decisions, all rounds
  std::optional<CrdOutcome> crd_outcome;
  std::vector<Units> contributed;  // collective risk: per-player totals

  GameFamily family() const noexcept { return spec.family(); }
  bool over() const noexcept { return phase == Phase::Finished || phase == Phase::Aborted; }
  std::optional<std::size_t> index_of(const AnonId& id) const noexcept;
  bool operator==(const GameInstance&) const = default;
};

GameInstance create_instance(std::string id, GameSpec spec, std::vector<AnonId> players, std::uint64_t seed);

enum class NoticeKind { Wait, GameState, RoundResult };

struct Notification {
  AnonId to;
  NoticeKind kind = NoticeKind::Wait;
  Json body;
};

struct AdvanceResult {
  GameInstance instance;
  std::vector<Notification> notifications;
  bool round_resolved = false;
};

// Applies one player's decision. Throws unknown_player, protocol_violation,
// duplicate_action or invalid_action; the input instance is never modified.
AdvanceResult advance(GameInstance instance, const AnonId& player, const GameAction& action);

// Collective-risk round resolution with every living player's contribution.
GameInstance crd_step(GameInstance instance, const std::map<AnonId, Units>& contributions);

struct CrdFinal {
  CrdOutcome outcome = CrdOutcome::GoalReached;
  std::vector<Units> payoffs;
};

// u must be a uniform draw in [0,1). Throws protocol_violation before the
// final round is resolved.
CrdFinal crd_final(const GameInstance& instance, double u);

struct MarketRound {
  GameInstance instance;
  bool correct = false;
  Units delta = 0;
};

MarketRound market_step(GameInstance instance, PriceMove prediction, const std::vector<std::string>& purchased_info);

// Ends the game early; balances stay as they stand.
GameInstance abort_game(GameInstance instance);

// Whether the game is currently waiting for this player.
bool awaiting(const GameInstance& instance, std::size_t player_index) noexcept;

// Every legal action for the player in the current phase (empty when the
// player is not due to act). Market predictions are listed without info.
std::vector<GameAction> legal_actions(const GameInstance& instance, std::size_t player_index);

std::string role_of(const GameInstance& instance, std::size_t player_index);

// The player's permitted view. Never includes a co-player's buffered decision.
Json player_view(const GameInstance& instance, const AnonId& player);

std::string_view to_string(Phase p) noexcept;
std::string_view to_string(CrdOutcome o) noexcept;
std::string_view to_string(NoticeKind k) noexcept;

}  // namespace csl
