#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace csl {

// Experimental currency units. Money never touches floating point.
using Units = std::int64_t;

enum class GameFamily { Dyadic, Trust, Dictator, CollectiveRisk, Market };

enum class Move { Cooperate, Defect };
enum class PriceMove { Up, Down };

struct PayoffMatrix2x2 {
  Units reward = 0;      // both cooperate
  Units sucker = 0;      // cooperate against defect
  Units temptation = 0;  // defect against cooperate
  Units punishment = 0;  // both defect

  bool operator==(const PayoffMatrix2x2&) const = default;
};

struct DyadicGameSpec {
  PayoffMatrix2x2 matrix;
  int rounds = 1;
  Units endowment = 0;

  bool operator==(const DyadicGameSpec&) const = default;
};

// With rounds > 1 the sender and receiver roles alternate every round.
struct TrustGameSpec {
  Units sender_endowment = 10;
  Units receiver_endowment = 0;
  int multiplier = 3;
  Units send_granularity = 1;
  int rounds = 1;

  bool operator==(const TrustGameSpec&) const = default;
};

struct ThirdPartySpec {
  Units observer_endowment = 0;
  int punishment_ratio = 3;

  bool operator==(const ThirdPartySpec&) const = default;
};

struct DictatorGameSpec {
  Units endowment = 10;
  std::optional<ThirdPartySpec> third_party;

  bool operator==(const DictatorGameSpec&) const = default;
};

struct CollectiveRiskSpec {
  int group_size = 6;
  int rounds = 10;
  std::vector<Units> endowments = std::vector<Units>(6, 40);
  Units target = 120;
  double risk = 0.9;
  std::vector<Units> allowed_contributions = {0, 2, 4};

  bool operator==(const CollectiveRiskSpec&) const = default;
};

struct InfoPanel {
  std::string id;
  Units cost = 0;
  std::string content;

  bool operator==(const InfoPanel&) const = default;
};

struct MarketGameSpec {
  std::vector<PriceMove> price_moves;
  int rounds = 0;
  Units reward_correct = 1;
  Units endowment = 0;
  std::vector<InfoPanel> info_panels;

  bool operator==(const MarketGameSpec&) const = default;
};

using GameRules =
    std::variant<DyadicGameSpec, TrustGameSpec, DictatorGameSpec, CollectiveRiskSpec, MarketGameSpec>;

struct GameSpec {
  std::string id;
  GameRules rules;

  GameFamily family() const noexcept;
  int rounds() const noexcept;
  int player_count() const noexcept;

  bool operator==(const GameSpec&) const = default;
};

std::string_view to_string(GameFamily family) noexcept;
std::optional<GameFamily> parse_family(std::string_view text) noexcept;

}  // namespace csl
