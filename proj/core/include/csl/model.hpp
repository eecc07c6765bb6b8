#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csl/game_types.hpp"

namespace csl {

using Millis = std::int64_t;
using Json = nlohmann::json;

// Opaque participant identifier: 128 random bits as 32 lowercase hex digits.
// Never derived from anything the participant typed.
struct AnonId {
  std::string value;

  auto operator<=>(const AnonId&) const = default;
  bool empty() const noexcept { return value.empty(); }
};

enum class StageKind { Intro, Survey, Tutorial, Game, Results, PostSurvey };

struct StageSpec {
  std::string id;
  StageKind kind = StageKind::Intro;
  // survey id for Survey/PostSurvey, game spec id for Tutorial/Game,
  // text bundle key otherwise.
  std::string ref;
  bool skippable = false;

  bool operator==(const StageSpec&) const = default;
};

enum class AnswerType { SingleChoice, MultiChoice, IntegerRange, FreeText };

struct Question {
  std::string id;
  std::string prompt;
  AnswerType type = AnswerType::SingleChoice;
  std::vector<std::string> options;  // choice questions
  std::int64_t min = 0;              // integer-range questions
  std::int64_t max = 0;
  bool required = true;
  bool personal = false;

  bool operator==(const Question&) const = default;
};

struct SurveyDefinition {
  std::string id;
  std::vector<Question> questions;

  const Question* find(const std::string& question_id) const;
  bool operator==(const SurveyDefinition&) const = default;
};

struct SurveyResponse {
  std::string survey_id;
  AnonId anon_id;
  std::map<std::string, Json> answers;
  Millis server_ts = 0;
};

enum class TimeoutAction { SubstituteBot, AbortGameRefundOthers, AutoDefaultAction };

struct DisconnectPolicy {
  Millis grace_ms = 60'000;
  TimeoutAction on_timeout = TimeoutAction::AbortGameRefundOthers;
  Json default_action;  // family-specific decision body, used by AutoDefaultAction

  bool operator==(const DisconnectPolicy&) const = default;
};

struct ExperimentDefinition {
  std::string id;
  std::string title;
  std::vector<StageSpec> stages;
  std::map<std::string, GameSpec> games;
  std::map<std::string, SurveyDefinition> surveys;
  std::map<std::string, std::map<std::string, std::string>> locale_texts;
  std::string currency_name = "ECU";
  std::string conversion_note;
  int capacity = 30;
  std::map<GameFamily, DisconnectPolicy> disconnect_overrides;

  const GameSpec* game(const std::string& game_id) const;
  const SurveyDefinition* survey(const std::string& survey_id) const;
  bool operator==(const ExperimentDefinition&) const = default;
};

enum class ConnectionState { Connected, Idle, Disconnected, Finished };

struct Participant {
  AnonId anon_id;
  std::string session_id;
  Millis joined_at = 0;
  std::size_t current_stage = 0;
  ConnectionState connection_state = ConnectionState::Connected;
  Units earnings = 0;

  bool operator==(const Participant&) const = default;
};

enum class ActionKind { Decision, SurveyAnswer, InfoRequest, Navigation, ConnectionChange };

struct ActionEvent {
  std::uint64_t seq = 0;
  AnonId anon_id;
  std::optional<std::string> game_instance_id;
  std::optional<GameFamily> game_family;
  std::optional<int> round;
  std::size_t stage = 0;
  ActionKind kind = ActionKind::Navigation;
  Json payload = Json::object();
  Millis server_ts = 0;
  std::optional<Millis> client_ts;
  bool synthetic = false;

  bool operator==(const ActionEvent&) const = default;
};

struct Violation {
  std::string code;
  std::string detail;

  bool operator==(const Violation&) const = default;
};

// Checks every structural invariant of a definition. Never throws.
std::vector<Violation> validate_experiment(const ExperimentDefinition& def);

// Index of the stage after the participant's current one, or nullopt once
// the last stage is done. Throws internal_inconsistency if current_stage is
// out of range.
std::optional<std::size_t> next_stage(const Participant& participant, const ExperimentDefinition& def);

// Type-checks one survey answer against its question. Returns an error
// message, or nullopt when the answer is acceptable.
std::optional<std::string> check_answer(const Question& question, const Json& value);

DisconnectPolicy default_disconnect_policy(GameFamily family);

AnonId random_anon_id(std::mt19937_64& rng);

std::string_view to_string(StageKind kind) noexcept;
std::string_view to_string(ConnectionState state) noexcept;
std::string_view to_string(ActionKind kind) noexcept;
std::string_view to_string(AnswerType type) noexcept;
std::string_view to_string(TimeoutAction action) noexcept;
std::optional<StageKind> parse_stage_kind(std::string_view text) noexcept;
std::optional<ConnectionState> parse_connection_state(std::string_view text) noexcept;
std::optional<ActionKind> parse_action_kind(std::string_view text) noexcept;
std::optional<AnswerType> parse_answer_type(std::string_view text) noexcept;
std::optional<TimeoutAction> parse_timeout_action(std::string_view text) noexcept;

}  // namespace csl

template <>
struct std::hash<csl::AnonId> {
  std::size_t operator()(const csl::AnonId& id) const noexcept { return std::hash<std::string>{}(id.value); }
};
