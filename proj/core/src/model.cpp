#include "csl/model.hpp"

#include <algorithm>
#include <array>
#include <set>

#include "csl/engine.hpp"
#include "csl/error.hpp"

namespace csl {

namespace {

template <typename Enum, std::size_t N>
std::optional<Enum> lookup(const std::array<std::pair<Enum, std::string_view>, N>& table, std::string_view text) {
  for (const auto& [value, name] : table) {
    if (name == text) return value;
  }
  return std::nullopt;
}

template <typename Enum, std::size_t N>
std::string_view name_of(const std::array<std::pair<Enum, std::string_view>, N>& table, Enum value) {
  for (const auto& [v, name] : table) {
    if (v == value) return name;
  }
  return "unknown";
}

constexpr std::array<std::pair<StageKind, std::string_view>, 6> kStageKinds{{
    {StageKind::Intro, "intro"},
    {StageKind::Survey, "survey"},
    {StageKind::Tutorial, "tutorial"},
    {StageKind::Game, "game"},
    {StageKind::Results, "results"},
    {StageKind::PostSurvey, "post_survey"},
}};

constexpr std::array<std::pair<ConnectionState, std::string_view>, 4> kConnectionStates{{
    {ConnectionState::Connected, "connected"},
    {ConnectionState::Idle, "idle"},
    {ConnectionState::Disconnected, "disconnected"},
    {ConnectionState::Finished, "finished"},
}};

constexpr std::array<std::pair<ActionKind, std::string_view>, 5> kActionKinds{{
    {ActionKind::Decision, "decision"},
    {ActionKind::SurveyAnswer, "survey_answer"},
    {ActionKind::InfoRequest, "info_request"},
    {ActionKind::Navigation, "navigation"},
    {ActionKind::ConnectionChange, "connection_change"},
}};

constexpr std::array<std::pair<AnswerType, std::string_view>, 4> kAnswerTypes{{
    {AnswerType::SingleChoice, "single_choice"},
    {AnswerType::MultiChoice, "multi_choice"},
    {AnswerType::IntegerRange, "integer_range"},
    {AnswerType::FreeText, "free_text"},
}};

constexpr std::array<std::pair<TimeoutAction, std::string_view>, 3> kTimeoutActions{{
    {TimeoutAction::SubstituteBot, "substitute_bot"},
    {TimeoutAction::AbortGameRefundOthers, "abort_game_refund_others"},
    {TimeoutAction::AutoDefaultAction, "auto_default_action"},
}};

constexpr std::array<std::pair<GameFamily, std::string_view>, 5> kFamilies{{
    {GameFamily::Dyadic, "dyadic"},
    {GameFamily::Trust, "trust"},
    {GameFamily::Dictator, "dictator"},
    {GameFamily::CollectiveRisk, "collective_risk"},
    {GameFamily::Market, "market"},
}};

constexpr std::array<std::pair<Errc, std::string_view>, 19> kErrors{{
    {Errc::invalid_action, "invalid_action"},
    {Errc::duplicate_action, "duplicate_action"},
    {Errc::protocol_violation, "protocol_violation"},
    {Errc::unknown_player, "unknown_player"},
    {Errc::internal_inconsistency, "internal_inconsistency"},
    {Errc::session_closed, "session_closed"},
    {Errc::session_full, "session_full"},
    {Errc::not_found, "not_found"},
    {Errc::conflict, "conflict"},
    {Errc::unauthorized, "unauthorized"},
    {Errc::storage_error, "storage_error"},
    {Errc::degenerate_variance, "degenerate_variance"},
    {Errc::precondition, "precondition"},
    {Errc::empty_table, "empty_table"},
    {Errc::bad_frame, "bad_frame"},
    {Errc::unknown_participant, "unknown_participant"},
    {Errc::version_mismatch, "version_mismatch"},
    {Errc::corrupt_record, "corrupt_record"},
    {Errc::invalid_definition, "invalid_definition"},
}};

bool references_survey(StageKind kind) { return kind == StageKind::Survey || kind == StageKind::PostSurvey; }
bool references_game(StageKind kind) { return kind == StageKind::Tutorial || kind == StageKind::Game; }

}  // namespace

std::string_view to_string(Errc code) noexcept { return name_of(kErrors, code); }
std::string_view to_string(StageKind kind) noexcept { return name_of(kStageKinds, kind); }
std::string_view to_string(ConnectionState state) noexcept { return name_of(kConnectionStates, state); }
std::string_view to_string(ActionKind kind) noexcept { return name_of(kActionKinds, kind); }
std::string_view to_string(AnswerType type) noexcept { return name_of(kAnswerTypes, type); }
std::string_view to_string(TimeoutAction action) noexcept { return name_of(kTimeoutActions, action); }
std::string_view to_string(GameFamily family) noexcept { return name_of(kFamilies, family); }

std::optional<StageKind> parse_stage_kind(std::string_view text) noexcept { return lookup(kStageKinds, text); }
std::optional<ConnectionState> parse_connection_state(std::string_view text) noexcept {
  return lookup(kConnectionStates, text);
}
std::optional<ActionKind> parse_action_kind(std::string_view text) noexcept { return lookup(kActionKinds, text); }
std::optional<AnswerType> parse_answer_type(std::string_view text) noexcept { return lookup(kAnswerTypes, text); }
std::optional<TimeoutAction> parse_timeout_action(std::string_view text) noexcept {
  return lookup(kTimeoutActions, text);
}
std::optional<GameFamily> parse_family(std::string_view text) noexcept { return lookup(kFamilies, text); }

GameFamily GameSpec::family() const noexcept {
  return std::visit(
      [](const auto& r) {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, DyadicGameSpec>) return GameFamily::Dyadic;
        else if constexpr (std::is_same_v<T, TrustGameSpec>) return GameFamily::Trust;
        else if constexpr (std::is_same_v<T, DictatorGameSpec>) return GameFamily::Dictator;
        else if constexpr (std::is_same_v<T, CollectiveRiskSpec>) return GameFamily::CollectiveRisk;
        else return GameFamily::Market;
      },
      rules);
}

int GameSpec::rounds() const noexcept {
  return std::visit(
      [](const auto& r) -> int {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, DictatorGameSpec>) return 1;
        else return r.rounds;
      },
      rules);
}

int GameSpec::player_count() const noexcept {
  return std::visit(
      [](const auto& r) -> int {
        using T = std::decay_t<decltype(r)>;
        if constexpr (std::is_same_v<T, DictatorGameSpec>) return r.third_party ? 3 : 2;
        else if constexpr (std::is_same_v<T, CollectiveRiskSpec>) return r.group_size;
        else if constexpr (std::is_same_v<T, MarketGameSpec>) return 1;
        else return 2;
      },
      rules);
}

const Question* SurveyDefinition::find(const std::string& question_id) const {
  auto it = std::find_if(questions.begin(), questions.end(), [&](const Question& q) { return q.id == question_id; });
  return it == questions.end() ? nullptr : &*it;
}

const GameSpec* ExperimentDefinition::game(const std::string& game_id) const {
  auto it = games.find(game_id);
  return it == games.end() ? nullptr : &it->second;
}

const SurveyDefinition* ExperimentDefinition::survey(const std::string& survey_id) const {
  auto it = surveys.find(survey_id);
  return it == surveys.end() ? nullptr : &it->second;
}

std::vector<Violation> validate_experiment(const ExperimentDefinition& def) {
  std::vector<Violation> out;
  auto add = [&](std::string code, std::string detail) { out.push_back({std::move(code), std::move(detail)}); };

  if (def.id.empty()) add("id.empty", "experiment id must be set");
  if (def.stages.empty()) add("stages.empty", "at least one stage is required");
  if (def.capacity < 1) add("capacity.invalid", "capacity must be positive");

  std::set<std::string> stage_ids;
  int results_stages = 0;
  for (std::size_t i = 0; i < def.stages.size(); ++i) {
    const StageSpec& stage = def.stages[i];
    const std::string where = "stage " + std::to_string(i);
    if (stage.id.empty()) add("stage.id_empty", where);
    else if (!stage_ids.insert(stage.id).second) add("stage.duplicate_id", where + " repeats id '" + stage.id + "'");
    if (stage.kind == StageKind::Results) ++results_stages;

    if (references_survey(stage.kind) && def.survey(stage.ref) == nullptr) {
      add("stage.unknown_survey", where + " references survey '" + stage.ref + "'");
    }
    if (references_game(stage.kind)) {
      const GameSpec* game = def.game(stage.ref);
      if (game == nullptr) {
        add("stage.unknown_game", where + " references game '" + stage.ref + "'");
      } else if (stage.kind == StageKind::Tutorial) {
        bool later_match = false;
        for (std::size_t j = i + 1; j < def.stages.size(); ++j) {
          const StageSpec& later = def.stages[j];
          if (later.kind != StageKind::Game) continue;
          const GameSpec* g = def.game(later.ref);
          if (g != nullptr && g->family() == game->family()) later_match = true;
        }
        if (!later_match) {
          add("tutorial.game_mismatch",
              where + " tutorial for " + std::string(to_string(game->family())) + " has no later game of that family");
        }
      }
    }
  }
  if (results_stages > 1) add("stages.multiple_results", "at most one results stage is allowed");

  for (const auto& [key, game] : def.games) {
    if (game.id != key) add("game.id_mismatch", "game '" + key + "' has id '" + game.id + "'");
    if (game.player_count() > def.capacity) {
      add("game.exceeds_capacity", "game '" + key + "' needs more players than the session capacity");
    }
    for (const auto& problem : validate_game_spec(game)) add("game.invalid", "game '" + key + "': " + problem);
  }

  for (const auto& [key, survey] : def.surveys) {
    if (survey.id != key) add("survey.id_mismatch", "survey '" + key + "' has id '" + survey.id + "'");
    std::set<std::string> qids;
    for (const Question& q : survey.questions) {
      if (!qids.insert(q.id).second) add("survey.duplicate_question", "survey '" + key + "' repeats '" + q.id + "'");
      bool choice = q.type == AnswerType::SingleChoice || q.type == AnswerType::MultiChoice;
      if (choice && q.options.empty()) add("question.no_options", "question '" + q.id + "' has no options");
      if (q.type == AnswerType::IntegerRange && q.min > q.max) {
        add("question.bad_range", "question '" + q.id + "' has min > max");
      }
    }
  }

  for (const auto& [family, policy] : def.disconnect_overrides) {
    if (policy.grace_ms <= 0) add("policy.grace", std::string(to_string(family)) + " grace_ms must be positive");
  }
  return out;
}

std::optional<std::size_t> next_stage(const Participant& participant, const ExperimentDefinition& def) {
  if (participant.current_stage >= def.stages.size()) {
    fail(Errc::internal_inconsistency, "participant at stage " + std::to_string(participant.current_stage) + " of " +
                                           std::to_string(def.stages.size()));
  }
  std::size_t next = participant.current_stage + 1;
  if (next >= def.stages.size()) return std::nullopt;
  return next;
}

std::optional<std::string> check_answer(const Question& q, const Json& value) {
  auto has_option = [&](const Json& v) {
    return v.is_string() && std::find(q.options.begin(), q.options.end(), v.get<std::string>()) != q.options.end();
  };
  switch (q.type) {
    case AnswerType::SingleChoice:
      if (!has_option(value)) return "answer must be one of the options";
      return std::nullopt;
    case AnswerType::MultiChoice: {
      if (!value.is_array()) return "answer must be a list of options";
      std::set<std::string> seen;
      for (const Json& v : value) {
        if (!has_option(v)) return "answer must only contain listed options";
        if (!seen.insert(v.get<std::string>()).second) return "answer repeats an option";
      }
      return std::nullopt;
    }
    case AnswerType::IntegerRange: {
      if (!value.is_number_integer()) return "answer must be an integer";
      auto n = value.get<std::int64_t>();
      if (n < q.min || n > q.max) return "answer out of range";
      return std::nullopt;
    }
    case AnswerType::FreeText:
      if (!value.is_string()) return "answer must be text";
      return std::nullopt;
  }
  return "unknown answer type";
}

DisconnectPolicy default_disconnect_policy(GameFamily family) {
  DisconnectPolicy policy;
  policy.grace_ms = 60'000;
  switch (family) {
    case GameFamily::CollectiveRisk:
      policy.on_timeout = TimeoutAction::AutoDefaultAction;
      policy.default_action = Json{{"contribute", 0}};
      break;
    case GameFamily::Dyadic:
    case GameFamily::Trust:
    case GameFamily::Dictator:
    case GameFamily::Market:
      policy.on_timeout = TimeoutAction::AbortGameRefundOthers;
      break;
  }
  return policy;
}

AnonId random_anon_id(std::mt19937_64& rng) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(32, '0');
  std::uint64_t halves[2] = {rng(), rng()};
  for (int i = 0; i < 32; ++i) out[static_cast<std::size_t>(i)] = kHex[(halves[i / 16] >> (60 - 4 * (i % 16))) & 0xF];
  return AnonId{std::move(out)};
}

}  // namespace csl
