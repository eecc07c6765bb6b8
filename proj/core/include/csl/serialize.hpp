#pragma once

// External JSON form of the domain types: lower_snake_case field names,
// integer millisecond timestamps, integer currency units.

#include <nlohmann/json.hpp>

#include "csl/engine.hpp"
#include "csl/model.hpp"

namespace csl {

void to_json(Json& j, const AnonId& v);
void from_json(const Json& j, AnonId& v);

void to_json(Json& j, const PayoffMatrix2x2& v);
void from_json(const Json& j, PayoffMatrix2x2& v);
void to_json(Json& j, const InfoPanel& v);
void from_json(const Json& j, InfoPanel& v);
void to_json(Json& j, const GameSpec& v);
void from_json(const Json& j, GameSpec& v);

void to_json(Json& j, const StageSpec& v);
void from_json(const Json& j, StageSpec& v);
void to_json(Json& j, const Question& v);
void from_json(const Json& j, Question& v);
void to_json(Json& j, const SurveyDefinition& v);
void from_json(const Json& j, SurveyDefinition& v);
void to_json(Json& j, const DisconnectPolicy& v);
void from_json(const Json& j, DisconnectPolicy& v);
void to_json(Json& j, const ExperimentDefinition& v);
void from_json(const Json& j, ExperimentDefinition& v);

void to_json(Json& j, const Participant& v);
void from_json(const Json& j, Participant& v);
void to_json(Json& j, const ActionEvent& v);
void from_json(const Json& j, ActionEvent& v);

void to_json(Json& j, const PlayerState& v);
void from_json(const Json& j, PlayerState& v);
void to_json(Json& j, const GameInstance& v);
void from_json(const Json& j, GameInstance& v);

// Parses an experiment definition; malformed JSON or unknown enum strings
// throw Error(invalid_definition).
ExperimentDefinition parse_experiment(const Json& j);

}  // namespace csl
