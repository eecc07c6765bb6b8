#include "csl/serialize.hpp"

#include "csl/error.hpp"

namespace csl {

namespace {

template <typename Enum, typename Parser>
Enum parse_enum(const Json& j, Parser parse, const char* what) {
  if (!j.is_string()) fail(Errc::invalid_definition, std::string(what) + " must be a string");
  auto v = parse(j.get<std::string>());
  if (!v) fail(Errc::invalid_definition, "unknown " + std::string(what) + " '" + j.get<std::string>() + "'");
  return *v;
}

std::optional<PriceMove> parse_price(std::string_view s) {
  if (s == "up") return PriceMove::Up;
  if (s == "down") return PriceMove::Down;
  return std::nullopt;
}

std::optional<Phase> parse_phase(std::string_view s) {
  for (Phase p : {Phase::AwaitingBoth, Phase::AwaitingSecond, Phase::Resolved, Phase::Finished, Phase::Aborted}) {
    if (to_string(p) == s) return p;
  }
  return std::nullopt;
}

std::optional<CrdOutcome> parse_crd_outcome(std::string_view s) {
  for (CrdOutcome o : {CrdOutcome::GoalReached, CrdOutcome::Spared, CrdOutcome::Catastrophe}) {
    if (to_string(o) == s) return o;
  }
  return std::nullopt;
}

template <typename T>
void get_opt(const Json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) it->get_to(out);
}

}  // namespace

void to_json(Json& j, const AnonId& v) { j = v.value; }
void from_json(const Json& j, AnonId& v) { v.value = j.get<std::string>(); }

void to_json(Json& j, const PayoffMatrix2x2& v) {
  j = Json{{"reward", v.reward}, {"sucker", v.sucker}, {"temptation", v.temptation}, {"punishment", v.punishment}};
}
void from_json(const Json& j, PayoffMatrix2x2& v) {
  j.at("reward").get_to(v.reward);
  j.at("sucker").get_to(v.sucker);
  j.at("temptation").get_to(v.temptation);
  j.at("punishment").get_to(v.punishment);
}

void to_json(Json& j, const InfoPanel& v) { j = Json{{"id", v.id}, {"cost", v.cost}, {"content", v.content}}; }
void from_json(const Json& j, InfoPanel& v) {
  j.at("id").get_to(v.id);
  get_opt(j, "cost", v.cost);
  get_opt(j, "content", v.content);
}

void to_json(Json& j, const GameSpec& v) {
  j = Json{{"id", v.id}, {"family", to_string(v.family())}};
  if (const auto* s = std::get_if<DyadicGameSpec>(&v.rules)) {
    j["matrix"] = s->matrix;
    j["rounds"] = s->rounds;
    j["endowment"] = s->endowment;
  } else if (const auto* s = std::get_if<TrustGameSpec>(&v.rules)) {
    j["sender_endowment"] = s->sender_endowment;
    j["receiver_endowment"] = s->receiver_endowment;
    j["multiplier"] = s->multiplier;
    j["send_granularity"] = s->send_granularity;
    j["rounds"] = s->rounds;
  } else if (const auto* s = std::get_if<DictatorGameSpec>(&v.rules)) {
    j["endowment"] = s->endowment;
    if (s->third_party) {
      j["third_party"] = Json{{"observer_endowment", s->third_party->observer_endowment},
                              {"punishment_ratio", s->third_party->punishment_ratio}};
    }
  } else if (const auto* s = std::get_if<CollectiveRiskSpec>(&v.rules)) {
    j["group_size"] = s->group_size;
    j["rounds"] = s->rounds;
    j["endowments"] = s->endowments;
    j["target"] = s->target;
    j["risk"] = s->risk;
    j["allowed_contributions"] = s->allowed_contributions;
  } else if (const auto* s = std::get_if<MarketGameSpec>(&v.rules)) {
    Json moves = Json::array();
    for (PriceMove m : s->price_moves) moves.push_back(to_string(m));
    j["price_moves"] = moves;
    j["rounds"] = s->rounds;
    j["reward_correct"] = s->reward_correct;
    j["endowment"] = s->endowment;
    j["info_panels"] = s->info_panels;
  }
}

void from_json(const Json& j, GameSpec& v) {
  j.at("id").get_to(v.id);
  GameFamily family = parse_enum<GameFamily>(j.at("family"), parse_family, "game family");
  switch (family) {
    case GameFamily::Dyadic: {
      DyadicGameSpec s;
      j.at("matrix").get_to(s.matrix);
      get_opt(j, "rounds", s.rounds);
      get_opt(j, "endowment", s.endowment);
      v.rules = s;
      break;
    }
    case GameFamily::Trust: {
      TrustGameSpec s;
      get_opt(j, "sender_endowment", s.sender_endowment);
      get_opt(j, "receiver_endowment", s.receiver_endowment);
      get_opt(j, "multiplier", s.multiplier);
      get_opt(j, "send_granularity", s.send_granularity);
      get_opt(j, "rounds", s.rounds);
      v.rules = s;
      break;
    }
    case GameFamily::Dictator: {
      DictatorGameSpec s;
      get_opt(j, "endowment", s.endowment);
      if (auto it = j.find("third_party"); it != j.end() && !it->is_null()) {
        ThirdPartySpec t;
        get_opt(*it, "observer_endowment", t.observer_endowment);
        get_opt(*it, "punishment_ratio", t.punishment_ratio);
        s.third_party = t;
      }
      v.rules = s;
      break;
    }
    case GameFamily::CollectiveRisk: {
      CollectiveRiskSpec s;
      get_opt(j, "group_size", s.group_size);
      get_opt(j, "rounds", s.rounds);
      if (j.contains("endowments")) j.at("endowments").get_to(s.endowments);
      else s.endowments.assign(static_cast<std::size_t>(std::max(0, s.group_size)), 40);
      get_opt(j, "target", s.target);
      get_opt(j, "risk", s.risk);
      get_opt(j, "allowed_contributions", s.allowed_contributions);
      v.rules = s;
      break;
    }
    case GameFamily::Market: {
      MarketGameSpec s;
      if (j.contains("price_moves")) {
        for (const Json& m : j.at("price_moves")) s.price_moves.push_back(parse_enum<PriceMove>(m, parse_price, "price move"));
      }
      s.rounds = static_cast<int>(s.price_moves.size());
      get_opt(j, "rounds", s.rounds);
      get_opt(j, "reward_correct", s.reward_correct);
      get_opt(j, "endowment", s.endowment);
      get_opt(j, "info_panels", s.info_panels);
      v.rules = s;
      break;
    }
  }
}

void to_json(Json& j, const StageSpec& v) {
  j = Json{{"id", v.id}, {"kind", to_string(v.kind)}, {"ref", v.ref}, {"skippable", v.skippable}};
}
void from_json(const Json& j, StageSpec& v) {
  j.at("id").get_to(v.id);
  v.kind = parse_enum<StageKind>(j.at("kind"), parse_stage_kind, "stage kind");
  get_opt(j, "ref", v.ref);
  get_opt(j, "skippable", v.skippable);
}

void to_json(Json& j, const Question& v) {
  j = Json{{"id", v.id},         {"prompt", v.prompt}, {"type", to_string(v.type)},   {"options", v.options},
           {"min", v.min},       {"max", v.max},       {"required", v.required},      {"personal", v.personal}};
}
void from_json(const Json& j, Question& v) {
  j.at("id").get_to(v.id);
  get_opt(j, "prompt", v.prompt);
  v.type = parse_enum<AnswerType>(j.at("type"), parse_answer_type, "answer type");
  get_opt(j, "options", v.options);
  get_opt(j, "min", v.min);
  get_opt(j, "max", v.max);
  get_opt(j, "required", v.required);
  get_opt(j, "personal", v.personal);
}

void to_json(Json& j, const SurveyDefinition& v) { j = Json{{"id", v.id}, {"questions", v.questions}}; }
void from_json(const Json& j, SurveyDefinition& v) {
  j.at("id").get_to(v.id);
  get_opt(j, "questions", v.questions);
}

void to_json(Json& j, const DisconnectPolicy& v) {
  j = Json{{"grace_ms", v.grace_ms}, {"on_timeout", to_string(v.on_timeout)}, {"default_action", v.default_action}};
}
void from_json(const Json& j, DisconnectPolicy& v) {
  get_opt(j, "grace_ms", v.grace_ms);
  if (j.contains("on_timeout")) v.on_timeout = parse_enum<TimeoutAction>(j.at("on_timeout"), parse_timeout_action, "timeout action");
  if (j.contains("default_action")) v.default_action = j.at("default_action");
}

void to_json(Json& j, const ExperimentDefinition& v) {
  Json games = Json::object();
  for (const auto& [k, g] : v.games) games[k] = g;
  Json surveys = Json::object();
  for (const auto& [k, s] : v.surveys) surveys[k] = s;
  Json policies = Json::object();
  for (const auto& [f, p] : v.disconnect_overrides) policies[std::string(to_string(f))] = p;
  j = Json{{"id", v.id},
           {"title", v.title},
           {"stages", v.stages},
           {"games", games},
           {"surveys", surveys},
           {"locale_texts", v.locale_texts},
           {"currency_name", v.currency_name},
           {"conversion_note", v.conversion_note},
           {"capacity", v.capacity},
           {"disconnect_policies", policies}};
}

void from_json(const Json& j, ExperimentDefinition& v) {
  j.at("id").get_to(v.id);
  get_opt(j, "title", v.title);
  get_opt(j, "stages", v.stages);
  if (auto it = j.find("games"); it != j.end()) {
    for (const auto& [k, g] : it->items()) v.games[k] = g.get<GameSpec>();
  }
  if (auto it = j.find("surveys"); it != j.end()) {
    for (const auto& [k, s] : it->items()) v.surveys[k] = s.get<SurveyDefinition>();
  }
  get_opt(j, "locale_texts", v.locale_texts);
  get_opt(j, "currency_name", v.currency_name);
  get_opt(j, "conversion_note", v.conversion_note);
  get_opt(j, "capacity", v.capacity);
  if (auto it = j.find("disconnect_policies"); it != j.end()) {
    for (const auto& [k, p] : it->items()) {
      auto family = parse_family(k);
      if (!family) fail(Errc::invalid_definition, "unknown game family '" + k + "'");
      v.disconnect_overrides[*family] = p.get<DisconnectPolicy>();
    }
  }
}

void to_json(Json& j, const Participant& v) {
  j = Json{{"anon_id", v.anon_id},
           {"session_id", v.session_id},
           {"joined_at", v.joined_at},
           {"current_stage", v.current_stage},
           {"connection_state", to_string(v.connection_state)},
           {"earnings", v.earnings}};
}
void from_json(const Json& j, Participant& v) {
  j.at("anon_id").get_to(v.anon_id);
  j.at("session_id").get_to(v.session_id);
  j.at("joined_at").get_to(v.joined_at);
  j.at("current_stage").get_to(v.current_stage);
  v.connection_state = parse_enum<ConnectionState>(j.at("connection_state"), parse_connection_state, "connection state");
  j.at("earnings").get_to(v.earnings);
}

void to_json(Json& j, const ActionEvent& v) {
  j = Json{{"seq", v.seq},     {"anon_id", v.anon_id},     {"stage", v.stage},
           {"kind", to_string(v.kind)}, {"payload", v.payload}, {"server_ts", v.server_ts},
           {"synthetic", v.synthetic}};
  if (v.game_instance_id) j["game_instance_id"] = *v.game_instance_id;
  if (v.game_family) j["game_family"] = to_string(*v.game_family);
  if (v.round) j["round"] = *v.round;
  if (v.client_ts) j["client_ts"] = *v.client_ts;
}

void from_json(const Json& j, ActionEvent& v) {
  j.at("seq").get_to(v.seq);
  j.at("anon_id").get_to(v.anon_id);
  j.at("stage").get_to(v.stage);
  v.kind = parse_enum<ActionKind>(j.at("kind"), parse_action_kind, "action kind");
  v.payload = j.value("payload", Json::object());
  j.at("server_ts").get_to(v.server_ts);
  v.synthetic = j.value("synthetic", false);
  v.game_instance_id.reset();
  v.game_family.reset();
  v.round.reset();
  v.client_ts.reset();
  if (auto it = j.find("game_instance_id"); it != j.end() && !it->is_null()) v.game_instance_id = it->get<std::string>();
  if (auto it = j.find("game_family"); it != j.end() && !it->is_null()) {
    v.game_family = parse_enum<GameFamily>(*it, parse_family, "game family");
  }
  if (auto it = j.find("round"); it != j.end() && !it->is_null()) v.round = it->get<int>();
  if (auto it = j.find("client_ts"); it != j.end() && !it->is_null()) v.client_ts = it->get<Millis>();
}

void to_json(Json& j, const PlayerState& v) {
  j = Json{{"anon_id", v.anon_id}, {"balance", v.balance}, {"last_outcome", v.last_outcome}};
  if (v.pending) j["pending"] = action_to_json(*v.pending);
}
void from_json(const Json& j, PlayerState& v) {
  j.at("anon_id").get_to(v.anon_id);
  j.at("balance").get_to(v.balance);
  v.last_outcome = j.value("last_outcome", Json());
  v.pending.reset();
  if (auto it = j.find("pending"); it != j.end() && !it->is_null()) v.pending = action_from_json(*it);
}

void to_json(Json& j, const GameInstance& v) {
  j = Json{{"id", v.id},
           {"spec", v.spec},
           {"players", v.players},
           {"round", v.round},
           {"phase", to_string(v.phase)},
           {"rng_seed", v.rng_seed},
           {"rng_counter", v.rng_counter},
           {"pot", v.pot},
           {"first_move", v.first_move},
           {"decisions", v.decisions},
           {"contributed", v.contributed}};
  if (v.crd_outcome) j["crd_outcome"] = to_string(*v.crd_outcome);
}

void from_json(const Json& j, GameInstance& v) {
  j.at("id").get_to(v.id);
  j.at("spec").get_to(v.spec);
  j.at("players").get_to(v.players);
  j.at("round").get_to(v.round);
  v.phase = parse_enum<Phase>(j.at("phase"), parse_phase, "phase");
  j.at("rng_seed").get_to(v.rng_seed);
  j.at("rng_counter").get_to(v.rng_counter);
  j.at("pot").get_to(v.pot);
  j.at("first_move").get_to(v.first_move);
  j.at("decisions").get_to(v.decisions);
  get_opt(j, "contributed", v.contributed);
  v.crd_outcome.reset();
  if (auto it = j.find("crd_outcome"); it != j.end() && !it->is_null()) {
    v.crd_outcome = parse_enum<CrdOutcome>(*it, parse_crd_outcome, "crd outcome");
  }
}

ExperimentDefinition parse_experiment(const Json& j) {
  try {
    return j.get<ExperimentDefinition>();
  } catch (const Json::exception& e) {
    fail(Errc::invalid_definition, std::string("malformed experiment definition: ") + e.what());
  }
}

}  // namespace csl
