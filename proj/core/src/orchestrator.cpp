#include "csl/orchestrator.hpp"

#include <algorithm>
#include <chrono>

#include "csl/error.hpp"
#include "csl/rng.hpp"
#include "csl/serialize.hpp"

namespace csl {

namespace {

bool is_survey(StageKind k) { return k == StageKind::Survey || k == StageKind::PostSurvey; }

std::string hex64(std::uint64_t v) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = kHex[v & 0xF];
  return out;
}

Json history_json(const std::vector<GameHistoryEntry>& history) {
  Json out = Json::array();
  for (const auto& h : history) {
    out.push_back({{"instance", h.instance},
                   {"family", to_string(h.family)},
                   {"credited", h.credited},
                   {"aborted", h.aborted}});
  }
  return out;
}

// Validates the action and records the actor's outcome when it closes the round.
Json decision_payload(const GameInstance& g, const AnonId& who, const GameAction& action) {
  AdvanceResult trial = advance(g, who, action);
  Json payload{{"action", action_to_json(action)}};
  if (trial.round_resolved) payload["outcome"] = trial.instance.players[*g.index_of(who)].last_outcome;
  return payload;
}

}  // namespace

Millis SystemClock::now() const {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string_view to_string(SessionStatus s) noexcept {
  switch (s) {
    case SessionStatus::Draft: return "draft";
    case SessionStatus::Open: return "open";
    case SessionStatus::Running: return "running";
    case SessionStatus::Closed: return "closed";
  }
  return "unknown";
}

std::optional<SessionStatus> parse_session_status(std::string_view s) noexcept {
  for (auto v : {SessionStatus::Draft, SessionStatus::Open, SessionStatus::Running, SessionStatus::Closed}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

Json to_json(const SessionMeta& m) {
  return Json{{"id", m.id},
              {"experiment_id", m.experiment_id},
              {"status", to_string(m.status)},
              {"parameters", m.parameters},
              {"master_seed", m.master_seed},
              {"created_at", m.created_at},
              {"deterministic_ids", m.deterministic_ids}};
}

SessionMeta session_meta_from_json(const Json& j) {
  SessionMeta m;
  m.id = j.at("id").get<std::string>();
  m.experiment_id = j.at("experiment_id").get<std::string>();
  auto status = parse_session_status(j.at("status").get<std::string>());
  if (!status) fail(Errc::corrupt_record, "bad session status");
  m.status = *status;
  m.parameters = j.value("parameters", Json::object());
  m.master_seed = j.value("master_seed", std::uint64_t{0});
  m.created_at = j.value("created_at", Millis{0});
  m.deterministic_ids = j.value("deterministic_ids", false);
  return m;
}

Json to_json(const SessionSnapshot& s) {
  Json games = Json::array();
  for (const auto& g : s.games) {
    Json players = Json::array();
    for (const auto& p : g.players) {
      players.push_back({{"anon_id", p.anon_id.value}, {"balance", p.balance}, {"connection", to_string(p.connection)}});
    }
    games.push_back({{"id", g.id},
                     {"family", to_string(g.family)},
                     {"round", g.round},
                     {"phase", to_string(g.phase)},
                     {"decisions", g.decisions},
                     {"players", players}});
  }
  return Json{{"session_id", s.session_id},
              {"status", to_string(s.status)},
              {"paused", s.paused},
              {"parameters", s.parameters},
              {"participants", s.participants},
              {"connections", s.connections},
              {"games_by_phase", s.games_by_phase},
              {"decisions", s.decisions},
              {"total_earnings", s.total_earnings},
              {"last_seq", s.last_seq},
              {"demographics", s.demographics},
              {"games", games}};
}

std::vector<std::vector<AnonId>> form_groups(std::deque<AnonId>& queue, std::size_t group_size,
                                             const std::function<bool(const AnonId&, const AnonId&)>& recently_paired) {
  std::vector<std::vector<AnonId>> groups;
  if (group_size == 0) return groups;
  while (queue.size() >= group_size) {
    std::vector<std::size_t> pick{0};
    for (std::size_t i = 1; i < queue.size() && pick.size() < group_size; ++i) {
      bool clash = std::any_of(pick.begin(), pick.end(), [&](std::size_t j) { return recently_paired(queue[j], queue[i]); });
      if (!clash) pick.push_back(i);
    }
    for (std::size_t i = 1; i < queue.size() && pick.size() < group_size; ++i) {
      if (std::find(pick.begin(), pick.end(), i) == pick.end()) pick.push_back(i);
    }
    std::sort(pick.begin(), pick.end());
    std::vector<AnonId> group;
    for (std::size_t i : pick) group.push_back(queue[i]);
    for (auto it = pick.rbegin(); it != pick.rend(); ++it) queue.erase(queue.begin() + static_cast<std::ptrdiff_t>(*it));
    groups.push_back(std::move(group));
  }
  return groups;
}

// ---------------------------------------------------------------------------

Session::Session(std::shared_ptr<const ExperimentDefinition> def, SessionMeta meta, std::unique_ptr<EventStore> store,
                 std::unique_ptr<PersonalStore> personal, const Clock& clock)
    : def_(std::move(def)),
      meta_(std::move(meta)),
      store_(std::move(store)),
      personal_(std::move(personal)),
      clock_(clock),
      id_rng_(std::random_device{}()) {
  if (auto* file = dynamic_cast<FileEventLog*>(store_.get()); file != nullptr && file->recovery_report()) {
    recovery_ = *file->recovery_report();
  }
  for (const ActionEvent& ev : store_->read_all()) {
    try {
      apply(ev, nullptr);
    } catch (const std::exception& e) {
      recovery_ = "replay halted before seq " + std::to_string(ev.seq) + ": " + e.what();
      break;
    }
  }
}

ParticipantRecord& Session::require(const AnonId& who) {
  auto it = participants_.find(who);
  if (it == participants_.end()) fail(Errc::unknown_participant, "unknown participant '" + who.value + "'");
  return it->second;
}

const ParticipantRecord& Session::require(const AnonId& who) const {
  auto it = participants_.find(who);
  if (it == participants_.end()) fail(Errc::unknown_participant, "unknown participant '" + who.value + "'");
  return it->second;
}

void Session::require_accepting() const {
  if (meta_.status == SessionStatus::Closed) fail(Errc::session_closed, "session " + meta_.id + " is closed");
}

DisconnectPolicy Session::policy_for(const ParticipantRecord& p) const {
  if (p.game) {
    GameFamily family = games_.at(*p.game).family();
    if (auto it = def_->disconnect_overrides.find(family); it != def_->disconnect_overrides.end()) return it->second;
    return default_disconnect_policy(family);
  }
  return DisconnectPolicy{};
}

ActionEvent Session::make_event(const ParticipantRecord& p, ActionKind kind, Json payload,
                                std::optional<Millis> client_ts) const {
  ActionEvent ev;
  ev.anon_id = p.info.anon_id;
  ev.stage = p.info.current_stage;
  ev.kind = kind;
  ev.payload = std::move(payload);
  ev.server_ts = clock_.now();
  ev.client_ts = client_ts;
  if (p.game) {
    const GameInstance& g = games_.at(*p.game);
    ev.game_instance_id = g.id;
    ev.game_family = g.family();
    ev.round = g.round;
  }
  return ev;
}

AnonId Session::next_anon_id() {
  for (std::uint64_t salt = 0;; ++salt) {
    AnonId id;
    if (meta_.deterministic_ids) {
      std::uint64_t n = join_order_.size() + salt * 1'000'003;
      id.value = hex64(counter_draw(meta_.master_seed, 2 * n)) + hex64(counter_draw(meta_.master_seed, 2 * n + 1));
    } else {
      id = random_anon_id(id_rng_);
    }
    if (!participants_.contains(id)) return id;
  }
}

// ---------------------------------------------------------------------------
// Commit / apply

std::vector<Outbound> Session::commit(ActionEvent event) {
  try {
    store_->append(event);
  } catch (const Error& e) {
    if (e.code() == Errc::storage_error) paused_ = true;
    throw;
  }
  paused_ = false;
  Effects fx;
  apply(event, &fx);
  append_derived(fx);
  return std::move(fx.out);
}

void Session::append_derived(Effects& fx) {
  for (ActionEvent& ev : fx.derived) {
    try {
      store_->append(ev);
    } catch (const Error&) {
      paused_ = true;
      return;
    }
  }
}

void Session::apply(const ActionEvent& ev, Effects* fx) {
  switch (ev.kind) {
    case ActionKind::ConnectionChange:
      apply_connection(ev, fx);
      return;
    case ActionKind::Decision:
      apply_decision(ev, fx);
      return;
    case ActionKind::InfoRequest:
      return;
    case ActionKind::Navigation: {
      if (ev.payload.contains("round_open")) return;
      ParticipantRecord& p = require(ev.anon_id);
      if (p.info.current_stage != ev.stage) fail(Errc::internal_inconsistency, "navigation from a stale stage");
      if (ev.payload.value("action", "") == "skip" && p.queued) dequeue(p);
      advance_stage(p, fx);
      return;
    }
    case ActionKind::SurveyAnswer: {
      ParticipantRecord& p = require(ev.anon_id);
      if (p.info.current_stage != ev.stage) fail(Errc::internal_inconsistency, "answer from a stale stage");
      const SurveyDefinition* survey = def_->survey(def_->stages[ev.stage].ref);
      if (survey == nullptr) fail(Errc::internal_inconsistency, "answer outside a survey stage");
      std::string qid = ev.payload.at("question").get<std::string>();
      p.answered.insert(qid);
      const Question* q = survey->find(qid);
      if (q != nullptr && !q->personal && q->type == AnswerType::SingleChoice && ev.payload.contains("value")) {
        p.demographics[qid] = ev.payload.at("value").get<std::string>();
      }
      bool complete = std::all_of(survey->questions.begin(), survey->questions.end(),
                                  [&](const Question& x) { return p.answered.contains(x.id); });
      if (complete) advance_stage(p, fx);
      else if (fx) fx->out.push_back({p.info.anon_id, "stage_payload", stage_payload(p)});
      return;
    }
  }
}

void Session::apply_connection(const ActionEvent& ev, Effects* fx) {
  const std::string state = ev.payload.at("state").get<std::string>();
  if (state == "joined") {
    ParticipantRecord rec;
    rec.info.anon_id = ev.anon_id;
    rec.info.session_id = meta_.id;
    rec.info.joined_at = ev.server_ts;
    rec.last_seen = clock_.now();
    auto [it, inserted] = participants_.emplace(ev.anon_id, std::move(rec));
    if (!inserted) fail(Errc::internal_inconsistency, "participant joined twice");
    join_order_.push_back(ev.anon_id);
    if (meta_.status == SessionStatus::Open || meta_.status == SessionStatus::Draft) meta_.status = SessionStatus::Running;
    enter_stage(it->second, 0, fx);
    return;
  }
  ParticipantRecord& p = require(ev.anon_id);
  if (p.info.connection_state == ConnectionState::Finished) return;
  if (state == "connected") {
    bool was_away = p.info.connection_state == ConnectionState::Disconnected;
    p.info.connection_state = ConnectionState::Connected;
    p.auto_play = false;
    const StageSpec& stage = def_->stages[p.info.current_stage];
    if (was_away && stage.kind == StageKind::Game && !p.game && !p.queued) enqueue(p, fx);
  } else if (state == "idle") {
    p.info.connection_state = ConnectionState::Idle;
  } else if (state == "disconnected") {
    p.info.connection_state = ConnectionState::Disconnected;
    if (p.queued) dequeue(p);
    if (p.game && !games_.at(*p.game).over() && ev.payload.contains("policy")) {
      auto action = parse_timeout_action(ev.payload.at("policy").get<std::string>());
      if (!action) fail(Errc::corrupt_record, "unknown timeout policy");
      if (*action == TimeoutAction::AbortGameRefundOthers) {
        finish_game(*p.game, p.info.anon_id, fx);
      } else {
        p.auto_play = true;
        p.auto_mode = *action;
      }
    }
  } else {
    fail(Errc::corrupt_record, "unknown connection state '" + state + "'");
  }
}

void Session::apply_decision(const ActionEvent& ev, Effects* fx) {
  ParticipantRecord& p = require(ev.anon_id);
  if (!ev.game_instance_id || !p.game || *p.game != *ev.game_instance_id) {
    fail(Errc::internal_inconsistency, "decision for a game the participant is not in");
  }
  const std::string gid = *ev.game_instance_id;
  const GameInstance before = games_.at(gid);
  GameAction action = action_from_json(ev.payload.at("action"));
  AdvanceResult res = advance(before, p.info.anon_id, action);
  games_[gid] = res.instance;
  const GameInstance& after = games_.at(gid);

  if (fx) {
    for (auto& n : res.notifications) {
      n.body["stage"] = participants_.at(n.to).info.current_stage;
      fx->out.push_back({n.to, std::string(to_string(n.kind)), std::move(n.body)});
    }
    if (const auto* m = std::get_if<MarketPrediction>(&action)) {
      const auto& spec = std::get<MarketGameSpec>(before.spec.rules);
      for (const auto& panel : m->info) {
        auto it = std::find_if(spec.info_panels.begin(), spec.info_panels.end(),
                               [&](const InfoPanel& x) { return x.id == panel; });
        ActionEvent info = ev;
        info.kind = ActionKind::InfoRequest;
        info.payload = Json{{"panel", panel}, {"cost", it->cost}};
        fx->derived.push_back(std::move(info));
      }
    }
    if (!after.over()) {
      std::vector<std::size_t> opened;
      for (std::size_t i = 0; i < after.players.size(); ++i) {
        if (awaiting(after, i) && (after.round != before.round || !awaiting(before, i))) opened.push_back(i);
      }
      notify_round_open(after, opened, fx);
    }
  }
  if (after.over()) finish_game(gid, std::nullopt, fx);
}

void Session::notify_round_open(const GameInstance& g, const std::vector<std::size_t>& players, Effects* fx) {
  if (fx == nullptr) return;
  for (std::size_t i : players) {
    const ParticipantRecord& p = participants_.at(g.players[i].anon_id);
    ActionEvent ev;
    ev.anon_id = p.info.anon_id;
    ev.stage = p.info.current_stage;
    ev.kind = ActionKind::Navigation;
    ev.payload = Json{{"round_open", g.round}};
    ev.server_ts = clock_.now();
    ev.game_instance_id = g.id;
    ev.game_family = g.family();
    ev.round = g.round;
    fx->derived.push_back(std::move(ev));
  }
}

void Session::finish_game(const std::string& gid, const std::optional<AnonId>& absent, Effects* fx) {
  GameInstance& g = games_.at(gid);
  bool aborted = !g.over() || g.phase == Phase::Aborted;
  if (!g.over()) g = abort_game(std::move(g));
  std::vector<AnonId> members;
  for (const auto& ps : g.players) members.push_back(ps.anon_id);
  for (std::size_t i = 0; i < g.players.size(); ++i) {
    ParticipantRecord& rec = participants_.at(g.players[i].anon_id);
    Units credited = (absent && *absent == rec.info.anon_id) ? 0 : std::max<Units>(0, g.players[i].balance);
    rec.info.earnings += credited;
    rec.history.push_back({gid, g.family(), credited, aborted});
    rec.game.reset();
    rec.auto_play = false;
    rec.last_partners.clear();
    for (const auto& m : members) {
      if (m != rec.info.anon_id) rec.last_partners.insert(m);
    }
    if (fx && aborted && !(absent && *absent == rec.info.anon_id)) {
      fx->out.push_back({rec.info.anon_id,
                         "round_result",
                         Json{{"instance", gid}, {"stage", rec.info.current_stage}, {"round", g.round}, {"final", true}, {"aborted", true},
                              {"balance", g.players[i].balance}, {"credited", credited}}});
    }
  }
  for (const auto& m : members) advance_stage(participants_.at(m), fx);
}

void Session::enter_stage(ParticipantRecord& p, std::size_t stage, Effects* fx) {
  p.info.current_stage = stage;
  p.answered.clear();
  const StageSpec& spec = def_->stages.at(stage);
  if (spec.kind == StageKind::Game) {
    if (p.info.connection_state != ConnectionState::Disconnected) enqueue(p, fx);
    if (fx && !p.game) {
      fx->out.push_back({p.info.anon_id, "wait", Json{{"reason", "matchmaking"}, {"stage", stage}}});
    }
    return;
  }
  if (fx) fx->out.push_back({p.info.anon_id, "stage_payload", stage_payload(p)});
}

void Session::advance_stage(ParticipantRecord& p, Effects* fx) {
  auto next = next_stage(p.info, *def_);
  if (!next) {
    p.info.connection_state = ConnectionState::Finished;
    if (fx) fx->out.push_back({p.info.anon_id, "final_results", final_results(p)});
    return;
  }
  enter_stage(p, *next, fx);
}

void Session::enqueue(ParticipantRecord& p, Effects* fx) {
  p.queued = true;
  queues_[p.info.current_stage].push_back(p.info.anon_id);
  run_matchmaking(p.info.current_stage, fx);
}

void Session::dequeue(ParticipantRecord& p) {
  auto& q = queues_[p.info.current_stage];
  q.erase(std::remove(q.begin(), q.end(), p.info.anon_id), q.end());
  p.queued = false;
}

std::vector<GameInstance> Session::run_matchmaking(std::size_t stage, Effects* fx) {
  std::vector<GameInstance> created;
  const GameSpec* spec = def_->game(def_->stages.at(stage).ref);
  if (spec == nullptr || meta_.status != SessionStatus::Running) return created;
  auto recently_paired = [&](const AnonId& a, const AnonId& b) {
    return participants_.at(a).last_partners.contains(b);
  };
  auto groups = form_groups(queues_[stage], static_cast<std::size_t>(spec->player_count()), recently_paired);
  for (auto& group : groups) {
    ++instance_counter_;
    std::string id = meta_.id + "-g" + std::to_string(instance_counter_);
    GameInstance g = create_instance(id, *spec, group, derive_seed(meta_.master_seed, instance_counter_));
    for (const auto& member : group) {
      ParticipantRecord& rec = participants_.at(member);
      rec.game = id;
      rec.queued = false;
    }
    auto [it, _] = games_.insert_or_assign(id, std::move(g));
    const GameInstance& live = it->second;
    if (fx) {
      std::vector<std::size_t> opened;
      for (std::size_t i = 0; i < live.players.size(); ++i) {
        Json view = player_view(live, live.players[i].anon_id);
        view["stage"] = stage;
        fx->out.push_back({live.players[i].anon_id, "game_state", std::move(view)});
        if (awaiting(live, i)) opened.push_back(i);
      }
      notify_round_open(live, opened, fx);
    }
    created.push_back(live);
  }
  return created;
}

// ---------------------------------------------------------------------------
// Timeout policies

std::optional<ActionEvent> Session::auto_decision(const GameInstance& g, std::size_t idx) const {
  const ParticipantRecord& rec = participants_.at(g.players[idx].anon_id);
  auto legal = legal_actions(g, idx);
  if (legal.empty()) return std::nullopt;
  GameAction chosen = legal.front();
  if (rec.auto_mode == TimeoutAction::SubstituteBot) {
    std::uint64_t draw = counter_draw(g.rng_seed ^ 0x5b0b07ULL, static_cast<std::uint64_t>(g.decisions) * 7919 + idx);
    chosen = legal[draw % legal.size()];
  } else {
    DisconnectPolicy policy = policy_for(rec);
    if (!policy.default_action.is_null()) {
      try {
        GameAction preferred = action_from_json(policy.default_action);
        (void)advance(g, rec.info.anon_id, preferred);
        chosen = preferred;
      } catch (const Error&) {
        // default not legal in this phase; keep the first legal action
      }
    }
  }
  ActionEvent ev = make_event(rec, ActionKind::Decision, decision_payload(g, rec.info.anon_id, chosen), std::nullopt);
  ev.synthetic = true;
  return ev;
}

void Session::drive_auto_players(std::vector<Outbound>& out) {
  for (bool progressed = true; progressed;) {
    progressed = false;
    for (const auto& [gid, g] : games_) {
      if (g.over()) continue;
      for (std::size_t i = 0; i < g.players.size(); ++i) {
        const ParticipantRecord& rec = participants_.at(g.players[i].anon_id);
        if (!rec.auto_play || !awaiting(g, i)) continue;
        auto ev = auto_decision(g, i);
        if (!ev) continue;
        auto more = commit(std::move(*ev));
        out.insert(out.end(), more.begin(), more.end());
        progressed = true;
        break;
      }
      if (progressed) break;  // games_ may have changed
    }
  }
}

// ---------------------------------------------------------------------------
// Public commands

Session::JoinResult Session::join(std::optional<Millis> client_ts) {
  std::lock_guard lock(mu_);
  if (meta_.status == SessionStatus::Closed) fail(Errc::session_closed, "session " + meta_.id + " is closed");
  if (meta_.status == SessionStatus::Draft) fail(Errc::session_closed, "session " + meta_.id + " is not open yet");
  std::size_t active = std::count_if(participants_.begin(), participants_.end(), [](const auto& kv) {
    auto s = kv.second.info.connection_state;
    return s == ConnectionState::Connected || s == ConnectionState::Idle;
  });
  if (active >= static_cast<std::size_t>(def_->capacity)) {
    fail(Errc::session_full, "session " + meta_.id + " already has " + std::to_string(active) + " participants");
  }
  ActionEvent ev;
  ev.anon_id = next_anon_id();
  ev.stage = 0;
  ev.kind = ActionKind::ConnectionChange;
  ev.payload = Json{{"state", "joined"}};
  ev.server_ts = clock_.now();
  ev.client_ts = client_ts;
  AnonId id = ev.anon_id;
  JoinResult result;
  result.out = commit(std::move(ev));
  drive_auto_players(result.out);
  result.participant = participants_.at(id).info;
  return result;
}

std::vector<Outbound> Session::submit(const AnonId& who, std::size_t stage, const Json& action,
                                      std::optional<Millis> client_ts) {
  std::lock_guard lock(mu_);
  require_accepting();
  ParticipantRecord& p = require(who);
  p.last_seen = clock_.now();
  if (p.info.connection_state == ConnectionState::Finished) fail(Errc::protocol_violation, "participant already finished");
  if (stage != p.info.current_stage) {
    fail(Errc::protocol_violation,
         "stage mismatch: submitted for " + std::to_string(stage) + ", participant is at " + std::to_string(p.info.current_stage));
  }
  if (!action.is_object()) fail(Errc::protocol_violation, "action must be an object");

  std::vector<Outbound> out;
  if (p.info.connection_state != ConnectionState::Connected) {
    out = commit(make_event(p, ActionKind::ConnectionChange, Json{{"state", "connected"}}, std::nullopt));
  }
  const StageSpec& spec = def_->stages[p.info.current_stage];
  ActionEvent ev;

  if (auto it = action.find("navigate"); it != action.end()) {
    std::string nav = it->is_string() ? it->get<std::string>() : "";
    if (nav == "continue") {
      if (spec.kind == StageKind::Game) fail(Errc::protocol_violation, "game stages end when the game ends");
      if (is_survey(spec.kind)) {
        const SurveyDefinition* survey = def_->survey(spec.ref);
        for (const Question& q : survey->questions) {
          if (q.required && !p.answered.contains(q.id)) fail(Errc::invalid_action, "required question '" + q.id + "' unanswered");
        }
      }
    } else if (nav == "skip") {
      if (!spec.skippable) fail(Errc::protocol_violation, "stage " + spec.id + " cannot be skipped");
      if (p.game) fail(Errc::protocol_violation, "cannot skip a game in progress");
    } else {
      fail(Errc::protocol_violation, "navigate must be \"continue\" or \"skip\"");
    }
    ev = make_event(p, ActionKind::Navigation, Json{{"action", nav}}, client_ts);
  } else if (auto it = action.find("answer"); it != action.end()) {
    if (!is_survey(spec.kind)) fail(Errc::protocol_violation, "survey answer outside a survey stage");
    const SurveyDefinition* survey = def_->survey(spec.ref);
    if (!it->is_object() || !it->contains("question") || !it->at("question").is_string() || !it->contains("value")) {
      fail(Errc::invalid_action, "answer needs question and value");
    }
    std::string qid = it->at("question").get<std::string>();
    const Question* q = survey->find(qid);
    if (q == nullptr) fail(Errc::invalid_action, "unknown question '" + qid + "'");
    if (p.answered.contains(qid)) fail(Errc::duplicate_action, "question '" + qid + "' already answered");
    if (auto problem = check_answer(*q, it->at("value"))) fail(Errc::invalid_action, "question '" + qid + "': " + *problem);
    Json payload{{"survey", survey->id}, {"question", qid}};
    if (q->personal) {
      if (!personal_) fail(Errc::storage_error, "no personal store configured");
      personal_->put({who, survey->id, qid, it->at("value"), clock_.now()});
      payload["personal"] = true;
    } else {
      payload["value"] = it->at("value");
    }
    ev = make_event(p, ActionKind::SurveyAnswer, std::move(payload), client_ts);
  } else if (auto it = action.find("decision"); it != action.end()) {
    if (spec.kind != StageKind::Game) fail(Errc::protocol_violation, "decision outside a game stage");
    if (!p.game) fail(Errc::protocol_violation, "no game assigned yet");
    const GameInstance& g = games_.at(*p.game);
    GameAction decision = action_from_json(*it);
    ev = make_event(p, ActionKind::Decision, decision_payload(g, who, decision), client_ts);
  } else {
    fail(Errc::protocol_violation, "unrecognised stage action");
  }

  auto more = commit(std::move(ev));
  out.insert(out.end(), more.begin(), more.end());
  drive_auto_players(out);
  return out;
}

std::vector<Outbound> Session::resume(const AnonId& who) {
  std::lock_guard lock(mu_);
  ParticipantRecord& p = require(who);
  p.last_seen = clock_.now();
  std::vector<Outbound> out;
  auto state = p.info.connection_state;
  if (meta_.status != SessionStatus::Closed && (state == ConnectionState::Idle || state == ConnectionState::Disconnected)) {
    out = commit(make_event(p, ActionKind::ConnectionChange, Json{{"state", "connected"}}, std::nullopt));
    drive_auto_players(out);
  }
  out.erase(std::remove_if(out.begin(), out.end(), [&](const Outbound& o) { return o.to == who; }), out.end());
  out.push_back(view_of(participants_.at(who)));
  return out;
}

std::vector<Outbound> Session::heartbeat(const AnonId& who) {
  std::lock_guard lock(mu_);
  ParticipantRecord& p = require(who);
  p.last_seen = clock_.now();
  std::vector<Outbound> out;
  auto state = p.info.connection_state;
  if (meta_.status != SessionStatus::Closed && (state == ConnectionState::Idle || state == ConnectionState::Disconnected)) {
    out = commit(make_event(p, ActionKind::ConnectionChange, Json{{"state", "connected"}}, std::nullopt));
    if (state == ConnectionState::Disconnected) {
      out.erase(std::remove_if(out.begin(), out.end(), [&](const Outbound& o) { return o.to == who; }), out.end());
      out.push_back(view_of(participants_.at(who)));
    }
    drive_auto_players(out);
  }
  return out;
}

std::vector<Outbound> Session::tick(Millis now) {
  std::lock_guard lock(mu_);
  std::vector<Outbound> out;
  if (meta_.status == SessionStatus::Closed) return out;
  try {
    for (const AnonId& id : join_order_) {
      ParticipantRecord& p = participants_.at(id);
      auto state = p.info.connection_state;
      if (state == ConnectionState::Finished || state == ConnectionState::Disconnected) continue;
      Millis silence = now - p.last_seen;
      DisconnectPolicy policy = policy_for(p);
      if (silence > policy.grace_ms) {
        Json payload{{"state", "disconnected"}, {"silence_ms", silence}};
        if (p.game && !games_.at(*p.game).over()) payload["policy"] = to_string(policy.on_timeout);
        auto more = commit(make_event(p, ActionKind::ConnectionChange, std::move(payload), std::nullopt));
        out.insert(out.end(), more.begin(), more.end());
      } else if (state == ConnectionState::Connected && silence > kIdleAfterMs) {
        auto more = commit(make_event(p, ActionKind::ConnectionChange, Json{{"state", "idle"}}, std::nullopt));
        out.insert(out.end(), more.begin(), more.end());
      }
    }
    drive_auto_players(out);
  } catch (const Error& e) {
    if (e.code() != Errc::storage_error) throw;
  }
  return out;
}

std::vector<GameInstance> Session::matchmake() {
  std::lock_guard lock(mu_);
  std::vector<GameInstance> created;
  Effects fx;
  for (auto& [stage, queue] : queues_) {
    auto more = run_matchmaking(stage, &fx);
    created.insert(created.end(), more.begin(), more.end());
  }
  append_derived(fx);
  return created;
}

// ---------------------------------------------------------------------------
// Views

Json Session::stage_payload(const ParticipantRecord& p) const {
  const std::size_t idx = p.info.current_stage;
  const StageSpec& st = def_->stages.at(idx);
  Json body{{"stage", idx},
            {"stage_id", st.id},
            {"kind", to_string(st.kind)},
            {"skippable", st.skippable},
            {"stages", def_->stages.size()},
            {"earnings", p.info.earnings},
            {"currency", def_->currency_name}};
  Json texts = Json::object();
  for (const auto& [locale, bundle] : def_->locale_texts) {
    const std::string& key = st.ref.empty() ? st.id : st.ref;
    if (auto it = bundle.find(key); it != bundle.end()) texts[locale] = it->second;
  }
  body["texts"] = texts;
  if (is_survey(st.kind)) {
    const SurveyDefinition* survey = def_->survey(st.ref);
    body["survey"] = *survey;
    body["answered"] = p.answered;
    Json next = nullptr;
    for (const Question& q : survey->questions) {
      if (!p.answered.contains(q.id)) {
        next = q.id;
        break;
      }
    }
    body["next_question"] = next;
  } else if (st.kind == StageKind::Tutorial || st.kind == StageKind::Game) {
    body["game"] = *def_->game(st.ref);
  } else if (st.kind == StageKind::Results) {
    body["history"] = history_json(p.history);
  }
  return body;
}

Json Session::final_results(const ParticipantRecord& p) const {
  return Json{{"earnings", p.info.earnings},
              {"currency", def_->currency_name},
              {"conversion_note", def_->conversion_note},
              {"games", history_json(p.history)}};
}

Outbound Session::view_of(const ParticipantRecord& p) const {
  if (p.info.connection_state == ConnectionState::Finished) return {p.info.anon_id, "final_results", final_results(p)};
  const StageSpec& st = def_->stages.at(p.info.current_stage);
  if (st.kind == StageKind::Game) {
    if (p.game) {
      Json view = player_view(games_.at(*p.game), p.info.anon_id);
      view["stage"] = p.info.current_stage;
      return {p.info.anon_id, "game_state", std::move(view)};
    }
    return {p.info.anon_id, "wait", Json{{"reason", "matchmaking"}, {"stage", p.info.current_stage}}};
  }
  return {p.info.anon_id, "stage_payload", stage_payload(p)};
}

Outbound Session::current_view(const AnonId& who) const {
  std::lock_guard lock(mu_);
  return view_of(require(who));
}

void Session::open() {
  std::lock_guard lock(mu_);
  if (meta_.status == SessionStatus::Closed) fail(Errc::conflict, "session " + meta_.id + " is closed");
  if (meta_.status == SessionStatus::Draft) meta_.status = SessionStatus::Open;
}

void Session::close() {
  std::lock_guard lock(mu_);
  meta_.status = SessionStatus::Closed;
  if (auto* file = dynamic_cast<FileEventLog*>(store_.get())) file->sync();
}

void Session::set_parameters(const Json& params) {
  std::lock_guard lock(mu_);
  if (meta_.status == SessionStatus::Running || meta_.status == SessionStatus::Closed) {
    fail(Errc::conflict, "parameters are frozen once the session is " + std::string(to_string(meta_.status)));
  }
  if (!params.is_object()) fail(Errc::invalid_action, "parameters must be an object");
  meta_.parameters = params;
}

SessionSnapshot Session::snapshot() const {
  std::lock_guard lock(mu_);
  SessionSnapshot s;
  s.session_id = meta_.id;
  s.status = meta_.status;
  s.paused = paused_;
  s.parameters = meta_.parameters;
  s.participants = participants_.size();
  s.last_seq = store_->last_seq();
  for (const AnonId& id : join_order_) {
    const ParticipantRecord& p = participants_.at(id);
    ++s.connections[std::string(to_string(p.info.connection_state))];
    s.total_earnings += p.info.earnings;
    for (const auto& [q, v] : p.demographics) ++s.demographics[q][v];
  }
  for (const auto& [id, g] : games_) {
    GameSummary gs;
    gs.id = id;
    gs.family = g.family();
    gs.round = g.round;
    gs.phase = g.phase;
    gs.decisions = g.decisions;
    for (const auto& ps : g.players) {
      gs.players.push_back({ps.anon_id, ps.balance, participants_.at(ps.anon_id).info.connection_state});
    }
    ++s.games_by_phase[std::string(to_string(g.phase))];
    s.decisions += static_cast<std::size_t>(g.decisions);
    s.games.push_back(std::move(gs));
  }
  return s;
}

SessionMeta Session::meta() const {
  std::lock_guard lock(mu_);
  return meta_;
}

bool Session::paused() const {
  std::lock_guard lock(mu_);
  return paused_;
}

std::uint64_t Session::last_seq() const {
  std::lock_guard lock(mu_);
  return store_->last_seq();
}

std::vector<ActionEvent> Session::events() const {
  std::lock_guard lock(mu_);
  return store_->read_all();
}

std::optional<std::string> Session::recovery_report() const {
  std::lock_guard lock(mu_);
  return recovery_;
}

bool Session::has_participant(const AnonId& who) const {
  std::lock_guard lock(mu_);
  return participants_.contains(who);
}

std::optional<ParticipantRecord> Session::participant(const AnonId& who) const {
  std::lock_guard lock(mu_);
  auto it = participants_.find(who);
  if (it == participants_.end()) return std::nullopt;
  return it->second;
}

std::optional<GameInstance> Session::game(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = games_.find(id);
  if (it == games_.end()) return std::nullopt;
  return it->second;
}

std::map<std::string, GameInstance> Session::games() const {
  std::lock_guard lock(mu_);
  return games_;
}

Json Session::state_json() const {
  std::lock_guard lock(mu_);
  Json participants = Json::array();
  for (const AnonId& id : join_order_) {
    const ParticipantRecord& p = participants_.at(id);
    participants.push_back({{"participant", p.info},
                            {"game", p.game ? Json(*p.game) : Json()},
                            {"queued", p.queued},
                            {"auto_play", p.auto_play},
                            {"answered", p.answered},
                            {"history", history_json(p.history)}});
  }
  Json games = Json::array();
  for (const auto& [id, g] : games_) games.push_back(g);
  Json queues = Json::object();
  for (const auto& [stage, q] : queues_) {
    Json ids = Json::array();
    for (const auto& a : q) ids.push_back(a.value);
    queues[std::to_string(stage)] = ids;
  }
  return Json{{"participants", participants},
              {"games", games},
              {"queues", queues},
              {"instance_counter", instance_counter_},
              {"status", to_string(meta_.status)}};
}

}  // namespace csl
