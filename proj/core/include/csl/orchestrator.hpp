#pragma once

#include <atomic>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "csl/engine.hpp"
#include "csl/model.hpp"
#include "csl/persistence.hpp"

namespace csl {

class Clock {
 public:
  virtual ~Clock() = default;
  virtual Millis now() const = 0;
};

class SystemClock final : public Clock {
 public:
  Millis now() const override;
};

// Logical clock for reproducible runs; time moves only when told to.
class ManualClock final : public Clock {
 public:
  explicit ManualClock(Millis start = 0) : now_(start) {}
  Millis now() const override { return now_.load(); }
  void set(Millis t) { now_.store(t); }
  void advance(Millis dt) { now_.fetch_add(dt); }

 private:
  std::atomic<Millis> now_;
};

enum class SessionStatus { Draft, Open, Running, Closed };
std::string_view to_string(SessionStatus s) noexcept;
std::optional<SessionStatus> parse_session_status(std::string_view s) noexcept;

struct SessionMeta {
  std::string id;
  std::string experiment_id;
  SessionStatus status = SessionStatus::Draft;
  Json parameters = Json::object();
  std::uint64_t master_seed = 0;
  Millis created_at = 0;
  // Anon ids drawn from the master seed instead of the OS entropy pool.
  bool deterministic_ids = false;
};

Json to_json(const SessionMeta& meta);
SessionMeta session_meta_from_json(const Json& j);

// Server-to-participant message, before envelope framing.
struct Outbound {
  AnonId to;
  std::string type;  // stage_payload | wait | game_state | round_result | final_results
  Json body;
};

struct GameHistoryEntry {
  std::string instance;
  GameFamily family = GameFamily::Dyadic;
  Units credited = 0;
  bool aborted = false;
};

struct ParticipantRecord {
  Participant info;
  Millis last_seen = 0;
  std::set<std::string> answered;  // questions of the current survey stage
  std::optional<std::string> game;
  bool queued = false;
  bool auto_play = false;  // a timeout policy is acting for this player
  TimeoutAction auto_mode = TimeoutAction::AutoDefaultAction;
  std::map<std::string, std::string> demographics;  // non-personal single-choice answers
  std::set<AnonId> last_partners;
  std::vector<GameHistoryEntry> history;
};

struct GameSummary {
  std::string id;
  GameFamily family = GameFamily::Dyadic;
  int round = 0;
  Phase phase = Phase::AwaitingBoth;
  int decisions = 0;
  struct Seat {
    AnonId anon_id;
    Units balance = 0;
    ConnectionState connection = ConnectionState::Connected;
  };
  std::vector<Seat> players;
};

struct SessionSnapshot {
  std::string session_id;
  SessionStatus status = SessionStatus::Draft;
  bool paused = false;
  Json parameters = Json::object();
  std::size_t participants = 0;
  std::map<std::string, std::size_t> connections;  // by connection state
  std::map<std::string, std::size_t> games_by_phase;
  std::size_t decisions = 0;
  Units total_earnings = 0;
  std::uint64_t last_seq = 0;
  std::map<std::string, std::map<std::string, std::size_t>> demographics;
  std::vector<GameSummary> games;
};

Json to_json(const SessionSnapshot& s);

// Splits full groups off the front of a FIFO queue. Each group starts at the
// queue head; later members skip candidates flagged by `recently_paired`
// when enough alternatives remain, otherwise plain FIFO order is used.
std::vector<std::vector<AnonId>> form_groups(std::deque<AnonId>& queue, std::size_t group_size,
                                             const std::function<bool(const AnonId&, const AnonId&)>& recently_paired);

// One experiment session. Every state change is an ActionEvent that is
// appended to the store before it is applied, so replaying the store
// rebuilds the live state exactly. All public members are serialized by an
// internal mutex.
class Session {
 public:
  static constexpr Millis kIdleAfterMs = 30'000;  // two missed 15 s heartbeats

  // Replays whatever the store already holds. A record that cannot be
  // applied stops the replay; see recovery_report().
  Session(std::shared_ptr<const ExperimentDefinition> def, SessionMeta meta, std::unique_ptr<EventStore> store,
          std::unique_ptr<PersonalStore> personal, const Clock& clock);

  struct JoinResult {
    Participant participant;
    std::vector<Outbound> out;
  };

  JoinResult join(std::optional<Millis> client_ts = std::nullopt);
  std::vector<Outbound> submit(const AnonId& who, std::size_t stage, const Json& action,
                               std::optional<Millis> client_ts = std::nullopt);
  std::vector<Outbound> resume(const AnonId& who);
  std::vector<Outbound> heartbeat(const AnonId& who);
  std::vector<Outbound> tick(Millis now);
  std::vector<GameInstance> matchmake();

  // Current view for one participant, as resume would send it.
  Outbound current_view(const AnonId& who) const;

  void open();
  void close();
  void set_parameters(const Json& params);

  SessionSnapshot snapshot() const;
  SessionMeta meta() const;
  bool paused() const;
  std::uint64_t last_seq() const;
  std::vector<ActionEvent> events() const;
  std::optional<std::string> recovery_report() const;
  bool has_participant(const AnonId& who) const;
  std::optional<ParticipantRecord> participant(const AnonId& who) const;
  std::optional<GameInstance> game(const std::string& id) const;
  std::map<std::string, GameInstance> games() const;
  const ExperimentDefinition& definition() const noexcept { return *def_; }
  PersonalStore* personal_store() noexcept { return personal_.get(); }

  // Canonical dump of the replayable state (participants, games, queues).
  Json state_json() const;

 private:
  struct Effects {
    std::vector<Outbound> out;
    std::vector<ActionEvent> derived;  // informational records, appended after apply
  };

  std::vector<Outbound> commit(ActionEvent event);
  void append_derived(Effects& fx);
  void apply(const ActionEvent& event, Effects* fx);
  void apply_connection(const ActionEvent& event, Effects* fx);
  void apply_decision(const ActionEvent& event, Effects* fx);
  void enter_stage(ParticipantRecord& p, std::size_t stage, Effects* fx);
  void advance_stage(ParticipantRecord& p, Effects* fx);
  void enqueue(ParticipantRecord& p, Effects* fx);
  void dequeue(ParticipantRecord& p);
  std::vector<GameInstance> run_matchmaking(std::size_t stage, Effects* fx);
  void finish_game(const std::string& game_id, const std::optional<AnonId>& absent, Effects* fx);
  void notify_round_open(const GameInstance& g, const std::vector<std::size_t>& players, Effects* fx);
  void drive_auto_players(std::vector<Outbound>& out);
  std::optional<ActionEvent> auto_decision(const GameInstance& g, std::size_t idx) const;

  ActionEvent make_event(const ParticipantRecord& p, ActionKind kind, Json payload, std::optional<Millis> client_ts) const;
  ParticipantRecord& require(const AnonId& who);
  const ParticipantRecord& require(const AnonId& who) const;
  void require_accepting() const;
  DisconnectPolicy policy_for(const ParticipantRecord& p) const;
  Json stage_payload(const ParticipantRecord& p) const;
  Outbound view_of(const ParticipantRecord& p) const;
  Json final_results(const ParticipantRecord& p) const;
  AnonId next_anon_id();

  mutable std::mutex mu_;
  std::shared_ptr<const ExperimentDefinition> def_;
  SessionMeta meta_;
  std::unique_ptr<EventStore> store_;
  std::unique_ptr<PersonalStore> personal_;
  const Clock& clock_;
  std::mt19937_64 id_rng_;
  bool paused_ = false;
  std::optional<std::string> recovery_;

  std::map<AnonId, ParticipantRecord> participants_;
  std::vector<AnonId> join_order_;
  std::map<std::size_t, std::deque<AnonId>> queues_;
  std::map<std::string, GameInstance> games_;
  std::uint64_t instance_counter_ = 0;
};

}  // namespace csl
