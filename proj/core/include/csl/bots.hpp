#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "csl/model.hpp"
#include "csl/rng.hpp"
#include "csl/wire.hpp"

namespace csl::bots {

// Market strategies take two probabilities:
//   imitation:a,b  P(predict up | market went up) = a, P(down | down) = b
//   wsls:a,b       P(stay | win) = a, P(shift | lose) = b
// Other game families fall back to uniform random play for these two.
struct Strategy {
  enum class Kind { Random, Cooperate, Defect, Imitation, Wsls };
  Kind kind = Kind::Random;
  double a = 0.5;
  double b = 0.5;
};

Strategy parse_strategy(std::string_view text);  // throws invalid_action
std::string to_string(const Strategy& s);

// A scripted participant. It only sees wire frames and answers with wire
// frames; the same seed and the same incoming frames give the same output.
class Bot {
 public:
  Bot(std::string session_id, Strategy strategy, std::uint64_t seed);

  std::string join_frame() const;
  // Forgets what it already answered so the replayed view is acted on.
  std::string resume_frame();
  std::string heartbeat_frame() const;

  std::vector<std::string> on_frame(std::string_view frame);

  struct Stats {
    std::size_t received = 0;
    std::size_t sent = 0;
    std::size_t decisions = 0;
    std::size_t errors = 0;
    std::map<std::string, std::size_t> error_codes;
  };

  bool finished() const noexcept { return finished_; }
  const std::optional<AnonId>& anon_id() const noexcept { return anon_; }
  const Stats& stats() const noexcept { return stats_; }
  Units earnings() const noexcept { return earnings_; }
  const std::string& session_id() const noexcept { return session_; }
  const std::set<std::string>& completed_games() const noexcept { return completed_games_; }

 private:
  std::string submit(std::size_t stage, Json action);
  std::optional<Json> decide(const Json& state);
  Json market_move(const Json& state);
  std::uint64_t draw() { return counter_draw(seed_, counter_++); }
  double uniform();
  Units pick(Units lo, Units hi, Units step = 1);

  std::string session_;
  Strategy strategy_;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::optional<AnonId> anon_;
  std::string last_acted_;
  bool finished_ = false;
  Units earnings_ = 0;
  Stats stats_;
  std::set<std::string> completed_games_;
};

struct SwarmReport {
  std::size_t bots = 0;
  std::size_t joined = 0;
  std::size_t completed = 0;          // reached final_results
  std::size_t games_completed = 0;    // games that ended without abort, as seen by bots
  std::size_t decisions = 0;
  std::size_t protocol_errors = 0;
  std::size_t connection_failures = 0;
  std::map<std::string, std::size_t> error_codes;
  double latency_p50_ms = 0;
  double latency_p90_ms = 0;
  double latency_p99_ms = 0;
};

Json to_json(const SwarmReport& r);
// Percentile by nearest rank; 0 for an empty sample.
double percentile(std::vector<double> sample, double q);

struct BotSpec {
  Strategy strategy;
  std::uint64_t seed = 0;
};

struct LoopbackOptions {
  Millis think_min_ms = 200;
  Millis think_max_ms = 3000;
  Millis heartbeat_ms = 15'000;
  Millis tick_ms = 1'000;
  Millis max_duration_ms = 4 * 3'600'000;
  double drop_probability = 0;  // per outgoing reply batch
  Millis drop_min_ms = 5'000;
  Millis drop_max_ms = 120'000;
  std::uint64_t seed = 1;
  // Called with every frame the server sends to any bot.
  std::function<void(const AnonId&, std::string_view)> tap;
};

// Runs bots against a gateway in simulated time: frames go through the real
// protocol handler, the clock only moves forward between scheduled events.
SwarmReport run_loopback(wire::Gateway& gateway, ManualClock& clock, const std::string& session_id,
                         const std::vector<BotSpec>& bots, const LoopbackOptions& options = {});

}  // namespace csl::bots
