#include "csl/bots.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <queue>

#include "csl/error.hpp"

namespace csl::bots {

Strategy parse_strategy(std::string_view text) {
  Strategy s;
  std::string_view name = text.substr(0, text.find(':'));
  if (name == "random") s.kind = Strategy::Kind::Random;
  else if (name == "cooperate") s.kind = Strategy::Kind::Cooperate;
  else if (name == "defect") s.kind = Strategy::Kind::Defect;
  else if (name == "imitation") s.kind = Strategy::Kind::Imitation;
  else if (name == "wsls") s.kind = Strategy::Kind::Wsls;
  else fail(Errc::invalid_action, "unknown strategy '" + std::string(name) + "'");
  bool parametric = s.kind == Strategy::Kind::Imitation || s.kind == Strategy::Kind::Wsls;
  if (!parametric) {
    if (name.size() != text.size()) fail(Errc::invalid_action, "strategy " + std::string(name) + " takes no parameters");
    return s;
  }
  if (name.size() == text.size()) fail(Errc::invalid_action, "strategy " + std::string(name) + " needs two probabilities");
  std::string params(text.substr(name.size() + 1));
  auto comma = params.find(',');
  if (comma == std::string::npos) fail(Errc::invalid_action, "expected two comma-separated probabilities");
  try {
    std::size_t used = 0;
    s.a = std::stod(params.substr(0, comma), &used);
    if (used != comma) throw std::invalid_argument("a");
    std::string rest = params.substr(comma + 1);
    s.b = std::stod(rest, &used);
    if (used != rest.size()) throw std::invalid_argument("b");
  } catch (const std::exception&) {
    fail(Errc::invalid_action, "bad probability in '" + std::string(text) + "'");
  }
  if (s.a < 0 || s.a > 1 || s.b < 0 || s.b > 1) fail(Errc::invalid_action, "probabilities must lie in [0, 1]");
  return s;
}

std::string to_string(const Strategy& s) {
  switch (s.kind) {
    case Strategy::Kind::Random: return "random";
    case Strategy::Kind::Cooperate: return "cooperate";
    case Strategy::Kind::Defect: return "defect";
    case Strategy::Kind::Imitation: return "imitation:" + std::to_string(s.a) + "," + std::to_string(s.b);
    case Strategy::Kind::Wsls: return "wsls:" + std::to_string(s.a) + "," + std::to_string(s.b);
  }
  return "random";
}

// ---------------------------------------------------------------------------

Bot::Bot(std::string session_id, Strategy strategy, std::uint64_t seed)
    : session_(std::move(session_id)), strategy_(strategy), seed_(seed) {}

std::string Bot::join_frame() const {
  wire::Envelope e;
  e.type = "join";
  e.session = session_;
  return wire::encode(e);
}

std::string Bot::resume_frame() {
  last_acted_.clear();
  wire::Envelope e;
  e.type = "resume";
  e.session = session_;
  e.anon_id = anon_;
  return wire::encode(e);
}

std::string Bot::heartbeat_frame() const {
  wire::Envelope e;
  e.type = "heartbeat";
  e.session = session_;
  e.anon_id = anon_;
  return wire::encode(e);
}

double Bot::uniform() { return to_unit_interval(draw()); }

Units Bot::pick(Units lo, Units hi, Units step) {
  if (hi <= lo || step <= 0) return lo;
  auto n = static_cast<std::uint64_t>((hi - lo) / step + 1);
  return lo + step * static_cast<Units>(draw() % n);
}

std::string Bot::submit(std::size_t stage, Json action) {
  wire::Envelope e;
  e.type = "stage_submit";
  e.session = session_;
  e.anon_id = anon_;
  e.body = Json{{"stage", stage}, {"action", std::move(action)}};
  ++stats_.sent;
  return wire::encode(e);
}

std::vector<std::string> Bot::on_frame(std::string_view frame) {
  ++stats_.received;
  std::vector<std::string> out;
  Json j = Json::parse(frame, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    ++stats_.errors;
    ++stats_.error_codes["unparseable_frame"];
    return out;
  }
  if (!anon_ && j.contains("anon_id") && j["anon_id"].is_string()) anon_ = AnonId{j["anon_id"].get<std::string>()};
  const std::string type = j.value("type", "");
  const Json body = j.value("body", Json::object());

  if (type == "error") {
    ++stats_.errors;
    ++stats_.error_codes[body.value("code", "unknown")];
  } else if (type == "stage_payload") {
    std::size_t stage = body.at("stage").get<std::size_t>();
    std::string kind = body.value("kind", "");
    if (kind == "survey" || kind == "post_survey") {
      const Json& next = body.at("next_question");
      if (next.is_null()) {
        std::string key = "n:" + std::to_string(stage);
        if (key != last_acted_) {
          last_acted_ = key;
          out.push_back(submit(stage, Json{{"navigate", "continue"}}));
        }
        return out;
      }
      std::string qid = next.get<std::string>();
      std::string key = "q:" + std::to_string(stage) + ":" + qid;
      if (key == last_acted_) return out;
      last_acted_ = key;
      for (const Json& q : body.at("survey").at("questions")) {
        if (q.at("id") != qid) continue;
        std::string t = q.value("type", "single_choice");
        const auto options = q.value("options", std::vector<std::string>{});
        Json value;
        if (t == "single_choice") value = options.at(draw() % options.size());
        else if (t == "multi_choice") value = Json::array({options.at(draw() % options.size())});
        else if (t == "integer_range") value = pick(q.value("min", Units{0}), q.value("max", Units{0}));
        else value = "n/a";
        out.push_back(submit(stage, Json{{"answer", {{"question", qid}, {"value", value}}}}));
      }
    } else {
      std::string key = "n:" + std::to_string(stage);
      if (key != last_acted_) {
        last_acted_ = key;
        out.push_back(submit(stage, Json{{"navigate", "continue"}}));
      }
    }
  } else if (type == "game_state") {
    if (body.value("your_turn", false)) {
      std::string key = body.value("instance", "") + ":" + std::to_string(body.value("round", 0)) + ":" +
                        body.value("phase", "");
      if (key != last_acted_) {
        last_acted_ = key;
        if (auto action = decide(body)) {
          ++stats_.decisions;
          out.push_back(submit(body.at("stage").get<std::size_t>(), Json{{"decision", *action}}));
        }
      }
    }
  } else if (type == "round_result") {
    if (body.value("final", false) && !body.value("aborted", false)) completed_games_.insert(body.value("instance", ""));
  } else if (type == "final_results") {
    finished_ = true;
    earnings_ = body.value("earnings", Units{0});
  }
  return out;
}

std::optional<Json> Bot::decide(const Json& state) {
  const std::string family = state.value("family", "");
  const std::string role = state.value("role", "");
  const Json rules = state.value("rules", Json::object());
  const Strategy::Kind k = strategy_.kind;
  const bool nice = k == Strategy::Kind::Cooperate;
  const bool nasty = k == Strategy::Kind::Defect;

  if (family == "dyadic") {
    bool cooperate = nice || (!nasty && (draw() & 1) == 0);
    return Json{{"move", cooperate ? "C" : "D"}};
  }
  if (family == "trust") {
    if (role == "sender") {
      Units e = rules.value("sender_endowment", Units{0});
      Units g = rules.value("send_granularity", Units{1});
      Units x = nice ? e - e % g : nasty ? 0 : pick(0, e - e % g, g);
      return Json{{"send", x}};
    }
    Units available = state.value("available", Units{0});
    Units y = nice ? available / 2 : nasty ? 0 : pick(0, available);
    return Json{{"return", y}};
  }
  if (family == "dictator") {
    if (role == "dictator") {
      Units e = rules.value("endowment", Units{0});
      return Json{{"offer", nice ? e / 2 : nasty ? 0 : pick(0, e)}};
    }
    Units budget = rules.value("observer_endowment", Units{0});
    return Json{{"punish", nice || nasty ? 0 : pick(0, budget)}};
  }
  if (family == "collective_risk") {
    std::vector<Units> allowed;
    Units balance = state.value("balance", Units{0});
    for (const Json& a : rules.value("allowed_contributions", Json::array())) {
      if (a.get<Units>() <= balance) allowed.push_back(a.get<Units>());
    }
    if (allowed.empty()) return std::nullopt;
    std::sort(allowed.begin(), allowed.end());
    Units c = nice ? allowed.back() : nasty ? allowed.front() : allowed[draw() % allowed.size()];
    return Json{{"contribute", c}};
  }
  if (family == "market") return market_move(state);
  return std::nullopt;
}

Json Bot::market_move(const Json& state) {
  auto flip = [](const std::string& m) { return std::string(m == "up" ? "down" : "up"); };
  std::string prediction;
  const Json history = state.value("market_history", Json::array());
  const Json last = state.value("last_outcome", Json());
  if (strategy_.kind == Strategy::Kind::Imitation && !history.empty()) {
    std::string prev = history.back().get<std::string>();
    double p_same = prev == "up" ? strategy_.a : strategy_.b;
    prediction = uniform() < p_same ? prev : flip(prev);
  } else if (strategy_.kind == Strategy::Kind::Wsls && last.is_object() && last.contains("correct")) {
    std::string prev = last.at("prediction").get<std::string>();
    bool win = last.at("correct").get<bool>();
    bool stay = win ? uniform() < strategy_.a : !(uniform() < strategy_.b);
    prediction = stay ? prev : flip(prev);
  } else if (strategy_.kind == Strategy::Kind::Cooperate) {
    prediction = "up";
  } else if (strategy_.kind == Strategy::Kind::Defect) {
    prediction = "down";
  } else {
    prediction = (draw() & 1) ? "up" : "down";
  }
  Json move{{"predict", prediction}};
  if (strategy_.kind == Strategy::Kind::Random && uniform() < 0.1) {
    Units balance = state.value("balance", Units{0});
    for (const Json& panel : state.value("rules", Json::object()).value("info_panels", Json::array())) {
      if (panel.value("cost", Units{0}) <= balance) {
        move["info"] = Json::array({panel.at("id")});
        break;
      }
    }
  }
  return move;
}

// ---------------------------------------------------------------------------

double percentile(std::vector<double> sample, double q) {
  if (sample.empty()) return 0;
  std::sort(sample.begin(), sample.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sample.size())));
  return sample[std::clamp<std::size_t>(rank, 1, sample.size()) - 1];
}

Json to_json(const SwarmReport& r) {
  return Json{{"bots", r.bots},
              {"joined", r.joined},
              {"completed", r.completed},
              {"games_completed", r.games_completed},
              {"decisions", r.decisions},
              {"protocol_errors", r.protocol_errors},
              {"connection_failures", r.connection_failures},
              {"error_codes", r.error_codes},
              {"latency_ms", {{"p50", r.latency_p50_ms}, {"p90", r.latency_p90_ms}, {"p99", r.latency_p99_ms}}}};
}

namespace {

struct Slot {
  Bot bot;
  wire::Channel channel;
  bool dropped = false;
  bool heartbeat_scheduled = false;
};

enum class EvKind { Deliver, Send, Wake, Heartbeat, Tick };

struct SimEvent {
  Millis t = 0;
  std::uint64_t order = 0;
  EvKind kind = EvKind::Tick;
  std::size_t bot = 0;
  std::string frame;
};

struct Later {
  bool operator()(const SimEvent& a, const SimEvent& b) const { return std::tie(a.t, a.order) > std::tie(b.t, b.order); }
};

}  // namespace

SwarmReport run_loopback(wire::Gateway& gateway, ManualClock& clock, const std::string& session_id,
                         const std::vector<BotSpec>& specs, const LoopbackOptions& options) {
  std::vector<Slot> slots;
  slots.reserve(specs.size());
  for (const auto& spec : specs) slots.push_back({Bot(session_id, spec.strategy, spec.seed), {session_id, std::nullopt}});

  std::priority_queue<SimEvent, std::vector<SimEvent>, Later> queue;
  std::uint64_t order = 0;
  std::uint64_t draws = 0;
  auto rand_between = [&](Millis lo, Millis hi) {
    if (hi <= lo) return lo;
    return lo + static_cast<Millis>(counter_draw(options.seed, draws++) % static_cast<std::uint64_t>(hi - lo + 1));
  };
  auto schedule = [&](Millis t, EvKind kind, std::size_t bot, std::string frame = {}) {
    queue.push({t, order++, kind, bot, std::move(frame)});
  };
  std::map<AnonId, std::size_t> by_anon;
  std::vector<double> latencies;
  SwarmReport report;
  report.bots = slots.size();

  const Millis start = clock.now();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    schedule(start + rand_between(0, options.think_max_ms), EvKind::Send, i, slots[i].bot.join_frame());
  }
  schedule(start + options.tick_ms, EvKind::Tick, 0);

  auto all_finished = [&] {
    return std::all_of(slots.begin(), slots.end(), [](const Slot& s) { return s.bot.finished(); });
  };
  auto deliver = [&](std::size_t bot, std::string frame) { schedule(clock.now(), EvKind::Deliver, bot, std::move(frame)); };

  while (!queue.empty() && !all_finished()) {
    SimEvent ev = queue.top();
    queue.pop();
    if (ev.t - start > options.max_duration_ms) break;
    if (ev.t > clock.now()) clock.set(ev.t);
    Slot& slot = slots[ev.bot];

    switch (ev.kind) {
      case EvKind::Send: {
        if (slot.dropped) break;
        auto t0 = std::chrono::steady_clock::now();
        wire::HandleResult r = gateway.handle(slot.channel, ev.frame);
        latencies.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        if (slot.channel.anon_id && !by_anon.contains(*slot.channel.anon_id)) {
          by_anon[*slot.channel.anon_id] = ev.bot;
          if (!slot.heartbeat_scheduled) {
            slot.heartbeat_scheduled = true;
            schedule(clock.now() + options.heartbeat_ms, EvKind::Heartbeat, ev.bot);
          }
        }
        for (auto& f : r.reply) deliver(ev.bot, std::move(f));
        for (auto& d : r.others) {
          if (auto it = by_anon.find(d.to); it != by_anon.end()) deliver(it->second, std::move(d.frame));
        }
        if (r.close) {
          ++report.connection_failures;
          slot.dropped = true;
          schedule(clock.now() + options.drop_min_ms, EvKind::Wake, ev.bot);
        }
        break;
      }
      case EvKind::Deliver: {
        if (slot.dropped) break;
        if (options.tap && slot.channel.anon_id) options.tap(*slot.channel.anon_id, ev.frame);
        auto replies = slot.bot.on_frame(ev.frame);
        if (replies.empty()) break;
        if (options.drop_probability > 0 && !slot.bot.finished() &&
            to_unit_interval(counter_draw(options.seed ^ 0xd209ULL, draws++)) < options.drop_probability) {
          slot.dropped = true;
          schedule(clock.now() + rand_between(options.drop_min_ms, options.drop_max_ms), EvKind::Wake, ev.bot);
          break;
        }
        Millis t = clock.now();
        for (auto& f : replies) {
          t += rand_between(options.think_min_ms, options.think_max_ms);
          schedule(t, EvKind::Send, ev.bot, std::move(f));
        }
        break;
      }
      case EvKind::Wake: {
        slot.dropped = false;
        slot.channel = wire::Channel{session_id, std::nullopt};
        if (slot.bot.anon_id()) schedule(clock.now(), EvKind::Send, ev.bot, slot.bot.resume_frame());
        else schedule(clock.now(), EvKind::Send, ev.bot, slot.bot.join_frame());
        break;
      }
      case EvKind::Heartbeat: {
        if (slot.bot.finished()) break;
        if (!slot.dropped && slot.channel.anon_id) schedule(clock.now(), EvKind::Send, ev.bot, slot.bot.heartbeat_frame());
        schedule(clock.now() + options.heartbeat_ms, EvKind::Heartbeat, ev.bot);
        break;
      }
      case EvKind::Tick: {
        for (auto& d : gateway.tick(clock.now())) {
          if (auto it = by_anon.find(d.to); it != by_anon.end()) deliver(it->second, std::move(d.frame));
        }
        schedule(clock.now() + options.tick_ms, EvKind::Tick, 0);
        break;
      }
    }
  }

  std::set<std::string> games;
  for (const Slot& s : slots) {
    if (s.bot.anon_id()) ++report.joined;
    if (s.bot.finished()) ++report.completed;
    report.decisions += s.bot.stats().decisions;
    report.protocol_errors += s.bot.stats().errors;
    for (const auto& [code, n] : s.bot.stats().error_codes) report.error_codes[code] += n;
    games.insert(s.bot.completed_games().begin(), s.bot.completed_games().end());
  }
  report.games_completed = games.size();
  report.latency_p50_ms = percentile(latencies, 0.50);
  report.latency_p90_ms = percentile(latencies, 0.90);
  report.latency_p99_ms = percentile(latencies, 0.99);
  return report;
}

}  // namespace csl::bots
