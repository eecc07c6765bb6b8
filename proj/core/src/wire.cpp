#include "csl/wire.hpp"

#include <algorithm>
#include <fstream>
#include <random>

#include "csl/error.hpp"
#include "csl/rng.hpp"
#include "csl/serialize.hpp"

namespace csl::wire {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kExperimentsDir = "_experiments";

bool valid_id(std::string_view id) {
  if (id.empty() || id.size() > 64 || id.front() == '_' || id.front() == '.') return false;
  return std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; });
}

std::vector<std::string_view> split_path(std::string_view path) {
  std::vector<std::string_view> parts;
  while (!path.empty()) {
    auto slash = path.find('/');
    std::string_view part = path.substr(0, slash);
    if (!part.empty()) parts.push_back(part);
    if (slash == std::string_view::npos) break;
    path.remove_prefix(slash + 1);
  }
  return parts;
}

std::string percent_decode(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '%' && i + 2 < s.size() && std::isxdigit(static_cast<unsigned char>(s[i + 1])) &&
        std::isxdigit(static_cast<unsigned char>(s[i + 2]))) {
      out += static_cast<char>(std::stoi(std::string(s.substr(i + 1, 2)), nullptr, 16));
      i += 2;
    } else if (s[i] == '+') {
      out += ' ';
    } else {
      out += s[i];
    }
  }
  return out;
}

std::map<std::string, std::string> parse_query(std::string_view q) {
  std::map<std::string, std::string> out;
  while (!q.empty()) {
    auto amp = q.find('&');
    std::string_view kv = q.substr(0, amp);
    auto eq = kv.find('=');
    if (eq == std::string_view::npos) out[percent_decode(kv)] = "";
    else out[percent_decode(kv.substr(0, eq))] = percent_decode(kv.substr(eq + 1));
    if (amp == std::string_view::npos) break;
    q.remove_prefix(amp + 1);
  }
  return out;
}

int http_status(Errc code) {
  switch (code) {
    case Errc::unauthorized: return 401;
    case Errc::not_found:
    case Errc::unknown_participant: return 404;
    case Errc::conflict:
    case Errc::session_closed:
    case Errc::session_full: return 409;
    case Errc::invalid_definition: return 422;
    case Errc::invalid_action:
    case Errc::bad_frame:
    case Errc::protocol_violation:
    case Errc::precondition: return 400;
    case Errc::storage_error: return 503;
    default: return 500;
  }
}

HttpResponse json_response(int status, const Json& body) { return {status, "application/json", body.dump()}; }

HttpResponse error_response(Errc code, const std::string& message, Json extra = Json::object()) {
  Json err{{"code", to_string(code)}, {"message", message}};
  for (auto& [k, v] : extra.items()) err[k] = v;
  return json_response(http_status(code), Json{{"error", err}});
}

Json parse_body(std::string_view body) {
  if (body.empty()) return Json::object();
  try {
    return Json::parse(body);
  } catch (const Json::exception& e) {
    fail(Errc::invalid_action, std::string("request body is not JSON: ") + e.what());
  }
}

Json session_summary(const Session& s) {
  Json j = to_json(s.meta());
  auto snap = s.snapshot();
  j["participants"] = snap.participants;
  j["paused"] = snap.paused;
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------

Json to_json(const Envelope& e) {
  Json j{{"v", e.v}, {"type", e.type}, {"session", e.session}, {"body", e.body}};
  if (e.anon_id) j["anon_id"] = e.anon_id->value;
  if (e.seq) j["seq"] = *e.seq;
  return j;
}

std::string encode(const Envelope& e) { return to_json(e).dump(); }

Envelope decode(std::string_view frame) {
  Json j;
  try {
    j = Json::parse(frame);
  } catch (const Json::exception&) {
    fail(Errc::bad_frame, "frame is not valid JSON");
  }
  if (!j.is_object()) fail(Errc::bad_frame, "frame must be a JSON object");
  auto v = j.find("v");
  if (v == j.end() || !v->is_number_integer()) fail(Errc::bad_frame, "missing integer field v");
  if (v->get<int>() != kProtocolVersion) {
    fail(Errc::version_mismatch, "protocol version " + std::to_string(v->get<long long>()) + " is not supported");
  }
  auto type = j.find("type");
  if (type == j.end() || !type->is_string() || type->get<std::string>().empty()) fail(Errc::bad_frame, "missing field type");
  Envelope e;
  e.type = type->get<std::string>();
  if (auto s = j.find("session"); s != j.end()) {
    if (!s->is_string()) fail(Errc::bad_frame, "session must be a string");
    e.session = s->get<std::string>();
  }
  if (auto a = j.find("anon_id"); a != j.end() && !a->is_null()) {
    if (!a->is_string()) fail(Errc::bad_frame, "anon_id must be a string");
    e.anon_id = AnonId{a->get<std::string>()};
  }
  if (auto s = j.find("seq"); s != j.end() && !s->is_null()) {
    if (!s->is_number_unsigned()) fail(Errc::bad_frame, "seq must be a non-negative integer");
    e.seq = s->get<std::uint64_t>();
  }
  if (auto b = j.find("body"); b != j.end() && !b->is_null()) {
    if (!b->is_object()) fail(Errc::bad_frame, "body must be an object");
    e.body = *b;
  }
  return e;
}

Envelope error_envelope(const std::string& session, Errc code, const std::string& message) {
  Envelope e;
  e.type = "error";
  e.session = session;
  e.body = Json{{"code", to_string(code)}, {"message", message}};
  if (code == Errc::version_mismatch) e.body["supported"] = Json::array({kProtocolVersion});
  return e;
}

std::string frame_for(const Session& session, const Outbound& out) {
  Envelope e;
  e.type = out.type;
  e.session = session.meta().id;
  e.anon_id = out.to;
  e.seq = session.last_seq();
  e.body = out.body;
  return encode(e);
}

// ---------------------------------------------------------------------------
// Registry

Registry::Registry(Options options, const Clock& clock) : options_(std::move(options)), clock_(clock) {
  fs::create_directories(options_.data_dir / kExperimentsDir);
  for (const auto& entry : fs::directory_iterator(options_.data_dir / kExperimentsDir)) {
    if (entry.path().extension() != ".json") continue;
    try {
      auto def = std::make_shared<ExperimentDefinition>(parse_experiment(Json::parse(read_file(entry.path()))));
      experiments_[def->id] = def;
    } catch (const std::exception& e) {
      warnings_.push_back("skipping experiment " + entry.path().string() + ": " + e.what());
    }
  }
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(options_.data_dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "session.json")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    try {
      SessionMeta meta = session_meta_from_json(Json::parse(read_file(dir / "session.json")));
      std::shared_ptr<const ExperimentDefinition> def;
      if (fs::exists(dir / "experiment.json")) {
        def = std::make_shared<ExperimentDefinition>(parse_experiment(Json::parse(read_file(dir / "experiment.json"))));
      } else if (auto it = experiments_.find(meta.experiment_id); it != experiments_.end()) {
        def = it->second;
      } else {
        warnings_.push_back("session " + meta.id + " refers to unknown experiment " + meta.experiment_id);
        continue;
      }
      auto s = open_session(meta, def);
      if (auto report = s->recovery_report()) warnings_.push_back("session " + meta.id + ": " + *report);
      sessions_[meta.id] = s;
    } catch (const std::exception& e) {
      warnings_.push_back("skipping session " + dir.string() + ": " + e.what());
    }
  }
  session_counter_ = sessions_.size();
}

std::shared_ptr<Session> Registry::open_session(const SessionMeta& meta, std::shared_ptr<const ExperimentDefinition> def) {
  SessionPaths p = paths(meta.id);
  fs::create_directories(p.dir);
  auto log = std::make_unique<FileEventLog>(p.events(), options_.log);
  auto personal = std::make_unique<PersonalStore>(p.personal());
  return std::make_shared<Session>(std::move(def), meta, std::move(log), std::move(personal), clock_);
}

void Registry::put_experiment(const ExperimentDefinition& def) {
  if (!valid_id(def.id)) fail(Errc::invalid_definition, "experiment id must be 1-64 characters of [A-Za-z0-9_-]");
  auto violations = validate_experiment(def);
  if (!violations.empty()) fail(Errc::invalid_definition, violations.front().code + ": " + violations.front().detail);
  std::lock_guard lock(mu_);
  if (auto it = experiments_.find(def.id); it != experiments_.end() && Json(*it->second) != Json(def)) {
    for (const auto& [id, s] : sessions_) {
      if (s->meta().experiment_id == def.id) fail(Errc::conflict, "experiment " + def.id + " is used by session " + id);
    }
  }
  write_file_atomic(options_.data_dir / kExperimentsDir / (def.id + ".json"), Json(def).dump(2));
  experiments_[def.id] = std::make_shared<ExperimentDefinition>(def);
}

std::shared_ptr<const ExperimentDefinition> Registry::experiment(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = experiments_.find(id);
  return it == experiments_.end() ? nullptr : it->second;
}

std::vector<std::string> Registry::experiment_ids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, _] : experiments_) out.push_back(id);
  return out;
}

std::shared_ptr<Session> Registry::create_session(const std::string& experiment_id, const Json& parameters,
                                                  std::optional<std::uint64_t> seed, std::optional<std::string> id) {
  std::lock_guard lock(mu_);
  auto def = experiments_.find(experiment_id);
  if (def == experiments_.end()) fail(Errc::not_found, "unknown experiment '" + experiment_id + "'");
  if (!parameters.is_object()) fail(Errc::invalid_action, "parameters must be an object");
  ++session_counter_;
  SessionMeta meta;
  if (id) {
    if (!valid_id(*id)) fail(Errc::invalid_action, "session id must be 1-64 characters of [A-Za-z0-9_-]");
    if (sessions_.contains(*id) || fs::exists(paths(*id).dir)) fail(Errc::conflict, "session " + *id + " already exists");
    meta.id = *id;
  } else if (options_.deterministic) {
    do {
      meta.id = "s" + std::to_string(session_counter_++);
    } while (sessions_.contains(meta.id) || fs::exists(paths(meta.id).dir));
  } else {
    std::random_device rd;
    char buf[17];
    do {
      std::uint64_t r = (std::uint64_t{rd()} << 32) ^ rd();
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(r));
      meta.id = std::string("s-") + std::string(buf, 12);
    } while (sessions_.contains(meta.id) || fs::exists(paths(meta.id).dir));
  }
  meta.experiment_id = experiment_id;
  meta.parameters = parameters;
  meta.created_at = clock_.now();
  meta.deterministic_ids = options_.deterministic;
  if (seed) meta.master_seed = *seed;
  else if (options_.deterministic) meta.master_seed = derive_seed(0x5e55'10a5ULL, session_counter_);
  else meta.master_seed = (std::uint64_t{std::random_device{}()} << 32) ^ std::random_device{}();

  SessionPaths p = paths(meta.id);
  fs::create_directories(p.dir);
  write_file_atomic(p.dir / "experiment.json", Json(*def->second).dump(2));
  write_file_atomic(p.meta(), to_json(meta).dump(2));
  auto s = open_session(meta, def->second);
  sessions_[meta.id] = s;
  return s;
}

std::shared_ptr<Session> Registry::session(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

std::vector<std::shared_ptr<Session>> Registry::sessions() const {
  std::lock_guard lock(mu_);
  std::vector<std::shared_ptr<Session>> out;
  for (const auto& [_, s] : sessions_) out.push_back(s);
  return out;
}

void Registry::save_meta(const Session& s) {
  SessionMeta meta = s.meta();
  write_file_atomic(paths(meta.id).meta(), to_json(meta).dump(2));
}

// ---------------------------------------------------------------------------
// Participant channel

Gateway::Gateway(Registry& registry, std::string admin_token)
    : registry_(registry), admin_token_(std::move(admin_token)) {}

HandleResult Gateway::handle(Channel& channel, std::string_view frame) {
  HandleResult result;
  Envelope in;
  try {
    in = decode(frame);
  } catch (const Error& e) {
    result.reply.push_back(encode(error_envelope(channel.session_id, e.code(), e.what())));
    result.close = e.code() == Errc::bad_frame;
    return result;
  }
  try {
    return dispatch(channel, in);
  } catch (const Error& e) {
    result.reply.push_back(encode(error_envelope(channel.session_id, e.code(), e.what())));
  } catch (const Json::exception& e) {
    result.reply.push_back(encode(error_envelope(channel.session_id, Errc::protocol_violation, e.what())));
  } catch (const std::exception& e) {
    result.reply.push_back(encode(error_envelope(channel.session_id, Errc::internal_inconsistency, e.what())));
  }
  return result;
}

void Gateway::route(const Session& session, std::vector<Outbound>&& out, const Channel& channel,
                    HandleResult& result) const {
  for (const Outbound& o : out) {
    std::string frame = frame_for(session, o);
    if (channel.anon_id && o.to == *channel.anon_id) result.reply.push_back(std::move(frame));
    else result.others.push_back({session.meta().id, o.to, std::move(frame)});
  }
}

HandleResult Gateway::dispatch(Channel& channel, const Envelope& in) {
  auto session = registry_.session(channel.session_id);
  if (!session) fail(Errc::not_found, "unknown session '" + channel.session_id + "'");
  if (!in.session.empty() && in.session != channel.session_id) {
    fail(Errc::protocol_violation, "envelope session does not match the channel");
  }
  std::optional<Millis> client_ts;
  if (auto it = in.body.find("client_ts"); it != in.body.end() && it->is_number_integer()) client_ts = it->get<Millis>();

  HandleResult result;
  if (in.type == "join") {
    if (channel.anon_id) fail(Errc::protocol_violation, "channel already bound to a participant");
    SessionStatus before = session->meta().status;
    auto joined = session->join(client_ts);
    channel.anon_id = joined.participant.anon_id;
    if (session->meta().status != before) registry_.save_meta(*session);
    route(*session, std::move(joined.out), channel, result);
  } else if (in.type == "resume") {
    std::optional<AnonId> who = in.anon_id;
    if (!who && in.body.contains("anon_id")) who = AnonId{in.body.at("anon_id").get<std::string>()};
    if (!who) fail(Errc::protocol_violation, "resume needs anon_id");
    if (!session->has_participant(*who)) fail(Errc::unknown_participant, "no participant '" + who->value + "' in this session");
    if (channel.anon_id && *channel.anon_id != *who) fail(Errc::protocol_violation, "channel already bound to another participant");
    channel.anon_id = who;
    route(*session, session->resume(*who), channel, result);
  } else if (in.type == "heartbeat") {
    if (!channel.anon_id) fail(Errc::protocol_violation, "join or resume first");
    route(*session, session->heartbeat(*channel.anon_id), channel, result);
  } else if (in.type == "stage_submit") {
    if (!channel.anon_id) fail(Errc::protocol_violation, "join or resume first");
    if (in.anon_id && *in.anon_id != *channel.anon_id) fail(Errc::protocol_violation, "anon_id does not match the channel");
    auto stage = in.body.find("stage");
    if (stage == in.body.end() || !stage->is_number_unsigned()) fail(Errc::protocol_violation, "stage_submit needs a stage index");
    auto action = in.body.find("action");
    if (action == in.body.end()) fail(Errc::protocol_violation, "stage_submit needs an action");
    route(*session, session->submit(*channel.anon_id, stage->get<std::size_t>(), *action, client_ts), channel, result);
  } else {
    fail(Errc::protocol_violation, "unknown message type '" + in.type + "'");
  }
  return result;
}

std::vector<Delivery> Gateway::tick(Millis now) {
  std::vector<Delivery> out;
  for (const auto& s : registry_.sessions()) {
    for (const Outbound& o : s->tick(now)) out.push_back({s->meta().id, o.to, frame_for(*s, o)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Admin

void Gateway::audit(const fs::path& file, std::string_view method, std::string_view target, int status) {
  Json line{{"ts", registry_.clock().now()}, {"method", method}, {"target", target}, {"status", status}};
  std::ofstream out(file, std::ios::app);
  out << line.dump() << '\n';
}

HttpResponse Gateway::admin(std::string_view method, std::string_view target, std::string_view token,
                            std::string_view body) {
  if (admin_token_.empty() || token != admin_token_) {
    return error_response(Errc::unauthorized, "missing or wrong X-Admin-Token");
  }
  std::string_view path = target;
  std::map<std::string, std::string> query;
  if (auto q = target.find('?'); q != std::string_view::npos) {
    path = target.substr(0, q);
    query = parse_query(target.substr(q + 1));
  }
  HttpResponse res;
  try {
    res = admin_route(method, path, query, body);
  } catch (const Error& e) {
    res = error_response(e.code(), e.what());
  } catch (const std::exception& e) {
    res = error_response(Errc::internal_inconsistency, e.what());
  }
  if (method != "GET") {
    auto parts = split_path(path);
    fs::path file = registry_.data_dir() / "audit.log";
    if (parts.size() >= 3 && parts[1] == "sessions") {
      auto s = registry_.session(std::string(parts[2]));
      if (s) file = registry_.paths(std::string(parts[2])).audit();
    }
    audit(file, method, target, res.status);
  }
  return res;
}

HttpResponse Gateway::admin_route(std::string_view method, std::string_view path,
                                  const std::map<std::string, std::string>& query, std::string_view body) {
  auto parts = split_path(path);
  if (parts.size() < 2 || parts[0] != "api") fail(Errc::not_found, "no such endpoint");

  if (parts[1] == "experiments") {
    if (parts.size() == 2 && method == "POST") {
      ExperimentDefinition def = parse_experiment(parse_body(body));
      auto violations = validate_experiment(def);
      if (!violations.empty()) {
        Json list = Json::array();
        for (const auto& v : violations) list.push_back({{"code", v.code}, {"detail", v.detail}});
        return error_response(Errc::invalid_definition, "experiment definition is invalid", Json{{"violations", list}});
      }
      registry_.put_experiment(def);
      return json_response(201, Json{{"id", def.id}});
    }
    if (parts.size() == 2 && method == "GET") return json_response(200, Json{{"experiments", registry_.experiment_ids()}});
    if (parts.size() == 3 && method == "GET") {
      auto def = registry_.experiment(std::string(parts[2]));
      if (!def) fail(Errc::not_found, "unknown experiment");
      return json_response(200, Json(*def));
    }
    fail(Errc::not_found, "no such endpoint");
  }

  if (parts[1] != "sessions") fail(Errc::not_found, "no such endpoint");
  if (parts.size() == 2) {
    if (method == "POST") {
      Json req = parse_body(body);
      if (!req.contains("experiment_id") || !req.at("experiment_id").is_string()) {
        fail(Errc::invalid_action, "experiment_id is required");
      }
      std::optional<std::uint64_t> seed;
      if (req.contains("seed")) seed = req.at("seed").get<std::uint64_t>();
      std::optional<std::string> id;
      if (req.contains("id")) id = req.at("id").get<std::string>();
      auto s = registry_.create_session(req.at("experiment_id").get<std::string>(),
                                        req.value("parameters", Json::object()), seed, id);
      return json_response(201, to_json(s->meta()));
    }
    if (method == "GET") {
      Json list = Json::array();
      for (const auto& s : registry_.sessions()) list.push_back(session_summary(*s));
      return json_response(200, Json{{"sessions", list}});
    }
    fail(Errc::not_found, "no such endpoint");
  }

  auto session = registry_.session(std::string(parts[2]));
  if (!session) fail(Errc::not_found, "unknown session '" + std::string(parts[2]) + "'");
  if (parts.size() == 3 && method == "GET") return json_response(200, session_summary(*session));
  std::string_view action = parts.size() >= 4 ? parts[3] : "";

  if (method == "POST" && parts.size() == 4) {
    if (action == "open") session->open();
    else if (action == "close") session->close();
    else if (action == "params") session->set_parameters(parse_body(body));
    else fail(Errc::not_found, "no such endpoint");
    registry_.save_meta(*session);
    return json_response(200, to_json(session->meta()));
  }
  if (method == "GET" && action == "snapshot" && parts.size() == 4) return json_response(200, to_json(session->snapshot()));
  if (method == "GET" && action == "export" && parts.size() == 4) {
    auto kind = query.find("kind");
    std::string k = kind == query.end() ? "events" : kind->second;
    SessionPaths p = registry_.paths(session->meta().id);
    if (k == "events") {
      std::string csv = events_to_csv(session->events());
      write_file_atomic(p.exports() / "events.csv", csv);
      return {200, "text/csv", std::move(csv)};
    }
    if (k == "surveys") {
      std::string csv = surveys_to_csv(session->events());
      write_file_atomic(p.exports() / "surveys.csv", csv);
      return {200, "text/csv", std::move(csv)};
    }
    if (k == "anonymized_bundle") {
      if (session->meta().status != SessionStatus::Closed) fail(Errc::conflict, "close the session before exporting a bundle");
      std::mt19937_64 rng(std::random_device{}());
      AnonymizedBundle b = make_anonymized_bundle(session->definition(), session->events(), rng);
      Json j{{"experiment", b.experiment}, {"events_csv", b.events_csv}, {"surveys_csv", b.surveys_csv}};
      std::string text = j.dump();
      write_file_atomic(p.exports() / ("bundle-" + std::to_string(registry_.clock().now()) + ".json"), text);
      return {200, "application/json", std::move(text)};
    }
    fail(Errc::invalid_action, "export kind must be events, surveys or anonymized_bundle");
  }
  if (method == "DELETE" && parts.size() == 6 && parts[3] == "participants" && parts[5] == "personal") {
    auto* store = session->personal_store();
    std::size_t n = store ? store->erase(AnonId{std::string(parts[4])}) : 0;
    return json_response(200, Json{{"erased", n}});
  }
  fail(Errc::not_found, "no such endpoint");
}

}  // namespace csl::wire
