#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "csl/error.hpp"
#include "csl/orchestrator.hpp"

namespace csl::wire {

inline constexpr int kProtocolVersion = 1;

struct Envelope {
  int v = kProtocolVersion;
  std::string type;
  std::string session;
  std::optional<AnonId> anon_id;
  std::optional<std::uint64_t> seq;
  Json body = Json::object();
};

Json to_json(const Envelope& e);
std::string encode(const Envelope& e);
// Throws bad_frame for anything that is not a well-formed envelope and
// version_mismatch when v is not supported.
Envelope decode(std::string_view frame);

Envelope error_envelope(const std::string& session, Errc code, const std::string& message);

// Experiments and sessions of one deployment, backed by the data directory:
//   {data_dir}/_experiments/{id}.json
//   {data_dir}/{session_id}/session.json, events.log, personal.store, audit.log, exports/
class Registry {
 public:
  struct Options {
    std::filesystem::path data_dir;
    bool deterministic = false;  // seeds and ids derived from counters
    FileEventLog::Options log{};
  };

  // Loads every stored experiment and session, replaying session logs.
  Registry(Options options, const Clock& clock);

  void put_experiment(const ExperimentDefinition& def);
  std::shared_ptr<const ExperimentDefinition> experiment(const std::string& id) const;
  std::vector<std::string> experiment_ids() const;

  std::shared_ptr<Session> create_session(const std::string& experiment_id, const Json& parameters,
                                          std::optional<std::uint64_t> seed = {},
                                          std::optional<std::string> id = {});
  std::shared_ptr<Session> session(const std::string& id) const;  // nullptr if unknown
  std::vector<std::shared_ptr<Session>> sessions() const;
  void save_meta(const Session& s);
  SessionPaths paths(const std::string& session_id) const { return {options_.data_dir / session_id}; }
  const std::filesystem::path& data_dir() const noexcept { return options_.data_dir; }
  const Clock& clock() const noexcept { return clock_; }
  const std::vector<std::string>& load_warnings() const noexcept { return warnings_; }

 private:
  std::shared_ptr<Session> open_session(const SessionMeta& meta, std::shared_ptr<const ExperimentDefinition> def);

  Options options_;
  const Clock& clock_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const ExperimentDefinition>> experiments_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t session_counter_ = 0;
  std::vector<std::string> warnings_;
};

// Per-connection state of a participant channel.
struct Channel {
  std::string session_id;
  std::optional<AnonId> anon_id;
};

struct Delivery {
  std::string session_id;
  AnonId to;
  std::string frame;
};

struct HandleResult {
  std::vector<std::string> reply;  // frames for the calling channel, in order
  std::vector<Delivery> others;    // frames for other participants
  bool close = false;
};

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

// Transport-independent protocol handling; the network layer only moves
// frames and HTTP requests in and out of it.
class Gateway {
 public:
  Gateway(Registry& registry, std::string admin_token);

  HandleResult handle(Channel& channel, std::string_view frame);
  std::vector<Delivery> tick(Millis now);

  HttpResponse admin(std::string_view method, std::string_view target, std::string_view token, std::string_view body);

  Registry& registry() noexcept { return registry_; }

 private:
  HandleResult dispatch(Channel& channel, const Envelope& in);
  void route(const Session& session, std::vector<Outbound>&& out, const Channel& channel, HandleResult& result) const;
  HttpResponse admin_route(std::string_view method, std::string_view path, const std::map<std::string, std::string>& query,
                           std::string_view body);
  void audit(const std::filesystem::path& file, std::string_view method, std::string_view target, int status);

  Registry& registry_;
  std::string admin_token_;
};

std::string frame_for(const Session& session, const Outbound& out);

}  // namespace csl::wire
