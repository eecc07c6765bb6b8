#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "csl/bots.hpp"
#include "csl/wire.hpp"

namespace csl::net {

struct Endpoint {
  std::string host = "127.0.0.1";
  unsigned short port = 8080;
};

// "host:port", "host" or ":port".
Endpoint parse_endpoint(std::string_view text, unsigned short default_port = 8080);

struct ServerOptions {
  std::string bind_addr = "127.0.0.1:8080";  // port 0 picks a free port
  std::chrono::milliseconds tick_interval{1000};
  std::filesystem::path static_dir;  // served under / when set
  std::function<void(std::string_view)> log;
};

// HTTP admin endpoints under /api and participant channels under
// /ws/{session_id}, all on one thread.
class Server {
 public:
  Server(wire::Gateway& gateway, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const noexcept;
  void run();   // returns after stop()
  void stop();  // callable from any thread

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

// Minimal blocking WebSocket client; receive() waits at most `timeout`.
class WsClient {
 public:
  WsClient();
  ~WsClient();
  WsClient(const WsClient&) = delete;
  WsClient& operator=(const WsClient&) = delete;

  // Throws std::runtime_error when the server cannot be reached.
  void connect(const Endpoint& server, const std::string& target,
               std::chrono::milliseconds timeout = std::chrono::milliseconds(5000));
  void send(const std::string& frame);  // throws std::runtime_error on a dead channel
  std::optional<std::string> receive(std::chrono::milliseconds timeout);
  bool is_open() const noexcept;
  void close();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct HttpResult {
  int status = 0;
  std::string body;
};

// Throws std::runtime_error on connection failure.
HttpResult http_request(const Endpoint& server, const std::string& method, const std::string& target,
                        const std::string& body = {}, const std::string& admin_token = {},
                        std::chrono::milliseconds timeout = std::chrono::milliseconds(5000));

struct SwarmOptions {
  std::chrono::milliseconds pace{0};  // pause before each reply
  std::chrono::milliseconds heartbeat{15'000};
  std::chrono::milliseconds max_duration{600'000};
  int max_reconnects = 50;
  std::chrono::milliseconds reconnect_backoff{200};
};

// One thread and one channel per bot, speaking to a live server.
bots::SwarmReport run_swarm(const Endpoint& server, const std::string& session_id, const std::vector<bots::BotSpec>& specs,
                            const SwarmOptions& options = {});

}  // namespace csl::net
