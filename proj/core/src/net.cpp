#include "csl/net.hpp"

#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "csl/error.hpp"

namespace csl::net {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

Endpoint parse_endpoint(std::string_view text, unsigned short default_port) {
  Endpoint e;
  e.port = default_port;
  if (text.rfind("ws://", 0) == 0) text.remove_prefix(5);
  else if (text.rfind("http://", 0) == 0) text.remove_prefix(7);
  if (auto slash = text.find('/'); slash != std::string_view::npos) text = text.substr(0, slash);
  auto colon = text.rfind(':');
  std::string_view host = colon == std::string_view::npos ? text : text.substr(0, colon);
  if (!host.empty()) e.host = std::string(host);
  if (colon != std::string_view::npos) {
    std::string port(text.substr(colon + 1));
    try {
      std::size_t used = 0;
      int p = std::stoi(port, &used);
      if (used != port.size() || p < 0 || p > 65535) throw std::out_of_range("port");
      e.port = static_cast<unsigned short>(p);
    } catch (const std::exception&) {
      fail(Errc::invalid_action, "bad port in '" + std::string(text) + "'");
    }
  }
  return e;
}

// ---------------------------------------------------------------------------
// Server

namespace {

class WsSession;

std::string_view mime_type(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  if (ext == ".html") return "text/html; charset=utf-8";
  if (ext == ".js") return "text/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json") return "application/json";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".png") return "image/png";
  return "application/octet-stream";
}

}  // namespace

struct Server::Impl {
  Impl(wire::Gateway& gw, ServerOptions opts)
      : gateway(gw), options(std::move(opts)), acceptor(ioc), timer(ioc) {
    Endpoint ep = parse_endpoint(options.bind_addr);
    tcp::endpoint bind(asio::ip::make_address(ep.host), ep.port);
    acceptor.open(bind.protocol());
    acceptor.set_option(asio::socket_base::reuse_address(true));
    acceptor.bind(bind);
    acceptor.listen(asio::socket_base::max_listen_connections);
  }

  void log(const std::string& line) const {
    if (options.log) options.log(line);
  }

  void accept();
  void schedule_tick();
  void dispatch(std::vector<wire::Delivery>&& deliveries);
  void attach(const std::string& session, const AnonId& who, const std::shared_ptr<WsSession>& ws);
  void detach(const std::string& session, const AnonId& who, const WsSession* ws);

  wire::Gateway& gateway;
  ServerOptions options;
  asio::io_context ioc{1};
  tcp::acceptor acceptor;
  asio::steady_timer timer;
  std::map<std::pair<std::string, AnonId>, std::weak_ptr<WsSession>> channels;
};

namespace {

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(Server::Impl& server, tcp::socket&& socket, std::string session_id)
      : server_(server), ws_(std::move(socket)) {
    channel_.session_id = std::move(session_id);
  }

  void start(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
  }

  void send(std::string frame) {
    if (closed_) return;
    queue_.push_back(std::move(frame));
    if (queue_.size() == 1) write_next();
  }

 private:
  void on_accept(beast::error_code ec) {
    if (ec) return;
    read_next();
  }

  void read_next() { ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this())); }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      finish();
      return;
    }
    std::string text = beast::buffers_to_string(buffer_.data());
    buffer_.consume(buffer_.size());
    wire::HandleResult r = server_.gateway.handle(channel_, text);
    if (channel_.anon_id && !attached_) {
      attached_ = true;
      server_.attach(channel_.session_id, *channel_.anon_id, shared_from_this());
    }
    for (auto& f : r.reply) send(std::move(f));
    server_.dispatch(std::move(r.others));
    if (r.close) {
      closing_ = true;
      if (queue_.empty()) close();
      return;
    }
    read_next();
  }

  void write_next() {
    ws_.text(true);
    ws_.async_write(asio::buffer(queue_.front()), beast::bind_front_handler(&WsSession::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    if (ec) {
      finish();
      return;
    }
    queue_.pop_front();
    if (!queue_.empty()) write_next();
    else if (closing_) close();
  }

  void close() {
    finish();
    ws_.async_close(websocket::close_code::policy_error, [self = shared_from_this()](beast::error_code) {});
  }

  void finish() {
    if (closed_) return;
    closed_ = true;
    queue_.clear();
    if (channel_.anon_id) server_.detach(channel_.session_id, *channel_.anon_id, this);
  }

  Server::Impl& server_;
  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  wire::Channel channel_;
  std::deque<std::string> queue_;
  bool attached_ = false;
  bool closing_ = false;
  bool closed_ = false;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(Server::Impl& server, tcp::socket&& socket) : server_(server), stream_(std::move(socket)) {}

  void run() { read_next(); }

 private:
  void read_next() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t) {
    if (ec) {
      beast::error_code ignored;
      stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
      return;
    }
    std::string target(req_.target());
    if (websocket::is_upgrade(req_)) {
      if (target.rfind("/ws/", 0) == 0) {
        std::string sid = target.substr(4, target.find('?') == std::string::npos ? std::string::npos : target.find('?') - 4);
        if (server_.gateway.registry().session(sid)) {
          stream_.expires_never();
          std::make_shared<WsSession>(server_, stream_.release_socket(), sid)->start(std::move(req_));
          return;
        }
      }
      respond(404, "application/json", R"({"error":{"code":"not_found","message":"no such session"}})");
      return;
    }
    if (target.rfind("/api/", 0) == 0) {
      std::string token(req_["X-Admin-Token"]);
      wire::HttpResponse r = server_.gateway.admin(std::string(req_.method_string()), target, token, req_.body());
      respond(r.status, r.content_type, std::move(r.body));
      return;
    }
    if (target == "/healthz") {
      respond(200, "application/json", R"({"ok":true})");
      return;
    }
    serve_static(target);
  }

  void serve_static(std::string target) {
    const auto& root = server_.options.static_dir;
    if (root.empty() || req_.method() != http::verb::get || target.find("..") != std::string::npos) {
      respond(404, "text/plain", "not found\n");
      return;
    }
    target = target.substr(0, target.find('?'));
    if (target.empty() || target.back() == '/') target += "index.html";
    std::filesystem::path file = root / target.substr(1);
    std::ifstream in(file, std::ios::binary);
    if (!in) {
      respond(404, "text/plain", "not found\n");
      return;
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    respond(200, std::string(mime_type(file)), ss.str());
  }

  void respond(int status, std::string content_type, std::string body) {
    auto res = std::make_shared<http::response<http::string_body>>(static_cast<http::status>(status), req_.version());
    res->set(http::field::server, "csl");
    res->set(http::field::content_type, content_type);
    res->keep_alive(req_.keep_alive());
    res->body() = std::move(body);
    res->prepare_payload();
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (res->need_eof()) {
        beast::error_code ignored;
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
        return;
      }
      self->read_next();
    });
  }

  Server::Impl& server_;
  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

}  // namespace

void Server::Impl::accept() {
  acceptor.async_accept(asio::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (ec) {
      if (ec != asio::error::operation_aborted) log("accept failed: " + ec.message());
      if (!acceptor.is_open()) return;
    } else {
      std::make_shared<HttpSession>(*this, std::move(socket))->run();
    }
    accept();
  });
}

void Server::Impl::schedule_tick() {
  timer.expires_after(options.tick_interval);
  timer.async_wait([this](beast::error_code ec) {
    if (ec) return;
    dispatch(gateway.tick(gateway.registry().clock().now()));
    schedule_tick();
  });
}

void Server::Impl::dispatch(std::vector<wire::Delivery>&& deliveries) {
  for (auto& d : deliveries) {
    auto it = channels.find({d.session_id, d.to});
    if (it == channels.end()) continue;
    if (auto ws = it->second.lock()) ws->send(std::move(d.frame));
  }
}

void Server::Impl::attach(const std::string& session, const AnonId& who, const std::shared_ptr<WsSession>& ws) {
  channels[{session, who}] = ws;
}

void Server::Impl::detach(const std::string& session, const AnonId& who, const WsSession* ws) {
  auto it = channels.find({session, who});
  if (it == channels.end()) return;
  auto current = it->second.lock();
  if (!current || current.get() == ws) channels.erase(it);
}

Server::Server(wire::Gateway& gateway, ServerOptions options) : impl_(std::make_unique<Impl>(gateway, std::move(options))) {}

Server::~Server() = default;

unsigned short Server::port() const noexcept { return impl_->acceptor.local_endpoint().port(); }

void Server::run() {
  impl_->accept();
  impl_->schedule_tick();
  impl_->ioc.run();
}

void Server::stop() {
  asio::post(impl_->ioc, [impl = impl_.get()] {
    beast::error_code ignored;
    impl->acceptor.close(ignored);
    impl->timer.cancel();
    impl->ioc.stop();
  });
}

// ---------------------------------------------------------------------------
// Client

struct WsClient::Impl {
  asio::io_context ioc;
  std::optional<websocket::stream<beast::tcp_stream>> ws;
  beast::flat_buffer buffer;
  std::deque<std::string> inbox;
  bool reading = false;
  bool failed = false;

  void run_until(const std::function<bool()>& done, std::chrono::milliseconds timeout) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    while (!done()) {
      auto now = std::chrono::steady_clock::now();
      if (now >= deadline) return;
      ioc.restart();
      ioc.run_one_for(deadline - now);
    }
  }

  void start_read() {
    if (reading || failed || !ws) return;
    reading = true;
    ws->async_read(buffer, [this](beast::error_code ec, std::size_t) {
      reading = false;
      if (ec) {
        failed = true;
        return;
      }
      inbox.push_back(beast::buffers_to_string(buffer.data()));
      buffer.consume(buffer.size());
      start_read();
    });
  }
};

WsClient::WsClient() : impl_(std::make_unique<Impl>()) {}

WsClient::~WsClient() {
  if (impl_->ws) {
    beast::error_code ignored;
    beast::get_lowest_layer(*impl_->ws).socket().close(ignored);
  }
}

void WsClient::connect(const Endpoint& server, const std::string& target, std::chrono::milliseconds timeout) {
  impl_->ws.emplace(impl_->ioc);
  impl_->failed = false;
  impl_->reading = false;
  impl_->inbox.clear();
  impl_->buffer.clear();
  auto& stream = beast::get_lowest_layer(*impl_->ws);
  beast::error_code result = asio::error::would_block;
  tcp::resolver resolver(impl_->ioc);
  auto endpoints = resolver.resolve(server.host, std::to_string(server.port));
  stream.expires_after(timeout);
  stream.async_connect(endpoints, [&](beast::error_code ec, const tcp::endpoint&) { result = ec; });
  impl_->run_until([&] { return result != asio::error::would_block; }, timeout + std::chrono::milliseconds(100));
  if (result) throw std::runtime_error("connect to " + server.host + ":" + std::to_string(server.port) + " failed: " + result.message());
  result = asio::error::would_block;
  impl_->ws->async_handshake(server.host, target, [&](beast::error_code ec) { result = ec; });
  impl_->run_until([&] { return result != asio::error::would_block; }, timeout + std::chrono::milliseconds(100));
  if (result) throw std::runtime_error("websocket handshake failed: " + result.message());
  stream.expires_never();
  impl_->ws->text(true);
  impl_->start_read();
}

void WsClient::send(const std::string& frame) {
  if (!impl_->ws || impl_->failed) throw std::runtime_error("channel closed");
  beast::error_code result = asio::error::would_block;
  std::string copy = frame;
  impl_->ws->async_write(asio::buffer(copy), [&](beast::error_code ec, std::size_t) { result = ec; });
  impl_->run_until([&] { return result != asio::error::would_block || impl_->failed; }, std::chrono::milliseconds(10'000));
  if (result == asio::error::would_block) {
    // a failed read can leave the write pending; drop the socket to unblock it
    impl_->failed = true;
    beast::error_code ignored;
    beast::get_lowest_layer(*impl_->ws).socket().close(ignored);
    impl_->run_until([&] { return result != asio::error::would_block; }, std::chrono::milliseconds(1000));
  }
  if (result) {
    impl_->failed = true;
    throw std::runtime_error("send failed: " + result.message());
  }
}

std::optional<std::string> WsClient::receive(std::chrono::milliseconds timeout) {
  impl_->run_until([&] { return !impl_->inbox.empty() || impl_->failed; }, timeout);
  if (!impl_->inbox.empty()) {
    std::string f = std::move(impl_->inbox.front());
    impl_->inbox.pop_front();
    return f;
  }
  if (impl_->failed) throw std::runtime_error("channel closed");
  return std::nullopt;
}

bool WsClient::is_open() const noexcept { return impl_->ws && !impl_->failed; }

void WsClient::close() {
  if (!impl_->ws) return;
  beast::error_code ignored;
  beast::get_lowest_layer(*impl_->ws).socket().close(ignored);
  impl_->failed = true;
  impl_->ioc.restart();
  impl_->ioc.poll();
}

HttpResult http_request(const Endpoint& server, const std::string& method, const std::string& target,
                        const std::string& body, const std::string& admin_token, std::chrono::milliseconds timeout) {
  asio::io_context ioc;
  tcp::resolver resolver(ioc);
  beast::tcp_stream stream(ioc);
  stream.expires_after(timeout);
  beast::error_code ec;
  auto endpoints = resolver.resolve(server.host, std::to_string(server.port), ec);
  if (ec) throw std::runtime_error("resolve failed: " + ec.message());
  stream.connect(endpoints, ec);
  if (ec) throw std::runtime_error("connect failed: " + ec.message());
  http::request<http::string_body> req(http::string_to_verb(method), target, 11);
  req.set(http::field::host, server.host);
  req.set(http::field::content_type, "application/json");
  if (!admin_token.empty()) req.set("X-Admin-Token", admin_token);
  req.body() = body;
  req.prepare_payload();
  http::write(stream, req, ec);
  if (ec) throw std::runtime_error("request failed: " + ec.message());
  beast::flat_buffer buffer;
  http::response<http::string_body> res;
  http::read(stream, buffer, res, ec);
  if (ec) throw std::runtime_error("response failed: " + ec.message());
  stream.socket().shutdown(tcp::socket::shutdown_both, ec);
  return {static_cast<int>(res.result_int()), res.body()};
}

// ---------------------------------------------------------------------------
// Swarm

bots::SwarmReport run_swarm(const Endpoint& server, const std::string& session_id, const std::vector<bots::BotSpec>& specs,
                            const SwarmOptions& options) {
  bots::SwarmReport report;
  report.bots = specs.size();
  std::mutex mu;
  std::vector<double> latencies;
  std::set<std::string> games;
  const auto deadline = std::chrono::steady_clock::now() + options.max_duration;

  auto run_bot = [&](const bots::BotSpec& spec) {
    bots::Bot bot(session_id, spec.strategy, spec.seed);
    std::vector<double> lat;
    std::size_t failures = 0;
    int reconnects = 0;
    WsClient client;
    auto last_heartbeat = std::chrono::steady_clock::now();
    std::optional<std::chrono::steady_clock::time_point> awaiting_since;

    auto send = [&](const std::string& frame) {
      client.send(frame);
      if (!awaiting_since) awaiting_since = std::chrono::steady_clock::now();
    };
    auto attach = [&]() -> bool {
      while (std::chrono::steady_clock::now() < deadline) {
        try {
          client.connect(server, "/ws/" + session_id);
          send(bot.anon_id() ? bot.resume_frame() : bot.join_frame());
          return true;
        } catch (const std::exception&) {
          ++failures;
          if (++reconnects > options.max_reconnects) return false;
          std::this_thread::sleep_for(options.reconnect_backoff * std::min(reconnects, 10));
        }
      }
      return false;
    };

    if (attach()) {
      while (!bot.finished() && std::chrono::steady_clock::now() < deadline) {
        try {
          auto frame = client.receive(std::chrono::milliseconds(250));
          auto now = std::chrono::steady_clock::now();
          if (frame) {
            if (awaiting_since) {
              lat.push_back(std::chrono::duration<double, std::milli>(now - *awaiting_since).count());
              awaiting_since.reset();
            }
            for (const auto& reply : bot.on_frame(*frame)) {
              if (options.pace.count() > 0) std::this_thread::sleep_for(options.pace);
              send(reply);
            }
          }
          if (now - last_heartbeat >= options.heartbeat && bot.anon_id()) {
            last_heartbeat = now;
            client.send(bot.heartbeat_frame());
          }
        } catch (const std::exception&) {
          ++failures;
          awaiting_since.reset();
          client.close();
          if (++reconnects > options.max_reconnects) break;
          std::this_thread::sleep_for(options.reconnect_backoff);
          if (!attach()) break;
        }
      }
    }
    client.close();

    std::lock_guard lock(mu);
    if (bot.anon_id()) ++report.joined;
    if (bot.finished()) ++report.completed;
    report.decisions += bot.stats().decisions;
    report.protocol_errors += bot.stats().errors;
    report.connection_failures += failures;
    for (const auto& [code, n] : bot.stats().error_codes) report.error_codes[code] += n;
    games.insert(bot.completed_games().begin(), bot.completed_games().end());
    latencies.insert(latencies.end(), lat.begin(), lat.end());
  };

  std::vector<std::thread> threads;
  threads.reserve(specs.size());
  for (const auto& spec : specs) threads.emplace_back(run_bot, spec);
  for (auto& t : threads) t.join();

  report.games_completed = games.size();
  report.latency_p50_ms = bots::percentile(latencies, 0.50);
  report.latency_p90_ms = bots::percentile(latencies, 0.90);
  report.latency_p99_ms = bots::percentile(latencies, 0.99);
  return report;
}

}  // namespace csl::net
