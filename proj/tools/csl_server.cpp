// csl-server: experiment sessions over WebSocket plus the admin HTTP API.
//
// Environment: CSL_BIND_ADDR (host:port), CSL_ADMIN_TOKEN, CSL_DATA_DIR.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <random>
#include <thread>

#include <CLI11.hpp>

#include "csl/net.hpp"

namespace {

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v != nullptr && *v != '\0' ? std::string(v) : std::move(fallback);
}

class FixedClock final : public csl::Clock {
 public:
  explicit FixedClock(csl::Millis t) : t_(t) {}
  csl::Millis now() const override { return t_; }

 private:
  csl::Millis t_;
};

std::string random_token() {
  std::random_device rd;
  std::mt19937_64 rng(rd());
  return csl::random_anon_id(rng).value + csl::random_anon_id(rng).value;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Experiment session server"};
  std::string bind = env_or("CSL_BIND_ADDR", "127.0.0.1:8080");
  std::string data_dir = env_or("CSL_DATA_DIR", "csl-data");
  std::string static_dir;
  int tick_ms = 1000;
  bool deterministic = false;
  std::optional<csl::Millis> fixed_clock;
  app.add_option("--bind", bind, "Listen address host:port (overrides CSL_BIND_ADDR)");
  app.add_option("--data-dir", data_dir, "Data directory (overrides CSL_DATA_DIR)");
  app.add_option("--static-dir", static_dir, "Serve web client assets from this directory");
  app.add_option("--tick-ms", tick_ms, "Timeout check interval")->check(CLI::Range(10, 60'000));
  app.add_flag("--deterministic", deterministic, "Derive session ids, seeds and anon ids from counters");
  app.add_option("--fixed-clock", fixed_clock, "Pin every server timestamp to this value (test mode; timeouts never fire)");
  CLI11_PARSE(app, argc, argv);

  std::string token = env_or("CSL_ADMIN_TOKEN", "");
  if (token.empty()) {
    token = random_token();
    std::cerr << "CSL_ADMIN_TOKEN not set; generated admin token " << token << "\n";
  }

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  try {
    csl::SystemClock system_clock;
    std::unique_ptr<FixedClock> pinned;
    const csl::Clock* clock = &system_clock;
    if (fixed_clock) {
      pinned = std::make_unique<FixedClock>(*fixed_clock);
      clock = pinned.get();
    }
    csl::wire::Registry registry({data_dir, deterministic, {}}, *clock);
    for (const auto& w : registry.load_warnings()) std::cerr << "warning: " << w << "\n";
    csl::wire::Gateway gateway(registry, token);

    csl::net::ServerOptions opts;
    opts.bind_addr = bind;
    opts.tick_interval = std::chrono::milliseconds(tick_ms);
    opts.static_dir = static_dir;
    opts.log = [](std::string_view line) { std::cerr << line << "\n"; };
    csl::net::Server server(gateway, opts);
    std::cout << "listening on " << csl::net::parse_endpoint(bind).host << ":" << server.port() << " ("
              << registry.sessions().size() << " sessions loaded from " << data_dir << ")" << std::endl;

    std::thread io([&] { server.run(); });
    int sig = 0;
    sigwait(&signals, &sig);
    std::cerr << "signal " << sig << ", shutting down\n";
    server.stop();
    io.join();
  } catch (const std::exception& e) {
    std::cerr << "csl-server: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
