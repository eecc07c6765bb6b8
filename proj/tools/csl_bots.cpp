// csl-bots: synthetic participants for a live session.

#include <iostream>

#include <CLI11.hpp>

#include "csl/net.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Run synthetic participants against a live server"};
  std::string server = "127.0.0.1:8080";
  std::string session;
  std::size_t n = 1;
  std::string strategy = "random";
  std::uint64_t seed = 1;
  int pace_ms = 0;
  int max_seconds = 600;
  app.add_option("--server", server, "Server address host:port");
  app.add_option("--session", session, "Session id")->required();
  app.add_option("--n", n, "Number of bots")->check(CLI::Range(1, 1000));
  app.add_option("--strategy", strategy, "random | cooperate | defect | imitation:a,b | wsls:a,b");
  app.add_option("--seed", seed, "Base seed; bot i uses seed + i");
  app.add_option("--pace-ms", pace_ms, "Pause before each reply");
  app.add_option("--max-seconds", max_seconds, "Give up after this long");
  CLI11_PARSE(app, argc, argv);

  try {
    auto parsed = csl::bots::parse_strategy(strategy);
    std::vector<csl::bots::BotSpec> specs;
    for (std::size_t i = 0; i < n; ++i) specs.push_back({parsed, seed + i});
    csl::net::SwarmOptions opts;
    opts.pace = std::chrono::milliseconds(pace_ms);
    opts.max_duration = std::chrono::seconds(max_seconds);
    auto report = csl::net::run_swarm(csl::net::parse_endpoint(server), session, specs, opts);
    std::cout << csl::bots::to_json(report).dump(2) << std::endl;
    return report.protocol_errors == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "csl-bots: " << e.what() << "\n";
    return 2;
  }
}
