#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "csl/bots.hpp"
#include "csl/wire.hpp"

namespace csl::fixtures {

ExperimentDefinition load_experiment(const std::string& file_name);

// One market game stage; price moves drawn from `seed`.
ExperimentDefinition market_experiment(int rounds, std::uint64_t seed, int capacity = 30);

// `stages` consecutive prisoner's dilemma stages of `rounds` rounds each.
ExperimentDefinition dyadic_experiment(int stages, int rounds);

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

// Registry + gateway over a scratch data directory and a manual clock.
struct Harness {
  explicit Harness(bool deterministic = true);

  std::shared_ptr<Session> open_session(const ExperimentDefinition& def, std::uint64_t seed);

  TempDir dir;
  ManualClock clock{1'700'000'000'000};
  std::unique_ptr<wire::Registry> registry;
  std::unique_ptr<wire::Gateway> gateway;
  static constexpr const char* kToken = "test-token";
};

}  // namespace csl::fixtures
