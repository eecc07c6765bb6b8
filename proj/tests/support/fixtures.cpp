#include "fixtures.hpp"

#include <atomic>
#include <unistd.h>

#include "csl/error.hpp"
#include "csl/rng.hpp"
#include "csl/serialize.hpp"

namespace csl::fixtures {

ExperimentDefinition load_experiment(const std::string& file_name) {
  return parse_experiment(Json::parse(read_file(std::filesystem::path(CSL_EXPERIMENTS_DIR) / file_name)));
}

ExperimentDefinition market_experiment(int rounds, std::uint64_t seed, int capacity) {
  MarketGameSpec m;
  m.rounds = rounds;
  m.reward_correct = 1;
  m.endowment = 5;
  m.info_panels = {{"news", 1, "Analysts expect a calm week."}};
  for (int r = 0; r < rounds; ++r) {
    m.price_moves.push_back(counter_draw(seed, static_cast<std::uint64_t>(r)) & 1 ? PriceMove::Up : PriceMove::Down);
  }
  ExperimentDefinition def;
  def.id = "market-" + std::to_string(rounds);
  def.capacity = capacity;
  def.stages = {{"welcome", StageKind::Intro, "welcome", false},
                {"market", StageKind::Game, "market", false},
                {"results", StageKind::Results, "results", false}};
  def.games["market"] = GameSpec{"market", m};
  return def;
}

ExperimentDefinition dyadic_experiment(int stages, int rounds) {
  ExperimentDefinition def;
  def.id = "pd-" + std::to_string(stages) + "x" + std::to_string(rounds);
  def.stages.push_back({"welcome", StageKind::Intro, "welcome", false});
  for (int i = 0; i < stages; ++i) def.stages.push_back({"pd-" + std::to_string(i + 1), StageKind::Game, "pd", false});
  def.stages.push_back({"results", StageKind::Results, "results", false});
  def.games["pd"] = GameSpec{"pd", DyadicGameSpec{{10, 0, 15, 5}, rounds, 0}};
  return def;
}

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("csl-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

Harness::Harness(bool deterministic) {
  wire::Registry::Options opts;
  opts.data_dir = dir.path();
  opts.deterministic = deterministic;
  registry = std::make_unique<wire::Registry>(opts, clock);
  gateway = std::make_unique<wire::Gateway>(*registry, kToken);
}

std::shared_ptr<Session> Harness::open_session(const ExperimentDefinition& def, std::uint64_t seed) {
  if (!registry->experiment(def.id)) registry->put_experiment(def);
  auto s = registry->create_session(def.id, Json::object(), seed);
  s->open();
  registry->save_meta(*s);
  return s;
}

}  // namespace csl::fixtures
