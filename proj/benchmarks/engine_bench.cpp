#include <benchmark/benchmark.h>

#include "csl/engine.hpp"

using namespace csl;

namespace {

std::vector<AnonId> seats(int n) {
  std::vector<AnonId> v;
  for (int i = 0; i < n; ++i) v.push_back(AnonId{"p" + std::to_string(i)});
  return v;
}

void BM_ClassifyGrid(benchmark::State& state) {
  for (auto _ : state) {
    int pd = 0;
    for (Units r = -2; r <= 2; ++r)
      for (Units s = -2; s <= 2; ++s)
        for (Units t = -2; t <= 2; ++t)
          for (Units p = -2; p <= 2; ++p) pd += classify_dyadic({r, s, t, p}) == DyadicClass::PrisonersDilemma;
    benchmark::DoNotOptimize(pd);
  }
}
BENCHMARK(BM_ClassifyGrid);

void BM_DyadicRound(benchmark::State& state) {
  GameSpec spec{"pd", DyadicGameSpec{{10, 0, 15, 5}, 1'000'000, 0}};
  auto players = seats(2);
  auto g = create_instance("g", spec, players, 1);
  for (auto _ : state) {
    g = advance(std::move(g), players[0], DyadicChoice{Move::Cooperate}).instance;
    g = advance(std::move(g), players[1], DyadicChoice{Move::Defect}).instance;
  }
  state.SetItemsProcessed(state.iterations() * 2);
}
BENCHMARK(BM_DyadicRound);

void BM_CrdGame(benchmark::State& state) {
  GameSpec spec{"crd", CollectiveRiskSpec{}};
  auto players = seats(6);
  for (auto _ : state) {
    auto g = create_instance("g", spec, players, 7);
    while (!g.over()) {
      for (const auto& p : players) g = advance(std::move(g), p, Contribution{2}).instance;
    }
    benchmark::DoNotOptimize(g.pot);
  }
  state.SetItemsProcessed(state.iterations() * 60);
}
BENCHMARK(BM_CrdGame);

}  // namespace

BENCHMARK_MAIN();
