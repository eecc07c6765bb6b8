#include "csl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <tuple>

#include <boost/math/special_functions/gamma.hpp>

#include "csl/error.hpp"
#include "csl/serialize.hpp"

namespace csl::analysis {

namespace {

bool counted(const ActionEvent& ev, bool include_synthetic) { return include_synthetic || !ev.synthetic; }

std::string lower_snake(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == ' ' || c == '-') out += '_';
    else out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

}  // namespace

std::vector<DecisionSeries> market_series(const std::vector<ActionEvent>& events, bool include_synthetic) {
  std::map<std::pair<AnonId, std::string>, std::map<int, Decision>> by_key;
  for (const ActionEvent& ev : events) {
    if (ev.kind != ActionKind::Decision || ev.game_family != GameFamily::Market) continue;
    if (!counted(ev, include_synthetic) || !ev.game_instance_id || !ev.round) continue;
    const Json& action = ev.payload.contains("action") ? ev.payload.at("action") : ev.payload;
    if (!action.contains("predict")) continue;
    Decision d;
    d.round = *ev.round;
    d.choice = action.at("predict").get<std::string>();
    d.server_ts = ev.server_ts;
    if (auto it = ev.payload.find("outcome"); it != ev.payload.end() && it->is_object()) {
      if (it->contains("market")) d.market = it->at("market").get<std::string>();
      if (it->contains("correct")) d.win = it->at("correct").get<bool>();
    }
    by_key[{ev.anon_id, *ev.game_instance_id}].emplace(d.round, std::move(d));
  }
  std::vector<DecisionSeries> out;
  for (auto& [key, rounds] : by_key) {
    DecisionSeries s{key.first, key.second, {}};
    for (auto& [round, d] : rounds) s.decisions.push_back(std::move(d));
    out.push_back(std::move(s));
  }
  return out;
}

ResponseTimes response_times(const std::vector<ActionEvent>& events, bool include_synthetic) {
  using Key = std::tuple<std::string, std::string, int>;
  std::map<Key, Millis> opened;
  for (const ActionEvent& ev : events) {
    if (ev.kind != ActionKind::Navigation || !ev.payload.contains("round_open") || !ev.game_instance_id) continue;
    Key k{ev.anon_id.value, *ev.game_instance_id, ev.payload.at("round_open").get<int>()};
    opened.emplace(k, ev.server_ts);
  }
  ResponseTimes rt;
  std::map<int, std::vector<double>> samples;
  for (const ActionEvent& ev : events) {
    if (ev.kind != ActionKind::Decision || !counted(ev, include_synthetic)) continue;
    if (!ev.game_instance_id || !ev.round) {
      ++rt.missing_round_open;
      continue;
    }
    auto it = opened.find(Key{ev.anon_id.value, *ev.game_instance_id, *ev.round});
    if (it == opened.end()) {
      ++rt.missing_round_open;
      continue;
    }
    samples[*ev.round].push_back(static_cast<double>(ev.server_ts - it->second));
  }
  for (const auto& [round, xs] : samples) {
    RoundTime row;
    row.round = round;
    row.n = xs.size();
    row.mean_ms = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(row.n);
    if (row.n >= 2) {
      double ss = 0;
      for (double x : xs) ss += (x - row.mean_ms) * (x - row.mean_ms);
      double sd = std::sqrt(ss / static_cast<double>(row.n - 1));
      row.stderr_ms = sd / std::sqrt(static_cast<double>(row.n));
    }
    row.ci_low_ms = row.mean_ms - 1.96 * row.stderr_ms;
    row.ci_high_ms = row.mean_ms + 1.96 * row.stderr_ms;
    rt.rounds.push_back(row);
  }
  return rt;
}

double ConditionalTable::p(std::size_t r, std::size_t c) const noexcept {
  std::size_t n = row_n(r);
  return n == 0 ? 0.0 : static_cast<double>(counts[r][c]) / static_cast<double>(n);
}

std::optional<std::size_t> ConditionalTable::row_index(std::string_view name) const noexcept {
  for (std::size_t i = 0; i < 2; ++i) {
    if (rows[i] == name) return i;
  }
  return std::nullopt;
}

std::optional<std::size_t> ConditionalTable::col_index(std::string_view name) const noexcept {
  for (std::size_t i = 0; i < 2; ++i) {
    if (cols[i] == name) return i;
  }
  return std::nullopt;
}

ConditionalTable market_imitation(const std::vector<DecisionSeries>& series) {
  ConditionalTable t{{"up", "down"}, {"up", "down"}, {}};
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.decisions.size(); ++i) {
      const auto& prev = s.decisions[i - 1];
      if (!prev.market || s.decisions[i].round != prev.round + 1) continue;
      auto r = t.row_index(*prev.market);
      auto c = t.col_index(s.decisions[i].choice);
      if (r && c) ++t.counts[*r][*c];
    }
  }
  if (t.total() == 0) fail(Errc::empty_table, "no decision follows an observed market move");
  return t;
}

ConditionalTable wsls(const std::vector<DecisionSeries>& series) {
  ConditionalTable t{{"win", "lose"}, {"stay", "shift"}, {}};
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.decisions.size(); ++i) {
      const auto& prev = s.decisions[i - 1];
      if (!prev.win || s.decisions[i].round != prev.round + 1) continue;
      std::size_t r = *prev.win ? 0 : 1;
      std::size_t c = s.decisions[i].choice == prev.choice ? 0 : 1;
      ++t.counts[r][c];
    }
  }
  if (t.total() == 0) fail(Errc::empty_table, "no decision follows a known outcome");
  return t;
}

BinomialDiff binomial_diff(double p1, std::size_t n1, double p2, std::size_t n2) {
  if (n1 < 1 || n2 < 1) fail(Errc::precondition, "both samples need n >= 1");
  if (!(p1 >= 0 && p1 <= 1) || !(p2 >= 0 && p2 <= 1)) fail(Errc::precondition, "proportions must lie in [0, 1]");
  double a = static_cast<double>(n1);
  double b = static_cast<double>(n2);
  double pooled = (p1 * a + p2 * b) / (a + b);
  double var = pooled * (1 - pooled) * (1 / a + 1 / b);
  if (pooled <= 0 || pooled >= 1 || var <= 0) fail(Errc::degenerate_variance, "pooled proportion is 0 or 1");
  BinomialDiff d;
  d.z = (p1 - p2) / std::sqrt(var);
  d.significant = std::abs(d.z) > 1.96;
  return d;
}

KruskalWallis kruskal_wallis(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) fail(Errc::precondition, "need at least two groups");
  std::vector<std::pair<double, std::size_t>> pooled;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) fail(Errc::precondition, "group " + std::to_string(g) + " is empty");
    for (double x : groups[g]) pooled.emplace_back(x, g);
  }
  std::sort(pooled.begin(), pooled.end());
  const double n = static_cast<double>(pooled.size());
  std::vector<double> rank_sum(groups.size(), 0.0);
  double tie_term = 0;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].first == pooled[i].first) ++j;
    double t = static_cast<double>(j - i);
    double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) rank_sum[pooled[k].second] += avg_rank;
    tie_term += t * t * t - t;
    i = j;
  }
  KruskalWallis kw;
  kw.df = static_cast<int>(groups.size()) - 1;
  double correction = 1.0 - tie_term / (n * n * n - n);
  if (correction <= 0) return kw;  // every value identical
  double s = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    s += rank_sum[g] * rank_sum[g] / static_cast<double>(groups[g].size());
  }
  double h = 12.0 / (n * (n + 1)) * s - 3.0 * (n + 1);
  kw.h = std::max(0.0, h / correction);
  kw.p = boost::math::gamma_q(kw.df / 2.0, kw.h / 2.0);
  return kw;
}

std::size_t SatisfactionTable::total() const noexcept { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

double SatisfactionTable::share(std::size_t bucket) const noexcept {
  std::size_t n = total();
  return n == 0 ? 0.0 : static_cast<double>(counts[bucket]) / static_cast<double>(n);
}

double SatisfactionTable::positive_share() const noexcept { return share(0) + share(1); }
double SatisfactionTable::negative_share() const noexcept { return share(3) + share(4); }

std::optional<std::size_t> satisfaction_bucket(std::string_view label) {
  std::string key = lower_snake(label);
  for (std::size_t i = 0; i < kSatisfactionBuckets.size(); ++i) {
    if (kSatisfactionBuckets[i] == key) return i;
  }
  return std::nullopt;
}

Summary summarize(const std::vector<ActionEvent>& events, const std::vector<SurveyRow>& surveys,
                  const SummaryOptions& options) {
  Summary s;
  std::set<AnonId> people;
  for (const ActionEvent& ev : events) {
    people.insert(ev.anon_id);
    if (ev.kind != ActionKind::Decision) continue;
    if (ev.synthetic) ++s.synthetic_decisions;
    else ++s.valid_decisions;
  }
  for (const SurveyRow& row : surveys) people.insert(row.anon_id);
  s.participants = people.size();
  std::set<std::string> demographic(options.demographic_questions.begin(), options.demographic_questions.end());
  for (const SurveyRow& row : surveys) {
    std::string value = row.answer.is_string() ? row.answer.get<std::string>() : row.answer.dump();
    if (demographic.contains(row.question_id)) ++s.demographics[row.question_id][value];
    if (row.question_id == options.satisfaction_question) {
      if (auto b = satisfaction_bucket(value)) ++s.satisfaction.counts[*b];
    }
  }
  return s;
}

Json to_json(const ResponseTimes& rt) {
  Json rows = Json::array();
  for (const auto& r : rt.rounds) {
    rows.push_back({{"round", r.round},
                    {"n", r.n},
                    {"mean_ms", r.mean_ms},
                    {"stderr_ms", r.stderr_ms},
                    {"ci_low_ms", r.ci_low_ms},
                    {"ci_high_ms", r.ci_high_ms}});
  }
  return Json{{"rounds", rows}, {"missing_round_open", rt.missing_round_open}};
}

Json to_json(const ConditionalTable& t) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < 2; ++r) {
    Json row{{"given", t.rows[r]}, {"n", t.row_n(r)}};
    for (std::size_t c = 0; c < 2; ++c) {
      row[t.cols[c]] = t.p(r, c);
      row["count_" + t.cols[c]] = t.counts[r][c];
    }
    rows.push_back(row);
  }
  return Json{{"rows", rows}, {"total", t.total()}};
}

Json to_json(const BinomialDiff& d) { return Json{{"z", d.z}, {"significant", d.significant}}; }

Json to_json(const KruskalWallis& kw) { return Json{{"h", kw.h}, {"df", kw.df}, {"p", kw.p}}; }

Json to_json(const Summary& s) {
  Json sat = Json::object();
  for (std::size_t i = 0; i < kSatisfactionBuckets.size(); ++i) {
    sat[std::string(kSatisfactionBuckets[i])] = {{"count", s.satisfaction.counts[i]}, {"share", s.satisfaction.share(i)}};
  }
  return Json{{"participants", s.participants},
              {"valid_decisions", s.valid_decisions},
              {"synthetic_decisions", s.synthetic_decisions},
              {"demographics", s.demographics},
              {"satisfaction", sat},
              {"satisfaction_total", s.satisfaction.total()},
              {"positive_share", s.satisfaction.positive_share()},
              {"negative_share", s.satisfaction.negative_share()}};
}

}  // namespace csl::analysis
