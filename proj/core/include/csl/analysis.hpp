#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "csl/model.hpp"
#include "csl/persistence.hpp"

namespace csl::analysis {

// One market-game decision as seen in the event log.
struct Decision {
  int round = 0;
  std::string choice;                 // "up" | "down"
  std::optional<std::string> market;  // actual move for that round
  std::optional<bool> win;            // prediction was correct
  Millis server_ts = 0;
};

// Decisions of one participant inside one game instance, by round.
struct DecisionSeries {
  AnonId participant;
  std::string instance;
  std::vector<Decision> decisions;
};

std::vector<DecisionSeries> market_series(const std::vector<ActionEvent>& events, bool include_synthetic = false);

struct RoundTime {
  int round = 0;
  std::size_t n = 0;
  double mean_ms = 0;
  double stderr_ms = 0;  // 0 when n < 2
  double ci_low_ms = 0;
  double ci_high_ms = 0;
};

struct ResponseTimes {
  std::vector<RoundTime> rounds;
  std::size_t missing_round_open = 0;  // decisions dropped for lack of a zero point
};

// Time from the round-open record to the decision, grouped by round, with
// a normal-approximation 95% interval.
ResponseTimes response_times(const std::vector<ActionEvent>& events, bool include_synthetic = false);

struct ConditionalTable {
  std::array<std::string, 2> rows;
  std::array<std::string, 2> cols;
  std::array<std::array<std::size_t, 2>, 2> counts{};

  std::size_t row_n(std::size_t r) const noexcept { return counts[r][0] + counts[r][1]; }
  std::size_t total() const noexcept { return row_n(0) + row_n(1); }
  double p(std::size_t r, std::size_t c) const noexcept;  // 0 for an empty row
  std::optional<std::size_t> row_index(std::string_view name) const noexcept;
  std::optional<std::size_t> col_index(std::string_view name) const noexcept;
};

// P(prediction | previous market move). Throws empty_table.
ConditionalTable market_imitation(const std::vector<DecisionSeries>& series);
// P(stay/shift | previous win/lose). Throws empty_table.
ConditionalTable wsls(const std::vector<DecisionSeries>& series);

struct BinomialDiff {
  double z = 0;
  bool significant = false;  // |z| > 1.96
};

// Pooled two-proportion z score. Throws precondition or degenerate_variance.
BinomialDiff binomial_diff(double p1, std::size_t n1, double p2, std::size_t n2);

struct KruskalWallis {
  double h = 0;
  int df = 0;
  double p = 1;
};

// Tie-corrected H with a chi-square(k-1) p-value. Throws precondition.
KruskalWallis kruskal_wallis(const std::vector<std::vector<double>>& groups);

inline constexpr std::array<std::string_view, 5> kSatisfactionBuckets = {"very_positive", "positive", "neutral",
                                                                          "negative", "very_negative"};

struct SatisfactionTable {
  std::array<std::size_t, 5> counts{};
  std::size_t total() const noexcept;
  double share(std::size_t bucket) const noexcept;  // 0 when empty
  double positive_share() const noexcept;            // very positive + positive
  double negative_share() const noexcept;
};

// Accepts bucket names in snake case or as printed ("Very Positive").
std::optional<std::size_t> satisfaction_bucket(std::string_view label);

struct SummaryOptions {
  std::vector<std::string> demographic_questions{"gender", "age", "education"};
  std::string satisfaction_question = "satisfaction";
};

struct Summary {
  std::size_t participants = 0;
  std::size_t valid_decisions = 0;
  std::size_t synthetic_decisions = 0;
  std::map<std::string, std::map<std::string, std::size_t>> demographics;
  SatisfactionTable satisfaction;
};

Summary summarize(const std::vector<ActionEvent>& events, const std::vector<SurveyRow>& surveys,
                  const SummaryOptions& options = {});

Json to_json(const ResponseTimes& rt);
Json to_json(const ConditionalTable& t);
Json to_json(const BinomialDiff& d);
Json to_json(const KruskalWallis& kw);
Json to_json(const Summary& s);

}  // namespace csl::analysis
