// csl-analyze: evaluation statistics from exported session data.

#include <iomanip>
#include <map>
#include <optional>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "csl/analysis.hpp"
#include "csl/csv.hpp"
#include "csl/error.hpp"
#include "csl/persistence.hpp"

namespace an = csl::analysis;

namespace {

struct Common {
  std::string events;
  std::string surveys;
  bool include_synthetic = false;
  std::string format = "csv";
};

std::vector<csl::ActionEvent> load_events(const std::string& path) {
  if (path.empty()) csl::fail(csl::Errc::precondition, "--events is required");
  return csl::events_from_csv(csl::read_file(path));
}

std::string num(double v) {
  std::ostringstream ss;
  ss << std::setprecision(10) << v;
  return ss.str();
}

void print_table(const an::ConditionalTable& t, const std::string& format) {
  if (format == "json") {
    std::cout << an::to_json(t).dump(2) << "\n";
    return;
  }
  std::cout << "given,n," << t.cols[0] << "," << t.cols[1] << "\n";
  for (std::size_t r = 0; r < 2; ++r) {
    std::cout << t.rows[r] << "," << t.row_n(r) << "," << num(t.p(r, 0)) << "," << num(t.p(r, 1)) << "\n";
  }
}

an::ConditionalTable table_for(const std::string& which, const std::vector<csl::ActionEvent>& events, bool synthetic) {
  auto series = an::market_series(events, synthetic);
  if (which == "imitation") return an::market_imitation(series);
  if (which == "wsls") return an::wsls(series);
  csl::fail(csl::Errc::precondition, "--table must be imitation or wsls");
}

std::vector<std::vector<double>> load_groups(const std::string& path) {
  auto rows = csl::csv::parse(csl::read_file(path));
  if (rows.empty() || rows.front().size() < 2) csl::fail(csl::Errc::precondition, "expected a group,value CSV");
  std::map<std::string, std::vector<double>> groups;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() < 2) continue;
    try {
      groups[rows[i][0]].push_back(std::stod(rows[i][1]));
    } catch (const std::exception&) {
      csl::fail(csl::Errc::precondition, "row " + std::to_string(i + 1) + ": value is not a number");
    }
  }
  std::vector<std::vector<double>> out;
  for (auto& [_, v] : groups) out.push_back(std::move(v));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Statistics over exported events and surveys"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--events", c.events, "events CSV export");
    sub->add_option("--surveys", c.surveys, "surveys CSV export");
    sub->add_flag("--include-synthetic", c.include_synthetic, "Count decisions made on behalf of absent players");
    sub->add_option("--format", c.format, "csv | json")->check(CLI::IsMember({"csv", "json"}));
  };

  auto* rt = app.add_subcommand("rt", "Decision time per round");
  add_common(rt);
  auto* imitation = app.add_subcommand("imitation", "P(prediction | previous market move)");
  add_common(imitation);
  auto* wsls = app.add_subcommand("wsls", "P(stay/shift | previous win/lose)");
  add_common(wsls);

  auto* bdiff = app.add_subcommand("bdiff", "Two-proportion difference test");
  add_common(bdiff);
  std::optional<double> p1, p2;
  std::optional<std::size_t> n1, n2;
  std::string against, table = "imitation", row = "up", col = "up";
  bdiff->add_option("--p1", p1);
  bdiff->add_option("--n1", n1);
  bdiff->add_option("--p2", p2);
  bdiff->add_option("--n2", n2);
  bdiff->add_option("--against", against, "second events CSV; compares one cell of the two tables");
  bdiff->add_option("--table", table, "imitation | wsls");
  bdiff->add_option("--row", row, "conditioning row, e.g. up or win");
  bdiff->add_option("--col", col, "outcome column, e.g. up or stay");

  auto* kw = app.add_subcommand("kw", "Kruskal-Wallis test");
  add_common(kw);
  std::string values;
  kw->add_option("--values", values, "CSV with header group,value (one row per participant)")->required();

  auto* summary = app.add_subcommand("summary", "Demographics and satisfaction");
  add_common(summary);
  std::string satisfaction = "satisfaction";
  summary->add_option("--satisfaction-question", satisfaction);

  CLI11_PARSE(app, argc, argv);

  try {
    if (rt->parsed()) {
      auto r = an::response_times(load_events(c.events), c.include_synthetic);
      if (c.format == "json") {
        std::cout << an::to_json(r).dump(2) << "\n";
      } else {
        std::cout << "round,n,mean_ms,stderr_ms,ci_low_ms,ci_high_ms\n";
        for (const auto& row : r.rounds) {
          std::cout << row.round << "," << row.n << "," << num(row.mean_ms) << "," << num(row.stderr_ms) << ","
                    << num(row.ci_low_ms) << "," << num(row.ci_high_ms) << "\n";
        }
      }
      if (r.missing_round_open > 0) {
        std::cerr << "warning: " << r.missing_round_open << " decisions had no round-open record and were skipped\n";
      }
    } else if (imitation->parsed() || wsls->parsed()) {
      print_table(table_for(imitation->parsed() ? "imitation" : "wsls", load_events(c.events), c.include_synthetic), c.format);
    } else if (bdiff->parsed()) {
      double a = 0, b = 0;
      std::size_t na = 0, nb = 0;
      if (!against.empty()) {
        auto t1 = table_for(table, load_events(c.events), c.include_synthetic);
        auto t2 = table_for(table, load_events(against), c.include_synthetic);
        auto r = t1.row_index(row);
        auto k = t1.col_index(col);
        if (!r || !k) csl::fail(csl::Errc::precondition, "unknown --row or --col for table " + table);
        a = t1.p(*r, *k);
        na = t1.row_n(*r);
        b = t2.p(*r, *k);
        nb = t2.row_n(*r);
      } else {
        if (!p1 || !n1 || !p2 || !n2) csl::fail(csl::Errc::precondition, "give --p1 --n1 --p2 --n2 or --events with --against");
        a = *p1;
        na = *n1;
        b = *p2;
        nb = *n2;
      }
      auto d = an::binomial_diff(a, na, b, nb);
      if (c.format == "json") {
        std::cout << an::to_json(d).dump(2) << "\n";
      } else {
        std::cout << "p1,n1,p2,n2,z,significant\n"
                  << num(a) << "," << na << "," << num(b) << "," << nb << "," << num(d.z) << ","
                  << (d.significant ? "true" : "false") << "\n";
      }
    } else if (kw->parsed()) {
      auto r = an::kruskal_wallis(load_groups(values));
      if (c.format == "json") std::cout << an::to_json(r).dump(2) << "\n";
      else std::cout << "h,df,p\n" << num(r.h) << "," << r.df << "," << num(r.p) << "\n";
    } else if (summary->parsed()) {
      std::vector<csl::ActionEvent> events;
      if (!c.events.empty()) events = load_events(c.events);
      std::vector<csl::SurveyRow> surveys;
      if (!c.surveys.empty()) surveys = csl::surveys_from_csv(csl::read_file(c.surveys));
      an::SummaryOptions opts;
      opts.satisfaction_question = satisfaction;
      auto s = an::summarize(events, surveys, opts);
      if (c.format == "json") {
        std::cout << an::to_json(s).dump(2) << "\n";
      } else {
        std::cout << "section,key,value,count,share\n";
        std::cout << "totals,participants,," << s.participants << ",\n";
        std::cout << "totals,valid_decisions,," << s.valid_decisions << ",\n";
        std::cout << "totals,synthetic_decisions,," << s.synthetic_decisions << ",\n";
        for (const auto& [q, counts] : s.demographics) {
          std::size_t total = 0;
          for (const auto& [_, n] : counts) total += n;
          for (const auto& [v, n] : counts) {
            std::cout << "demographics," << csl::csv::escape(q) << "," << csl::csv::escape(v) << "," << n << ","
                      << num(static_cast<double>(n) / static_cast<double>(total)) << "\n";
          }
        }
        for (std::size_t i = 0; i < an::kSatisfactionBuckets.size(); ++i) {
          std::cout << "satisfaction," << satisfaction << "," << an::kSatisfactionBuckets[i] << ","
                    << s.satisfaction.counts[i] << "," << num(s.satisfaction.share(i)) << "\n";
        }
        std::cout << "satisfaction," << satisfaction << ",positive_share," << s.satisfaction.total() << ","
                  << num(s.satisfaction.positive_share()) << "\n";
      }
    }
  } catch (const csl::Error& e) {
    std::cerr << "error: " << csl::to_string(e.code()) << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
