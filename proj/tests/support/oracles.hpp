#pragma once

// Reference computations used only by tests. Deliberately naive.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "csl/engine.hpp"

namespace oracle {

// The four strict-inequality regions; anything else is a boundary case.
inline csl::DyadicClass classify(csl::Units r, csl::Units s, csl::Units t, csl::Units p) {
  using csl::DyadicClass;
  if (r > t && s > p) return DyadicClass::Harmony;
  if (t > r && s > p) return DyadicClass::Snowdrift;
  if (r > t && p > s) return DyadicClass::StagHunt;
  if (t > r && p > s) return DyadicClass::PrisonersDilemma;
  return DyadicClass::Boundary;
}

// Upper tail of chi-square with k degrees of freedom via the textbook
// recursion from Q(1) = erfc(sqrt(x/2)) and Q(2) = exp(-x/2).
inline double chi_square_survival(double x, int k) {
  double half = x / 2;
  double q = k % 2 ? std::erfc(std::sqrt(half)) : std::exp(-half);
  for (int j = k % 2 ? 1 : 2; j + 2 <= k; j += 2) {
    double a = j / 2.0;
    q += std::exp(a * std::log(half) - half - std::lgamma(a + 1));
  }
  return q;
}

struct Kw {
  double h = 0;
  double p = 1;
};

inline Kw kruskal_wallis(const std::vector<std::vector<double>>& groups) {
  std::vector<double> all;
  for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
  double n = static_cast<double>(all.size());
  auto rank = [&](double x) {
    double less = 0, equal = 0;
    for (double y : all) {
      less += y < x;
      equal += y == x;
    }
    return less + (equal + 1) / 2;
  };
  double sum = 0;
  for (const auto& g : groups) {
    double r = 0;
    for (double x : g) r += rank(x);
    sum += r * r / static_cast<double>(g.size());
  }
  double ties = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    bool first = true;
    double t = 0;
    for (std::size_t j = 0; j < all.size(); ++j) {
      if (all[j] == all[i]) {
        if (j < i) first = false;
        ++t;
      }
    }
    if (first) ties += t * t * t - t;
  }
  double c = 1 - ties / (n * n * n - n);
  if (c <= 0) return {};
  double h = (12 / (n * (n + 1)) * sum - 3 * (n + 1)) / c;
  return {h, chi_square_survival(h, static_cast<int>(groups.size()) - 1)};
}

// Exact integer test of |z| > 1.96 for the pooled two-proportion statistic
// with p1 = k1/n1 and p2 = k2/n2.
inline bool binomial_exceeds(std::int64_t k1, std::int64_t n1, std::int64_t k2, std::int64_t n2) {
  using I = __int128;
  I k = k1 + k2, n = n1 + n2;
  I d = static_cast<I>(k1) * n2 - static_cast<I>(k2) * n1;
  return 10000 * d * d * n > 38416 * static_cast<I>(n1) * n2 * k * (n - k);
}

// Welford running mean and standard error of the mean.
inline std::pair<double, double> mean_and_stderr(const std::vector<double>& xs) {
  double mean = 0, m2 = 0;
  double count = 0;
  for (double x : xs) {
    ++count;
    double delta = x - mean;
    mean += delta / count;
    m2 += delta * (x - mean);
  }
  if (count < 2) return {mean, 0};
  return {mean, std::sqrt(m2 / (count - 1) / count)};
}

}  // namespace oracle
