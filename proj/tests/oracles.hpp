#pragma once

// Independent reference implementations used by the tests.

#include <algorithm>
#include <functional>
#include <random>
#include <vector>

#include "textret/similarity.hpp"

namespace textret::testing {

/// Memoised recursion over the full (|a|+1) x (|b|+1) table.
inline int dp_levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
  std::function<int(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> int {
    if (i == 0) return static_cast<int>(j);
    if (j == 0) return static_cast<int>(i);
    int& m = memo[i][j];
    if (m >= 0) return m;
    m = std::min({d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0 : 1)});
    return m;
  };
  return d(a.size(), b.size());
}

inline Word random_word(const Charset& cs, std::mt19937_64& rng, int min_len, int max_len) {
  std::uniform_int_distribution<int> len(min_len, max_len), sym(0, cs.size() - 1);
  std::vector<int> ids(static_cast<std::size_t>(len(rng)));
  for (auto& i : ids) i = sym(rng);
  return Word(ids, cs.id());
}

/// Mean of precision@k over relevant positions, from explicit prefix counts.
inline double brute_force_ap(const std::vector<bool>& rel) {
  double total = 0;
  int relevant = 0;
  for (std::size_t k = 0; k < rel.size(); ++k) {
    if (!rel[k]) continue;
    ++relevant;
    int hits = 0;
    for (std::size_t j = 0; j <= k; ++j) hits += rel[j] ? 1 : 0;
    total += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return total / relevant;
}

}  // namespace textret::testing
