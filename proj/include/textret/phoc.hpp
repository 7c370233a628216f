#pragma once

// Pyramidal histogram of characters and the PHOC ranking rule.

#include <vector>

#include <Eigen/Core>

#include "textret/similarity.hpp"

namespace textret {

/// Binary occupancy vector laid out level by level, region by region, symbol by symbol.
struct PHOCVector {
  Eigen::VectorXd bits;
  std::vector<int> levels;

  int size() const { return static_cast<int>(bits.size()); }
};

inline std::vector<int> default_phoc_levels() { return {2, 3, 4, 5}; }

int phoc_dimension(int charset_size, const std::vector<int>& levels);
inline int phoc_dimension(const Charset& charset, const std::vector<int>& levels) {
  return phoc_dimension(charset.size(), levels);
}

/// Character i of n spans [i/n, (i+1)/n); its bit in region r of level L is set when at least
/// half of that span falls inside [r/L, (r+1)/L).
PHOCVector phoc_encode(const Word& word, const Charset& charset, const std::vector<int>& levels);

struct PhocRanking {
  std::vector<double> scores;     // per proposal, input order
  std::vector<int> order;         // proposal indices, best first
  double image_score = -1.0;      // max over proposals, -1 when there are none
};

/// Cosine between the query's PHOC and each predicted vector.
PhocRanking phoc_rank(const Word& query, const Charset& charset, const std::vector<int>& levels,
                      const std::vector<Eigen::VectorXd>& predicted);

}  // namespace textret
