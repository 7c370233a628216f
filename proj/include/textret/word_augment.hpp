#pragma once

// Pseudoword generation by random per-character edits, used to densify the
// high-similarity end of the training pair distribution.

#include <array>
#include <random>
#include <vector>

#include "textret/similarity.hpp"

namespace textret {

enum class EditOp { Insert = 0, Delete = 1, Replace = 2, Keep = 3 };

/// Relative weights of the four edit operators. Default is 1:1:1:5.
struct EditOperatorRatios {
  double insert = 1.0;
  double remove = 1.0;
  double replace = 1.0;
  double keep = 5.0;

  /// Normalized probabilities in operator order; throws InvalidInput if all weights are zero.
  std::array<double, 4> probabilities() const;
  static EditOperatorRatios keep_only() { return {0, 0, 0, 1}; }
};

using OperatorSequence = std::vector<EditOp>;
using Rng = std::mt19937_64;

OperatorSequence sample_operators(int n, const EditOperatorRatios& ratios, Rng& rng);

/// Applies one operator per source character (insert keeps the character and appends a random
/// one after it). Empty results are resampled; outputs longer than `max_len` are truncated.
Word augment(const Word& word, const EditOperatorRatios& ratios, const Charset& charset, Rng& rng,
             int max_len = 32);

/// Originals followed by one pseudoword per original (size 2N).
std::vector<Word> augment_query_set(const std::vector<Word>& queries, const EditOperatorRatios& ratios,
                                    const Charset& charset, Rng& rng, int max_len = 32);

/// Frequencies of pairwise normalized similarity over all unordered pairs, `bins` equal bins on [0,1].
std::vector<double> similarity_histogram(const std::vector<Word>& words, int bins);

}  // namespace textret
