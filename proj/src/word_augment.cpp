#include "textret/word_augment.hpp"

namespace textret {

std::array<double, 4> EditOperatorRatios::probabilities() const {
  const std::array<double, 4> w{insert, remove, replace, keep};
  double total = 0;
  for (double x : w) {
    if (!(x >= 0) || !std::isfinite(x)) throw InvalidInput("edit operator weights must be finite and non-negative");
    total += x;
  }
  if (!(total > 0)) throw InvalidInput("at least one edit operator weight must be positive");
  return {w[0] / total, w[1] / total, w[2] / total, w[3] / total};
}

OperatorSequence sample_operators(int n, const EditOperatorRatios& ratios, Rng& rng) {
  if (n < 1) throw InvalidInput("sample_operators: n must be >= 1");
  const auto p = ratios.probabilities();
  std::discrete_distribution<int> pick(p.begin(), p.end());
  OperatorSequence ops(static_cast<std::size_t>(n));
  for (auto& op : ops) op = static_cast<EditOp>(pick(rng));
  return ops;
}

Word augment(const Word& word, const EditOperatorRatios& ratios, const Charset& charset, Rng& rng, int max_len) {
  if (word.charset_id() != charset.id()) throw InvalidInput("augment: word/charset mismatch");
  const auto p = ratios.probabilities();
  if (p[0] + p[2] + p[3] <= 0) throw InvalidInput("augment: delete-only ratios can never produce a word");
  std::uniform_int_distribution<int> any_symbol(0, charset.size() - 1);
  std::vector<int> out;
  while (out.empty()) {
    const auto ops = sample_operators(word.size(), ratios, rng);
    for (int i = 0; i < word.size(); ++i) {
      switch (ops[static_cast<std::size_t>(i)]) {
        case EditOp::Insert:
          out.push_back(word[i]);
          out.push_back(any_symbol(rng));
          break;
        case EditOp::Delete:
          break;
        case EditOp::Replace:
          out.push_back(any_symbol(rng));
          break;
        case EditOp::Keep:
          out.push_back(word[i]);
          break;
      }
    }
  }
  if (max_len > 0 && static_cast<int>(out.size()) > max_len) out.resize(static_cast<std::size_t>(max_len));
  return Word(std::move(out), charset.id());
}

std::vector<Word> augment_query_set(const std::vector<Word>& queries, const EditOperatorRatios& ratios,
                                    const Charset& charset, Rng& rng, int max_len) {
  if (queries.empty()) throw InvalidInput("augment_query_set: empty query set");
  std::vector<Word> out(queries);
  out.reserve(queries.size() * 2);
  for (const auto& q : queries) out.push_back(augment(q, ratios, charset, rng, max_len));
  return out;
}

std::vector<double> similarity_histogram(const std::vector<Word>& words, int bins) {
  if (words.size() < 2) throw InvalidInput("similarity_histogram: need at least two words");
  if (bins < 2) throw InvalidInput("similarity_histogram: need at least two bins");
  std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
  double pairs = 0;
  for (std::size_t i = 0; i < words.size(); ++i)
    for (std::size_t j = i + 1; j < words.size(); ++j) {
      const double s = normalized_similarity(words[i], words[j]);
      const int b = std::min(bins - 1, static_cast<int>(s * bins + 1e-9));
      hist[static_cast<std::size_t>(b)] += 1;
      pairs += 1;
    }
  for (auto& h : hist) h /= pairs;
  return hist;
}

}  // namespace textret
