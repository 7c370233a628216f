#include "textret/phoc.hpp"

#include <algorithm>
#include <numeric>

namespace textret {

int phoc_dimension(int charset_size, const std::vector<int>& levels) {
  if (levels.empty()) throw InvalidInput("phoc: levels must be non-empty");
  int total = 0;
  for (int l : levels) {
    if (l < 1) throw InvalidInput("phoc: level split counts must be >= 1");
    total += l;
  }
  return total * charset_size;
}

PHOCVector phoc_encode(const Word& word, const Charset& charset, const std::vector<int>& levels) {
  if (word.charset_id() != charset.id()) throw InvalidInput("phoc_encode: word/charset mismatch");
  const int dim = phoc_dimension(charset, levels);
  PHOCVector v{Eigen::VectorXd::Zero(dim), levels};
  const long n = word.size();
  int offset = 0;
  for (int level : levels) {
    // Integer units of 1/(n*level): char i covers [i*level, (i+1)*level), region r covers [r*n, (r+1)*n).
    for (long i = 0; i < n; ++i) {
      const int c = word[static_cast<int>(i)];
      if (c >= charset.size()) throw InvalidInput("phoc_encode: symbol outside charset");
      for (int r = 0; r < level; ++r) {
        const long lo = std::max(i * level, r * n);
        const long hi = std::min((i + 1) * level, (r + 1) * n);
        if (2 * (hi - lo) >= level) v.bits[offset + r * charset.size() + c] = 1.0;
      }
    }
    offset += level * charset.size();
  }
  return v;
}

PhocRanking phoc_rank(const Word& query, const Charset& charset, const std::vector<int>& levels,
                      const std::vector<Eigen::VectorXd>& predicted) {
  const PHOCVector q = phoc_encode(query, charset, levels);
  const double qn = q.bits.norm();
  PhocRanking out;
  for (const auto& p : predicted) {
    if (p.size() != q.size()) throw InvalidInput("phoc_rank: predicted vector has the wrong dimension");
    const double pn = p.norm();
    if (!(pn > 0)) throw DegenerateInput("phoc_rank: zero-norm predicted vector");
    out.scores.push_back(std::clamp(q.bits.dot(p) / (qn * pn), -1.0, 1.0));
  }
  out.order.resize(out.scores.size());
  std::iota(out.order.begin(), out.order.end(), 0);
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](int a, int b) { return out.scores[static_cast<std::size_t>(a)] > out.scores[static_cast<std::size_t>(b)]; });
  if (!out.order.empty()) out.image_score = out.scores[static_cast<std::size_t>(out.order.front())];
  return out;
}

}  // namespace textret
