#pragma once

// String similarity (edit-distance targets) and cross-modal cosine scoring.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "textret/errors.hpp"

namespace textret {

/// Splits a UTF-8 string into code points, each returned as its own byte string.
std::vector<std::string> split_utf8(std::string_view text);

class Word;

/// Ordered, duplicate-free symbol inventory. Index `size()` is reserved as the CTC blank.
class Charset {
 public:
  Charset() = default;
  explicit Charset(std::vector<std::string> symbols, bool fold_case = false);

  /// a-z followed by 0-9, case folding on.
  static Charset latin_lower_digits();

  /// One symbol per line; line order is index order.
  static Charset load(const std::filesystem::path& path, bool fold_case = false);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(symbols_.size()); }
  int blank_index() const { return size(); }
  bool fold_case() const { return fold_case_; }
  std::uint64_t id() const { return id_; }

  const std::string& symbol(int index) const;
  const std::vector<std::string>& symbols() const { return symbols_; }
  std::optional<int> index_of(std::string_view symbol) const;

  /// Encodes UTF-8 text; throws InvalidInput on an empty string or an unknown symbol.
  Word encode(std::string_view text) const;
  std::string decode(const Word& word) const;
  bool contains(std::string_view text) const;

  friend bool operator==(const Charset& a, const Charset& b) { return a.id_ == b.id_; }

 private:
  std::string fold(std::string_view symbol) const;

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> lookup_;
  bool fold_case_ = false;
  std::uint64_t id_ = 0;
};

/// Non-empty sequence of symbol indices tagged with the id of the charset it was encoded in.
class Word {
 public:
  Word() = default;
  Word(std::vector<int> ids, std::uint64_t charset_id);

  int size() const { return static_cast<int>(ids_.size()); }
  const std::vector<int>& ids() const { return ids_; }
  int operator[](int i) const { return ids_[static_cast<std::size_t>(i)]; }
  std::uint64_t charset_id() const { return charset_id_; }

  friend bool operator==(const Word& a, const Word& b) = default;
  friend auto operator<=>(const Word& a, const Word& b) = default;

 private:
  std::vector<int> ids_;
  std::uint64_t charset_id_ = 0;
};

/// Labeled score matrix, used both for edit-distance targets and predicted cosines.
struct SimilarityMatrix {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Eigen::MatrixXd values;

  int rows() const { return static_cast<int>(values.rows()); }
  int cols() const { return static_cast<int>(values.cols()); }
};

/// `count` sequences of T steps by C channels, one flattened (t-major) row per sequence.
template <class Scalar>
struct SequenceFeature {
  using Rows = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  int steps = 0;
  int channels = 0;
  Rows values;

  SequenceFeature() = default;
  SequenceFeature(int count, int steps_, int channels_)
      : steps(steps_), channels(channels_), values(Rows::Zero(count, steps_ * channels_)) {}
  SequenceFeature(Rows rows, int steps_, int channels_);

  int count() const { return static_cast<int>(values.rows()); }
  Scalar& at(int item, int t, int c) { return values(item, t * channels + c); }
  Scalar at(int item, int t, int c) const { return values(item, t * channels + c); }
};

template <class Scalar>
SequenceFeature<Scalar>::SequenceFeature(Rows rows, int steps_, int channels_)
    : steps(steps_), channels(channels_), values(std::move(rows)) {
  if (steps < 1 || channels < 1) throw InvalidInput("SequenceFeature: T and C must be >= 1");
  if (values.cols() != static_cast<Eigen::Index>(steps) * channels)
    throw InvalidInput("SequenceFeature: row width does not equal T*C");
  if (!values.allFinite()) throw InvalidInput("SequenceFeature: non-finite values");
}

/// Unit-cost edit distance. Throws InvalidInput when the words come from different charsets.
int levenshtein(const Word& a, const Word& b);

/// 1 - levenshtein(a, b) / max(|a|, |b|).
double normalized_similarity(const Word& a, const Word& b);

/// Pairwise normalized_similarity; throws InvalidInput on an empty side.
SimilarityMatrix target_matrix(const std::vector<Word>& rows, const std::vector<Word>& cols,
                               const Charset* charset = nullptr);

// Cosine kernel ----------------------------------------------------------------

template <class Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row norms, throwing DegenerateInput if any row has zero norm.
template <class Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> checked_row_norms(
    const Eigen::MatrixBase<Derived>& m) {
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> norms = m.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i)
    if (!(norms[i] > 0)) throw DegenerateInput("cosine: zero-norm vector at row " + std::to_string(i));
  return norms;
}

/// cos(a_i, b_j) for every row pair. Rows must have equal width.
template <class DA, class DB>
RowMatrix<typename DA::Scalar> cosine_rows(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using Scalar = typename DA::Scalar;
  if (a.cols() != b.cols()) throw InvalidInput("cosine: feature widths differ");
  const auto na = checked_row_norms(a);
  const auto nb = checked_row_norms(b);
  RowMatrix<Scalar> an = na.cwiseInverse().asDiagonal() * a;
  RowMatrix<Scalar> bn = nb.cwiseInverse().asDiagonal() * b;
  RowMatrix<Scalar> c = an * bn.transpose();
  return c.cwiseMax(Scalar(-1)).cwiseMin(Scalar(1));
}

/// Gradient of sum(grad ∘ cosine_rows(a, b)) with respect to a and b.
template <class Scalar>
void cosine_rows_backward(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b,
                          const RowMatrix<Scalar>& grad, RowMatrix<Scalar>& da, RowMatrix<Scalar>& db) {
  const auto na = checked_row_norms(a);
  const auto nb = checked_row_norms(b);
  RowMatrix<Scalar> an = na.cwiseInverse().asDiagonal() * a;
  RowMatrix<Scalar> bn = nb.cwiseInverse().asDiagonal() * b;
  RowMatrix<Scalar> c = an * bn.transpose();
  RowMatrix<Scalar> gc = grad.cwiseProduct(c);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_w = gc.rowwise().sum();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> col_w = gc.colwise().sum().transpose();
  da = na.cwiseInverse().asDiagonal() * (grad * bn - row_w.asDiagonal() * an);
  db = nb.cwiseInverse().asDiagonal() * (grad.transpose() * an - col_w.asDiagonal() * bn);
}

/// cos(tanh(V(F_i)), tanh(V(E_j))): the predicted cross-modal similarity.
template <class Scalar>
SimilarityMatrix cosine_matrix(const SequenceFeature<Scalar>& f, const SequenceFeature<Scalar>& e) {
  if (f.steps != e.steps || f.channels != e.channels)
    throw InvalidInput("cosine_matrix: T/C mismatch");
  RowMatrix<Scalar> tf = f.values.array().tanh().matrix();
  RowMatrix<Scalar> te = e.values.array().tanh().matrix();
  SimilarityMatrix out;
  out.values = cosine_rows(tf, te).template cast<double>();
  for (int i = 0; i < f.count(); ++i) out.row_labels.push_back(std::to_string(i));
  for (int j = 0; j < e.count(); ++j) out.col_labels.push_back(std::to_string(j));
  return out;
}

}  // namespace textret
