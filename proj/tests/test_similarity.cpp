#include <doctest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "textret/phoc.hpp"
#include "textret/similarity.hpp"
#include "textret/word_augment.hpp"

using namespace textret;
using textret::testing::dp_levenshtein;
using textret::testing::random_word;

TEST_CASE("charset: lookup is a bijection, blank lies outside") {
  const Charset cs = Charset::latin_lower_digits();
  CHECK(cs.size() == 36);
  CHECK(cs.blank_index() == 36);
  for (int i = 0; i < cs.size(); ++i) CHECK(cs.index_of(cs.symbol(i)) == i);
  CHECK(cs.index_of("Q") == cs.index_of("q"));
  CHECK_THROWS_AS(Charset({"a", "b", "a"}), InvalidInput);
  CHECK_THROWS_AS(Charset(std::vector<std::string>{}), InvalidInput);
  CHECK_THROWS_AS(cs.encode("caf\xc3\xa9"), InvalidInput);
  CHECK_THROWS_AS(cs.encode(""), InvalidInput);
}

TEST_CASE("charset: non-Latin symbols and file round trip") {
  const Charset greek({"\xce\xb1", "\xce\xb2", "\xce\xb3", "\xe4\xb8\xad"});
  const Word w = greek.encode("\xce\xb3\xe4\xb8\xad\xce\xb1");
  CHECK(w.ids() == std::vector<int>{2, 3, 0});
  CHECK(greek.decode(w) == "\xce\xb3\xe4\xb8\xad\xce\xb1");
  const auto path = std::filesystem::temp_directory_path() / "textret_charset_test.txt";
  greek.save(path);
  const Charset back = Charset::load(path);
  CHECK(back == greek);
  CHECK(back.symbols() == greek.symbols());
  std::filesystem::remove(path);
}

TEST_CASE("levenshtein: known values") {
  const Charset cs = Charset::latin_lower_digits();
  CHECK(levenshtein(cs.encode("kitten"), cs.encode("sitting")) == 3);
  CHECK(levenshtein(cs.encode("taxi"), cs.encode("taxi")) == 0);
  CHECK(levenshtein(cs.encode("a"), cs.encode("bbb")) == 3);
  CHECK(normalized_similarity(cs.encode("hotel"), cs.encode("motel")) == doctest::Approx(0.8));
  CHECK(normalized_similarity(cs.encode("ab"), cs.encode("cd")) == 0.0);
  const Charset other({"x", "y"});
  CHECK_THROWS_AS(levenshtein(cs.encode("x"), other.encode("x")), InvalidInput);
}

TEST_CASE("levenshtein agrees with the full-table recursion oracle") {
  const Charset cs({"a", "b", "c", "d"});
  std::mt19937_64 rng(21);
  for (int i = 0; i < 500; ++i) {
    const Word a = random_word(cs, rng, 1, 9), b = random_word(cs, rng, 1, 9);
    const int d = dp_levenshtein(a.ids(), b.ids());
    REQUIRE(levenshtein(a, b) == d);
    CHECK(normalized_similarity(a, b) == 1.0 - static_cast<double>(d) / std::max(a.size(), b.size()));
  }
}

TEST_CASE("levenshtein metric properties") {
  const Charset cs({"a", "b", "c"});
  std::mt19937_64 rng(22);
  for (int i = 0; i < 300; ++i) {
    const Word a = random_word(cs, rng, 1, 7), b = random_word(cs, rng, 1, 7), c = random_word(cs, rng, 1, 7);
    CHECK(levenshtein(a, b) == levenshtein(b, a));
    CHECK(levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c));
    CHECK((levenshtein(a, b) == 0) == (a == b));
    CHECK(levenshtein(a, b) >= std::abs(a.size() - b.size()));
    const double s = normalized_similarity(a, b);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("target_matrix shapes and symmetry") {
  const Charset cs = Charset::latin_lower_digits();
  std::vector<Word> q{cs.encode("bar"), cs.encode("bank"), cs.encode("park")};
  std::vector<Word> p{cs.encode("bar"), cs.encode("book")};
  const auto s = target_matrix(q, p, &cs);
  CHECK(s.rows() == 3);
  CHECK(s.cols() == 2);
  CHECK(s.row_labels[1] == "bank");
  CHECK(s.values(0, 0) == 1.0);
  CHECK(s.values(1, 0) == doctest::Approx(0.5));
  const auto sq = target_matrix(q, q);
  CHECK((sq.values - sq.values.transpose()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(sq.values.diagonal().isOnes());
  CHECK_THROWS_AS(target_matrix({}, p), InvalidInput);
}

TEST_CASE("cosine_matrix: tanh-cosine against direct loops") {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> d(0, 2);
  SequenceFeature<double> f(3, 4, 2), e(2, 4, 2);
  for (int i = 0; i < f.values.size(); ++i) f.values.data()[i] = d(rng);
  for (int i = 0; i < e.values.size(); ++i) e.values.data()[i] = d(rng);
  const auto s = cosine_matrix(f, e);
  REQUIRE(s.rows() == 3);
  REQUIRE(s.cols() == 2);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double dot = 0, nf = 0, ne = 0;
      for (int k = 0; k < 8; ++k) {
        const double a = std::tanh(f.values(i, k)), b = std::tanh(e.values(j, k));
        dot += a * b;
        nf += a * a;
        ne += b * b;
      }
      CHECK(s.values(i, j) == doctest::Approx(dot / std::sqrt(nf * ne)).epsilon(1e-12));
    }
  const auto self = cosine_matrix(f, f);
  CHECK((self.values.diagonal().array() - 1.0).abs().maxCoeff() < 1e-12);
  SequenceFeature<double> zero(1, 4, 2);
  CHECK_THROWS_AS(cosine_matrix(zero, e), DegenerateInput);
  SequenceFeature<double> wrong(1, 2, 4);
  CHECK_THROWS_AS(cosine_matrix(wrong, e), InvalidInput);
}

TEST_CASE("WAS operator sampling frequencies") {
  Rng rng(24);
  const auto ops = sample_operators(100000, EditOperatorRatios{}, rng);
  std::array<double, 4> freq{};
  for (auto op : ops) freq[static_cast<std::size_t>(op)] += 1e-5;
  CHECK(std::abs(freq[0] - 0.125) < 0.01);
  CHECK(std::abs(freq[1] - 0.125) < 0.01);
  CHECK(std::abs(freq[2] - 0.125) < 0.01);
  CHECK(std::abs(freq[3] - 0.625) < 0.01);
  CHECK_THROWS_AS(sample_operators(3, EditOperatorRatios{0, 0, 0, 0}, rng), InvalidInput);
}

TEST_CASE("WAS augment: operator semantics") {
  const Charset cs = Charset::latin_lower_digits();
  const Word w = cs.encode("coffee");
  Rng rng(25);
  CHECK(augment(w, EditOperatorRatios::keep_only(), cs, rng) == w);
  for (int i = 0; i < 50; ++i) {
    const Word ins = augment(w, EditOperatorRatios{1, 0, 0, 0}, cs, rng);
    REQUIRE(ins.size() == 12);
    for (int k = 0; k < w.size(); ++k) CHECK(ins[2 * k] == w[k]);
    const Word rep = augment(w, EditOperatorRatios{0, 0, 1, 0}, cs, rng);
    CHECK(rep.size() == w.size());
    const Word del = augment(w, EditOperatorRatios{0, 5, 0, 1}, cs, rng);
    CHECK(del.size() >= 1);
    CHECK(del.size() <= w.size());
    // Generated by <= |w| edits.
    const Word mixed = augment(w, EditOperatorRatios{}, cs, rng);
    CHECK(levenshtein(mixed, w) <= w.size());
  }
  CHECK_THROWS_AS(augment(w, EditOperatorRatios{0, 1, 0, 0}, cs, rng), InvalidInput);
  const Word longw = cs.encode(std::string(30, 'a'));
  CHECK(augment(longw, EditOperatorRatios{1, 0, 0, 0}, cs, rng).size() == 32);
}

TEST_CASE("WAS augment_query_set keeps originals as prefix") {
  const Charset cs = Charset::latin_lower_digits();
  std::vector<Word> q;
  for (const char* s : {"bar", "bus", "taxi"}) q.push_back(cs.encode(s));
  Rng rng(26);
  const auto out = augment_query_set(q, EditOperatorRatios{}, cs, rng);
  REQUIRE(out.size() == 6);
  CHECK(std::equal(q.begin(), q.end(), out.begin()));
  const auto same = augment_query_set(q, EditOperatorRatios::keep_only(), cs, rng);
  CHECK(std::equal(q.begin(), q.end(), same.begin() + 3));
}

TEST_CASE("similarity histogram: normalisation and distribution shift") {
  const Charset cs = Charset::latin_lower_digits();
  std::vector<Word> lex;
  for (const char* s : {"coffee", "hotel", "motel", "taxi", "google", "bank", "bar", "pizza", "store", "open"})
    lex.push_back(cs.encode(s));
  const auto h = similarity_histogram(lex, 10);
  double sum = 0;
  for (double v : h) sum += v;
  CHECK(sum == doctest::Approx(1.0));
  CHECK(h[9] == 0.0);  // distinct words never reach similarity 1

  Rng rng(27);
  const auto aug = augment_query_set(lex, EditOperatorRatios{}, cs, rng);
  const auto ha = similarity_histogram(aug, 10);
  double hi = 0, hi_aug = 0;
  for (int b = 5; b < 10; ++b) {
    hi += h[static_cast<std::size_t>(b)];
    hi_aug += ha[static_cast<std::size_t>(b)];
  }
  CHECK(hi_aug > hi);
}

TEST_CASE("PHOC: dimension anchors and hand-computed vectors") {
  CHECK(phoc_dimension(1019, default_phoc_levels()) == 14266);
  CHECK(phoc_dimension(36, default_phoc_levels()) == 504);
  const Charset abc({"a", "b", "c"});
  const auto ab = phoc_encode(abc.encode("ab"), abc, {2});
  CHECK(ab.bits.transpose() == Eigen::RowVectorXd((Eigen::RowVectorXd(6) << 1, 0, 0, 0, 1, 0).finished()));
  // "abc": b spans [1/3, 2/3) and has exactly half of its span in each region.
  const auto abc2 = phoc_encode(abc.encode("abc"), abc, {2});
  CHECK(abc2.bits.transpose() == Eigen::RowVectorXd((Eigen::RowVectorXd(6) << 1, 1, 0, 0, 1, 1).finished()));
  // A single character spans [0,1): each half holds exactly half of it, no third does.
  const auto single = phoc_encode(abc.encode("c"), abc, {2, 3});
  CHECK(single.bits.sum() == 2.0);
  CHECK(single.bits(2) == 1.0);
  CHECK(single.bits(5) == 1.0);
  const auto cab = phoc_encode(abc.encode("cab"), abc, {3});
  CHECK(cab.bits.transpose() == Eigen::RowVectorXd((Eigen::RowVectorXd(9) << 0, 0, 1, 1, 0, 0, 0, 1, 0).finished()));
}

TEST_CASE("PHOC ranking") {
  const Charset cs = Charset::latin_lower_digits();
  const auto levels = default_phoc_levels();
  const Word q = cs.encode("taxi");
  std::vector<Eigen::VectorXd> predicted{phoc_encode(cs.encode("bank"), cs, levels).bits,
                                         phoc_encode(q, cs, levels).bits * 0.9,
                                         phoc_encode(cs.encode("tax"), cs, levels).bits};
  const auto r = phoc_rank(q, cs, levels, predicted);
  CHECK(r.order.front() == 1);
  CHECK(r.image_score == doctest::Approx(1.0));
  CHECK(phoc_rank(q, cs, levels, {}).image_score == -1.0);
  CHECK_THROWS_AS(phoc_rank(q, cs, levels, {Eigen::VectorXd::Ones(3)}), InvalidInput);
  CHECK_THROWS_AS(phoc_rank(q, cs, levels, {Eigen::VectorXd::Zero(504)}), DegenerateInput);
}
