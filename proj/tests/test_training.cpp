#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "textret/training.hpp"

using namespace textret;
using textret::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TinyData {
  fs::path dir;
  GalleryManifest manifest;
  explicit TinyData(const std::string& name, int n = 4) : dir(fs::temp_directory_path() / name) {
    fs::remove_all(dir);
    SynthConfig sc;
    sc.height = 64;
    sc.width = 96;
    sc.max_words = 3;
    manifest = generate_dataset(n, {"bar", "bus", "taxi", "open", "park"}, Charset::latin_lower_digits(), sc,
                                dir / "data", 77);
  }
  ~TinyData() { fs::remove_all(dir); }
};

TrainConfig tiny_config(int iterations) {
  TrainConfig c;
  apply_config_values(c, {{"channels", "8"}, {"backbone_width", "8"}, {"gn_groups", "4"}, {"steps", "6"},
                          {"h_roi", "4"}, {"warmup", "0"}, {"decay_steps", "none"}, {"log_every", "1"},
                          {"checkpoint_every", "0"}});
  c.iterations = iterations;
  return c;
}

nn::Var<double> const_var(nn::Tape<double>& tape, const Eigen::MatrixXd& m) {
  nn::Tensor<double> t(nn::Shape{static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data[r * m.cols() + c] = m(r, c);
  return tape.constant(std::move(t));
}

}  // namespace

TEST_CASE("build_queries: dedup, size contract and keep-only augmentation") {
  const Charset cs = Charset::latin_lower_digits();
  Rng rng(1);
  const auto one = build_queries({cs.encode("taxi"), cs.encode("taxi")}, EditOperatorRatios{}, cs, rng);
  CHECK(one.queries.size() == 1);
  CHECK(one.augmented.size() == 2);
  const auto keep = build_queries({cs.encode("bar"), cs.encode("bus")}, EditOperatorRatios::keep_only(), cs, rng);
  CHECK(keep.augmented == std::vector<Word>{cs.encode("bar"), cs.encode("bus"), cs.encode("bar"), cs.encode("bus")});
  std::vector<Word> twenty;
  for (const auto& w : default_lexicon()) twenty.push_back(cs.encode(w));
  const auto big = build_queries(twenty, EditOperatorRatios{}, cs, rng);
  CHECK(big.augmented.size() == 40);
  CHECK(std::equal(twenty.begin(), twenty.end(), big.augmented.begin()));
  CHECK_THROWS_AS(build_queries({}, EditOperatorRatios{}, cs, rng), EmptyBatch);
}

TEST_CASE("match_proposals: threshold and many-to-one") {
  const std::vector<Box> gt{{0, 0, 10, 10}, {50, 50, 60, 60}};
  const auto same = match_proposals({{0, 0, 10, 10}}, gt);
  REQUIRE(same.size() == 1);
  CHECK(same[0].iou == 1.0);
  CHECK(same[0].gt == 0);
  const Box weak{50, 50, 60, 53};
  CHECK(iou(weak, gt[1]) == doctest::Approx(0.3));
  CHECK(match_proposals({weak}, gt).empty());
  const Box g{0, 0, 10, 10};
  const Box p6{0, 0, 10, 6}, p8{0, 0, 10, 8};
  CHECK(iou(p6, g) == doctest::Approx(0.6));
  CHECK(iou(p8, g) == doctest::Approx(0.8));
  const auto both = match_proposals({p6, p8}, gt);
  REQUIRE(both.size() == 2);
  CHECK(both[0].gt == 0);
  CHECK(both[1].gt == 0);
}

TEST_CASE("loss_similarity closed forms") {
  nn::Tape<double> tape(false);
  Eigen::MatrixXd s(1, 1), shat(1, 1);
  s << 0.5;
  shat << 0.7;
  SimilarityTargets<double> tg{s, s, s};
  SimilarityTerms<double> exact{const_var(tape, s), const_var(tape, s), const_var(tape, s)};
  CHECK(loss_similarity(tape, exact, tg).item() == 0.0);
  SimilarityTerms<double> off{const_var(tape, shat), const_var(tape, shat), const_var(tape, shat)};
  CHECK(loss_similarity(tape, off, tg).item() == doctest::Approx(0.06).epsilon(1e-12));

  Eigen::MatrixXd t2(1, 2), p2(1, 2);
  t2 << 0.3, 0.9;
  p2 << 0.3, 0.5;
  SimilarityTargets<double> tg2{s, t2, s};
  SimilarityTerms<double> row{const_var(tape, s), const_var(tape, p2), const_var(tape, s)};
  CHECK(loss_similarity(tape, row, tg2).item() == doctest::Approx(0.08).epsilon(1e-12));
  CHECK(loss_similarity(tape, row, tg2, nn::RowReduce::Mean).item() == doctest::Approx(0.04).epsilon(1e-12));
}

TEST_CASE("loss_similarity without PP/QQ uses only the query-proposal term") {
  std::mt19937_64 rng(2);
  nn::Tape<double> tape(false);
  const Eigen::MatrixXd tqp = Eigen::MatrixXd::Random(4, 2);
  SimilarityTargets<double> tg{Eigen::MatrixXd::Zero(2, 2), tqp, Eigen::MatrixXd::Zero(4, 4)};
  SimilarityTerms<double> terms;
  terms.qp = tape.constant(random_tensor({4, 2}, rng));
  const std::size_t before = tape.size();
  const auto alone = loss_similarity(tape, terms, tg, nn::RowReduce::Max, false);
  CHECK(tape.size() == before + 1);
  CHECK(alone.item() == nn::smooth_l1_rows(terms.qp, nn::RowMatrix<double>(tqp)).item());
}

TEST_CASE("loss_similarity: non-negativity and joint row permutation invariance") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    nn::Tape<double> tape(false);
    const int k = 3, n2 = 4;
    auto pp = random_tensor({k, k}, rng), qp = random_tensor({n2, k}, rng), qq = random_tensor({n2, n2}, rng);
    SimilarityTargets<double> tg{Eigen::MatrixXd::Random(k, k), Eigen::MatrixXd::Random(n2, k),
                                 Eigen::MatrixXd::Random(n2, n2)};
    const double base = loss_similarity(tape, {tape.constant(pp), tape.constant(qp), tape.constant(qq)}, tg).item();
    CHECK(base >= 0.0);

    std::vector<int> perm(n2);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto qp2 = qp;
    Eigen::MatrixXd tqp2 = tg.qp;
    for (int r = 0; r < n2; ++r) {
      for (int c = 0; c < k; ++c) qp2.data[r * k + c] = qp.data[perm[r] * k + c];
      tqp2.row(r) = tg.qp.row(perm[r]);
    }
    SimilarityTargets<double> tg2{tg.pp, tqp2, tg.qq};
    const double permuted =
        loss_similarity(tape, {tape.constant(pp), tape.constant(qp2), tape.constant(qq)}, tg2).item();
    CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("loss_similarity gradient matches central differences on random 3x3 instances") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto pp = testing::make_param(random_tensor({3, 3}, rng));
    auto qp = testing::make_param(random_tensor({3, 3}, rng));
    auto qq = testing::make_param(random_tensor({3, 3}, rng));
    SimilarityTargets<double> tg{Eigen::MatrixXd::Random(3, 3), Eigen::MatrixXd::Random(3, 3),
                                 Eigen::MatrixXd::Random(3, 3)};
    const double err = testing::gradcheck({&pp, &qp, &qq}, [&](auto& tape, const auto& v) {
      return loss_similarity(tape, SimilarityTerms<double>{v[0], v[1], v[2]}, tg);
    });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("loss_total") {
  CHECK(loss_total(0, 0, 0) == 0.0);
  CHECK(loss_total(1, 2, 3) == 6.0);
  try {
    loss_total(1, std::nan(""), 3);
    FAIL("expected TrainingFailure");
  } catch (const TrainingFailure& e) {
    CHECK(e.term() == "L_s");
  }
  CHECK_THROWS_AS(loss_total(-1, 0, 0), TrainingFailure);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.iterations = 1000;
  CHECK(c.resolved_decay_steps() == std::vector<int>{600, 850});
  CHECK(c.learning_rate(50) == doctest::Approx(0.005));
  CHECK(c.learning_rate(100) == doctest::Approx(0.01));
  CHECK(c.learning_rate(600) == doctest::Approx(0.01));
  CHECK(c.learning_rate(601) == doctest::Approx(0.001));
  CHECK(c.learning_rate(851) == doctest::Approx(0.0001));
  apply_config_values(c, {{"decay_steps", "200,400"}, {"warmup", "0"}});
  CHECK(c.learning_rate(1) == doctest::Approx(0.01));
  CHECK(c.learning_rate(401) == doctest::Approx(0.0001));
  apply_config_values(c, {{"decay_steps", "none"}});
  CHECK(c.learning_rate(999) == doctest::Approx(0.01));
}

TEST_CASE("config keys: round trip, file parsing and rejection") {
  TrainConfig a;
  apply_config_values(a, {{"mode", "no_was"}, {"lr", "0.02"}, {"was_ratios", "1,2,3,4"}, {"seed", "9"},
                          {"row_reduce", "mean"}, {"channels", "16"}});
  TrainConfig b;
  apply_config_values(b, config_values(a));
  CHECK(config_values(a) == config_values(b));
  CHECK(b.mode == TrainMode::NoWAS);
  CHECK(b.model.C == 16);
  CHECK_THROWS_AS(apply_config_values(b, {{"learning_rate", "1"}}), InvalidInput);
  CHECK_THROWS_AS(apply_config_values(b, {{"lr", "fast"}}), InvalidInput);
  CHECK_THROWS_AS(apply_config_values(b, {{"mode", "bogus"}}), InvalidInput);
  for (const auto& [key, _] : config_values(a))
    CHECK_MESSAGE(std::any_of(config_docs().begin(), config_docs().end(), [&](const auto& d) { return d.first == key; }),
                  key);

  const fs::path file = fs::temp_directory_path() / "textret_cfg_test.cfg";
  std::ofstream(file) << "# comment\nlr = 0.5  # trailing\n\niterations=7\n";
  const auto kv = read_config_file(file);
  CHECK(kv.at("lr") == "0.5");
  CHECK(kv.at("iterations") == "7");
  std::ofstream(file) << "no equals here\n";
  CHECK_THROWS_AS(read_config_file(file), InvalidInput);
  fs::remove(file);

  CHECK(parse_mode("+was+ctc") == TrainMode::Joint);
  CHECK(parse_mode("+was") == TrainMode::NoCTC);
  CHECK(parse_mode("+ctc") == TrainMode::NoWAS);
  for (auto m : {TrainMode::Joint, TrainMode::Separated, TrainMode::PhocHead, TrainMode::NoPPQQ, TrainMode::NoWAS,
                 TrainMode::NoCTC, TrainMode::Baseline})
    CHECK(parse_mode(to_string(m)) == m);
}

TEST_CASE("train: one iteration without decay performs exactly one update") {
  TinyData data("textret_train_one");
  const auto cfg = tiny_config(1);
  const auto res = train(cfg, data.manifest, data.dir / "run");
  CHECK(res.updates == 1);
  REQUIRE(res.metrics.size() == 1);
  CHECK(res.metrics[0].iteration == 1);
  CHECK(fs::exists(res.checkpoint));
  CHECK(slurp(res.metrics_csv).rfind("iteration,L_d,L_s,L_c,L,lr", 0) == 0);

  ModelConfig mc = cfg.model;
  mc.charset_size = res.trained.charset.size();
  Model<float> fresh(mc, cfg.seed);
  CHECK(fresh.fingerprint() != res.trained.model->fingerprint());
  const auto loaded = load_checkpoint(res.checkpoint);
  CHECK(loaded.fingerprint() == res.trained.fingerprint());
}

TEST_CASE("train: fixed seed gives bit-identical metrics logs") {
  TinyData data("textret_train_det");
  const auto cfg = tiny_config(3);
  const auto a = train(cfg, data.manifest, data.dir / "a");
  const auto b = train(cfg, data.manifest, data.dir / "b");
  CHECK(slurp(a.metrics_csv) == slurp(b.metrics_csv));
  CHECK(a.trained.fingerprint() == b.trained.fingerprint());
}

TEST_CASE("train: logged similarity targets equal the edit-distance oracle") {
  TinyData data("textret_train_obs");
  int seen = 0;
  train(tiny_config(3), data.manifest, data.dir / "run", [&](const BatchRecord& r) {
    ++seen;
    CHECK(r.queries.augmented.size() == 2 * r.queries.queries.size());
    CHECK(std::equal(r.queries.queries.begin(), r.queries.queries.end(), r.queries.augmented.begin()));
    auto oracle = [](const std::vector<Word>& a, const std::vector<Word>& b) {
      Eigen::MatrixXd m(a.size(), b.size());
      for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j)
          m(i, j) = 1.0 - static_cast<double>(testing::dp_levenshtein(a[i].ids(), b[j].ids())) /
                              std::max(a[i].size(), b[j].size());
      return m;
    };
    CHECK(r.targets.pp == oracle(r.transcripts, r.transcripts));
    CHECK(r.targets.qp == oracle(r.queries.augmented, r.transcripts));
    CHECK(r.targets.qq == oracle(r.queries.augmented, r.queries.augmented));
  });
  CHECK(seen == 3);
}

TEST_CASE("train: ablation modes run and checkpoint") {
  TinyData data("textret_train_modes");
  for (const char* mode : {"separated", "phoc_head", "no_pp_qq", "no_was", "no_ctc", "baseline"}) {
    auto cfg = tiny_config(2);
    cfg.mode = parse_mode(mode);
    const auto res = train(cfg, data.manifest, data.dir / mode);
    const auto loaded = load_checkpoint(res.checkpoint);
    CHECK_MESSAGE(loaded.fingerprint() == res.trained.fingerprint(), mode);
    if (cfg.mode == TrainMode::Separated) {
      CHECK(loaded.separated());
      CHECK(res.updates == 4);
      CHECK(res.metrics.back().iteration == 4);
      CHECK(res.metrics.back().detection == 0.0);
    }
    if (!cfg.uses_ctc()) {
      for (const auto& row : res.metrics) CHECK(row.ctc == 0.0);
    }
    if (cfg.mode == TrainMode::PhocHead) CHECK(loaded.model->config().head == HeadKind::Phoc);
  }
}

TEST_CASE("train: invalid configs are rejected") {
  TinyData data("textret_train_bad", 1);
  auto cfg = tiny_config(1);
  cfg.lr = 0;
  CHECK_THROWS_AS(train(cfg, data.manifest, data.dir / "x"), InvalidInput);
  cfg = tiny_config(0);
  CHECK_THROWS_AS(train(cfg, data.manifest, data.dir / "x"), InvalidInput);
}
