#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "textret/retrieval.hpp"

using namespace textret;
namespace fs = std::filesystem;

namespace {

IndexEntry entry_with(const Eigen::MatrixXd& features, std::string name = "img") {
  IndexEntry e;
  e.image = std::move(name);
  e.features = features;
  for (Eigen::Index k = 0; k < features.rows(); ++k) {
    e.boxes.push_back(Box{double(k), 0, double(k) + 5, 5});
    e.det_scores.push_back(0.9);
  }
  return e;
}

/// Untrained joint model that keeps every decoded location as a proposal.
TrainedModel untrained(std::uint64_t seed) {
  const Charset cs = Charset::latin_lower_digits();
  ModelConfig mc = ModelConfig::desk(cs.size());
  mc.C = 8;
  mc.backbone_width = 8;
  mc.score_thresh = 0.0;
  mc.max_proposals = 20;
  TrainedModel tm;
  tm.model = std::make_shared<Model<float>>(mc, seed);
  tm.charset = cs;
  return tm;
}

struct Gallery {
  fs::path dir;
  GalleryManifest manifest;
  std::vector<std::string> lexicon{"bar", "bus", "taxi", "open"};
  Gallery(const std::string& name, int n) : dir(fs::temp_directory_path() / name) {
    fs::remove_all(dir);
    SynthConfig sc;
    sc.height = 64;
    sc.width = 96;
    sc.max_words = 2;
    manifest = generate_dataset(n, lexicon, Charset::latin_lower_digits(), sc, dir, 31);
  }
  ~Gallery() { fs::remove_all(dir); }
  std::vector<fs::path> paths() const {
    std::vector<fs::path> out;
    for (std::size_t i = 0; i < manifest.samples.size(); ++i) out.push_back(manifest.image_path(i));
    return out;
  }
};

}  // namespace

TEST_CASE("average_precision examples") {
  CHECK(average_precision({true, true, true}) == 1.0);
  CHECK(average_precision({true, false, true}) == doctest::Approx((1 + 2.0 / 3) / 2));
  CHECK(average_precision({false, false, true}) == doctest::Approx(1.0 / 3));
  CHECK_THROWS_AS(average_precision({false, false}), DegenerateInput);
  CHECK_THROWS_AS(average_precision({}), DegenerateInput);
}

TEST_CASE("average_precision equals the brute-force oracle on random rankings") {
  std::mt19937_64 rng(41);
  std::uniform_int_distribution<int> len(1, 40);
  std::bernoulli_distribution coin(0.3);
  int checked = 0;
  while (checked < 1000) {
    std::vector<bool> rel(static_cast<std::size_t>(len(rng)));
    for (std::size_t i = 0; i < rel.size(); ++i) rel[i] = coin(rng);
    if (std::none_of(rel.begin(), rel.end(), [](bool b) { return b; })) continue;
    REQUIRE(average_precision(rel) == testing::brute_force_ap(rel));
    ++checked;
  }
}

TEST_CASE("promoting a relevant item never lowers AP") {
  std::mt19937_64 rng(42);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<bool> rel(12);
    for (std::size_t i = 0; i < rel.size(); ++i) rel[i] = coin(rng);
    rel[11] = true;
    for (std::size_t k = 1; k < rel.size(); ++k) {
      if (!rel[k] || rel[k - 1]) continue;
      auto up = rel;
      std::swap(up[k], up[k - 1]);
      CHECK(average_precision(up) >= average_precision(rel));
    }
  }
}

TEST_CASE("mean_ap: arithmetic and skipped queries") {
  auto ranking = [](std::vector<int> order) {
    RetrievalResult r;
    for (int i : order) r.ranked.push_back(RankedImage{i, 0.0, std::nullopt});
    return r;
  };
  const auto one = mean_ap({"a"}, {ranking({0, 1})}, {{true, false}});
  CHECK(one.map == 1.0);
  const auto two = mean_ap({"a", "b", "c"}, {ranking({0, 1}), ranking({0, 1}), ranking({1, 0})},
                           {{true, false}, {false, true}, {false, false}});
  CHECK(two.map == doctest::Approx(0.75));
  CHECK(two.queries == std::vector<std::string>{"a", "b"});
  CHECK(two.skipped == std::vector<std::string>{"c"});
}

TEST_CASE("score_image: max rule and sentinel") {
  Eigen::MatrixXd f(3, 2);
  f << 1, 0, 0, 1, 1, 1;
  Eigen::RowVectorXd q(2);
  q << 0.2, 1;
  const auto s = score_image(q, entry_with(f));
  CHECK(s.proposal == 1);
  CHECK(s.score == doctest::Approx(1 / std::sqrt(1.04)));
  CHECK(s.box == Box{1, 0, 6, 5});
  const auto single = score_image(q, entry_with(f.topRows(1)));
  CHECK(single.score == doctest::Approx(0.2 / std::sqrt(1.04)));
  const auto empty = score_image(q, entry_with(Eigen::MatrixXd(0, 2)));
  CHECK(empty.score == -1.0);
  CHECK_FALSE(empty.box.has_value());
}

TEST_CASE("rank_gallery: ordering, ties by id and empty images last") {
  GalleryIndex index;
  index.charset = Charset::latin_lower_digits();
  index.feature_dim = 2;
  Eigen::MatrixXd a(1, 2), b(1, 2);
  a << 1, 0;
  b << 1, 1;
  index.entries = {entry_with(a, "a"), entry_with(Eigen::MatrixXd(0, 2), "none"), entry_with(b, "b"),
                   entry_with(b, "b-again")};
  Eigen::RowVectorXd q(2);
  q << 0, 1;
  const auto r = rank_gallery(index.charset.encode("x"), q, index);
  REQUIRE(r.ranked.size() == 4);
  CHECK(r.ranked[0].image == 2);
  CHECK(r.ranked[1].image == 3);
  CHECK(r.ranked[0].score == r.ranked[1].score);
  CHECK(r.ranked[2].image == 0);
  CHECK(r.ranked[3].image == 1);
  CHECK(r.ranked[3].score == -1.0);
  for (std::size_t i = 1; i < r.ranked.size(); ++i) CHECK(r.ranked[i - 1].score >= r.ranked[i].score);

  GalleryIndex single = index;
  single.entries.resize(1);
  CHECK(rank_gallery(index.charset.encode("x"), q, single).ranked.size() == 1);
}

TEST_CASE("detection_f_measure examples") {
  const std::vector<Box> gt{{0, 0, 10, 10}, {20, 0, 30, 10}};
  const auto same = detection_f_measure(gt, gt);
  CHECK(same.precision == 1.0);
  CHECK(same.recall == 1.0);
  CHECK(same.f == 1.0);
  const auto none = detection_f_measure({}, gt);
  CHECK(none.precision == 0.0);
  CHECK(none.recall == 0.0);
  CHECK(none.f == 0.0);
  const auto half = detection_f_measure({{0, 0, 10, 10}, {50, 50, 60, 60}}, {{0, 0, 10, 10}});
  CHECK(half.precision == 0.5);
  CHECK(half.recall == 1.0);
  CHECK(half.f == doctest::Approx(2.0 / 3));
  // One prediction overlapping two GT boxes matches only one of them.
  const auto greedy = detection_f_measure({{0, 0, 10, 10}}, {{0, 0, 10, 10}, {0, 0, 10, 9}});
  CHECK(greedy.matched == 1);
  const auto pooled = detection_f_measure(std::vector<std::vector<Box>>{{gt[0]}, {}}, {{gt[0]}, {gt[1]}});
  CHECK(pooled.precision == 1.0);
  CHECK(pooled.recall == 0.5);
  CHECK_THROWS_AS(detection_f_measure(gt, gt, 0.0), InvalidInput);
  CHECK_THROWS_AS(detection_f_measure(gt, gt, 1.0), InvalidInput);
}

TEST_CASE("index: build, round trip, unreadable images and zero-proposal sentinel") {
  Gallery g("textret_ret_index", 3);
  Retriever ret(untrained(1));
  auto paths = g.paths();
  paths.push_back(g.dir / "missing.png");
  const auto idx = index_gallery(ret, paths, {96});
  REQUIRE(idx.entries.size() == 4);
  CHECK(idx.model_fingerprint == ret.trained().fingerprint());
  for (int i = 0; i < 3; ++i) {
    CHECK(idx.entries[i].readable);
    CHECK(idx.entries[i].size() > 0);
    CHECK(idx.entries[i].features.rows() == idx.entries[i].size());
    CHECK(idx.entries[i].features.cols() == idx.feature_dim);
  }
  CHECK_FALSE(idx.entries[3].readable);
  CHECK_FALSE(idx.entries[3].warning.empty());
  CHECK(idx.entries[3].size() == 0);
  const auto r = rank_gallery("bar", ret, idx);
  CHECK(r.ranked.back().image == 3);
  CHECK(r.ranked.back().score == -1.0);
  CHECK_THROWS_AS(rank_gallery("caf\xc3\xa9", ret, idx), InvalidInput);

  const fs::path file = g.dir / "index.bin";
  save_index(file, idx);
  const auto back = load_index(file);
  CHECK(back.kind == idx.kind);
  CHECK(back.charset == idx.charset);
  CHECK(back.model_fingerprint == idx.model_fingerprint);
  CHECK(back.scales == idx.scales);
  REQUIRE(back.entries.size() == idx.entries.size());
  for (std::size_t i = 0; i < idx.entries.size(); ++i) {
    CHECK(back.entries[i].image == idx.entries[i].image);
    CHECK(back.entries[i].readable == idx.entries[i].readable);
    CHECK(back.entries[i].boxes == idx.entries[i].boxes);
    CHECK(back.entries[i].det_scores == idx.entries[i].det_scores);
    CHECK(back.entries[i].features == idx.entries[i].features);
  }
  std::ofstream(g.dir / "junk.bin") << "not an index";
  CHECK_THROWS_AS(load_index(g.dir / "junk.bin"), IoError);
  CHECK_THROWS_AS(index_gallery(ret, paths, {}), InvalidInput);
  CHECK_THROWS_AS(index_gallery(ret, std::vector<fs::path>{}, {96}), InvalidInput);
}

TEST_CASE("multi-scale pooling never lowers an image score") {
  Gallery g("textret_ret_scales", 3);
  Retriever ret(untrained(2));
  const auto small = index_gallery(ret, g.paths(), {64});
  const auto large = index_gallery(ret, g.paths(), {128});
  const auto both = index_gallery(ret, g.paths(), {64, 128});
  const Charset& cs = ret.charset();
  std::vector<Word> words;
  for (const auto& w : g.lexicon) words.push_back(cs.encode(w));
  const Eigen::MatrixXd q = ret.query_features(words);
  for (std::size_t i = 0; i < both.entries.size(); ++i) {
    CHECK(both.entries[i].size() == small.entries[i].size() + large.entries[i].size());
    for (Eigen::Index w = 0; w < q.rows(); ++w) {
      const double pooled = score_image(q.row(w), both.entries[i]).score;
      CHECK(pooled == doctest::Approx(std::max(score_image(q.row(w), small.entries[i]).score,
                                               score_image(q.row(w), large.entries[i]).score))
                          .epsilon(1e-12));
    }
    for (const auto& b : both.entries[i].boxes) {
      CHECK(b.x0 >= -1e-9);
      CHECK(b.x1 <= 96 + 1e-9);
      CHECK(b.y1 <= 64 + 1e-9);
    }
  }
}

TEST_CASE("untrained features rank like a random permutation") {
  Gallery g("textret_ret_random", 16);
  Retriever ret(untrained(3));
  const auto idx = index_gallery(ret, g.paths(), {96});
  const auto observed = evaluate_map(ret, idx, g.manifest, g.lexicon);
  const auto rel = relevance_matrix(observed.queries, g.manifest, ret.charset());

  std::mt19937_64 rng(43);
  std::vector<int> order(idx.entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> null_maps;
  for (int draw = 0; draw < 2000; ++draw) {
    double sum = 0;
    for (const auto& r : rel) {
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<bool> ranked;
      for (int i : order) ranked.push_back(r[static_cast<std::size_t>(i)]);
      sum += average_precision(ranked);
    }
    null_maps.push_back(sum / static_cast<double>(rel.size()));
  }
  std::sort(null_maps.begin(), null_maps.end());
  const double lo = null_maps[10], hi = null_maps[1989];
  MESSAGE("untrained mAP " << observed.map << ", null 99% interval [" << lo << ", " << hi << "]");
  CHECK(observed.map >= lo);
  CHECK(observed.map <= hi);
}

TEST_CASE("relevance is exact equality after folding") {
  Gallery g("textret_ret_rel", 4);
  const Charset cs = Charset::latin_lower_digits();
  const auto rel = relevance_matrix({"BAR", "ba"}, g.manifest, cs);
  for (std::size_t i = 0; i < g.manifest.samples.size(); ++i) {
    bool has = false;
    for (const auto& t : g.manifest.samples[i].instances) has |= t.text == "bar";
    CHECK(rel[0][i] == has);
    CHECK_FALSE(rel[1][i]);
  }
}

TEST_CASE("annotate: argmax box per word, nothing without proposals") {
  Retriever ret(untrained(4));
  const Charset& cs = ret.charset();
  const Eigen::MatrixXd q = ret.query_features({cs.encode("bar"), cs.encode("taxi")});
  IndexEntry one = entry_with(q.topRows(1));
  const auto a1 = annotate(one, {"bar"}, ret);
  REQUIRE(a1.size() == 1);
  CHECK(a1[0].box == one.boxes[0]);
  CHECK(a1[0].score == doctest::Approx(1.0));

  IndexEntry two = entry_with((Eigen::MatrixXd(2, q.cols()) << q.row(1), q.row(0)).finished());
  const auto a2 = annotate(two, {"bar", "taxi"}, ret);
  REQUIRE(a2.size() == 2);
  CHECK(a2[0].box == two.boxes[1]);
  CHECK(a2[1].box == two.boxes[0]);

  CHECK(annotate(entry_with(Eigen::MatrixXd(0, q.cols())), {"bar"}, ret).empty());
}
