#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "textret/model.hpp"
#include "textret/training.hpp"

using namespace textret;
using textret::testing::random_tensor;

namespace {

ModelConfig micro_config(int charset_size) {
  ModelConfig c = ModelConfig::desk(charset_size);
  c.C = 4;
  c.T = 3;
  c.h_roi = 4;
  c.backbone_width = 4;
  c.gn_groups = 2;
  return c;
}

Image noise_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Image img(h, w);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels[i] = u(rng);
  return img;
}

}  // namespace

TEST_CASE("model config anchors and validation") {
  const auto full = ModelConfig::full(36);
  CHECK(full.T * full.C == 1920);
  CHECK(full.feature_dim() == 1920);
  CHECK_NOTHROW(full.validate());
  CHECK_NOTHROW(ModelConfig::desk(36).validate());
  auto bad = ModelConfig::desk(36);
  bad.C = 7;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = ModelConfig::desk(36);
  bad.h_roi = 6;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = ModelConfig::desk(36);
  bad.T = 1;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  bad = ModelConfig::desk(36);
  bad.gn_groups = 5;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
}

TEST_CASE("embed_words: interpolation closed forms") {
  const Charset cs = Charset::latin_lower_digits();
  auto cfg = ModelConfig::desk(cs.size());
  cfg.T = 4;
  Model<double> m(cfg, 3);
  const auto& table = m.params().at("embed").value;
  const int width = cfg.fpn_channels();
  nn::Tape<double> tape(false);
  const auto out = m.embed_words(tape, {cs.encode("ab"), cs.encode("z"), cs.encode("abcd")}).value();
  REQUIRE(out.shape == nn::Shape{3, 4, width});
  const int a = *cs.index_of("a"), b = *cs.index_of("b"), z = *cs.index_of("z");
  const double wa[4] = {1, 2.0 / 3, 1.0 / 3, 0};
  for (int t = 0; t < 4; ++t)
    for (int k = 0; k < width; ++k) {
      const double ea = table.data[a * width + k], eb = table.data[b * width + k];
      CHECK(out.data[(0 * 4 + t) * width + k] == doctest::Approx(wa[t] * ea + (1 - wa[t]) * eb).epsilon(1e-12));
      CHECK(out.data[(1 * 4 + t) * width + k] == table.data[z * width + k]);
      const int c = *cs.index_of(std::string(1, "abcd"[t]));
      CHECK(out.data[(2 * 4 + t) * width + k] == doctest::Approx(table.data[c * width + k]).epsilon(1e-12));
    }
  std::vector<Word> too_long{cs.encode(std::string(33, 'a'))};
  CHECK_THROWS_AS(m.embed_words(tape, too_long), InvalidInput);
}

TEST_CASE("forward pass shapes, finiteness and the similarity shape contract") {
  const Charset cs = Charset::latin_lower_digits();
  const auto cfg = ModelConfig::desk(cs.size());
  Model<float> m(cfg, 4);
  const Image img = noise_image(96, 128, 1);
  nn::Tape<float> tape(false);
  const auto pyramid = m.backbone(tape, image_tensor<float>(img));
  REQUIRE(pyramid.size() == 2);
  CHECK(pyramid[0].shape() == nn::Shape{1, cfg.fpn_channels(), 24, 32});
  CHECK(pyramid[1].shape() == nn::Shape{1, cfg.fpn_channels(), 12, 16});
  const std::vector<Box> boxes{{4, 4, 60, 20}, {30, 40, 100, 70}, {0, 0, 128, 96}};
  const auto pooled = m.roi_features(pyramid, boxes);
  CHECK(pooled.shape() == nn::Shape{3, cfg.fpn_channels(), cfg.h_roi, cfg.T});
  const auto e = m.image_s2sm(tape, pooled);
  CHECK(e.shape() == nn::Shape{3, cfg.T, cfg.C});
  const std::vector<Word> q{cs.encode("bar"), cs.encode("taxi")};
  const std::vector<Word> qa{cs.encode("bar"), cs.encode("taxi"), cs.encode("baz"), cs.encode("tax")};
  const auto f = m.text_s2sm(tape, m.embed_words(tape, qa));
  CHECK(f.shape() == nn::Shape{4, cfg.T, cfg.C});
  const auto fq = m.text_s2sm(tape, m.embed_words(tape, q));
  const auto P = m.flatten_features(e), Qa = m.flatten_features(f), Q = m.flatten_features(fq);
  CHECK(P.shape() == nn::Shape{3, cfg.feature_dim()});
  CHECK(nn::cosine(Q, P).shape() == nn::Shape{2, 3});
  CHECK(nn::cosine(P, P).shape() == nn::Shape{3, 3});
  CHECK(nn::cosine(Qa, P).shape() == nn::Shape{4, 3});
  CHECK(nn::cosine(Qa, Qa).shape() == nn::Shape{4, 4});
  CHECK(nn::cosine(P, Q).shape() == nn::Shape{3, 2});
  const auto logits = m.ctc_logits(tape, e);
  CHECK(logits.shape() == nn::Shape{3, cfg.T, cs.size() + 1});
  CHECK(logits.value().data.allFinite());
  CHECK(Qa.value().data.allFinite());
}

TEST_CASE("empty proposal and query sets pass through") {
  const auto cfg = ModelConfig::desk(36);
  Model<float> m(cfg, 5);
  nn::Tape<float> tape(false);
  const auto pyramid = m.backbone(tape, image_tensor<float>(noise_image(64, 64, 2)));
  const auto pooled = m.roi_features(pyramid, {});
  CHECK(pooled.shape() == nn::Shape{0, cfg.fpn_channels(), cfg.h_roi, cfg.T});
  CHECK(m.image_s2sm(tape, pooled).shape() == nn::Shape{0, cfg.T, cfg.C});
  CHECK(m.text_s2sm(tape, m.embed_words(tape, {})).shape() == nn::Shape{0, cfg.T, cfg.C});
  CHECK_THROWS_AS(m.roi_features(pyramid, {Box{3, 3, 3, 10}}), InvalidInput);
  CHECK_THROWS_AS(m.detect(noise_image(48, 64, 3)), InvalidInput);
}

TEST_CASE("text_s2sm: zero input is finite and rows are batch independent") {
  const auto cfg = ModelConfig::desk(36);
  Model<double> m(cfg, 6);
  nn::Tape<double> tape(false);
  nn::Tensor<double> zero(nn::Shape{1, cfg.T, cfg.fpn_channels()});
  CHECK(m.text_s2sm(tape, tape.constant(zero)).value().data.allFinite());

  std::mt19937_64 rng(7);
  const auto x = random_tensor({2, cfg.T, cfg.fpn_channels()}, rng);
  nn::Tensor<double> doubled(nn::Shape{4, cfg.T, cfg.fpn_channels()});
  doubled.data << x.data, x.data;
  const auto a = m.text_s2sm(tape, tape.constant(x)).value();
  const auto b = m.text_s2sm(tape, tape.constant(doubled)).value();
  CHECK(b.shape == nn::Shape{4, cfg.T, cfg.C});
  const Eigen::Index half = a.numel();
  CHECK((b.data.head(half) - a.data).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((b.data.tail(half) - a.data).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("image_s2sm: output shape and input validation") {
  auto cfg = micro_config(5);
  Model<double> m(cfg, 8);
  std::mt19937_64 rng(9);
  auto x = random_tensor({2, cfg.fpn_channels(), cfg.h_roi, cfg.T}, rng);
  nn::Tape<double> tape(false);
  const auto out = m.image_s2sm(tape, tape.constant(x));
  CHECK(out.shape() == nn::Shape{2, cfg.T, cfg.C});
  CHECK_THROWS_AS(m.image_s2sm(tape, tape.constant(random_tensor({1, cfg.fpn_channels(), 2 * cfg.h_roi, cfg.T}, rng))),
                  InvalidInput);
}

TEST_CASE("forward pass is deterministic and fingerprinted") {
  const auto cfg = ModelConfig::desk(36);
  Model<float> a(cfg, 10), b(cfg, 10), c(cfg, 11);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.fingerprint() != c.fingerprint());
  const Image img = noise_image(64, 96, 4);
  const auto pa = a.detect(img), pb = b.detect(img);
  REQUIRE(pa.boxes.size() == pb.boxes.size());
  for (std::size_t i = 0; i < pa.boxes.size(); ++i) CHECK(pa.boxes[i] == pb.boxes[i]);
  CHECK(pa.boxes.size() <= static_cast<std::size_t>(cfg.max_proposals));
  for (std::size_t i = 1; i < pa.scores.size(); ++i) CHECK(pa.scores[i - 1] >= pa.scores[i]);
}

TEST_CASE("greedy decode") {
  Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(6, 3);
  // blank = 2; alignment a a - b - b
  const int path[6] = {0, 0, 2, 1, 2, 1};
  for (int t = 0; t < 6; ++t) logits(t, path[t]) = 5;
  CHECK(greedy_decode(logits, 2) == std::vector<int>{0, 1, 1});
  Eigen::MatrixXd ab = Eigen::MatrixXd::Zero(2, 3);
  ab(0, 0) = 1;
  ab(1, 1) = 1;
  CHECK(greedy_decode(ab, 2) == std::vector<int>{0, 1});
  CHECK(greedy_decode(Eigen::MatrixXd::Zero(3, 3).array() + Eigen::RowVector3d(0, 0, 1).replicate(3, 1).array(), 2)
            .empty());
}

TEST_CASE("micro-network: gradients of L_s match central differences for every parameter") {
  const Charset cs({"a", "b", "c"});
  const auto cfg = micro_config(cs.size());
  Model<double> m(cfg, 12);
  const Image img = noise_image(64, 64, 5);
  const std::vector<Box> boxes{{6, 8, 40, 24}, {20, 30, 60, 50}};
  const std::vector<Word> transcripts{cs.encode("ab"), cs.encode("cab")};
  const std::vector<Word> augmented{cs.encode("ab"), cs.encode("cab"), cs.encode("abb"), cs.encode("ca")};
  const auto targets = similarity_targets<double>(transcripts, augmented);

  auto loss = [&](nn::Tape<double>& tape) {
    const auto pyramid = m.backbone(tape, image_tensor<double>(img));
    const auto P = m.flatten_features(m.image_s2sm(tape, m.roi_features(pyramid, boxes)));
    const auto Q = m.flatten_features(m.text_s2sm(tape, m.embed_words(tape, augmented)));
    SimilarityTerms<double> terms{nn::cosine(P, P), nn::cosine(Q, P), nn::cosine(Q, Q)};
    return loss_similarity(tape, terms, targets);
  };

  m.params().zero_grad();
  {
    nn::Tape<double> tape;
    tape.backward(loss(tape));
  }
  auto eval = [&] {
    nn::Tape<double> tape(false);
    return loss(tape).item();
  };
  const double h = 1e-6;
  double worst = 0;
  int checked = 0;
  for (auto& [name, prm] : m.params().items()) {
    const bool off_path = name.rfind("head.", 0) == 0 || name.rfind("ctc.", 0) == 0;
    if (off_path) {
      CHECK_MESSAGE(prm.grad.data.cwiseAbs().maxCoeff() == 0.0, name);
      continue;
    }
    Eigen::VectorXd numeric(prm.value.numel());
    for (Eigen::Index i = 0; i < prm.value.numel(); ++i) {
      const double keep = prm.value.data[i];
      prm.value.data[i] = keep + h;
      const double up = eval();
      prm.value.data[i] = keep - h;
      const double down = eval();
      prm.value.data[i] = keep;
      numeric[i] = (up - down) / (2 * h);
    }
    const double denom = std::max(prm.grad.data.norm() + numeric.norm(), 1e-12);
    const double err = (prm.grad.data - numeric).norm() / denom;
    CHECK_MESSAGE(err < 1e-4, name << " relative error " << err);
    worst = std::max(worst, err);
    ++checked;
  }
  CHECK(checked > 20);
  MESSAGE("worst relative error " << worst << " over " << checked << " tensors");
}
