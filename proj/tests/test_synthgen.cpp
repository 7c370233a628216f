#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "textret/errors.hpp"
#include "textret/synthgen.hpp"

using namespace textret;
namespace fs = std::filesystem;

namespace {

double ncc(const Image& a, const Image& b) {
  const Eigen::ArrayXd x = a.pixels.cast<double>() - a.pixels.cast<double>().mean();
  const Eigen::ArrayXd y = b.pixels.cast<double>() - b.pixels.cast<double>().mean();
  return (x * y).sum() / std::sqrt((x * x).sum() * (y * y).sum());
}

Image crop(const Image& img, const Box& b) {
  const int x0 = static_cast<int>(b.x0), y0 = static_cast<int>(b.y0);
  Image out(static_cast<int>(b.y1) - y0, static_cast<int>(b.x1) - x0);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("render_sample is deterministic under a fixed seed") {
  SynthConfig cfg;
  cfg.min_words = cfg.max_words = 1;
  Rng a(5), b(5);
  const auto s1 = render_sample(default_lexicon(), cfg, a);
  const auto s2 = render_sample(default_lexicon(), cfg, b);
  REQUIRE(s1.instances.size() == 1);
  CHECK(s1.instances[0].box == s2.instances[0].box);
  CHECK(s1.instances[0].text == s2.instances[0].text);
  CHECK((s1.image.pixels == s2.image.pixels).all());
}

TEST_CASE("render_sample: zero words gives an empty scene") {
  SynthConfig cfg;
  cfg.min_words = cfg.max_words = 0;
  Rng rng(6);
  const auto s = render_sample(default_lexicon(), cfg, rng);
  CHECK(s.instances.empty());
  CHECK(s.image.height == cfg.height);
}

TEST_CASE("render_sample: preconditions") {
  SynthConfig cfg;
  Rng rng(7);
  CHECK_THROWS_AS(render_sample({}, cfg, rng), InvalidInput);
  cfg.height = 32;
  CHECK_THROWS_AS(render_sample(default_lexicon(), cfg, rng), InvalidInput);
}

TEST_CASE("render_sample: words too long for the canvas are skipped, never clipped") {
  SynthConfig cfg;
  cfg.min_words = cfg.max_words = 1;
  cfg.width = 64;
  cfg.height = 64;
  Rng rng(8);
  const auto s = render_sample({std::string(40, 'w')}, cfg, rng);
  CHECK(s.instances.empty());
}

TEST_CASE("render_sample invariants over many seeds") {
  SynthConfig cfg;
  const auto lex = default_lexicon();
  const std::set<std::string> lexset(lex.begin(), lex.end());
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    Rng rng(seed);
    const auto s = render_sample(lex, cfg, rng);
    CHECK(s.instances.size() <= 5);
    for (std::size_t i = 0; i < s.instances.size(); ++i) {
      const auto& b = s.instances[i].box;
      CHECK(b.valid());
      CHECK(b.x0 >= 0);
      CHECK(b.y0 >= 0);
      CHECK(b.x1 <= cfg.width);
      CHECK(b.y1 <= cfg.height);
      CHECK(lexset.count(s.instances[i].text) == 1);
      for (std::size_t j = i + 1; j < s.instances.size(); ++j) CHECK(iou(b, s.instances[j].box) < 0.3);
    }
  }
}

TEST_CASE("rendered boxes are tight around the glyph ink") {
  SynthConfig cfg;
  cfg.min_words = cfg.max_words = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto s = render_sample(default_lexicon(), cfg, rng);
    REQUIRE(s.instances.size() == 1);
    const Image clean = render_clean(s, cfg.height, cfg.width);
    int x0 = cfg.width, y0 = cfg.height, x1 = -1, y1 = -1;
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x)
        for (int c = 0; c < 3; ++c)
          if (std::abs(clean.at(y, x, c) - s.background.value(y, x, c, cfg.height, cfg.width)) > 1e-4f) {
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x + 1);
            y1 = std::max(y1, y + 1);
          }
    const auto& b = s.instances[0].box;
    CHECK(std::abs(b.x0 - x0) <= 1);
    CHECK(std::abs(b.y0 - y0) <= 1);
    CHECK(std::abs(b.x1 - x1) <= 1);
    CHECK(std::abs(b.y1 - y1) <= 1);
  }
}

TEST_CASE("every box re-rendered from its parameters correlates with the crop") {
  SynthConfig cfg;
  for (std::uint64_t seed = 100; seed < 130; ++seed) {
    Rng rng(seed);
    const auto s = render_sample(default_lexicon(), cfg, rng);
    const Image clean = render_clean(s, cfg.height, cfg.width);
    for (const auto& inst : s.instances) CHECK(ncc(crop(s.image, inst.box), crop(clean, inst.box)) > 0.99);
  }
}

TEST_CASE("generate_dataset: files, round trip and coverage") {
  TempDir dir("textret_synth_test");
  const auto lex = default_lexicon();
  const Charset cs = Charset::latin_lower_digits();
  const auto m = generate_dataset(200, lex, cs, SynthConfig{}, dir.path, 3);
  REQUIRE(m.samples.size() == 200);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    CHECK(fs::exists(m.image_path(i)));
    for (const auto& t : m.samples[i].instances) seen.insert(t.text);
  }
  CHECK(seen.size() == lex.size());

  const fs::path ann = dir.path / "annotations.json";
  const auto loaded = load_manifest(ann);
  CHECK(loaded.samples.size() == 200);
  CHECK(manifest_charset(loaded, true) == cs);
  CHECK(manifest_charset(loaded).symbols() == cs.symbols());
  const fs::path again = dir.path / "again.json";
  save_manifest(loaded, again);
  CHECK(slurp(ann) == slurp(again));
  CHECK(load_lexicon(dir.path / loaded.lexicon_file) == lex);

  const auto first = load_png(m.image_path(0));
  CHECK(first.height == SynthConfig{}.height);
}

TEST_CASE("generate_dataset is bit-identical under a fixed seed") {
  TempDir a("textret_synth_a"), b("textret_synth_b");
  const Charset cs = Charset::latin_lower_digits();
  const auto ma = generate_dataset(4, default_lexicon(), cs, SynthConfig{}, a.path, 9);
  const auto mb = generate_dataset(4, default_lexicon(), cs, SynthConfig{}, b.path, 9);
  CHECK(slurp(a.path / "annotations.json") == slurp(b.path / "annotations.json"));
  for (std::size_t i = 0; i < 4; ++i) CHECK(slurp(ma.image_path(i)) == slurp(mb.image_path(i)));
}

TEST_CASE("generate_dataset: single sample and error paths") {
  TempDir dir("textret_synth_one");
  const Charset cs = Charset::latin_lower_digits();
  CHECK(generate_dataset(1, default_lexicon(), cs, SynthConfig{}, dir.path, 1).samples.size() == 1);
  CHECK_THROWS_AS(generate_dataset(0, default_lexicon(), cs, SynthConfig{}, dir.path, 1), InvalidInput);
  const fs::path blocker = dir.path / "file";
  std::ofstream(blocker) << "x";
  CHECK_THROWS_AS(generate_dataset(1, default_lexicon(), cs, SynthConfig{}, blocker / "sub", 1), IoError);
  CHECK_THROWS_AS(load_manifest(dir.path / "missing.json"), IoError);
}

TEST_CASE("load_manifest rejects transcripts outside the charset") {
  TempDir dir("textret_synth_bad");
  const Charset cs = Charset::latin_lower_digits();
  auto m = generate_dataset(1, default_lexicon(), cs, SynthConfig{}, dir.path, 2);
  m.samples[0].instances.push_back({Box{1, 1, 5, 5}, "Caf\xc3\xa9"});
  save_manifest(m, dir.path / "annotations.json");
  CHECK_THROWS_AS(load_manifest(dir.path / "annotations.json"), InvalidInput);
}
