#include "textret/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"

#include "textret/font.hpp"

namespace textret {

using json = nlohmann::ordered_json;

float Background::value(int y, int x, int c, int height, int width) const {
  const float u = (x + 0.5f) / static_cast<float>(width) - 0.5f;
  const float v = (y + 0.5f) / static_cast<float>(height) - 0.5f;
  const float wave = std::sin(2.0f * std::numbers::pi_v<float> * (wave_fx * u + wave_fy * v) + wave_phase);
  return std::clamp(base[static_cast<std::size_t>(c)] + ramp_x[static_cast<std::size_t>(c)] * u +
                        ramp_y[static_cast<std::size_t>(c)] * v + wave_amp[static_cast<std::size_t>(c)] * wave,
                    0.0f, 1.0f);
}

namespace {

Background random_background(const SynthConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const auto g = static_cast<float>(cfg.gradient_strength);
  std::uniform_real_distribution<float> ramp(-g, g);
  Background bg;
  const float grey = unit(rng);
  for (std::size_t c = 0; c < 3; ++c) {
    bg.base[c] = std::clamp(grey + 0.3f * (unit(rng) - 0.5f), 0.0f, 1.0f);
    bg.ramp_x[c] = ramp(rng);
    bg.ramp_y[c] = ramp(rng);
    bg.wave_amp[c] = 0.5f * g * unit(rng);
  }
  bg.wave_fx = 1.5f * unit(rng);
  bg.wave_fy = 1.5f * unit(rng);
  bg.wave_phase = 2.0f * std::numbers::pi_v<float> * unit(rng);
  return bg;
}

void paint_word(Image& img, const RenderedWord& w) {
  const auto mask = font::render_text(w.text, w.scale);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.lit(y, x))
        for (int c = 0; c < 3; ++c) img.at(w.y + y, w.x + x, c) = w.color[static_cast<std::size_t>(c)];
}

bool overlaps(const Box& a, const Box& b, int margin) {
  return a.x0 - margin < b.x1 && b.x0 - margin < a.x1 && a.y0 - margin < b.y1 && b.y0 - margin < a.y1;
}

}  // namespace

SceneSample render_sample(const std::vector<std::string>& lexicon, const SynthConfig& cfg, Rng& rng,
                          const std::string* first_word) {
  if (lexicon.empty()) throw InvalidInput("render_sample: empty lexicon");
  if (cfg.height < 64 || cfg.width < 64) throw InvalidInput("render_sample: canvas must be at least 64x64");
  if (cfg.scales.empty()) throw InvalidInput("render_sample: no text scales");
  if (cfg.min_words < 0 || cfg.max_words < cfg.min_words) throw InvalidInput("render_sample: bad word count range");

  SceneSample s;
  s.background = random_background(cfg, rng);
  s.image = Image(cfg.height, cfg.width);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x)
      for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = s.background.value(y, x, c, cfg.height, cfg.width);

  std::uniform_int_distribution<int> count_dist(cfg.min_words, cfg.max_words);
  const int wanted = count_dist(rng);
  std::vector<std::string> chosen;
  if (wanted > 0 && first_word) chosen.push_back(*first_word);
  {
    std::vector<std::string> pool;
    for (const auto& w : lexicon)
      if (std::find(chosen.begin(), chosen.end(), w) == chosen.end()) pool.push_back(w);
    std::shuffle(pool.begin(), pool.end(), rng);
    for (const auto& w : pool) {
      if (static_cast<int>(chosen.size()) >= wanted) break;
      chosen.push_back(w);
    }
  }

  std::uniform_int_distribution<std::size_t> scale_pick(0, cfg.scales.size() - 1);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  const int min_scale = *std::min_element(cfg.scales.begin(), cfg.scales.end());
  std::vector<Box> placed;
  for (const auto& text : chosen) {
    if (!font::can_render(text)) continue;
    if (font::text_width(text) * min_scale > cfg.width - 2 * cfg.margin) continue;
    for (int attempt = 0; attempt < cfg.placement_attempts; ++attempt) {
      const int scale = cfg.scales[scale_pick(rng)];
      const auto mask = font::render_text(text, scale);
      const int max_x = cfg.width - cfg.margin - mask.width;
      const int max_y = cfg.height - cfg.margin - mask.height;
      if (max_x < cfg.margin || max_y < cfg.margin) continue;
      std::uniform_int_distribution<int> px(cfg.margin, max_x), py(cfg.margin, max_y);
      const int ox = px(rng), oy = py(rng);
      const Box box{mask.tight.x0 + ox, mask.tight.y0 + oy, mask.tight.x1 + ox, mask.tight.y1 + oy};
      if (std::any_of(placed.begin(), placed.end(), [&](const Box& b) { return overlaps(box, b, cfg.margin); }))
        continue;
      RenderedWord w{text, ox, oy, scale, {}};
      float lum = 0;
      for (int c = 0; c < 3; ++c)
        lum += s.background.value(static_cast<int>((box.y0 + box.y1) / 2), static_cast<int>((box.x0 + box.x1) / 2), c,
                                  cfg.height, cfg.width) / 3.0f;
      const float contrast = static_cast<float>(cfg.min_contrast + (cfg.max_contrast - cfg.min_contrast) * unit(rng));
      const float target = lum > 0.5f ? lum - contrast : lum + contrast;
      for (std::size_t c = 0; c < 3; ++c) w.color[c] = std::clamp(target + 0.1f * (unit(rng) - 0.5f), 0.0f, 1.0f);
      paint_word(s.image, w);
      s.layout.push_back(w);
      s.instances.push_back({box, text});
      placed.push_back(box);
      break;
    }
  }

  if (cfg.noise_sigma > 0) {
    std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.noise_sigma));
    for (Eigen::Index i = 0; i < s.image.pixels.size(); ++i)
      s.image.pixels[i] = std::clamp(s.image.pixels[i] + noise(rng), 0.0f, 1.0f);
  }
  return s;
}

Image render_clean(const SceneSample& sample, int height, int width) {
  Image img(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = sample.background.value(y, x, c, height, width);
  for (const auto& w : sample.layout) paint_word(img, w);
  return img;
}

namespace {

json box_json(const Box& b) {
  json arr = json::array();
  for (double v : {b.x0, b.y0, b.x1, b.y1}) {
    if (v == std::floor(v) && std::abs(v) < 1e15) arr.push_back(static_cast<long long>(v));
    else arr.push_back(v);
  }
  return arr;
}

}  // namespace

void save_manifest(const GalleryManifest& m, const std::filesystem::path& path) {
  json doc;
  doc["charset_file"] = m.charset_file;
  if (!m.lexicon_file.empty()) doc["lexicon_file"] = m.lexicon_file;
  json samples = json::array();
  for (const auto& s : m.samples) {
    json inst = json::array();
    for (const auto& t : s.instances) inst.push_back({{"box", box_json(t.box)}, {"text", t.text}});
    samples.push_back({{"image", s.image}, {"instances", inst}});
  }
  doc["samples"] = samples;
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << doc.dump(2) << '\n';
    if (!out) throw IoError("failed writing manifest " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Charset manifest_charset(const GalleryManifest& m, bool fold_case) {
  return Charset::load(m.root / m.charset_file, fold_case);
}

GalleryManifest load_manifest(const std::filesystem::path& path, bool fold_case) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  GalleryManifest m;
  m.root = path.parent_path();
  try {
    m.charset_file = doc.at("charset_file").get<std::string>();
    if (doc.contains("lexicon_file")) m.lexicon_file = doc["lexicon_file"].get<std::string>();
    for (const auto& s : doc.at("samples")) {
      ManifestSample ms;
      ms.image = s.at("image").get<std::string>();
      for (const auto& t : s.at("instances")) {
        const auto& b = t.at("box");
        if (b.size() != 4) throw InvalidInput("box must have four coordinates");
        TextInstance ti{{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
                        t.at("text").get<std::string>()};
        if (!ti.box.valid()) throw InvalidInput("degenerate box in manifest");
        ms.instances.push_back(std::move(ti));
      }
      m.samples.push_back(std::move(ms));
    }
  } catch (const json::exception& e) {
    throw InvalidInput("manifest schema error in " + path.string() + ": " + e.what());
  }
  const Charset cs = manifest_charset(m, fold_case);
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    if (!std::filesystem::exists(m.image_path(i))) throw IoError("missing image " + m.image_path(i).string());
    for (const auto& t : m.samples[i].instances)
      if (!cs.contains(t.text)) throw InvalidInput("transcript '" + t.text + "' is not valid over the charset");
  }
  return m;
}

std::vector<std::string> load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read lexicon " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

void save_lexicon(const std::vector<std::string>& lexicon, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write lexicon " + path.string());
  for (const auto& w : lexicon) out << w << '\n';
}

GalleryManifest generate_dataset(int n, const std::vector<std::string>& lexicon, const Charset& charset,
                                 const SynthConfig& config, const std::filesystem::path& out_dir,
                                 std::uint64_t seed) {
  if (n < 1) throw InvalidInput("generate_dataset: n must be >= 1");
  if (lexicon.empty()) throw InvalidInput("generate_dataset: empty lexicon");
  for (const auto& w : lexicon)
    if (!charset.contains(w)) throw InvalidInput("lexicon word '" + w + "' is not valid over the charset");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  GalleryManifest m;
  m.root = out_dir;
  m.charset_file = "charset.txt";
  m.lexicon_file = "lexicon.txt";
  charset.save(out_dir / m.charset_file);
  save_lexicon(lexicon, out_dir / m.lexicon_file);
  for (int i = 0; i < n; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i)};
    Rng rng(seq);
    const auto& first = lexicon[static_cast<std::size_t>(i) % lexicon.size()];
    SceneSample s = render_sample(lexicon, config, rng, &first);
    char name[32];
    std::snprintf(name, sizeof name, "images/%06d.png", i);
    save_png(s.image, out_dir / name);
    m.samples.push_back({name, s.instances});
  }
  save_manifest(m, out_dir / "annotations.json");
  return m;
}

std::vector<std::string> default_lexicon() {
  return {"coffee", "hotel", "motel", "taxi", "google", "bank", "bar",  "pizza", "store", "open",
          "sale",   "cafe",  "park",  "exit", "shop",   "stop", "bus",  "road",  "city",  "book"};
}

}  // namespace textret
