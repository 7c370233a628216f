#pragma once

// Desk-scale synthetic scene-text generator: procedural backgrounds with
// horizontal words rasterized from the embedded bitmap font.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "textret/image.hpp"
#include "textret/similarity.hpp"
#include "textret/word_augment.hpp"

namespace textret {

struct TextInstance {
  Box box;
  std::string text;
};

struct SynthConfig {
  int height = 128;
  int width = 192;
  int min_words = 1;
  int max_words = 5;
  std::vector<int> scales{2, 3};
  double min_contrast = 0.4;
  double max_contrast = 0.85;
  double noise_sigma = 0.02;
  double gradient_strength = 0.2;
  int margin = 3;
  int placement_attempts = 60;
};

/// Smooth background: base colour plus a linear ramp and one low-frequency wave per channel.
struct Background {
  std::array<float, 3> base{};
  std::array<float, 3> ramp_x{};
  std::array<float, 3> ramp_y{};
  std::array<float, 3> wave_amp{};
  float wave_fx = 0, wave_fy = 0, wave_phase = 0;

  float value(int y, int x, int c, int height, int width) const;
};

/// Everything needed to re-render one word exactly.
struct RenderedWord {
  std::string text;
  int x = 0;
  int y = 0;
  int scale = 1;
  std::array<float, 3> color{};
};

struct SceneSample {
  Image image;
  std::vector<TextInstance> instances;
  Background background;
  std::vector<RenderedWord> layout;
};

/// Renders 1..max_words distinct lexicon words (the first one forced when `first_word` is set).
/// Words that cannot be placed at any allowed scale without overlap are skipped.
SceneSample render_sample(const std::vector<std::string>& lexicon, const SynthConfig& config, Rng& rng,
                          const std::string* first_word = nullptr);

/// Noise-free re-render of a sample from its background and layout.
Image render_clean(const SceneSample& sample, int height, int width);

struct ManifestSample {
  std::string image;  // relative to the manifest directory
  std::vector<TextInstance> instances;
};

struct GalleryManifest {
  std::filesystem::path root;  // directory holding annotations.json
  std::string charset_file;
  std::string lexicon_file;
  std::vector<ManifestSample> samples;

  std::filesystem::path image_path(std::size_t i) const { return root / samples[i].image; }
};

/// Writes `n` PNGs plus annotations.json, charset.txt and lexicon.txt under out_dir.
/// Sample i always contains lexicon[i % |lexicon|] when it fits.
GalleryManifest generate_dataset(int n, const std::vector<std::string>& lexicon, const Charset& charset,
                                 const SynthConfig& config, const std::filesystem::path& out_dir,
                                 std::uint64_t seed);

void save_manifest(const GalleryManifest& manifest, const std::filesystem::path& path);
/// Loads and validates: image files exist and every transcript encodes in the charset.
GalleryManifest load_manifest(const std::filesystem::path& path, bool fold_case = false);
Charset manifest_charset(const GalleryManifest& manifest, bool fold_case = false);
std::vector<std::string> load_lexicon(const std::filesystem::path& path);
void save_lexicon(const std::vector<std::string>& lexicon, const std::filesystem::path& path);

/// Default 20-word desk lexicon.
std::vector<std::string> default_lexicon();

}  // namespace textret
