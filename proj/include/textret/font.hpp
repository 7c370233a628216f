#pragma once

// Embedded 5x7 bitmap font (ASCII letters and digits).

#include <cstdint>
#include <string_view>
#include <vector>

#include "textret/geometry.hpp"

namespace textret::font {

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;
inline constexpr int kAdvance = 6;

/// Row-major 5x7 bitmap for a single code point, or nullptr if the font has no glyph.
const std::uint8_t* glyph(std::string_view code_point);
bool can_render(std::string_view text);

/// Binary raster of a word at integer `scale`; `tight` is the lit-pixel bounding box.
struct TextMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;
  Box tight;

  bool lit(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
};

TextMask render_text(std::string_view text, int scale);

/// Unscaled advance width of a word in pixels.
int text_width(std::string_view text);

}  // namespace textret::font
