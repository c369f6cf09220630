#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mflow::image {

enum class ColorMap : std::uint8_t { sequential, diverging };

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// t in [0, 1]: pure blue to pure red, each byte rounded from 255 * weight.
Rgb sequential_color(double t);
// s in [-1, 1]: blue at -1, white at 0, red at 1.
Rgb diverging_color(double s);

// Row-major RGB bytes. `mask` uses 1 for non-fluid (drawn black); an empty
// mask means every pixel is fluid. The colour range comes from fluid pixels
// only: [min, max] for sequential, [-a, a] with a = max |value| for
// diverging. NonFiniteValues if a fluid value is NaN or infinite.
std::vector<std::uint8_t> render_heatmap(std::span<const float> values, int height, int width,
                                         std::span<const std::uint8_t> mask, ColorMap map);

// "P6\n{w} {h}\n255\n" followed by the RGB bytes.
std::string encode_ppm(std::span<const std::uint8_t> rgb, int height, int width);
void write_ppm(const std::filesystem::path& path, std::span<const std::uint8_t> rgb, int height, int width);

}  // namespace mflow::image
