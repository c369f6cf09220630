#include "mflow/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mflow/error.hpp"

namespace mflow::image {

namespace {

std::uint8_t byte(double x) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))); }

}  // namespace

Rgb sequential_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return {byte(t), 0, byte(1.0 - t)};
}

Rgb diverging_color(double s) {
  s = std::clamp(s, -1.0, 1.0);
  if (s < 0) return {byte(1.0 + s), byte(1.0 + s), 255};
  return {255, byte(1.0 - s), byte(1.0 - s)};
}

std::vector<std::uint8_t> render_heatmap(std::span<const float> values, int height, int width,
                                         std::span<const std::uint8_t> mask, ColorMap map) {
  const std::size_t n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  if (height < 1 || width < 1 || values.size() != n || (!mask.empty() && mask.size() != n)) {
    throw Error(ErrorKind::ShapeMismatch, "heatmap values do not match " + std::to_string(height) + "x" +
                                              std::to_string(width));
  }
  const auto fluid = [&](std::size_t k) { return mask.empty() || mask[k] == 0; };

  double lo = 0, hi = 0, amax = 0;
  bool any = false;
  for (std::size_t k = 0; k < n; ++k) {
    if (!fluid(k)) continue;
    const double v = values[k];
    if (!std::isfinite(v)) throw Error(ErrorKind::NonFiniteValues, "non-finite value at pixel " + std::to_string(k));
    lo = any ? std::min(lo, v) : v;
    hi = any ? std::max(hi, v) : v;
    amax = std::max(amax, std::abs(v));
    any = true;
  }

  std::vector<std::uint8_t> rgb(3 * n, 0);
  for (std::size_t k = 0; k < n; ++k) {
    if (!fluid(k)) continue;
    const double v = values[k];
    Rgb c;
    if (map == ColorMap::sequential) c = sequential_color(hi > lo ? (v - lo) / (hi - lo) : 0.0);
    else c = diverging_color(amax > 0 ? v / amax : 0.0);
    rgb[3 * k] = c.r;
    rgb[3 * k + 1] = c.g;
    rgb[3 * k + 2] = c.b;
  }
  return rgb;
}

std::string encode_ppm(std::span<const std::uint8_t> rgb, int height, int width) {
  if (rgb.size() != 3 * static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw Error(ErrorKind::ShapeMismatch, "RGB buffer does not match image size");
  }
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
  return out;
}

void write_ppm(const std::filesystem::path& path, std::span<const std::uint8_t> rgb, int height, int width) {
  const std::string bytes = encode_ppm(rgb, height, width);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoFailure, "write failed for " + path.string());
}

}  // namespace mflow::image
