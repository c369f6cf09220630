#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace mflow::geometry {

inline constexpr int kCanvasHeight = 128;
inline constexpr int kCanvasWidth = 256;
inline constexpr int kCurveVertices = 4096;
inline constexpr double kMinRadiusFraction = 0.15;

// Parameters of the fractal radius function. Lengths are in pixels.
struct WMParams {
  double base_radius = 40.0;
  double amplitude = 0.0;
  double fractal_dim = 1.5;   // D, strictly inside (1, 2)
  double spectral_exp = 1.5;  // gamma > 1
  int n_terms = 8;
  double scale_const = 1.0;   // A > 0

  // Throws InvalidParams when an invariant is violated.
  void validate() const;
  friend bool operator==(const WMParams&, const WMParams&) = default;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct ClosedCurve {
  std::vector<Point> vertices;
};

// Rough-walled straight channel. Column j has its wall heights sampled at
// the pixel-center abscissa x = j + 0.5; fluid lies strictly between them.
struct ChannelProfile {
  std::vector<double> lower;
  std::vector<double> upper;
  double half_height = 0.0;

  int length() const { return static_cast<int>(lower.size()); }
};

// Binary domain image: 0 = fluid, 1 = non-fluid (wall or exterior).
class RasterMask {
 public:
  RasterMask() = default;
  RasterMask(int height, int width, std::uint8_t fill = 1);
  RasterMask(int height, int width, std::vector<std::uint8_t> cells);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return cells_.size(); }

  std::uint8_t at(int row, int col) const { return cells_[static_cast<std::size_t>(row) * width_ + col]; }
  std::uint8_t& at(int row, int col) { return cells_[static_cast<std::size_t>(row) * width_ + col]; }

  // Out-of-canvas positions count as solid.
  bool fluid(int row, int col) const {
    return row >= 0 && row < height_ && col >= 0 && col < width_ && at(row, col) == 0;
  }

  std::size_t fluid_count() const;
  std::span<const std::uint8_t> cells() const { return cells_; }

  friend bool operator==(const RasterMask&, const RasterMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> cells_;
};

// Uniform sampling intervals for sample_params.
struct ParamRanges {
  double dim_lo = 1.2, dim_hi = 1.8;
  double gamma_lo = 1.3, gamma_hi = 2.5;
  int terms_lo = 4, terms_hi = 12;
  double amp_ratio_lo = 0.05, amp_ratio_hi = 0.25;
  double radius_lo = 28.0, radius_hi = 44.0;
  double scale_const = 1.0;
  // Largest admissible radius so the curve fits the 128-row canvas.
  double max_radius = 60.0;
};

// Integer frequency of harmonic n: max(1, round(gamma^n)).
long harmonic_frequency(double gamma, int n);

// A^(D-1) * sum_{n<N} gamma^{-(2-D) n} cos(2 pi k_n phi), period 1 in phi.
double wm_series(double phi, const WMParams& params);

// base_radius + amplitude * wm_series(t / 2pi). Throws DegenerateRadius when
// the radius drops below 0.15 * base_radius.
double radius_at(const WMParams& params, double t);

// Smallest N with gamma^N >= width / 2, capped at 32.
int default_term_count(double gamma, int width);

ClosedCurve sample_curve(const WMParams& params, int m_vertices, Point center);

// Walls y = c -/+ (h + amplitude * series) with the bottom wall phase-shifted
// by half a period. Throws DegenerateRadius for gaps narrower than
// max(0.3 h, 3 px) and OutOfCanvas when a wall leaves the canvas.
ChannelProfile sample_channel(const WMParams& params, int height, int width);

RasterMask rasterize(const ClosedCurve& curve, int height, int width);
RasterMask rasterize(const ChannelProfile& profile, int height, int width);

WMParams sample_params(std::uint64_t seed, const ParamRanges& ranges = {});

// True when the fluid cells form exactly one 4-connected component.
bool fluid_connected(const RasterMask& mask);

// Debug export: binary PGM, fluid = 0, non-fluid = 255.
void write_pgm(const RasterMask& mask, const std::filesystem::path& path);

}  // namespace mflow::geometry
