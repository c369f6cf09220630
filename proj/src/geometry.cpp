#include "mflow/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include "mflow/error.hpp"
#include "mflow/rng.hpp"

namespace mflow::geometry {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorKind::InvalidParams, what); }

// Series with the amplitude prefactor and per-term weights precomputed; the
// curve sampler evaluates it thousands of times per shape.
struct SeriesTable {
  double prefactor = 1.0;
  std::vector<double> weights;
  std::vector<double> frequencies;

  explicit SeriesTable(const WMParams& p) {
    p.validate();
    prefactor = std::pow(p.scale_const, p.fractal_dim - 1.0);
    const double ratio = std::pow(p.spectral_exp, -(2.0 - p.fractal_dim));
    double w = 1.0;
    for (int n = 0; n < p.n_terms; ++n) {
      weights.push_back(w);
      frequencies.push_back(static_cast<double>(harmonic_frequency(p.spectral_exp, n)));
      w *= ratio;
    }
  }

  double operator()(double phi) const {
    // Reduce to [0, 1) first so large phi keeps full precision.
    const double reduced = phi - std::floor(phi);
    double sum = 0.0;
    for (std::size_t n = 0; n < weights.size(); ++n) {
      sum += weights[n] * std::cos(kTwoPi * frequencies[n] * reduced);
    }
    return prefactor * sum;
  }
};

}  // namespace

void WMParams::validate() const {
  if (!(fractal_dim > 1.0 && fractal_dim < 2.0)) invalid("fractal dimension must lie in (1, 2)");
  if (!(spectral_exp > 1.0)) invalid("spectral exponent must exceed 1");
  if (n_terms < 1) invalid("term count must be at least 1");
  if (!(scale_const > 0.0)) invalid("scale constant must be positive");
  if (!(base_radius > 0.0)) invalid("base radius must be positive");
  if (!(amplitude >= 0.0)) invalid("amplitude must be non-negative");
  if (!(amplitude < base_radius)) invalid("amplitude must be smaller than the base radius");
}

RasterMask::RasterMask(int height, int width, std::uint8_t fill)
    : height_(height), width_(width), cells_(static_cast<std::size_t>(height) * width, fill) {}

RasterMask::RasterMask(int height, int width, std::vector<std::uint8_t> cells)
    : height_(height), width_(width), cells_(std::move(cells)) {
  if (cells_.size() != static_cast<std::size_t>(height) * width) {
    throw Error(ErrorKind::ShapeMismatch, "mask cell count does not match its dimensions");
  }
  for (auto v : cells_) {
    if (v > 1) throw Error(ErrorKind::InvalidParams, "mask cells must be 0 or 1");
  }
}

std::size_t RasterMask::fluid_count() const {
  return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), std::uint8_t{0}));
}

long harmonic_frequency(double gamma, int n) {
  return std::max(1L, std::lround(std::pow(gamma, n)));
}

double wm_series(double phi, const WMParams& params) { return SeriesTable(params)(phi); }

double radius_at(const WMParams& params, double t) {
  const double r = params.base_radius + params.amplitude * wm_series(t / kTwoPi, params);
  if (r < kMinRadiusFraction * params.base_radius) {
    throw Error(ErrorKind::DegenerateRadius, "radius " + std::to_string(r) + " below 0.15 * base radius");
  }
  return r;
}

int default_term_count(double gamma, int width) {
  if (!(gamma > 1.0)) invalid("spectral exponent must exceed 1");
  const double target = width / 2.0;
  int n = 0;
  double g = 1.0;
  while (g < target && n < 32) {
    g *= gamma;
    ++n;
  }
  return std::max(n, 1);
}

ClosedCurve sample_curve(const WMParams& params, int m_vertices, Point center) {
  if (m_vertices < 64) invalid("a closed curve needs at least 64 vertices");
  const SeriesTable series(params);
  ClosedCurve curve;
  curve.vertices.reserve(static_cast<std::size_t>(m_vertices));
  for (int k = 0; k < m_vertices; ++k) {
    const double t = kTwoPi * k / m_vertices;
    const double r = params.base_radius + params.amplitude * series(static_cast<double>(k) / m_vertices);
    if (r < kMinRadiusFraction * params.base_radius) {
      throw Error(ErrorKind::DegenerateRadius, "curve radius below 0.15 * base radius");
    }
    curve.vertices.push_back({center.x + r * std::cos(t), center.y + r * std::sin(t)});
  }
  return curve;
}

ChannelProfile sample_channel(const WMParams& params, int height, int width) {
  const SeriesTable series(params);
  ChannelProfile profile;
  profile.half_height = params.base_radius;
  profile.lower.resize(static_cast<std::size_t>(width));
  profile.upper.resize(static_cast<std::size_t>(width));
  const double center = height / 2.0;
  const double min_gap = std::max(0.3 * params.base_radius, 3.0);
  for (int j = 0; j < width; ++j) {
    const double phi = (j + 0.5) / width;
    const double up = center + params.base_radius + params.amplitude * series(phi);
    const double lo = center - params.base_radius + params.amplitude * series(phi + 0.5);
    if (up - lo < min_gap) throw Error(ErrorKind::DegenerateRadius, "channel gap narrower than the minimum");
    if (lo < 1.0 || up > height - 1.0) throw Error(ErrorKind::OutOfCanvas, "channel wall leaves the canvas");
    profile.lower[static_cast<std::size_t>(j)] = lo;
    profile.upper[static_cast<std::size_t>(j)] = up;
  }
  return profile;
}

RasterMask rasterize(const ClosedCurve& curve, int height, int width) {
  const auto& v = curve.vertices;
  if (v.size() < 3) invalid("a closed curve needs at least 3 vertices");
  for (const auto& p : v) {
    if (!(p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height)) {
      throw Error(ErrorKind::OutOfCanvas, "curve vertex outside the canvas");
    }
  }

  RasterMask mask(height, width, 1);
  std::vector<double> crossings;
  for (int row = 0; row < height; ++row) {
    const double y = row + 0.5;
    crossings.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      // Orient every edge upward so the crossing abscissa does not depend on
      // traversal direction or on which vertex the list starts from.
      Point a = v[i];
      Point b = v[(i + 1) % v.size()];
      if (a.y > b.y) std::swap(a, b);
      if (a.y <= y && y < b.y) {
        crossings.push_back(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
      }
    }
    std::sort(crossings.begin(), crossings.end());
    for (std::size_t k = 0; k + 1 < crossings.size(); k += 2) {
      const double x0 = crossings[k];
      const double x1 = crossings[k + 1];
      const int first = std::max(0, static_cast<int>(std::floor(x0 - 0.5)));
      const int last = std::min(width - 1, static_cast<int>(std::ceil(x1 - 0.5)));
      for (int col = first; col <= last; ++col) {
        const double xc = col + 0.5;
        if (x0 < xc && xc <= x1) mask.at(row, col) = 0;
      }
    }
  }
  if (mask.fluid_count() == 0) throw Error(ErrorKind::EmptyFluid, "no pixel center inside the curve");
  return mask;
}

RasterMask rasterize(const ChannelProfile& profile, int height, int width) {
  if (profile.length() != width || profile.upper.size() != profile.lower.size()) {
    throw Error(ErrorKind::ShapeMismatch, "channel profile length differs from canvas width");
  }
  RasterMask mask(height, width, 1);
  for (int col = 0; col < width; ++col) {
    const double lo = profile.lower[static_cast<std::size_t>(col)];
    const double up = profile.upper[static_cast<std::size_t>(col)];
    if (lo < 0.0 || up > height) throw Error(ErrorKind::OutOfCanvas, "channel wall outside the canvas");
    for (int row = 0; row < height; ++row) {
      const double y = row + 0.5;
      if (lo < y && y < up) mask.at(row, col) = 0;
    }
  }
  if (mask.fluid_count() == 0) throw Error(ErrorKind::EmptyFluid, "channel has no fluid pixel");
  return mask;
}

WMParams sample_params(std::uint64_t seed, const ParamRanges& r) {
  if (!(r.dim_lo > 1.0 && r.dim_hi < 2.0 && r.dim_lo <= r.dim_hi)) invalid("fractal dimension range outside (1, 2)");
  if (!(r.gamma_lo > 1.0 && r.gamma_lo <= r.gamma_hi)) invalid("spectral exponent range must exceed 1");
  if (!(r.terms_lo >= 1 && r.terms_lo <= r.terms_hi)) invalid("term range must start at 1 or more");
  if (!(r.amp_ratio_lo >= 0.0 && r.amp_ratio_hi < 1.0 && r.amp_ratio_lo <= r.amp_ratio_hi)) invalid("amplitude ratio range must lie in [0, 1)");
  if (!(r.radius_lo > 0.0 && r.radius_lo <= r.radius_hi)) invalid("radius range must be positive");
  if (!(r.scale_const > 0.0)) invalid("scale constant must be positive");

  Rng rng(derive_seed(seed, 0x5eed));
  constexpr int kMaxRejections = 100;
  for (int attempt = 0; attempt <= kMaxRejections; ++attempt) {
    WMParams p;
    p.fractal_dim = rng.uniform(r.dim_lo, r.dim_hi);
    p.spectral_exp = rng.uniform(r.gamma_lo, r.gamma_hi);
    const auto drawn = static_cast<int>(rng.integer(r.terms_lo, r.terms_hi));
    p.n_terms = std::min(drawn, default_term_count(p.spectral_exp, kCanvasWidth));
    p.base_radius = rng.uniform(r.radius_lo, r.radius_hi);
    p.amplitude = rng.uniform(r.amp_ratio_lo, r.amp_ratio_hi) * p.base_radius;
    p.scale_const = r.scale_const;

    const SeriesTable series(p);
    double lo = p.base_radius;
    double hi = p.base_radius;
    for (int k = 0; k < kCurveVertices; ++k) {
      const double radius = p.base_radius + p.amplitude * series(static_cast<double>(k) / kCurveVertices);
      lo = std::min(lo, radius);
      hi = std::max(hi, radius);
    }
    if (lo >= kMinRadiusFraction * p.base_radius && hi <= r.max_radius) return p;
  }
  throw Error(ErrorKind::ExhaustedRetries, "no valid fractal parameters after 100 rejections");
}

bool fluid_connected(const RasterMask& mask) {
  const int h = mask.height();
  const int w = mask.width();
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<int> stack;
  int components = 0;
  for (int start = 0; start < h * w; ++start) {
    if (mask.cells()[static_cast<std::size_t>(start)] != 0 || seen[static_cast<std::size_t>(start)]) continue;
    if (++components > 1) return false;
    stack.push_back(start);
    seen[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      const int idx = stack.back();
      stack.pop_back();
      const int row = idx / w;
      const int col = idx % w;
      const int nbr[4][2] = {{row - 1, col}, {row + 1, col}, {row, col - 1}, {row, col + 1}};
      for (const auto& n : nbr) {
        if (!mask.fluid(n[0], n[1])) continue;
        const auto nidx = static_cast<std::size_t>(n[0]) * w + n[1];
        if (!seen[nidx]) {
          seen[nidx] = 1;
          stack.push_back(static_cast<int>(nidx));
        }
      }
    }
  }
  return components == 1;
}

void write_pgm(const RasterMask& mask, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  out << "P5\n" << mask.width() << ' ' << mask.height() << "\n255\n";
  for (auto c : mask.cells()) out.put(static_cast<char>(c ? 255 : 0));
  if (!out) throw Error(ErrorKind::IoFailure, "failed writing " + path.string());
}

}  // namespace mflow::geometry
