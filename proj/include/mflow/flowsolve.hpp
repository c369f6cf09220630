#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mflow/geometry.hpp"

namespace mflow::flow {

using geometry::RasterMask;

enum class Mode : std::uint8_t { duct = 0, channel = 1 };

struct SolverConfig {
  Mode mode = Mode::duct;
  double density = 998.0;         // kg/m^3
  double viscosity = 1.0e-3;      // Pa s
  double inlet_velocity = 0.05;   // m/s, mean inflow (duct: mean axial speed)
  double pixel_pitch = 1.0e-6;    // m per pixel
  double tolerance = 1.0e-6;
  int max_iterations = 20000;

  void validate() const;
};

// Cell-centered fields on the mask grid, row-major h x w. In channel mode
// the staggered face velocities the solver works on are kept as well:
// u_face is h x (w+1) (vertical faces, column j is the west face of cell j),
// v_face is (h+1) x w (horizontal faces, row i is the top face of cell i).
struct FlowField {
  int height = 0;
  int width = 0;
  std::vector<double> u;
  std::vector<double> v;
  std::vector<double> magnitude;
  std::vector<double> pressure;
  std::vector<double> u_face;
  std::vector<double> v_face;
  double converged_residual = 0.0;
  int iterations = 0;

  std::size_t index(int row, int col) const { return static_cast<std::size_t>(row) * width + col; }
};

// Fully developed axial flow: -mu lap(w) = G on fluid pixels with w = 0 on
// the pixel edges shared with non-fluid pixels, rescaled to mean speed U.
FlowField solve_duct(const RasterMask& mask, const SolverConfig& cfg);

// Steady in-plane Navier-Stokes through an open channel (inlet column 0,
// outlet column w-1) by pseudo-time projection on a staggered grid.
FlowField solve_channel(const RasterMask& mask, const SolverConfig& cfg);

// Dispatches on cfg.mode.
FlowField solve(const RasterMask& mask, const SolverConfig& cfg);

// Residual norms in SI units: continuity in 1/s, momentum in N/m^3.
// Fields carrying staggered faces are checked with the solver's own stencils;
// plain cell-centered fields use central differences.
struct ResidualNorms {
  double continuity_linf = 0.0;
  double continuity_l2 = 0.0;
  double momentum_x_linf = 0.0;
  double momentum_x_l2 = 0.0;
  double momentum_y_linf = 0.0;
  double momentum_y_l2 = 0.0;
  int points = 0;

  // Continuity scaled by pitch / U, momentum by pitch^2 / (mu U).
  ResidualNorms normalized(const SolverConfig& cfg) const;
};

ResidualNorms residual_report(const FlowField& field, const RasterMask& mask, const SolverConfig& cfg);

// Volumetric flux per unit depth through the inlet and outlet faces (m^2/s).
struct FluxPair {
  double inlet = 0.0;
  double outlet = 0.0;
};
FluxPair boundary_flux(const FlowField& field, const SolverConfig& cfg);

enum class Target : std::uint8_t { components, magnitude, all };

// Channels divided by U with non-fluid pixels forced to 0. Order: (u, v) for
// components, (magnitude) for magnitude, (u, v, magnitude) for all.
std::vector<std::vector<float>> nondimensionalize(const FlowField& field, const RasterMask& mask,
                                                  const SolverConfig& cfg, Target target);

enum class ChannelId : std::uint32_t { u = 0, v = 1, magnitude = 2, pressure = 3, error = 4 };

// Field dump: "MFLD", u32 h, u32 w, u32 channel id, then h*w little-endian
// float32 values, row-major.
void write_field_dump(const std::filesystem::path& path, std::span<const float> values, int height, int width,
                      ChannelId channel);
std::vector<float> read_field_dump(const std::filesystem::path& path, int& height, int& width, ChannelId& channel);

}  // namespace mflow::flow
