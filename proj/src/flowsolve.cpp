#include "mflow/flowsolve.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>

#include "binio.hpp"
#include "mflow/error.hpp"

namespace mflow::flow {

namespace {

[[noreturn]] void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

void require_fluid(const RasterMask& mask) {
  if (mask.fluid_count() == 0) fail(ErrorKind::EmptyFluid, "mask has no fluid pixel");
}

FlowField empty_field(const RasterMask& mask) {
  FlowField f;
  f.height = mask.height();
  f.width = mask.width();
  const auto n = mask.size();
  f.u.assign(n, 0.0);
  f.v.assign(n, 0.0);
  f.magnitude.assign(n, 0.0);
  f.pressure.assign(n, 0.0);
  return f;
}

// ---------------------------------------------------------------------------
// Duct mode: Jacobi-preconditioned conjugate gradients on the masked
// 5-point Laplacian. The wall sits on the pixel edge, so a solid neighbour
// contributes the ghost value -w_P.

struct DuctOperator {
  int h = 0;
  int w = 0;
  std::vector<int> cell;                     // compact index of each fluid pixel, -1 elsewhere
  std::vector<std::array<int, 4>> nbr;       // compact neighbour index or -1
  std::vector<double> diag;

  explicit DuctOperator(const RasterMask& mask) : h(mask.height()), w(mask.width()), cell(mask.size(), -1) {
    int n = 0;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        if (mask.fluid(r, c)) cell[static_cast<std::size_t>(r) * w + c] = n++;
    nbr.resize(static_cast<std::size_t>(n));
    diag.resize(static_cast<std::size_t>(n));
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        const int k = cell[static_cast<std::size_t>(r) * w + c];
        if (k < 0) continue;
        const int rr[4] = {r - 1, r + 1, r, r};
        const int cc[4] = {c, c, c - 1, c + 1};
        double d = 0.0;
        for (int q = 0; q < 4; ++q) {
          if (mask.fluid(rr[q], cc[q])) {
            nbr[static_cast<std::size_t>(k)][q] = cell[static_cast<std::size_t>(rr[q]) * w + cc[q]];
            d += 1.0;
          } else {
            nbr[static_cast<std::size_t>(k)][q] = -1;
            d += 2.0;
          }
        }
        diag[static_cast<std::size_t>(k)] = d;
      }
    }
  }

  std::size_t size() const { return diag.size(); }

  void apply(const std::vector<double>& x, std::vector<double>& y) const {
    for (std::size_t k = 0; k < diag.size(); ++k) {
      double s = diag[k] * x[k];
      for (int q = 0; q < 4; ++q) {
        const int m = nbr[k][q];
        if (m >= 0) s -= x[static_cast<std::size_t>(m)];
      }
      y[k] = s;
    }
  }
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Returns the final relative residual; iterations are reported through `iters`.
double conjugate_gradient(const DuctOperator& op, const std::vector<double>& b, std::vector<double>& x,
                          double tolerance, int max_iterations, int& iters) {
  const std::size_t n = op.size();
  std::vector<double> r(b), z(n), p(n), ap(n);
  op.apply(x, ap);
  for (std::size_t i = 0; i < n; ++i) r[i] -= ap[i];
  const double bnorm = std::sqrt(dot(b, b));
  if (bnorm == 0.0) {
    iters = 0;
    return 0.0;
  }
  for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / op.diag[i];
  p = z;
  double rz = dot(r, z);
  double rel = std::sqrt(dot(r, r)) / bnorm;
  iters = 0;
  while (rel > tolerance && iters < max_iterations) {
    op.apply(p, ap);
    const double alpha = rz / dot(p, ap);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / op.diag[i];
    const double rz_next = dot(r, z);
    const double beta = rz_next / rz;
    rz = rz_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    rel = std::sqrt(dot(r, r)) / bnorm;
    ++iters;
  }
  return rel;
}

// ---------------------------------------------------------------------------
// Channel mode: marker-and-cell discretisation.

enum class Face : std::uint8_t { wall, unknown, inlet, outlet };

// How a face-velocity stencil treats one neighbour position.
struct Neighbor {
  enum Kind : std::uint8_t { coupled, fixed, ghost } kind;
  int index = -1;      // face index when coupled
  double value = 0.0;  // prescribed value when fixed
  double factor = 0.0; // ghost = factor * centre value
};

class ChannelGrid {
 public:
  ChannelGrid(const RasterMask& mask, double inlet_velocity) : h_(mask.height()), w_(mask.width()), U_(inlet_velocity) {
    active_ = through_flow_cells(mask);
    ukind_.assign(static_cast<std::size_t>(h_) * (w_ + 1), Face::wall);
    vkind_.assign(static_cast<std::size_t>(h_ + 1) * w_, Face::wall);
    for (int i = 0; i < h_; ++i) {
      for (int j = 0; j <= w_; ++j) {
        Face k = Face::wall;
        if (j == 0) {
          if (active(i, 0)) k = Face::inlet;
        } else if (j == w_) {
          if (active(i, w_ - 1)) k = Face::outlet;
        } else if (active(i, j - 1) && active(i, j)) {
          k = Face::unknown;
        }
        ukind_[uidx(i, j)] = k;
      }
    }
    for (int i = 1; i < h_; ++i)
      for (int j = 0; j < w_; ++j)
        if (active(i - 1, j) && active(i, j)) vkind_[vidx(i, j)] = Face::unknown;

    urow_.assign(ukind_.size(), -1);
    vrow_.assign(vkind_.size(), -1);
    prow_.assign(static_cast<std::size_t>(h_) * w_, -1);
    for (std::size_t f = 0; f < ukind_.size(); ++f)
      if (ukind_[f] == Face::unknown) urow_[f] = nu_++;
    for (std::size_t f = 0; f < vkind_.size(); ++f)
      if (vkind_[f] == Face::unknown) vrow_[f] = nv_++;
    for (int i = 0; i < h_; ++i)
      for (int j = 0; j < w_; ++j)
        if (active(i, j)) prow_[cidx(i, j)] = np_++;
  }

  int h() const { return h_; }
  int w() const { return w_; }
  double inlet_velocity() const { return U_; }
  int unknown_u() const { return nu_; }
  int unknown_v() const { return nv_; }
  int cells() const { return np_; }

  std::size_t uidx(int i, int j) const { return static_cast<std::size_t>(i) * (w_ + 1) + j; }
  std::size_t vidx(int i, int j) const { return static_cast<std::size_t>(i) * w_ + j; }
  std::size_t cidx(int i, int j) const { return static_cast<std::size_t>(i) * w_ + j; }

  bool active(int i, int j) const { return i >= 0 && i < h_ && j >= 0 && j < w_ && active_[cidx(i, j)]; }
  Face ukind(int i, int j) const { return ukind_[uidx(i, j)]; }
  Face vkind(int i, int j) const { return vkind_[vidx(i, j)]; }
  int urow(std::size_t f) const { return urow_[f]; }
  int vrow(std::size_t f) const { return vrow_[f]; }
  int prow(int i, int j) const { return prow_[cidx(i, j)]; }

  // Neighbours of unknown u-face (i, j) in order west, east, north, south.
  std::array<Neighbor, 4> u_neighbors(int i, int j) const {
    std::array<Neighbor, 4> n{};
    const Face west = ukind(i, j - 1);
    if (west == Face::inlet) n[0] = {Neighbor::fixed, -1, U_, 0.0};
    else if (west == Face::unknown) n[0] = {Neighbor::coupled, static_cast<int>(uidx(i, j - 1)), 0.0, 0.0};
    else n[0] = {Neighbor::fixed, -1, 0.0, 0.0};
    const Face east = ukind(i, j + 1);
    if (east == Face::outlet) n[1] = {Neighbor::ghost, -1, 0.0, 1.0};  // zero gradient
    else if (east == Face::unknown) n[1] = {Neighbor::coupled, static_cast<int>(uidx(i, j + 1)), 0.0, 0.0};
    else n[1] = {Neighbor::fixed, -1, 0.0, 0.0};
    for (int q = 0; q < 2; ++q) {
      const int ii = q == 0 ? i - 1 : i + 1;
      if (ii >= 0 && ii < h_ && ukind(ii, j) == Face::unknown) {
        n[2 + q] = {Neighbor::coupled, static_cast<int>(uidx(ii, j)), 0.0, 0.0};
      } else {
        n[2 + q] = {Neighbor::ghost, -1, 0.0, -1.0};  // no-slip wall on the shared edge
      }
    }
    return n;
  }

  // Neighbours of unknown v-face (i, j) in order west, east, north, south.
  std::array<Neighbor, 4> v_neighbors(int i, int j) const {
    std::array<Neighbor, 4> n{};
    for (int q = 0; q < 2; ++q) {
      const int jj = q == 0 ? j - 1 : j + 1;
      if (jj == w_) {
        n[q] = {Neighbor::ghost, -1, 0.0, 1.0};  // outlet: zero gradient
      } else if (jj >= 0 && vkind(i, jj) == Face::unknown) {
        n[q] = {Neighbor::coupled, static_cast<int>(vidx(i, jj)), 0.0, 0.0};
      } else {
        n[q] = {Neighbor::ghost, -1, 0.0, -1.0};  // wall or inlet, v = 0 on the edge
      }
    }
    for (int q = 0; q < 2; ++q) {
      const int ii = q == 0 ? i - 1 : i + 1;
      if (ii > 0 && ii < h_ && vkind(ii, j) == Face::unknown) {
        n[2 + q] = {Neighbor::coupled, static_cast<int>(vidx(ii, j)), 0.0, 0.0};
      } else {
        n[2 + q] = {Neighbor::fixed, -1, 0.0, 0.0};
      }
    }
    return n;
  }

 private:
  // Cells of the 4-connected fluid components that touch both the inlet
  // and the outlet column; anything else cannot carry through-flow.
  std::vector<std::uint8_t> through_flow_cells(const RasterMask& mask) const {
    std::vector<int> label(mask.size(), -1);
    std::vector<std::uint8_t> keep;
    std::vector<int> stack;
    int next = 0;
    for (int i = 0; i < h_; ++i) {
      for (int j = 0; j < w_; ++j) {
        if (!mask.fluid(i, j) || label[cidx(i, j)] >= 0) continue;
        bool in = false;
        bool out = false;
        stack.push_back(static_cast<int>(cidx(i, j)));
        label[cidx(i, j)] = next;
        while (!stack.empty()) {
          const int id = stack.back();
          stack.pop_back();
          const int r = id / w_;
          const int c = id % w_;
          in |= c == 0;
          out |= c == w_ - 1;
          const int rr[4] = {r - 1, r + 1, r, r};
          const int cc[4] = {c, c, c - 1, c + 1};
          for (int q = 0; q < 4; ++q) {
            if (mask.fluid(rr[q], cc[q]) && label[cidx(rr[q], cc[q])] < 0) {
              label[cidx(rr[q], cc[q])] = next;
              stack.push_back(static_cast<int>(cidx(rr[q], cc[q])));
            }
          }
        }
        keep.push_back(in && out ? 1 : 0);
        ++next;
      }
    }
    std::vector<std::uint8_t> act(mask.size(), 0);
    bool any = false;
    for (std::size_t k = 0; k < act.size(); ++k) {
      if (label[k] >= 0 && keep[static_cast<std::size_t>(label[k])]) {
        act[k] = 1;
        any = true;
      }
    }
    if (!any) fail(ErrorKind::NoThroughPath, "no fluid path connects the inlet and outlet columns");
    return act;
  }

  int h_;
  int w_;
  double U_;
  std::vector<std::uint8_t> active_;
  std::vector<Face> ukind_;
  std::vector<Face> vkind_;
  std::vector<int> urow_;
  std::vector<int> vrow_;
  std::vector<int> prow_;
  int nu_ = 0;
  int nv_ = 0;
  int np_ = 0;
};

double neighbor_value(const Neighbor& n, const std::vector<double>& field, double centre) {
  switch (n.kind) {
    case Neighbor::coupled: return field[static_cast<std::size_t>(n.index)];
    case Neighbor::fixed: return n.value;
    case Neighbor::ghost: return n.factor * centre;
  }
  return 0.0;
}

// Stencil sums in pixel units (multiply by 1/dx or 1/dx^2 outside).
struct StencilTerms {
  double advection = 0.0;  // (u.grad) phi * dx
  double laplacian = 0.0;  // lap(phi) * dx^2
};

double upwind(double vel, double centre, double lower, double upper) {
  return vel > 0.0 ? vel * (centre - lower) : vel * (upper - centre);
}

StencilTerms u_terms(const ChannelGrid& g, int i, int j, const std::vector<double>& uf, const std::vector<double>& vf) {
  const auto n = g.u_neighbors(i, j);
  const double c = uf[g.uidx(i, j)];
  double vals[4];
  for (int q = 0; q < 4; ++q) vals[q] = neighbor_value(n[q], uf, c);
  const double vbar = 0.25 * (vf[g.vidx(i, j - 1)] + vf[g.vidx(i, j)] + vf[g.vidx(i + 1, j - 1)] + vf[g.vidx(i + 1, j)]);
  StencilTerms t;
  t.advection = upwind(c, c, vals[0], vals[1]) + upwind(vbar, c, vals[2], vals[3]);
  t.laplacian = vals[0] + vals[1] + vals[2] + vals[3] - 4.0 * c;
  return t;
}

StencilTerms v_terms(const ChannelGrid& g, int i, int j, const std::vector<double>& uf, const std::vector<double>& vf) {
  const auto n = g.v_neighbors(i, j);
  const double c = vf[g.vidx(i, j)];
  double vals[4];
  for (int q = 0; q < 4; ++q) vals[q] = neighbor_value(n[q], vf, c);
  const double ubar = 0.25 * (uf[g.uidx(i - 1, j)] + uf[g.uidx(i - 1, j + 1)] + uf[g.uidx(i, j)] + uf[g.uidx(i, j + 1)]);
  StencilTerms t;
  t.advection = upwind(ubar, c, vals[0], vals[1]) + upwind(c, c, vals[2], vals[3]);
  t.laplacian = vals[0] + vals[1] + vals[2] + vals[3] - 4.0 * c;
  return t;
}

using SpMat = Eigen::SparseMatrix<double>;
using Solver = Eigen::SimplicialLDLT<SpMat>;

// (1/dt) I - nu lap, assembled from the same neighbour classification the
// explicit stencils use.
template <typename NeighborFn, typename RowFn>
SpMat helmholtz_matrix(int rows, const std::vector<std::pair<int, int>>& faces, NeighborFn neighbors, RowFn row_of,
                       double inv_dt, double nu_dx2) {
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(faces.size() * 5);
  for (const auto& [i, j] : faces) {
    const auto n = neighbors(i, j);
    const int r = row_of(i, j);
    double diag = inv_dt;
    for (const auto& nb : n) {
      if (nb.kind == Neighbor::coupled) {
        diag += nu_dx2;
        trips.emplace_back(r, row_of(nb.index), -nu_dx2);
      } else if (nb.kind == Neighbor::fixed) {
        diag += nu_dx2;
      } else {
        diag += nu_dx2 * (1.0 - nb.factor);
      }
    }
    trips.emplace_back(r, r, diag);
  }
  SpMat m(rows, rows);
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

struct ChannelState {
  std::vector<double> uf;
  std::vector<double> vf;
  std::vector<double> p;  // per cell, row-major h x w
};

void cell_divergence(const ChannelGrid& g, const std::vector<double>& uf, const std::vector<double>& vf,
                     std::vector<double>& div) {
  div.assign(static_cast<std::size_t>(g.h()) * g.w(), 0.0);
  for (int i = 0; i < g.h(); ++i)
    for (int j = 0; j < g.w(); ++j)
      if (g.active(i, j))
        div[g.cidx(i, j)] = uf[g.uidx(i, j + 1)] - uf[g.uidx(i, j)] + vf[g.vidx(i + 1, j)] - vf[g.vidx(i, j)];
}

}  // namespace

void SolverConfig::validate() const {
  if (!(density > 0.0 && viscosity > 0.0 && inlet_velocity > 0.0 && pixel_pitch > 0.0)) {
    fail(ErrorKind::InvalidParams, "density, viscosity, inlet velocity and pixel pitch must be positive");
  }
  if (!(tolerance > 0.0 && tolerance <= 1e-2)) fail(ErrorKind::InvalidParams, "tolerance must lie in (0, 1e-2]");
  if (max_iterations < 1) fail(ErrorKind::InvalidParams, "max_iterations must be positive");
}

FlowField solve_duct(const RasterMask& mask, const SolverConfig& cfg) {
  cfg.validate();
  require_fluid(mask);
  const DuctOperator op(mask);
  const std::vector<double> b(op.size(), 1.0);
  std::vector<double> x(op.size(), 0.0);
  int iters = 0;
  const double rel = conjugate_gradient(op, b, x, cfg.tolerance, cfg.max_iterations, iters);
  if (!(rel <= cfg.tolerance)) {
    fail(ErrorKind::NotConverged, "duct CG relative residual " + std::to_string(rel) + " after " +
                                      std::to_string(iters) + " iterations");
  }
  // The problem is linear in the source, so the solution for G = 1 is
  // rescaled to the prescribed mean speed.
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  const double scale = cfg.inlet_velocity / mean;

  FlowField f = empty_field(mask);
  for (int r = 0; r < mask.height(); ++r) {
    for (int c = 0; c < mask.width(); ++c) {
      const int k = op.cell[f.index(r, c)];
      if (k >= 0) f.magnitude[f.index(r, c)] = x[static_cast<std::size_t>(k)] * scale;
    }
  }
  f.converged_residual = rel;
  f.iterations = iters;
  return f;
}

FlowField solve_channel(const RasterMask& mask, const SolverConfig& cfg) {
  cfg.validate();
  require_fluid(mask);
  const ChannelGrid g(mask, cfg.inlet_velocity);
  const int h = g.h();
  const int w = g.w();
  const double dx = cfg.pixel_pitch;
  const double rho = cfg.density;
  const double mu = cfg.viscosity;
  const double nu = mu / rho;
  const double U = cfg.inlet_velocity;

  std::vector<std::pair<int, int>> ufaces;
  std::vector<std::pair<int, int>> vfaces;
  for (int i = 0; i < h; ++i)
    for (int j = 1; j < w; ++j)
      if (g.ukind(i, j) == Face::unknown) ufaces.emplace_back(i, j);
  for (int i = 1; i < h; ++i)
    for (int j = 0; j < w; ++j)
      if (g.vkind(i, j) == Face::unknown) vfaces.emplace_back(i, j);

  // Expected peak speed from the narrowest cross-section, used to size the
  // pseudo-timestep.
  int inlet_cells = 0;
  int narrowest = h;
  for (int j = 0; j < w; ++j) {
    int count = 0;
    for (int i = 0; i < h; ++i) count += g.active(i, j) ? 1 : 0;
    if (j == 0) inlet_cells = count;
    narrowest = std::min(narrowest, std::max(count, 1));
  }
  double u_ref = 2.0 * U * std::max(1.0, static_cast<double>(inlet_cells) / narrowest);

  // Diffusion is implicit, so the step is bounded by a diffusion number of
  // kDiffusionNumber and an advective Courant number of kCourant; explicit
  // upwinding stays stable while c (c - 1) <= 2 d.
  constexpr double kDiffusionNumber = 10.0;
  constexpr double kCourant = 2.0;
  double dt = std::min(kDiffusionNumber * dx * dx / nu, kCourant * dx / u_ref);

  struct UFn {
    const ChannelGrid& g;
    auto operator()(int i, int j) const { return g.u_neighbors(i, j); }
  };
  struct VFn {
    const ChannelGrid& g;
    auto operator()(int i, int j) const { return g.v_neighbors(i, j); }
  };
  struct URow {
    const ChannelGrid& g;
    int operator()(int i, int j) const { return g.urow(g.uidx(i, j)); }
    int operator()(int f) const { return g.urow(static_cast<std::size_t>(f)); }
  };
  struct VRow {
    const ChannelGrid& g;
    int operator()(int i, int j) const { return g.vrow(g.vidx(i, j)); }
    int operator()(int f) const { return g.vrow(static_cast<std::size_t>(f)); }
  };

  // Pressure-correction operator: minus the cell Laplacian times dx^2 with
  // Neumann walls/inlet and phi = 0 on outlet faces.
  SpMat pmat(g.cells(), g.cells());
  {
    std::vector<Eigen::Triplet<double>> trips;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (!g.active(i, j)) continue;
        const int r = g.prow(i, j);
        double diag = 0.0;
        const auto couple = [&](int ii, int jj) {
          diag += 1.0;
          trips.emplace_back(r, g.prow(ii, jj), -1.0);
        };
        if (g.ukind(i, j) == Face::unknown) couple(i, j - 1);
        if (g.ukind(i, j + 1) == Face::unknown) couple(i, j + 1);
        if (g.ukind(i, j + 1) == Face::outlet) diag += 2.0;
        if (g.vkind(i, j) == Face::unknown) couple(i - 1, j);
        if (g.vkind(i + 1, j) == Face::unknown) couple(i + 1, j);
        trips.emplace_back(r, r, diag);
      }
    }
    pmat.setFromTriplets(trips.begin(), trips.end());
  }
  Solver psolve(pmat);
  if (psolve.info() != Eigen::Success) fail(ErrorKind::NotConverged, "pressure operator factorisation failed");

  Solver usolve;
  Solver vsolve;
  const auto factor = [&] {
    const double inv_dt = 1.0 / dt;
    const double nu_dx2 = nu / (dx * dx);
    usolve.compute(helmholtz_matrix(g.unknown_u(), ufaces, UFn{g}, URow{g}, inv_dt, nu_dx2));
    vsolve.compute(helmholtz_matrix(g.unknown_v(), vfaces, VFn{g}, VRow{g}, inv_dt, nu_dx2));
    if (usolve.info() != Eigen::Success || vsolve.info() != Eigen::Success) {
      fail(ErrorKind::NotConverged, "momentum operator factorisation failed");
    }
  };
  factor();

  ChannelState s;
  s.uf.assign(static_cast<std::size_t>(h) * (w + 1), 0.0);
  s.vf.assign(static_cast<std::size_t>(h + 1) * w, 0.0);
  s.p.assign(static_cast<std::size_t>(h) * w, 0.0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j <= w; ++j)
      if (g.ukind(i, j) != Face::wall) s.uf[g.uidx(i, j)] = U;

  Eigen::VectorXd rhs_u(g.unknown_u());
  Eigen::VectorXd rhs_v(g.unknown_v());
  Eigen::VectorXd rhs_p(g.cells());
  std::vector<double> ustar(s.uf);
  std::vector<double> vstar(s.vf);
  std::vector<double> div;
  std::vector<double> phi(static_cast<std::size_t>(h) * w, 0.0);

  double change = 0.0;
  double continuity = 0.0;
  int step = 0;
  for (; step < cfg.max_iterations; ++step) {
    const double inv_dt = 1.0 / dt;
    const double nu_dx2 = nu / (dx * dx);

    for (const auto& [i, j] : ufaces) {
      const auto n = g.u_neighbors(i, j);
      const auto t = u_terms(g, i, j, s.uf, s.vf);
      double fixed = 0.0;
      for (const auto& nb : n)
        if (nb.kind == Neighbor::fixed) fixed += nb.value;
      const double gradp = (s.p[g.cidx(i, j)] - s.p[g.cidx(i, j - 1)]) / dx;
      rhs_u[g.urow(g.uidx(i, j))] = s.uf[g.uidx(i, j)] * inv_dt - t.advection / dx - gradp / rho + nu_dx2 * fixed;
    }
    for (const auto& [i, j] : vfaces) {
      const auto t = v_terms(g, i, j, s.uf, s.vf);
      const double gradp = (s.p[g.cidx(i, j)] - s.p[g.cidx(i - 1, j)]) / dx;
      rhs_v[g.vrow(g.vidx(i, j))] = s.vf[g.vidx(i, j)] * inv_dt - t.advection / dx - gradp / rho;
    }
    const Eigen::VectorXd un = usolve.solve(rhs_u);
    const Eigen::VectorXd vn = vsolve.solve(rhs_v);

    ustar = s.uf;
    vstar = s.vf;
    for (const auto& [i, j] : ufaces) ustar[g.uidx(i, j)] = un[g.urow(g.uidx(i, j))];
    for (const auto& [i, j] : vfaces) vstar[g.vidx(i, j)] = vn[g.vrow(g.vidx(i, j))];
    for (int i = 0; i < h; ++i) {
      if (g.ukind(i, w) == Face::outlet) ustar[g.uidx(i, w)] = ustar[g.uidx(i, w - 1)];
    }

    cell_divergence(g, ustar, vstar, div);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        if (g.active(i, j)) rhs_p[g.prow(i, j)] = -(rho * dx / dt) * div[g.cidx(i, j)];
    const Eigen::VectorXd sol = psolve.solve(rhs_p);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        phi[g.cidx(i, j)] = g.active(i, j) ? sol[g.prow(i, j)] : 0.0;

    const double corr = dt / (rho * dx);
    change = 0.0;
    for (const auto& [i, j] : ufaces) {
      const auto f = g.uidx(i, j);
      const double next = ustar[f] - corr * (phi[g.cidx(i, j)] - phi[g.cidx(i, j - 1)]);
      change = std::max(change, std::abs(next - s.uf[f]));
      s.uf[f] = next;
    }
    for (int i = 0; i < h; ++i) {
      if (g.ukind(i, w) != Face::outlet) continue;
      const auto f = g.uidx(i, w);
      const double next = ustar[f] + corr * 2.0 * phi[g.cidx(i, w - 1)];
      change = std::max(change, std::abs(next - s.uf[f]));
      s.uf[f] = next;
    }
    for (const auto& [i, j] : vfaces) {
      const auto f = g.vidx(i, j);
      const double next = vstar[f] - corr * (phi[g.cidx(i, j)] - phi[g.cidx(i - 1, j)]);
      change = std::max(change, std::abs(next - s.vf[f]));
      s.vf[f] = next;
    }
    // Rotational pressure update: the -mu div(u*) term keeps the pressure
    // iteration contracting when the diffusion number is large.
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        if (g.active(i, j)) s.p[g.cidx(i, j)] += phi[g.cidx(i, j)] - mu * div[g.cidx(i, j)] / dx;

    cell_divergence(g, s.uf, s.vf, div);
    continuity = 0.0;
    double vmax = 0.0;
    for (double d : div) continuity = std::max(continuity, std::abs(d));
    for (double u : s.uf) vmax = std::max(vmax, std::abs(u));
    for (double v : s.vf) vmax = std::max(vmax, std::abs(v));
    if (!std::isfinite(change) || !std::isfinite(vmax)) {
      fail(ErrorKind::UnstableTimestep, "non-finite velocity at pseudo-step " + std::to_string(step));
    }
    change /= U;
    continuity /= U;
    if (change < cfg.tolerance && continuity < cfg.tolerance * 1e-2) break;

    const double courant = 2.0 * vmax * dt / dx;
    const double diffusion = nu * dt / (dx * dx);
    if (courant * (courant - 1.0) > diffusion) {
      dt *= 0.5;
      factor();
    }
  }
  if (step >= cfg.max_iterations) {
    fail(ErrorKind::NotConverged, "channel solve: velocity change " + std::to_string(change) + " after " +
                                      std::to_string(step) + " pseudo-steps");
  }

  FlowField f = empty_field(mask);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!g.active(i, j)) continue;
      const auto k = f.index(i, j);
      f.u[k] = 0.5 * (s.uf[g.uidx(i, j)] + s.uf[g.uidx(i, j + 1)]);
      f.v[k] = 0.5 * (s.vf[g.vidx(i, j)] + s.vf[g.vidx(i + 1, j)]);
      f.magnitude[k] = std::hypot(f.u[k], f.v[k]);
      f.pressure[k] = s.p[k];
    }
  }
  f.u_face = std::move(s.uf);
  f.v_face = std::move(s.vf);
  f.converged_residual = change;
  f.iterations = step + 1;
  return f;
}

FlowField solve(const RasterMask& mask, const SolverConfig& cfg) {
  return cfg.mode == Mode::duct ? solve_duct(mask, cfg) : solve_channel(mask, cfg);
}

ResidualNorms ResidualNorms::normalized(const SolverConfig& cfg) const {
  const double cs = cfg.pixel_pitch / cfg.inlet_velocity;
  const double ms = cfg.pixel_pitch * cfg.pixel_pitch / (cfg.viscosity * cfg.inlet_velocity);
  ResidualNorms n = *this;
  n.continuity_linf *= cs;
  n.continuity_l2 *= cs;
  n.momentum_x_linf *= ms;
  n.momentum_x_l2 *= ms;
  n.momentum_y_linf *= ms;
  n.momentum_y_l2 *= ms;
  return n;
}

ResidualNorms residual_report(const FlowField& field, const RasterMask& mask, const SolverConfig& cfg) {
  const int h = mask.height();
  const int w = mask.width();
  const auto n = mask.size();
  if (field.height != h || field.width != w || field.u.size() != n || field.v.size() != n ||
      field.pressure.size() != n) {
    fail(ErrorKind::ShapeMismatch, "field dimensions do not match the mask");
  }
  const double dx = cfg.pixel_pitch;
  const double rho = cfg.density;
  const double mu = cfg.viscosity;
  ResidualNorms out;
  double c2 = 0.0;
  double mx2 = 0.0;
  double my2 = 0.0;
  int cpoints = 0;
  int upoints = 0;
  int vpoints = 0;
  const auto interior = [&](int i, int j) {
    return mask.fluid(i, j) && mask.fluid(i - 1, j) && mask.fluid(i + 1, j) && mask.fluid(i, j - 1) &&
           mask.fluid(i, j + 1);
  };

  const bool staggered = field.u_face.size() == static_cast<std::size_t>(h) * (w + 1) &&
                         field.v_face.size() == static_cast<std::size_t>(h + 1) * w;
  if (staggered) {
    const ChannelGrid g(mask, cfg.inlet_velocity);
    const auto& uf = field.u_face;
    const auto& vf = field.v_face;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (!interior(i, j) || !g.active(i, j)) continue;
        const double d = (uf[g.uidx(i, j + 1)] - uf[g.uidx(i, j)] + vf[g.vidx(i + 1, j)] - vf[g.vidx(i, j)]) / dx;
        out.continuity_linf = std::max(out.continuity_linf, std::abs(d));
        c2 += d * d;
        ++cpoints;
      }
    }
    for (int i = 0; i < h; ++i) {
      for (int j = 1; j < w; ++j) {
        if (g.ukind(i, j) != Face::unknown || !interior(i, j - 1) || !interior(i, j)) continue;
        const auto t = u_terms(g, i, j, uf, vf);
        const double r = rho * t.advection / dx + (field.pressure[field.index(i, j)] - field.pressure[field.index(i, j - 1)]) / dx -
                         mu * t.laplacian / (dx * dx);
        out.momentum_x_linf = std::max(out.momentum_x_linf, std::abs(r));
        mx2 += r * r;
        ++upoints;
      }
    }
    for (int i = 1; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (g.vkind(i, j) != Face::unknown || !interior(i - 1, j) || !interior(i, j)) continue;
        const auto t = v_terms(g, i, j, uf, vf);
        const double r = rho * t.advection / dx + (field.pressure[field.index(i, j)] - field.pressure[field.index(i - 1, j)]) / dx -
                         mu * t.laplacian / (dx * dx);
        out.momentum_y_linf = std::max(out.momentum_y_linf, std::abs(r));
        my2 += r * r;
        ++vpoints;
      }
    }
  } else {
    const auto& u = field.u;
    const auto& v = field.v;
    const auto& p = field.pressure;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (!interior(i, j)) continue;
        const auto k = field.index(i, j);
        const auto e = field.index(i, j + 1), wv = field.index(i, j - 1);
        const auto s = field.index(i + 1, j), nn = field.index(i - 1, j);
        const double d = (u[e] - u[wv]) / (2 * dx) + (v[s] - v[nn]) / (2 * dx);
        const double lap_u = (u[e] + u[wv] + u[s] + u[nn] - 4 * u[k]) / (dx * dx);
        const double lap_v = (v[e] + v[wv] + v[s] + v[nn] - 4 * v[k]) / (dx * dx);
        const double rx = rho * (u[k] * (u[e] - u[wv]) + v[k] * (u[s] - u[nn])) / (2 * dx) + (p[e] - p[wv]) / (2 * dx) - mu * lap_u;
        const double ry = rho * (u[k] * (v[e] - v[wv]) + v[k] * (v[s] - v[nn])) / (2 * dx) + (p[s] - p[nn]) / (2 * dx) - mu * lap_v;
        out.continuity_linf = std::max(out.continuity_linf, std::abs(d));
        out.momentum_x_linf = std::max(out.momentum_x_linf, std::abs(rx));
        out.momentum_y_linf = std::max(out.momentum_y_linf, std::abs(ry));
        c2 += d * d;
        mx2 += rx * rx;
        my2 += ry * ry;
        ++cpoints;
      }
    }
    upoints = vpoints = cpoints;
  }
  out.continuity_l2 = cpoints ? std::sqrt(c2 / cpoints) : 0.0;
  out.momentum_x_l2 = upoints ? std::sqrt(mx2 / upoints) : 0.0;
  out.momentum_y_l2 = vpoints ? std::sqrt(my2 / vpoints) : 0.0;
  out.points = cpoints;
  return out;
}

FluxPair boundary_flux(const FlowField& field, const SolverConfig& cfg) {
  FluxPair flux;
  const int h = field.height;
  const int w = field.width;
  if (field.u_face.size() == static_cast<std::size_t>(h) * (w + 1)) {
    for (int i = 0; i < h; ++i) {
      flux.inlet += field.u_face[static_cast<std::size_t>(i) * (w + 1)];
      flux.outlet += field.u_face[static_cast<std::size_t>(i) * (w + 1) + w];
    }
  } else {
    for (int i = 0; i < h; ++i) {
      flux.inlet += field.u[field.index(i, 0)];
      flux.outlet += field.u[field.index(i, w - 1)];
    }
  }
  flux.inlet *= cfg.pixel_pitch;
  flux.outlet *= cfg.pixel_pitch;
  return flux;
}

std::vector<std::vector<float>> nondimensionalize(const FlowField& field, const RasterMask& mask,
                                                  const SolverConfig& cfg, Target target) {
  if (field.height != mask.height() || field.width != mask.width()) {
    fail(ErrorKind::ShapeMismatch, "field dimensions do not match the mask");
  }
  const auto scaled = [&](const std::vector<double>& src) {
    std::vector<float> out(mask.size(), 0.0f);
    for (std::size_t k = 0; k < out.size(); ++k) {
      if (mask.cells()[k] == 0) out[k] = static_cast<float>(src[k] / cfg.inlet_velocity);
    }
    return out;
  };
  std::vector<std::vector<float>> channels;
  if (target != Target::magnitude) {
    channels.push_back(scaled(field.u));
    channels.push_back(scaled(field.v));
  }
  if (target != Target::components) channels.push_back(scaled(field.magnitude));
  return channels;
}

void write_field_dump(const std::filesystem::path& path, std::span<const float> values, int height, int width,
                      ChannelId channel) {
  if (values.size() != static_cast<std::size_t>(height) * width) {
    fail(ErrorKind::ShapeMismatch, "dump values do not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoFailure, "cannot open " + path.string());
  binio::put_magic(out, "MFLD");
  binio::put_le(out, static_cast<std::uint32_t>(height));
  binio::put_le(out, static_cast<std::uint32_t>(width));
  binio::put_le(out, static_cast<std::uint32_t>(channel));
  binio::put_f32s(out, values);
  if (!out) fail(ErrorKind::IoFailure, "failed writing " + path.string());
}

std::vector<float> read_field_dump(const std::filesystem::path& path, int& height, int& width, ChannelId& channel) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoFailure, "cannot open " + path.string());
  std::uint32_t h = 0, w = 0, c = 0;
  if (!binio::check_magic(in, "MFLD") || !binio::get_le(in, h) || !binio::get_le(in, w) || !binio::get_le(in, c)) {
    fail(ErrorKind::IoFailure, "bad field dump header in " + path.string());
  }
  std::vector<float> values(static_cast<std::size_t>(h) * w);
  if (!binio::get_f32s(in, values)) fail(ErrorKind::IoFailure, "truncated field dump " + path.string());
  height = static_cast<int>(h);
  width = static_cast<int>(w);
  channel = static_cast<ChannelId>(c);
  return values;
}

}  // namespace mflow::flow
