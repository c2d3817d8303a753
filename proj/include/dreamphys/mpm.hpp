#pragma once

// MLS-MPM elastic simulator with fixed-corotated stress, quadratic B-spline
// transfers, and reverse mode through a single recorded substep.

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "dreamphys/config.hpp"
#include "dreamphys/error.hpp"
#include "dreamphys/math.hpp"
#include "dreamphys/parallel.hpp"
#include "dreamphys/scene.hpp"

namespace dreamphys::mpm {

inline constexpr double kMinDeterminant = 1e-8;

template <typename Real>
struct LameParams {
  Real mu;
  Real lambda;
};

template <typename Real>
LameParams<Real> lame_params(Real young, Real poisson) {
  if (!(young > Real(0))) raise(ErrorKind::Range, "Young's modulus must be > 0");
  if (!(poisson >= Real(0)) || poisson >= Real(0.5)) raise(ErrorKind::Range, "Poisson ratio must be in [0, 0.5)");
  return {young / (Real(2) * (Real(1) + poisson)),
          young * poisson / ((Real(1) + poisson) * (Real(1) - Real(2) * poisson))};
}

/// d(mu, lambda) / dE at fixed Poisson ratio.
template <typename Real>
LameParams<Real> lame_params_per_young(Real poisson) {
  return {Real(1) / (Real(2) * (Real(1) + poisson)), poisson / ((Real(1) + poisson) * (Real(1) - Real(2) * poisson))};
}

// ---------------------------------------------------------------------------
// Constitutive model

template <typename Real>
Mat3<Real> stress_from_rotation(const Mat3<Real>& F, const Mat3<Real>& R, Real J, Real mu, Real lambda) {
  Mat3<Real> tau = Real(2) * mu * (F - R) * F.transpose();
  tau.diagonal().array() += lambda * J * (J - Real(1));
  return tau;
}

/// Fixed-corotated Kirchhoff stress tau = P(F) F^T.
template <typename Real>
Mat3<Real> stress(const Mat3<Real>& F, Real mu, Real lambda) {
  const Real J = F.determinant();
  if (!(J > Real(kMinDeterminant))) raise(ErrorKind::DegenerateF, "det(F) <= 1e-8");
  return stress_from_rotation(F, polar_rotation(F), J, mu, lambda);
}

template <typename Real>
struct StressVjp {
  Mat3<Real> dF;
  Real dmu;
  Real dlambda;
};

/// Reverse mode of stress(): given dL/dtau returns dL/dF, dL/dmu, dL/dlambda.
template <typename Real>
StressVjp<Real> stress_vjp(const Mat3<Real>& F, Real mu, Real lambda, const Mat3<Real>& grad_tau,
                           Real min_singular_gap = Real(1e-6)) {
  const Real J = F.determinant();
  if (!(J > Real(kMinDeterminant))) raise(ErrorKind::DegenerateF, "det(F) <= 1e-8");
  const auto svd = rotation_svd(F);
  const Mat3<Real> R = svd.U * svd.V.transpose();
  const Mat3<Real> FmR = F - R;
  const Real tr = grad_tau.trace();

  StressVjp<Real> out;
  out.dmu = Real(2) * (grad_tau.array() * (FmR * F.transpose()).array()).sum();
  out.dlambda = tr * J * (J - Real(1));

  // tau = 2 mu (F - R) F^T + lambda J (J - 1) I
  Mat3<Real> dF = Real(2) * mu * (grad_tau * F + grad_tau.transpose() * FmR);
  const Mat3<Real> grad_R = Real(-2) * mu * grad_tau * F;
  dF += polar_rotation_vjp(svd, grad_R, min_singular_gap);
  dF += lambda * (Real(2) * J - Real(1)) * tr * cofactor(F);
  out.dF = dF;
  return out;
}

/// Fixed-corotated energy density, used by tests to cross-check stress().
template <typename Real>
Real fixed_corotated_energy(const Mat3<Real>& F, Real mu, Real lambda) {
  const Mat3<Real> R = polar_rotation(F);
  const Real J = F.determinant();
  return mu * (F - R).squaredNorm() + Real(0.5) * lambda * (J - Real(1)) * (J - Real(1));
}

// ---------------------------------------------------------------------------
// Grid and interpolation

template <typename Real>
struct Grid {
  int cells = 0;  // per axis; nodes per axis = cells + 1
  Real dx = Real(1);
  Real inv_dx = Real(1);
  Vec3<Real> origin = Vec3<Real>::Zero();
  std::vector<Real> mass;
  std::vector<Vec3<Real>> velocity;  // momentum during transfer, velocity after grid_update

  Grid() = default;
  Grid(int cells_per_axis, Real cell_size, const Vec3<Real>& grid_origin)
      : cells(cells_per_axis), dx(cell_size), inv_dx(Real(1) / cell_size), origin(grid_origin) {
    const std::size_t n = node_count();
    mass.assign(n, Real(0));
    velocity.assign(n, Vec3<Real>::Zero());
  }

  int nodes_per_axis() const { return cells + 1; }
  std::size_t node_count() const {
    const std::size_t n = static_cast<std::size_t>(nodes_per_axis());
    return n * n * n;
  }
  std::size_t index(int i, int j, int k) const {
    const std::size_t n = static_cast<std::size_t>(nodes_per_axis());
    return (static_cast<std::size_t>(i) * n + static_cast<std::size_t>(j)) * n + static_cast<std::size_t>(k);
  }
  Vec3<Real> node_position(int i, int j, int k) const {
    return origin + dx * Vec3<Real>(Real(i), Real(j), Real(k));
  }
  void clear() {
    std::fill(mass.begin(), mass.end(), Real(0));
    std::fill(velocity.begin(), velocity.end(), Vec3<Real>::Zero());
  }
};

/// Quadratic B-spline weights of one particle over its 3x3x3 node stencil.
template <typename Real>
struct Stencil {
  std::array<int, 3> base{};
  Real w[3][3]{};   // w[axis][offset]
  Real frac[3]{};   // particle position in cells relative to base, in [0.5, 1.5)

  Real weight(int a, int b, int c) const { return w[0][a] * w[1][b] * w[2][c]; }

  /// x_node - x_particle for stencil node (a, b, c).
  Vec3<Real> offset(int a, int b, int c, Real dx) const {
    return dx * Vec3<Real>(Real(a) - frac[0], Real(b) - frac[1], Real(c) - frac[2]);
  }
};

template <typename Real>
inline Stencil<Real> stencil_unchecked(const Vec3<Real>& xp, const Grid<Real>& grid) {
  Stencil<Real> s;
  for (int d = 0; d < 3; ++d) {
    const Real fx = (xp[d] - grid.origin[d]) * grid.inv_dx;
    const int base = static_cast<int>(std::floor(fx - Real(0.5)));
    const Real f = fx - Real(base);
    s.base[d] = base;
    s.frac[d] = f;
    s.w[d][0] = Real(0.5) * (Real(1.5) - f) * (Real(1.5) - f);
    s.w[d][1] = Real(0.75) - (f - Real(1)) * (f - Real(1));
    s.w[d][2] = Real(0.5) * (f - Real(0.5)) * (f - Real(0.5));
  }
  return s;
}

/// Throws OutOfGrid unless the particle is at least one cell from the boundary.
template <typename Real>
Stencil<Real> bspline_weights(const Vec3<Real>& xp, const Grid<Real>& grid) {
  for (int d = 0; d < 3; ++d) {
    const Real fx = (xp[d] - grid.origin[d]) * grid.inv_dx;
    if (!(fx >= Real(1) && fx <= Real(grid.cells - 1))) {
      raise(ErrorKind::OutOfGrid, "particle within one cell of the grid boundary");
    }
  }
  return stencil_unchecked(xp, grid);
}

// ---------------------------------------------------------------------------
// Particle state

template <typename Real>
struct ParticleState {
  std::vector<Vec3<Real>> x;
  std::vector<Vec3<Real>> v;
  std::vector<Mat3<Real>> C;
  std::vector<Mat3<Real>> F;
  std::vector<Real> mass;
  std::vector<Real> volume;   // initial volume V0
  std::vector<Real> young;
  std::vector<Real> poisson;
  std::vector<std::uint8_t> pinned;

  std::size_t size() const { return x.size(); }

  void resize(std::size_t n) {
    x.assign(n, Vec3<Real>::Zero());
    v.assign(n, Vec3<Real>::Zero());
    C.assign(n, Mat3<Real>::Zero());
    F.assign(n, Mat3<Real>::Identity());
    mass.assign(n, Real(0));
    volume.assign(n, Real(0));
    young.assign(n, Real(1e6));
    poisson.assign(n, Real(0.3));
    pinned.assign(n, 0);
  }

  template <typename Other>
  ParticleState<Other> cast() const {
    ParticleState<Other> o;
    o.resize(size());
    for (std::size_t p = 0; p < size(); ++p) {
      o.x[p] = x[p].template cast<Other>();
      o.v[p] = v[p].template cast<Other>();
      o.C[p] = C[p].template cast<Other>();
      o.F[p] = F[p].template cast<Other>();
      o.mass[p] = static_cast<Other>(mass[p]);
      o.volume[p] = static_cast<Other>(volume[p]);
      o.young[p] = static_cast<Other>(young[p]);
      o.poisson[p] = static_cast<Other>(poisson[p]);
      o.pinned[p] = pinned[p];
    }
    return o;
  }
};

template <typename Real>
bool bitwise_equal(const ParticleState<Real>& a, const ParticleState<Real>& b) {
  auto same = [](const auto& u, const auto& w) {
    if (u.size() != w.size()) return false;
    return u.empty() || std::memcmp(u.data(), w.data(), u.size() * sizeof(u[0])) == 0;
  };
  return same(a.x, b.x) && same(a.v, b.v) && same(a.C, b.C) && same(a.F, b.F) && same(a.mass, b.mass) &&
         same(a.volume, b.volume) && same(a.young, b.young) && same(a.poisson, b.poisson) && same(a.pinned, b.pinned);
}

template <typename Real>
nlohmann::json state_to_json(const ParticleState<Real>& s) {
  using nlohmann::json;
  json particles = json::array();
  for (std::size_t p = 0; p < s.size(); ++p) {
    json rec;
    rec["x"] = {s.x[p].x(), s.x[p].y(), s.x[p].z()};
    rec["v"] = {s.v[p].x(), s.v[p].y(), s.v[p].z()};
    json C = json::array(), F = json::array();
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        C.push_back(s.C[p](i, j));
        F.push_back(s.F[p](i, j));
      }
    }
    rec["C"] = C;
    rec["F"] = F;
    rec["mass"] = s.mass[p];
    rec["volume"] = s.volume[p];
    rec["young"] = s.young[p];
    rec["poisson"] = s.poisson[p];
    rec["pinned"] = static_cast<bool>(s.pinned[p]);
    particles.push_back(std::move(rec));
  }
  return {{"particles", particles}};
}

template <typename Real>
ParticleState<Real> state_from_json(const nlohmann::json& j) {
  const auto& arr = j.at("particles");
  ParticleState<Real> s;
  s.resize(arr.size());
  for (std::size_t p = 0; p < arr.size(); ++p) {
    const auto& rec = arr[p];
    for (int i = 0; i < 3; ++i) {
      s.x[p][i] = rec.at("x")[i].get<Real>();
      s.v[p][i] = rec.at("v")[i].get<Real>();
      for (int k = 0; k < 3; ++k) {
        s.C[p](i, k) = rec.at("C")[3 * i + k].get<Real>();
        s.F[p](i, k) = rec.at("F")[3 * i + k].get<Real>();
      }
    }
    s.mass[p] = rec.at("mass").get<Real>();
    s.volume[p] = rec.at("volume").get<Real>();
    s.young[p] = rec.at("young").get<Real>();
    s.poisson[p] = rec.at("poisson").get<Real>();
    s.pinned[p] = rec.at("pinned").get<bool>() ? 1 : 0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Engine parameters

template <typename Real>
struct SimParams {
  Real dt = Real(5e-5);
  int substeps_per_frame = 800;
  Vec3<Real> gravity = Vec3<Real>(0, Real(-9.8), 0);
  BoundaryType boundary = BoundaryType::None;
  Real ground_height = Real(0);
  std::optional<Aabb<Real>> fixed_region;

  static SimParams from_config(const SimConfig& c) {
    SimParams p;
    p.dt = static_cast<Real>(c.dt);
    p.substeps_per_frame = c.substeps_per_frame;
    p.gravity = c.gravity.cast<Real>();
    p.boundary = c.boundary.type;
    p.ground_height = static_cast<Real>(c.boundary.ground_height);
    if (c.fixed_region) p.fixed_region = c.fixed_region->template cast<Real>();
    return p;
  }
};

/// Builds the particle set for a scene: one particle per Gaussian kernel.
/// The initial volume is config.particle_volume when given, else the cell
/// volume shared among the particles that start in the same cell.
template <typename Real>
ParticleState<Real> make_particles(const Scene& scene, const SimConfig& config, std::span<const double> young) {
  if (young.size() != scene.kernels.size()) raise(ErrorKind::ShapeMismatch, "one Young's modulus per kernel required");
  const std::size_t n = scene.kernels.size();
  const int cells = config.grid_resolution;
  const double dx = config.dx();
  ParticleState<Real> s;
  s.resize(n);

  std::vector<int> cell_of(n);
  std::vector<int> count(static_cast<std::size_t>(cells) * cells * cells, 0);
  for (std::size_t p = 0; p < n; ++p) {
    const Vec3d f = (scene.kernels[p].center - config.domain_origin) / dx;
    for (int d = 0; d < 3; ++d) {
      if (!(f[d] >= 1.0 && f[d] <= cells - 1.0)) {
        raise(ErrorKind::OutOfGrid, "kernel " + std::to_string(p) + " lies within one cell of the domain boundary");
      }
    }
    const int i = std::min(cells - 1, static_cast<int>(f.x()));
    const int j = std::min(cells - 1, static_cast<int>(f.y()));
    const int k = std::min(cells - 1, static_cast<int>(f.z()));
    cell_of[p] = (i * cells + j) * cells + k;
    ++count[cell_of[p]];
  }
  const Vec3d spin_center = config.initial_velocity.center.value_or(scene.bounds.center());
  for (std::size_t p = 0; p < n; ++p) {
    const Vec3d x = scene.kernels[p].center;
    const double vol = config.particle_volume ? *config.particle_volume : dx * dx * dx / count[cell_of[p]];
    s.x[p] = x.cast<Real>();
    s.volume[p] = static_cast<Real>(vol);
    s.mass[p] = static_cast<Real>(config.density * vol);
    s.young[p] = static_cast<Real>(young[p]);
    s.poisson[p] = static_cast<Real>(config.poisson);
    s.pinned[p] = config.fixed_region && config.fixed_region->contains(x) ? 1 : 0;
    if (s.pinned[p]) continue;
    switch (config.initial_velocity.kind) {
      case InitialVelocity::Kind::None: break;
      case InitialVelocity::Kind::Spin:
        s.v[p] = (config.initial_velocity.rate * config.initial_velocity.axis.cross(x - spin_center)).cast<Real>();
        break;
      case InitialVelocity::Kind::Translate: s.v[p] = config.initial_velocity.velocity.cast<Real>(); break;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Single-operation building blocks (unit-testable in isolation)

/// Scatters mass and APIC momentum. Grid is not cleared first.
template <typename Real>
void p2g(const ParticleState<Real>& s, Grid<Real>& grid) {
  for (std::size_t p = 0; p < s.size(); ++p) {
    const auto st = bspline_weights(s.x[p], grid);
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        for (int c = 0; c < 3; ++c) {
          const Real w = st.weight(a, b, c);
          const std::size_t id = grid.index(st.base[0] + a, st.base[1] + b, st.base[2] + c);
          grid.mass[id] += w * s.mass[p];
          grid.velocity[id] += w * s.mass[p] * (s.v[p] + s.C[p] * st.offset(a, b, c, grid.dx));
        }
      }
    }
  }
}

/// Applies a node's boundary conditions in place. Returns a per-component
/// mask of which velocity components survived (1) or were zeroed (0).
template <typename Real>
Vec3<Real> apply_boundary(const SimParams<Real>& params, const Vec3<Real>& node_pos, Vec3<Real>& v) {
  Vec3<Real> keep = Vec3<Real>::Ones();
  if (params.fixed_region && params.fixed_region->contains(node_pos)) {
    v.setZero();
    return Vec3<Real>::Zero();
  }
  if (node_pos.y() < params.ground_height) {
    if (params.boundary == BoundaryType::StickyGround) {
      v.setZero();
      keep.setZero();
    } else if (params.boundary == BoundaryType::SlipGround && v.y() < Real(0)) {
      v.y() = Real(0);
      keep.y() = Real(0);
    }
  }
  return keep;
}

/// Converts momentum to velocity, adds internal stress forces and gravity,
/// then applies boundary conditions.
template <typename Real>
void grid_update(Grid<Real>& grid, const ParticleState<Real>& s, const SimParams<Real>& params) {
  const Real dt = params.dt;
  std::vector<Vec3<Real>> force(grid.node_count(), Vec3<Real>::Zero());
  const Real k = Real(4) * grid.inv_dx * grid.inv_dx;
  for (std::size_t p = 0; p < s.size(); ++p) {
    const auto st = bspline_weights(s.x[p], grid);
    const auto lame = lame_params(s.young[p], s.poisson[p]);
    const Mat3<Real> tau = stress(s.F[p], lame.mu, lame.lambda);
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        for (int c = 0; c < 3; ++c) {
          const Real w = st.weight(a, b, c);
          const std::size_t id = grid.index(st.base[0] + a, st.base[1] + b, st.base[2] + c);
          force[id] -= s.volume[p] * k * w * (tau * st.offset(a, b, c, grid.dx));
        }
      }
    }
  }
  const int n = grid.nodes_per_axis();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int kk = 0; kk < n; ++kk) {
        const std::size_t id = grid.index(i, j, kk);
        if (grid.mass[id] > Real(0)) {
          Vec3<Real> v = (grid.velocity[id] + dt * force[id]) / grid.mass[id] + dt * params.gravity;
          apply_boundary(params, grid.node_position(i, j, kk), v);
          grid.velocity[id] = v;
        } else {
          grid.velocity[id].setZero();
        }
      }
    }
  }
}

/// Gathers velocity and affine matrix, advects, and updates F.
template <typename Real>
void g2p(const Grid<Real>& grid, ParticleState<Real>& s, const SimParams<Real>& params) {
  const Real k = Real(4) * grid.inv_dx * grid.inv_dx;
  for (std::size_t p = 0; p < s.size(); ++p) {
    if (s.pinned[p]) {
      s.v[p].setZero();
      s.C[p].setZero();
      continue;
    }
    const auto st = bspline_weights(s.x[p], grid);
    Vec3<Real> v = Vec3<Real>::Zero();
    Mat3<Real> B = Mat3<Real>::Zero();
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        for (int c = 0; c < 3; ++c) {
          const Real w = st.weight(a, b, c);
          const Vec3<Real>& vi = grid.velocity[grid.index(st.base[0] + a, st.base[1] + b, st.base[2] + c)];
          v += w * vi;
          B += w * vi * st.offset(a, b, c, grid.dx).transpose();
        }
      }
    }
    s.v[p] = v;
    s.x[p] += params.dt * v;
    s.C[p] = k * B;
    s.F[p] = (Mat3<Real>::Identity() + params.dt * s.C[p]) * s.F[p];
    if (!(s.F[p].determinant() > Real(kMinDeterminant))) raise(ErrorKind::DegenerateF, "det(F) <= 1e-8 after update");
  }
}

// ---------------------------------------------------------------------------
// Kernel deformation

template <typename Real>
struct DeformedKernel {
  Vec3<Real> center;
  Mat3<Real> covariance;
  Mat3<Real> rotation;
};

/// center' = x, Sigma' = F Sigma0 F^T, rotation = polar factor of F.
template <typename Real>
DeformedKernel<Real> kernel_deform(const Mat3<Real>& rest_covariance, const Vec3<Real>& x, const Mat3<Real>& F) {
  if (!(F.determinant() > Real(kMinDeterminant))) raise(ErrorKind::DegenerateF, "det(F) <= 1e-8");
  return {x, F * rest_covariance * F.transpose(), polar_rotation(F)};
}

/// dL/dF from dL/dSigma' for Sigma' = F Sigma0 F^T.
template <typename Real>
Mat3<Real> kernel_deform_vjp(const Mat3<Real>& rest_covariance, const Mat3<Real>& F, const Mat3<Real>& grad_cov) {
  return grad_cov * F * rest_covariance.transpose() + grad_cov.transpose() * F * rest_covariance;
}

// ---------------------------------------------------------------------------
// Engine

enum class ReductionMode { Deterministic, Fast };

/// Inputs of one recorded substep. Replaying runs the same substep again.
template <typename Real>
struct StepTape {
  ParticleState<Real> input;
};

/// Cotangents of a substep's outputs. Empty vectors mean zero.
template <typename Real>
struct StateCotangent {
  std::vector<Vec3<Real>> x;
  std::vector<Vec3<Real>> v;
  std::vector<Mat3<Real>> C;
  std::vector<Mat3<Real>> F;
};

struct EngineStats {
  std::uint64_t substeps = 0;
  std::uint64_t degenerate_f = 0;     // det(F) clamped to the minimum
  std::uint64_t clamped_positions = 0;
  std::uint64_t nonfinite = 0;
};

template <typename Real>
class Engine {
 public:
  Engine(int cells, Real dx, const Vec3<Real>& origin, const SimParams<Real>& params, int threads = 1,
         ReductionMode mode = ReductionMode::Deterministic)
      : grid_(cells, dx, origin), params_(params), mode_(mode), pool_(std::make_unique<ThreadPool>(threads)) {}

  explicit Engine(const SimConfig& config, int threads = 1, ReductionMode mode = ReductionMode::Deterministic)
      : Engine(config.grid_resolution, static_cast<Real>(config.dx()), config.domain_origin.cast<Real>(),
               SimParams<Real>::from_config(config), threads, mode) {}

  const Grid<Real>& grid() const { return grid_; }
  const SimParams<Real>& params() const { return params_; }
  SimParams<Real>& params() { return params_; }
  const EngineStats& stats() const { return stats_; }
  ReductionMode mode() const { return mode_; }
  int threads() const { return pool_->size(); }

  /// p2g -> grid_update -> g2p, fused into two particle passes.
  void substep(ParticleState<Real>& s) {
    transfer_to_grid(s, nullptr);
    transfer_to_particles(s);
    ++stats_.substeps;
  }

  /// Advances one frame. With record_gradient the final substep's inputs are
  /// returned; earlier substeps are not recorded.
  std::optional<StepTape<Real>> simulate_frame(ParticleState<Real>& s, bool record_gradient) {
    const int n = params_.substeps_per_frame;
    for (int i = 0; i + 1 < n; ++i) substep(s);
    std::optional<StepTape<Real>> tape;
    if (record_gradient) tape = StepTape<Real>{s};
    substep(s);
    return tape;
  }

  ParticleState<Real> replay(const StepTape<Real>& tape) {
    ParticleState<Real> s = tape.input;
    substep(s);
    return s;
  }

  /// dL/dE per particle through one recorded substep. The substep input
  /// state is treated as constant; only the stress depends on E.
  std::vector<Real> substep_backward(const StepTape<Real>& tape, const StateCotangent<Real>& out) {
    const ParticleState<Real>& s = tape.input;
    const std::size_t n = s.size();
    auto check = [n](std::size_t sz) {
      if (sz != 0 && sz != n) raise(ErrorKind::ShapeMismatch, "cotangent size does not match the tape");
    };
    check(out.x.size());
    check(out.v.size());
    check(out.C.size());
    check(out.F.size());

    std::vector<Vec3<Real>> keep;
    transfer_to_grid(s, &keep);

    const Real dt = params_.dt;
    const Real k = Real(4) * grid_.inv_dx * grid_.inv_dx;
    std::vector<Vec3<Real>> gnode(box_nodes(), Vec3<Real>::Zero());

    // g2p reverse: accumulate dL/dv_node.
    for (std::size_t p = 0; p < n; ++p) {
      if (s.pinned[p]) continue;
      Vec3<Real> gv = Vec3<Real>::Zero();
      Mat3<Real> gC = Mat3<Real>::Zero();
      if (!out.x.empty()) gv += dt * out.x[p];
      if (!out.v.empty()) gv += out.v[p];
      if (!out.F.empty()) gC += dt * out.F[p] * s.F[p].transpose();
      if (!out.C.empty()) gC += out.C[p];
      gC *= k;
      const auto st = stencil_unchecked(s.x[p], grid_);
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          for (int c = 0; c < 3; ++c) {
            const Real w = st.weight(a, b, c);
            gnode[box_index(st.base[0] + a, st.base[1] + b, st.base[2] + c)] +=
                w * (gv + gC * st.offset(a, b, c, grid_.dx));
          }
        }
      }
    }
    // Boundary masks and momentum-to-velocity division.
    for (std::size_t i = 0; i < gnode.size(); ++i) {
      const std::size_t id = box_to_grid(i);
      const Real m = grid_.mass[id];
      gnode[i] = m > Real(0) ? Vec3<Real>(gnode[i].cwiseProduct(keep[i]) / m) : Vec3<Real>::Zero();
    }
    // p2g reverse for the stress term: mom += -dt V0 k w tau dpos.
    std::vector<Real> grad_young(n, Real(0));
    for (std::size_t p = 0; p < n; ++p) {
      const auto st = stencil_unchecked(s.x[p], grid_);
      Mat3<Real> gtau = Mat3<Real>::Zero();
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          for (int c = 0; c < 3; ++c) {
            const Real w = st.weight(a, b, c);
            const Vec3<Real>& g = gnode[box_index(st.base[0] + a, st.base[1] + b, st.base[2] + c)];
            gtau += w * g * st.offset(a, b, c, grid_.dx).transpose();
          }
        }
      }
      gtau *= -dt * s.volume[p] * k;
      const Mat3<Real>& F = s.F[p];
      const Real J = F.determinant();
      const Mat3<Real> R = polar_rotation(F);
      const Real gmu = Real(2) * (gtau.array() * ((F - R) * F.transpose()).array()).sum();
      const Real glambda = gtau.trace() * J * (J - Real(1));
      const auto per_young = lame_params_per_young(s.poisson[p]);
      grad_young[p] = gmu * per_young.mu + glambda * per_young.lambda;
    }
    return grad_young;
  }

 private:
  struct Box {
    std::array<int, 3> lo{0, 0, 0};
    std::array<int, 3> hi{-1, -1, -1};
    std::array<int, 3> dim() const { return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}; }
    std::size_t count() const {
      const auto d = dim();
      return d[0] <= 0 ? 0 : static_cast<std::size_t>(d[0]) * d[1] * d[2];
    }
  };

  std::size_t box_nodes() const { return box_.count(); }
  std::size_t box_index(int i, int j, int k) const {
    const auto d = box_.dim();
    return (static_cast<std::size_t>(i - box_.lo[0]) * d[1] + (j - box_.lo[1])) * d[2] + (k - box_.lo[2]);
  }
  std::size_t box_to_grid(std::size_t local) const {
    const auto d = box_.dim();
    const int k = static_cast<int>(local % d[2]);
    const int j = static_cast<int>((local / d[2]) % d[1]);
    const int i = static_cast<int>(local / (static_cast<std::size_t>(d[1]) * d[2]));
    return grid_.index(i + box_.lo[0], j + box_.lo[1], k + box_.lo[2]);
  }

  void clear_box() {
    const auto d = box_.dim();
    for (int i = 0; i < d[0]; ++i) {
      for (int j = 0; j < d[1]; ++j) {
        const std::size_t row = grid_.index(box_.lo[0] + i, box_.lo[1] + j, box_.lo[2]);
        std::fill_n(grid_.mass.begin() + row, d[2], Real(0));
        std::fill_n(grid_.velocity.begin() + row, d[2], Vec3<Real>::Zero());
      }
    }
  }

  /// Per-particle scatter of mass and momentum including the stress impulse.
  /// Node values are packed as (momentum, mass).
  struct Scatter {
    Stencil<Real> st;
    Vec4<Real> packed;  // (m v, m)
    Vec4<Real> col[3];  // columns of (m C - dt V0 k tau) * dx, zero mass lane
  };

  Scatter prepare(const ParticleState<Real>& s, std::size_t p) const {
    Scatter sc;
    sc.st = stencil_unchecked(s.x[p], grid_);
    const Real k = Real(4) * grid_.inv_dx * grid_.inv_dx;
    const Real mu = s.young[p] / (Real(2) * (Real(1) + s.poisson[p]));
    const Real lambda = s.young[p] * s.poisson[p] / ((Real(1) + s.poisson[p]) * (Real(1) - Real(2) * s.poisson[p]));
    const Mat3<Real>& F = s.F[p];
    const Mat3<Real> tau = stress_from_rotation(F, polar_rotation(F), F.determinant(), mu, lambda);
    const Real m = s.mass[p];
    sc.packed << m * s.v[p], m;
    const Mat3<Real> affine = (m * s.C[p] - params_.dt * s.volume[p] * k * tau) * grid_.dx;
    for (int d = 0; d < 3; ++d) sc.col[d] << affine.col(d), Real(0);
    return sc;
  }

  /// Writes one particle into a dense buffer laid out like the active box.
  void scatter(const Scatter& sc, Vec4<Real>* nodes) const {
    const auto& st = sc.st;
    // affine * offset = sum over columns of (node - frac) * column.
    Vec4<Real> col[3][3];
    for (int d = 0; d < 3; ++d) {
      for (int o = 0; o < 3; ++o) col[d][o] = (Real(o) - st.frac[d]) * sc.col[d];
    }
    const auto dim = box_.dim();
    const std::size_t stride_i = static_cast<std::size_t>(dim[1]) * dim[2];
    Vec4<Real>* first = nodes + box_index(st.base[0], st.base[1], st.base[2]);
    for (int a = 0; a < 3; ++a) {
      const Vec4<Real> base_a = sc.packed + col[0][a];
      for (int b = 0; b < 3; ++b) {
        const Real wab = st.w[0][a] * st.w[1][b];
        const Vec4<Real> base_ab = base_a + col[1][b];
        Vec4<Real>* row = first + a * stride_i + b * dim[2];
        for (int c = 0; c < 3; ++c) row[c] += (wab * st.w[2][c]) * (base_ab + col[2][c]);
      }
    }
  }

  /// p2g plus grid_update over the active box. Particle data is read only.
  /// When `keep` is non-null the boundary masks are returned per box node.
  void transfer_to_grid(const ParticleState<Real>& s, std::vector<Vec3<Real>>* keep) {
    // Reset the previously touched region so untouched nodes stay zero.
    clear_box();
    Box box;
    box.lo = {grid_.cells, grid_.cells, grid_.cells};
    box.hi = {0, 0, 0};
    for (std::size_t p = 0; p < s.size(); ++p) {
      for (int d = 0; d < 3; ++d) {
        const int base = static_cast<int>(std::floor((s.x[p][d] - grid_.origin[d]) * grid_.inv_dx - Real(0.5)));
        box.lo[d] = std::min(box.lo[d], base);
        box.hi[d] = std::max(box.hi[d], base + 2);
      }
    }
    if (s.size() == 0) box = Box{};
    box_ = box;
    const std::size_t nodes = box_.count();
    box_nodes_.assign(nodes, Vec4<Real>::Zero());

    const int chunks = std::min<int>(pool_->size(), static_cast<int>(std::max<std::size_t>(1, s.size() / 256)));
    if (chunks <= 1) {
      for (std::size_t p = 0; p < s.size(); ++p) scatter(prepare(s, p), box_nodes_.data());
    } else {
      chunk_nodes_.resize(chunks);
      std::mutex merge_mutex;
      pool_->run(chunks, [&](int c) {
        auto& cn = chunk_nodes_[c];
        cn.assign(nodes, Vec4<Real>::Zero());
        const std::size_t begin = s.size() * c / chunks;
        const std::size_t end = s.size() * (c + 1) / chunks;
        for (std::size_t p = begin; p < end; ++p) scatter(prepare(s, p), cn.data());
        if (mode_ == ReductionMode::Fast) {
          std::lock_guard lock(merge_mutex);
          for (std::size_t i = 0; i < nodes; ++i) box_nodes_[i] += cn[i];
        }
      });
      if (mode_ == ReductionMode::Deterministic) {
        for (int c = 0; c < chunks; ++c) {
          for (std::size_t i = 0; i < nodes; ++i) box_nodes_[i] += chunk_nodes_[c][i];
        }
      }
    }

    if (keep) keep->assign(nodes, Vec3<Real>::Zero());
    box_velocity_.assign(nodes, Vec4<Real>::Zero());
    const auto d = box_.dim();
    const Real dt = params_.dt;
    std::size_t local = 0;
    for (int i = 0; i < d[0]; ++i) {
      for (int j = 0; j < d[1]; ++j) {
        for (int kk = 0; kk < d[2]; ++kk, ++local) {
          const int gi = box_.lo[0] + i, gj = box_.lo[1] + j, gk = box_.lo[2] + kk;
          const std::size_t id = grid_.index(gi, gj, gk);
          const Real m = box_nodes_[local][3];
          grid_.mass[id] = m;
          if (m > Real(0)) {
            Vec3<Real> v = box_nodes_[local].template head<3>() / m + dt * params_.gravity;
            const Vec3<Real> mask = apply_boundary(params_, grid_.node_position(gi, gj, gk), v);
            if (keep) (*keep)[local] = mask;
            grid_.velocity[id] = v;
            box_velocity_[local] << v, Real(0);
          } else {
            grid_.velocity[id].setZero();
          }
        }
      }
    }
  }

  void transfer_to_particles(ParticleState<Real>& s) {
    const Real dt = params_.dt;
    const Real k = Real(4) * grid_.inv_dx * grid_.inv_dx;
    const Real lo_cell = Real(1), hi_cell = Real(grid_.cells - 1);
    const std::size_t n = s.size();
    const auto dim = box_.dim();
    const std::size_t stride_i = static_cast<std::size_t>(dim[1]) * dim[2];
    std::atomic<std::uint64_t> degenerate{0}, clamped{0}, nonfinite{0};
    const int chunks = std::min<int>(pool_->size(), static_cast<int>(std::max<std::size_t>(1, n / 256)));
    pool_->run(chunks, [&](int c) {
      const std::size_t begin = n * c / chunks, end = n * (c + 1) / chunks;
      for (std::size_t p = begin; p < end; ++p) {
        if (s.pinned[p]) {
          s.v[p].setZero();
          s.C[p].setZero();
          continue;
        }
        const auto st = stencil_unchecked(s.x[p], grid_);
        const Vec4<Real>* first = box_velocity_.data() + box_index(st.base[0], st.base[1], st.base[2]);
        Vec4<Real> v4 = Vec4<Real>::Zero();
        Vec4<Real> moment[3] = {Vec4<Real>::Zero(), Vec4<Real>::Zero(), Vec4<Real>::Zero()};
        for (int a = 0; a < 3; ++a) {
          Vec4<Real> plane_sum = Vec4<Real>::Zero();
          for (int b = 0; b < 3; ++b) {
            const Real wab = st.w[0][a] * st.w[1][b];
            const Vec4<Real>* row = first + a * stride_i + b * dim[2];
            const Vec4<Real> w0 = (wab * st.w[2][0]) * row[0];
            const Vec4<Real> w1 = (wab * st.w[2][1]) * row[1];
            const Vec4<Real> w2 = (wab * st.w[2][2]) * row[2];
            const Vec4<Real> row_sum = w0 + w1 + w2;
            plane_sum += row_sum;
            moment[1] += Real(b) * row_sum;
            moment[2] += w1 + Real(2) * w2;
          }
          v4 += plane_sum;
          moment[0] += Real(a) * plane_sum;
        }
        const Vec3<Real> v = v4.template head<3>();
        // B = sum w v_i (node - x_p)^T, node offset = (abc - frac) dx
        Mat3<Real> B;
        for (int d = 0; d < 3; ++d) B.col(d) = (moment[d].template head<3>() - st.frac[d] * v) * grid_.dx;
        const Mat3<Real> Cn = k * B;
        Vec3<Real> xn = s.x[p] + dt * v;
        Mat3<Real> Fn = (Mat3<Real>::Identity() + dt * Cn) * s.F[p];

        if (!xn.allFinite() || !Fn.allFinite() || !v.allFinite()) {
          ++nonfinite;
          s.v[p].setZero();
          s.C[p].setZero();
          continue;
        }
        for (int d = 0; d < 3; ++d) {
          const Real cell = (xn[d] - grid_.origin[d]) * grid_.inv_dx;
          if (cell < lo_cell || cell > hi_cell) {
            xn[d] = grid_.origin[d] + std::clamp(cell, lo_cell, hi_cell) * grid_.dx;
            ++clamped;
          }
        }
        if (!(Fn.determinant() > Real(kMinDeterminant))) {
          // Clamp singular values so det(F) >= 1e-8 and flag it.
          auto svd = rotation_svd(Fn);
          const Real floor_sv = std::cbrt(Real(kMinDeterminant)) * Real(1.0001);
          for (int d = 0; d < 3; ++d) svd.sigma[d] = std::max(svd.sigma[d], floor_sv);
          Fn = svd.U * svd.sigma.asDiagonal() * svd.V.transpose();
          ++degenerate;
        }
        s.v[p] = v;
        s.C[p] = Cn;
        s.x[p] = xn;
        s.F[p] = Fn;
      }
    });
    stats_.degenerate_f += degenerate;
    stats_.clamped_positions += clamped;
    stats_.nonfinite += nonfinite;
  }

  Grid<Real> grid_;
  SimParams<Real> params_;
  ReductionMode mode_;
  std::unique_ptr<ThreadPool> pool_;
  EngineStats stats_;
  Box box_;
  std::vector<Vec4<Real>> box_nodes_;
  std::vector<Vec4<Real>> box_velocity_;
  std::vector<std::vector<Vec4<Real>>> chunk_nodes_;
};

}  // namespace dreamphys::mpm
