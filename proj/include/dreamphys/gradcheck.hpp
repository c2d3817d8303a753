#pragma once

// Finite-difference gradient suites. Analytic gradients run in the chosen
// precision; the central-difference oracle always runs in double from the
// same inputs.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dreamphys/config.hpp"
#include "dreamphys/field.hpp"
#include "dreamphys/guidance.hpp"
#include "dreamphys/mpm.hpp"
#include "dreamphys/optimizer.hpp"
#include "dreamphys/render.hpp"
#include "dreamphys/scene.hpp"

namespace dreamphys::gradcheck {

struct Options {
  bool fp64 = true;
  std::uint64_t seed = 7;
  bool sign_flip_fault = false;  // negates every analytic gradient; the suites must then fail
};

struct SuiteResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int probes = 0;
  double seconds = 0.0;
  bool pass = false;
};

/// Pairs of (analytic, finite-difference) values. The relative error of a
/// probe is |a - f| / max(|f|, 0.1 max|f|), so entries that are tiny next to
/// the rest of the gradient do not dominate through cancellation.
class Tally {
 public:
  void add(double analytic, double fd) {
    a_.push_back(analytic);
    f_.push_back(fd);
  }
  int count() const { return static_cast<int>(a_.size()); }
  double max_rel_error() const {
    double scale = 0.0;
    for (double f : f_) scale = std::max(scale, std::abs(f));
    if (scale == 0.0) return a_.empty() ? 0.0 : std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t i = 0; i < a_.size(); ++i) {
      const double e = std::abs(a_[i] - f_[i]) / std::max(std::abs(f_[i]), 0.1 * scale);
      worst = std::isfinite(e) ? std::max(worst, e) : std::numeric_limits<double>::infinity();
    }
    return worst;
  }

 private:
  std::vector<double> a_, f_;
};

inline double central_difference(const std::function<double(double)>& f, double h) {
  return (f(h) - f(-h)) / (2.0 * h);
}

namespace detail {

inline double sign(const Options& o) { return o.sign_flip_fault ? -1.0 : 1.0; }

template <typename Real>
double dot_image(const render::Image<Real>& w, const render::Image<double>& img) {
  double s = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) s += static_cast<double>(w.data[i]) * img.data[i];
  return s;
}

inline Mat3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

/// Lattice of nx*ny*nz kernels with spacing h centered at c.
inline Scene lattice_scene(int nx, int ny, int nz, double h, const Vec3d& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Scene sc;
  const Vec3d lo = c - 0.5 * h * Vec3d(nx - 1, ny - 1, nz - 1);
  for (int i = 0; i < nx; ++i) {
    for (int j = 0; j < ny; ++j) {
      for (int k = 0; k < nz; ++k) {
        GaussianKernel g;
        g.center = lo + h * Vec3d(i, j, k);
        g.scale = Vec3d::Constant(0.6 * h);
        g.opacity = 0.7;
        g.sh[0] = Vec3d(u(rng), u(rng), u(rng));
        sc.kernels.push_back(g);
      }
    }
  }
  sc.recompute_bounds();
  return sc;
}

/// Perturbs a particle state away from rest so that stress is non-trivial.
template <typename Real>
void randomize_state(mpm::ParticleState<Real>& s, double f_noise, double v_noise, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t p = 0; p < s.size(); ++p) {
    Mat3d F = Mat3d::Identity();
    Mat3d C;
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        F(a, b) += f_noise * n(rng);
        C(a, b) = v_noise * n(rng);
      }
    }
    s.F[p] = F.cast<Real>();
    s.C[p] = C.cast<Real>();
    s.v[p] = (v_noise * Vec3d(n(rng), n(rng), n(rng))).cast<Real>();
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Suites

/// L = <W, image> on a few kernels; gradients w.r.t. centers and
/// covariances (symmetric perturbations).
template <typename Real>
Tally renderer_suite(const Options& opt) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0), unit(0.0, 1.0);
  Scene sc;
  for (int k = 0; k < 6; ++k) {
    GaussianKernel g;
    g.center = Vec3d(0.3 * u(rng), 0.3 * u(rng), 0.2 * u(rng));
    g.scale = Vec3d(0.05 + 0.1 * unit(rng), 0.05 + 0.1 * unit(rng), 0.05 + 0.1 * unit(rng));
    g.rotation = Eigen::Quaterniond(detail::random_rotation(rng));
    g.opacity = 0.3 + 0.5 * unit(rng);
    g.sh[0] = Vec3d(u(rng), u(rng), u(rng));
    sc.kernels.push_back(g);
  }
  sc.recompute_bounds();
  const CameraPose pose{Vec3d(0.1, -0.2, -2.0), Vec3d::Zero(), Vec3d::UnitY(), 40.0};
  const int H = 16, W = 16;

  render::Image<Real> w(H, W);
  for (auto& x : w.data) x = static_cast<Real>(u(rng));

  const auto s_ad = render::splats_from_scene<Real>(sc);
  render::Renderer<Real> r;
  render::ForwardRecord<Real> rec;
  r.render(s_ad, render::Camera<Real>::from_pose(pose, H, W), &rec);
  const auto g = r.backward(w, rec);

  const auto s0 = render::splats_from_scene<double>(sc);
  const auto cam = render::Camera<double>::from_pose(pose, H, W);
  render::Renderer<double> rd;
  Tally t;
  const double sg = detail::sign(opt);
  for (std::size_t k = 0; k < s0.size(); ++k) {
    for (int a = 0; a < 3; ++a) {
      const double fd = central_difference(
          [&](double h) {
            auto s = s0;
            s.centers[k][a] += h;
            return detail::dot_image(w, rd.render(s, cam));
          },
          1e-6);
      t.add(sg * g.center[k][a], fd);
    }
    for (int a = 0; a < 3; ++a) {
      for (int b = a; b < 3; ++b) {
        const double fd = central_difference(
            [&](double h) {
              auto s = s0;
              s.covariances[k](a, b) += h;
              if (a != b) s.covariances[k](b, a) += h;
              return detail::dot_image(w, rd.render(s, cam));
            },
            1e-7);
        const double ad = a == b ? g.covariance[k](a, a) : g.covariance[k](a, b) + g.covariance[k](b, a);
        t.add(sg * ad, fd);
      }
    }
  }
  return t;
}

/// L = <G, tau(F, mu, lambda)>; gradients w.r.t. F, mu and lambda.
template <typename Real>
Tally stress_suite(const Options& opt) {
  std::mt19937_64 rng(opt.seed + 1);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.5, 2.0);
  Tally t;
  const double sg = detail::sign(opt);
  for (int sample = 0; sample < 8; ++sample) {
    Mat3d F;
    do {
      F = Mat3d::Identity();
      for (int i = 0; i < 9; ++i) F(i / 3, i % 3) += 0.35 * n(rng);
    } while (F.determinant() < 0.3);
    Mat3d G;
    for (int i = 0; i < 9; ++i) G(i / 3, i % 3) = n(rng);
    const double mu = unit(rng), lambda = unit(rng);
    const auto ad = mpm::stress_vjp<Real>(F.cast<Real>(), static_cast<Real>(mu), static_cast<Real>(lambda),
                                          G.cast<Real>());
    auto loss = [&](const Mat3d& Fx, double m, double l) {
      return (G.array() * mpm::stress<double>(Fx, m, l).array()).sum();
    };
    for (int i = 0; i < 9; ++i) {
      const double fd = central_difference(
          [&](double h) {
            Mat3d Fx = F;
            Fx(i / 3, i % 3) += h;
            return loss(Fx, mu, lambda);
          },
          1e-6);
      t.add(sg * ad.dF(i / 3, i % 3), fd);
    }
    t.add(sg * ad.dmu, central_difference([&](double h) { return loss(F, mu + h, lambda); }, 1e-6));
    t.add(sg * ad.dlambda, central_difference([&](double h) { return loss(F, mu, lambda + h); }, 1e-6));
  }
  return t;
}

/// Gradient of a linear functional of the last substep's outputs w.r.t. each
/// particle's Young's modulus on a 100-particle scene.
template <typename Real>
Tally substep_suite(const Options& opt) {
  std::mt19937_64 rng(opt.seed + 2);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> logE(4.5, 5.5);
  SimConfig cfg;
  cfg.grid_resolution = 16;
  cfg.substeps_per_frame = 5;
  cfg.frame_count = 1;
  const Scene sc = detail::lattice_scene(5, 5, 4, cfg.dx() / 2.0, Vec3d::Constant(0.5), rng);
  std::vector<double> E(sc.kernels.size());
  for (auto& e : E) e = std::pow(10.0, logE(rng));
  auto state = mpm::make_particles<Real>(sc, cfg, E);
  detail::randomize_state(state, 0.05, 0.2, rng);

  mpm::Engine<Real> eng(cfg);
  const auto tape = *eng.simulate_frame(state, true);

  const std::size_t np = state.size();
  std::vector<Vec3d> wx(np), wv(np);
  std::vector<Mat3d> wC(np), wF(np);
  for (std::size_t p = 0; p < np; ++p) {
    wx[p] = Vec3d(n(rng), n(rng), n(rng));
    wv[p] = Vec3d(n(rng), n(rng), n(rng));
    for (int i = 0; i < 9; ++i) {
      wC[p](i / 3, i % 3) = n(rng);
      wF[p](i / 3, i % 3) = n(rng);
    }
  }
  mpm::StateCotangent<Real> cot;
  for (std::size_t p = 0; p < np; ++p) {
    cot.x.push_back(wx[p].cast<Real>());
    cot.v.push_back(wv[p].cast<Real>());
    cot.C.push_back(wC[p].cast<Real>());
    cot.F.push_back(wF[p].cast<Real>());
  }
  const auto grad = eng.substep_backward(tape, cot);

  mpm::Engine<double> ed(cfg);
  const auto input = tape.input.template cast<double>();
  auto loss = [&](const mpm::ParticleState<double>& s) {
    double L = 0.0;
    for (std::size_t p = 0; p < np; ++p) {
      L += wx[p].dot(s.x[p]) + wv[p].dot(s.v[p]) + (wC[p].array() * s.C[p].array()).sum() +
           (wF[p].array() * s.F[p].array()).sum();
    }
    return L;
  };
  Tally t;
  const double sg = detail::sign(opt);
  for (std::size_t p = 0; p < np; p += 9) {
    const double e0 = input.young[p];
    const double fd = central_difference(
        [&](double h) {
          auto s = input;
          s.young[p] = e0 + h;
          ed.substep(s);
          return loss(s);
        },
        1e-5 * e0);
    t.add(sg * grad[p], fd);
  }
  return t;
}

/// L = sum_p w_p log10 E(x_p); gradients w.r.t. plane cells, spline
/// coefficients and base weights.
template <typename Real>
Tally field_suite(const Options& opt) {
  std::mt19937_64 rng(opt.seed + 3);
  std::uniform_real_distribution<double> u(-1.0, 1.0), inside(0.1, 0.9);
  field::FieldShape shape;
  shape.resolution = 8;
  shape.features = 4;
  shape.layer_dims = {4, 6, 1};
  const Aabb<double> bounds{Vec3d::Zero(), Vec3d::Ones()};
  field::MaterialField<double> f0(shape, bounds);
  f0.initialize(opt.seed);
  auto& p0 = f0.mutable_params();
  for (int l = 0; l < 2; ++l) {
    const auto ls = shape.layers()[l];
    const std::size_t nc = static_cast<std::size_t>(ls.in) * ls.out * shape.bases();
    for (std::size_t i = 0; i < nc; ++i) p0[f0.coef_offset(l) + i] = 0.3 * u(rng);
  }
  std::vector<Vec3d> pts(30);
  for (auto& x : pts) x = Vec3d(inside(rng), inside(rng), inside(rng));
  f0.update_normalization(pts, 1.0);
  // Keep inputs off the [-1, 1] clamp so the loss is smooth at every point.
  for (int l = 0; l < 2; ++l) {
    for (auto& s : f0.norm_scale(l)) s *= 0.9;
    for (auto& s : f0.norm_shift(l)) s *= 0.9;
  }
  std::vector<double> w(pts.size());
  for (auto& x : w) x = u(rng);

  auto fr = f0.template cast<Real>();
  typename field::MaterialField<Real>::Record rec;
  fr.eval_log10(pts, &rec);
  std::vector<Real> wr(w.begin(), w.end()), grad(fr.param_count(), Real(0));
  fr.backward_log10(rec, wr, grad);

  std::vector<std::size_t> probes;
  std::array<int, 6> cells;
  std::vector<double> feat(shape.features);
  for (int q = 0; q < 3; ++q) {
    f0.triplane_sample(pts[q], feat.data(), &cells);
    for (int plane = 0; plane < 3; ++plane) {
      probes.push_back(f0.plane_offset(plane, cells[2 * plane], cells[2 * plane + 1]) + q);
      probes.push_back(f0.plane_offset(plane, cells[2 * plane] + 1, cells[2 * plane + 1] + 1) + (q + 1) % 4);
    }
  }
  for (int l = 0; l < 2; ++l) {
    for (std::size_t i = 0; i < 6; ++i) probes.push_back(f0.coef_offset(l) + 5 * i + 1);
    for (std::size_t i = 0; i < 3; ++i) probes.push_back(f0.base_offset(l) + 2 * i);
  }

  Tally t;
  const double sg = detail::sign(opt);
  for (std::size_t idx : probes) {
    const double fd = central_difference(
        [&](double h) {
          auto f = f0;
          f.mutable_params()[idx] += h;
          const auto lg = f.eval_log10(pts);
          double L = 0.0;
          for (std::size_t i = 0; i < pts.size(); ++i) L += w[i] * lg[i];
          return L;
        },
        1e-6);
    t.add(sg * grad[idx], fd);
  }
  return t;
}

/// Plane cell -> E -> last substep of each frame -> render -> L = <S, V>
/// with S a frozen motion-distillation score. 50 particles, 16x16 px, one
/// substep per frame; the oracle replays each frame's recorded substep with
/// the perturbed moduli. E enters only through a single substep, so L is
/// large next to its variation and the step is kept coarse against roundoff.
template <typename Real>
Tally end_to_end_suite(const Options& opt) {
  std::mt19937_64 rng(opt.seed + 4);
  SimConfig cfg;
  cfg.grid_resolution = 16;
  cfg.substeps_per_frame = 1;
  cfg.frame_count = 2;
  cfg.image_height = cfg.image_width = 16;
  cfg.camera_path = {CameraPose{Vec3d(0.55, 0.45, -0.2), Vec3d(0.5, 0.5, 0.5), Vec3d::UnitY(), 30.0}};
  const Scene sc = detail::lattice_scene(5, 5, 2, cfg.dx() / 2.0, Vec3d::Constant(0.5), rng);

  field::FieldShape shape;
  shape.resolution = 8;
  shape.features = 4;
  shape.layer_dims = {4, 4, 1};
  field::MaterialField<Real> field(shape, sc.padded_bounds());
  field.initialize(opt.seed);
  std::vector<Vec3d> pts;
  for (const auto& k : sc.kernels) pts.push_back(k.center);
  field.update_normalization(pts, 1.0);
  for (int l = 0; l < 2; ++l) {
    for (auto& s : field.norm_scale(l)) s *= Real(0.9);
    for (auto& s : field.norm_shift(l)) s *= Real(0.9);
  }
  field.bias_output(pts, 0, 5.0);

  // Rollout from a randomized state so that the stress depends on E.
  optimize::Pipeline<Real> pipe(sc, cfg);
  typename field::MaterialField<Real>::Record frec;
  const std::vector<Real> young = field.eval_young(pts, &frec);
  const std::vector<double> young_d(young.begin(), young.end());
  auto state = mpm::make_particles<Real>(sc, cfg, young_d);
  detail::randomize_state(state, 0.05, 0.2, rng);
  optimize::Rollout<Real> roll;
  for (int f = 0; f < cfg.frame_count; ++f) {
    roll.tapes.push_back(*pipe.engine().simulate_frame(state, true));
    roll.frames.push_back(state);
  }
  const std::vector<int> frames{1, 2};
  std::vector<render::ForwardRecord<Real>> recs;
  const auto V = pipe.render_frames(roll, frames, &recs);

  // Frozen score against a stiffer reference.
  guidance::Video<Real> ref = V;
  for (auto& x : ref.data) x = std::clamp(x + Real(0.05), Real(0), Real(1));
  guidance::AnalyticDenoiser<Real> oracle({ref}, ref.image(0));
  const auto eps = guidance::gaussian_noise<Real>(V.frames, V.height, V.width, rng);
  guidance::DiffusionSchedule sched;
  guidance::Query q{0, false, 500, sched.alpha_bar(500)};
  const auto S = guidance::mds_score(V, pipe.render_anchor(), eps, q, oracle, guidance::Condition::none(),
                                     sched.omega(500));

  std::vector<Real> grad_young(young.size(), Real(0));
  for (int t = 0; t < V.frames; ++t) pipe.backward_frame(roll, frames[t], recs[t], S.image(t), grad_young);
  std::vector<Real> grad(field.param_count(), Real(0));
  field.backward_young(frec, young, grad_young, grad);

  const auto fd_field = field.template cast<double>();
  optimize::Pipeline<double> pd(sc, cfg);
  auto loss = [&](const field::MaterialField<double>& f) {
    const auto E = f.eval_young(pts);
    double L = 0.0;
    for (int t = 0; t < V.frames; ++t) {
      auto s = roll.tapes[t].input.template cast<double>();
      for (std::size_t p = 0; p < s.size(); ++p) s.young[p] = E[p];
      pd.engine().substep(s);
      L += detail::dot_image(S.image(t), pd.renderer().render(pd.splats(s), pd.camera(frames[t])));
    }
    return L;
  };

  std::array<int, 6> cells;
  std::vector<Real> feat(shape.features);
  Tally t;
  const double sg = detail::sign(opt);
  for (int q2 = 0; q2 < 2; ++q2) {
    field.triplane_sample(pts[q2 * 17], feat.data(), &cells);
    for (int plane = 0; plane < 3; ++plane) {
      for (int feature = 0; feature < 2; ++feature) {
        const std::size_t idx = field.plane_offset(plane, cells[2 * plane], cells[2 * plane + 1]) + feature + 2 * q2;
        const double fd = central_difference(
            [&](double h) {
              auto f = fd_field;
              f.mutable_params()[idx] += h;
              return loss(f);
            },
            1e-3);
        t.add(sg * grad[idx], fd);
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Runner

template <typename Real>
std::vector<SuiteResult> run_suites(const Options& opt) {
  const double tol = opt.fp64 ? 1e-3 : 1e-2;
  std::vector<std::pair<std::string, std::function<Tally()>>> suites{
      {"renderer", [&] { return renderer_suite<Real>(opt); }},
      {"stress", [&] { return stress_suite<Real>(opt); }},
      {"last_substep", [&] { return substep_suite<Real>(opt); }},
      {"material_field", [&] { return field_suite<Real>(opt); }},
      {"end_to_end", [&] { return end_to_end_suite<Real>(opt); }},
  };
  std::vector<SuiteResult> out;
  for (auto& [name, fn] : suites) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tally t = fn();
    SuiteResult r;
    r.name = name;
    r.max_rel_error = t.max_rel_error();
    r.tolerance = tol;
    r.probes = t.count();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.pass = t.count() > 0 && r.max_rel_error < tol;
    out.push_back(r);
  }
  return out;
}

inline std::vector<SuiteResult> run(const Options& opt) {
  return opt.fp64 ? run_suites<double>(opt) : run_suites<float>(opt);
}

}  // namespace dreamphys::gradcheck
