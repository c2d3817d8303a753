#pragma once

// Synthetic scenes and the closed-loop Young's modulus recovery experiment.

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "dreamphys/config.hpp"
#include "dreamphys/field.hpp"
#include "dreamphys/optimizer.hpp"
#include "dreamphys/scene.hpp"

namespace dreamphys::scenarios {

struct SceneSetup {
  Scene scene;
  SimConfig config;
};

/// Beam clamped at its -x end, sagging and swinging under gravity. 2048
/// kernels on a lattice of spacing dx/2 in a 32^3 grid, viewed from the side.
inline SceneSetup cantilever(int frame_count = 80, int image_size = 48) {
  SceneSetup s;
  SimConfig& c = s.config;
  c.grid_resolution = 32;
  c.domain_origin = Vec3d::Zero();
  c.domain_size = 1.0;
  c.frame_count = frame_count;
  c.image_height = c.image_width = image_size;
  c.fixed_region = Aabb<double>{Vec3d(0.15, 0.5, 0.4), Vec3d(0.23, 0.7, 0.6)};
  c.camera_path = {CameraPose{Vec3d(0.45, 0.5, 1.5), Vec3d(0.45, 0.5, 0.5), Vec3d::UnitY(), 40.0}};

  const double h = c.dx() / 2.0;
  const int nx = 32, ny = 8, nz = 8;
  const Vec3d origin(0.1875 + 0.5 * h, 0.5625 + 0.5 * h, 0.4375 + 0.5 * h);
  for (int i = 0; i < nx; ++i) {
    for (int j = 0; j < ny; ++j) {
      for (int k = 0; k < nz; ++k) {
        GaussianKernel g;
        g.center = origin + h * Vec3d(i, j, k);
        g.opacity = 0.8;
        g.scale = Vec3d::Constant(0.6 * h);
        // Warm-to-cool along the beam with darker bands every four columns.
        const double along = static_cast<double>(i) / (nx - 1);
        const double band = (i / 4) % 2 == 0 ? 1.0 : 0.55;
        const Vec3d rgb = band * Vec3d(0.95 - 0.7 * along, 0.35 + 0.3 * (j % 2), 0.25 + 0.7 * along);
        g.sh[0] = (rgb - Vec3d::Constant(0.5)) / render::sh_const::C0;
        s.scene.kernels.push_back(g);
      }
    }
  }
  s.scene.recompute_bounds();
  return s;
}

/// Elastic ball dropped onto a sticky ground plane.
inline SceneSetup dropball(int frame_count = 16, int image_size = 48) {
  SceneSetup s;
  SimConfig& c = s.config;
  c.grid_resolution = 32;
  c.frame_count = frame_count;
  c.image_height = c.image_width = image_size;
  c.boundary = Boundary{BoundaryType::StickyGround, 0.1};
  c.initial_velocity.kind = InitialVelocity::Kind::Translate;
  c.initial_velocity.velocity = Vec3d(0.0, -3.0, 0.0);
  c.camera_path = {CameraPose{Vec3d(0.5, 0.35, 1.6), Vec3d(0.5, 0.35, 0.5), Vec3d::UnitY(), 40.0}};

  const double h = c.dx() / 2.0;
  const Vec3d center(0.5, 0.32, 0.5);
  const double radius = 0.12;
  const int n = static_cast<int>(std::ceil(radius / h));
  for (int i = -n; i <= n; ++i) {
    for (int j = -n; j <= n; ++j) {
      for (int k = -n; k <= n; ++k) {
        const Vec3d off = h * Vec3d(i + 0.5, j + 0.5, k + 0.5);
        if (off.norm() > radius) continue;
        GaussianKernel g;
        g.center = center + off;
        g.opacity = 0.8;
        g.scale = Vec3d::Constant(0.6 * h);
        const double shade = 0.5 + 0.5 * std::sin(6.0 * off.y() / radius);
        const Vec3d rgb(0.2 + 0.7 * shade, 0.3, 0.9 - 0.6 * shade);
        g.sh[0] = (rgb - Vec3d::Constant(0.5)) / render::sh_const::C0;
        s.scene.kernels.push_back(g);
      }
    }
  }
  s.scene.recompute_bounds();
  return s;
}

inline SceneSetup by_name(const std::string& name, int frame_count, int image_size = 48) {
  if (name == "cantilever") return cantilever(frame_count, image_size);
  if (name == "dropball") return dropball(frame_count, image_size);
  raise(ErrorKind::Schema, "unknown scene '" + name + "' (expected cantilever or dropball)");
}

// ---------------------------------------------------------------------------
// Metrics

template <typename Real>
double psnr(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size() || a.empty()) raise(ErrorKind::ShapeMismatch, "PSNR inputs differ in size");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  return mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

/// Mean and minimum of per-frame PSNR (peak 1).
template <typename Real>
std::pair<double, double> video_psnr(const render::Video<Real>& a, const render::Video<Real>& b) {
  if (!a.same_shape(b)) raise(ErrorKind::ShapeMismatch, "PSNR videos differ in shape");
  double sum = 0.0, worst = std::numeric_limits<double>::infinity();
  for (int t = 0; t < a.frames; ++t) {
    const double p = std::min(psnr<Real>(a.frame(t), b.frame(t)), 100.0);
    sum += p;
    worst = std::min(worst, p);
  }
  return {sum / a.frames, worst};
}

// ---------------------------------------------------------------------------
// Recovery experiment

enum class InitBias { Low, High };

/// Optimizer defaults for recovery runs: Adam lr 0.03.
inline optimize::OptimizerConfig recovery_optimizer() {
  optimize::OptimizerConfig c;
  c.adam.lr = 0.03;
  return c;
}

struct RecoveryOptions {
  std::string scene = "cantilever";
  double true_young = 1e6;
  InitBias bias = InitBias::Low;
  double low_log10 = 4.5;
  double high_log10 = 7.5;
  int frames_per_group = 16;
  optimize::OptimizerConfig optimizer = recovery_optimizer();
  field::FieldShape field_shape;
};

struct RecoveryResult {
  optimize::OptimizeResult opt;
  double recovered_log10 = 0.0;
  double abs_error = 0.0;
  double psnr_mean = 0.0;
  double psnr_min = 0.0;
  bool recovered = false;
  std::vector<float> checkpoint_params;  // final field parameters
};

/// Order of magnitude used to judge recovery: the nearest decade.
inline long magnitude(double log10_value) { return std::lround(log10_value); }

/// Renders reference frames at the true modulus, biases a fresh field to one
/// side, optimizes against the analytic oracle and reports the outcome.
/// `field_out`, when given, receives the final field.
inline RecoveryResult run_recovery(const RecoveryOptions& opt,
                                   const std::function<void(const optimize::IterationLog&)>& on_iteration = {},
                                   field::MaterialField<float>* field_out = nullptr) {
  const double lo = opt.field_shape.ranges.front().lo, hi = opt.field_shape.ranges.front().hi;
  const double true_log10 = std::log10(opt.true_young);
  if (!(true_log10 > lo && true_log10 < hi)) raise(ErrorKind::Range, "true Young's modulus outside the field range");

  const auto& oc = opt.optimizer;
  SceneSetup setup = by_name(opt.scene, oc.groups * opt.frames_per_group);
  const auto mode = oc.deterministic ? mpm::ReductionMode::Deterministic : mpm::ReductionMode::Fast;
  optimize::Pipeline<float> pipe(setup.scene, setup.config, oc.threads, mode);

  const std::vector<float> true_E(setup.scene.kernels.size(), static_cast<float>(opt.true_young));
  const auto ref_rollout = pipe.simulate(true_E, false);
  const render::Video<float> reference = pipe.render_all(ref_rollout);
  const render::Image<float> ref_anchor = pipe.render_anchor();
  auto backend = optimize::analytic_backend(reference, ref_anchor, oc.groups);

  field::MaterialField<float> field(opt.field_shape, setup.scene.padded_bounds());
  field.initialize(oc.seed);
  const auto& pts = pipe.rest_positions();
  field.update_normalization(pts, 1.0);
  field.bias_output(pts, 0, opt.bias == InitBias::Low ? opt.low_log10 : opt.high_log10);

  optimize::Trainer<float> trainer(pipe, field, backend, guidance::Condition::none(), oc);
  RecoveryResult res;
  res.opt = trainer.run(on_iteration);
  res.recovered_log10 = optimize::mean_log10<double>(res.opt.final_young);
  res.abs_error = std::abs(res.recovered_log10 - true_log10);
  res.recovered = magnitude(res.recovered_log10) == magnitude(true_log10);

  const auto final_rollout = pipe.simulate(field.eval_young(pts), false);
  const auto final_video = pipe.render_all(final_rollout);
  std::tie(res.psnr_mean, res.psnr_min) = video_psnr(final_video, reference);
  res.checkpoint_params = field.params();
  if (field_out) *field_out = field;
  return res;
}

}  // namespace dreamphys::scenarios
