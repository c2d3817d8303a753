#pragma once

// Simulate -> render -> frame-boosted motion distillation -> back-propagate
// through renderer, each frame's last substep and the material field ->
// Adam -> order-of-magnitude convergence check.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dreamphys/config.hpp"
#include "dreamphys/error.hpp"
#include "dreamphys/field.hpp"
#include "dreamphys/guidance.hpp"
#include "dreamphys/image_io.hpp"
#include "dreamphys/mpm.hpp"
#include "dreamphys/render.hpp"
#include "dreamphys/scene.hpp"

namespace dreamphys::optimize {

using guidance::Condition;
using guidance::Denoiser;
using render::Image;
using render::Video;

enum class GroupSchedule { Averaged, Alternating };
enum class ScoreKind { Mds, SdsT };

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerConfig {
  int groups = 5;
  int max_iterations = 60;
  AdamConfig adam;
  int convergence_window = 3;
  std::uint64_t seed = 0;
  bool deterministic = true;
  int threads = 1;
  GroupSchedule schedule = GroupSchedule::Averaged;
  ScoreKind score = ScoreKind::Mds;
  bool quantize_render = false;     // compare 8-bit rendered frames (references read from PNG)
  double normalization_blend = 0.1;  // running update of KAN input normalization per iteration
};

/// Frames 1..frame_count split into M equal-stride groups:
/// group i = {i, i+M, ..., i+M(T-1)} (1-based).
inline std::vector<std::vector<int>> split_groups(int frame_count, int groups) {
  if (groups < 1) raise(ErrorKind::Range, "group count must be >= 1");
  if (frame_count < 1 || frame_count % groups != 0) {
    raise(ErrorKind::NotDivisible, "frame count " + std::to_string(frame_count) + " is not divisible by " +
                                       std::to_string(groups));
  }
  const int T = frame_count / groups;
  std::vector<std::vector<int>> out(groups);
  for (int i = 1; i <= groups; ++i) {
    for (int j = 0; j < T; ++j) out[i - 1].push_back(i + groups * j);
  }
  return out;
}

/// True iff the last `window` entries (log10 of the parameter) share their
/// floor, i.e. the same order of magnitude.
inline bool check_convergence(std::span<const double> history_log10, int window = 3) {
  if (window < 1 || static_cast<int>(history_log10.size()) < window) return false;
  const double first = std::floor(history_log10[history_log10.size() - window]);
  for (std::size_t i = history_log10.size() - window; i < history_log10.size(); ++i) {
    if (!std::isfinite(history_log10[i]) || std::floor(history_log10[i]) != first) return false;
  }
  return true;
}

class Adam {
 public:
  explicit Adam(std::size_t n = 0) : m_(n, 0.0), v_(n, 0.0) {}

  template <typename Real>
  void step(std::vector<Real>& params, std::span<const Real> grad, const AdamConfig& c) {
    if (m_.size() != params.size() || grad.size() != params.size()) {
      raise(ErrorKind::ShapeMismatch, "Adam state does not match the parameters");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(c.beta1, t_), bc2 = 1.0 - std::pow(c.beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      m_[i] = c.beta1 * m_[i] + (1.0 - c.beta1) * g;
      v_[i] = c.beta2 * v_[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m_[i] / bc1, vhat = v_[i] / bc2;
      params[i] = static_cast<Real>(static_cast<double>(params[i]) - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
  int steps() const { return t_; }

 private:
  std::vector<double> m_, v_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Simulation and rendering of one scene

template <typename Real>
struct Rollout {
  std::vector<mpm::ParticleState<Real>> frames;  // state after frame 1..N
  std::vector<mpm::StepTape<Real>> tapes;        // input of each frame's last substep
};

/// Scene, config and engines bundled for repeated rollouts.
template <typename Real>
class Pipeline {
 public:
  Pipeline(Scene scene, SimConfig config, int threads = 1,
           mpm::ReductionMode mode = mpm::ReductionMode::Deterministic)
      : scene_(std::move(scene)),
        config_(std::move(config)),
        engine_(config_, threads, mode),
        renderer_(threads),
        rest_(render::splats_from_scene<Real>(scene_)) {
    config_.validate();
    for (const auto& k : scene_.kernels) rest_positions_.push_back(k.center);
    for (int f = 0; f < config_.frame_count; ++f) cameras_.push_back(render::camera_for_frame<Real>(config_, f));
  }

  const Scene& scene() const { return scene_; }
  const SimConfig& config() const { return config_; }
  const std::vector<Vec3d>& rest_positions() const { return rest_positions_; }
  const render::SplatState<Real>& rest_splats() const { return rest_; }
  mpm::Engine<Real>& engine() { return engine_; }
  render::Renderer<Real>& renderer() { return renderer_; }
  const render::Camera<Real>& camera(int frame) const { return cameras_.at(frame - 1); }

  Rollout<Real> simulate(std::span<const Real> young, bool record) {
    std::vector<double> E(young.begin(), young.end());
    mpm::ParticleState<Real> state = mpm::make_particles<Real>(scene_, config_, E);
    Rollout<Real> r;
    r.frames.reserve(config_.frame_count);
    for (int f = 0; f < config_.frame_count; ++f) {
      auto tape = engine_.simulate_frame(state, record);
      if (tape) r.tapes.push_back(std::move(*tape));
      r.frames.push_back(state);
    }
    return r;
  }

  render::SplatState<Real> splats(const mpm::ParticleState<Real>& s) const { return render::deform_splats(rest_, s); }

  /// Renders frame f (1-based) of a rollout.
  Image<Real> render_frame(const Rollout<Real>& r, int f, render::ForwardRecord<Real>* rec = nullptr) {
    return renderer_.render(splats(r.frames.at(f - 1)), camera(f), rec);
  }

  /// Renders the listed frames (1-based) as one video.
  Video<Real> render_frames(const Rollout<Real>& r, std::span<const int> frames,
                            std::vector<render::ForwardRecord<Real>>* records = nullptr) {
    Video<Real> v(static_cast<int>(frames.size()), config_.image_height, config_.image_width);
    if (records) records->assign(frames.size(), {});
    for (std::size_t i = 0; i < frames.size(); ++i) {
      v.set_frame(static_cast<int>(i), render_frame(r, frames[i], records ? &(*records)[i] : nullptr));
      v.camera_ids[i] = frames[i] - 1;
    }
    return v;
  }

  Video<Real> render_all(const Rollout<Real>& r) {
    std::vector<int> frames(config_.frame_count);
    for (int f = 0; f < config_.frame_count; ++f) frames[f] = f + 1;
    return render_frames(r, frames);
  }

  /// Rest state seen from the first camera pose.
  Image<Real> render_anchor() { return renderer_.render(rest_, render::camera_for_frame<Real>(config_, 0)); }

  /// dL/dE per particle from dL/d(rendered frame f), through the renderer and
  /// frame f's last substep. Accumulates into grad_young.
  void backward_frame(const Rollout<Real>& r, int f, const render::ForwardRecord<Real>& rec,
                      const Image<Real>& grad_image, std::span<Real> grad_young) {
    const auto g = renderer_.backward(grad_image, rec);
    const auto& out_state = r.frames.at(f - 1);
    mpm::StateCotangent<Real> cot;
    cot.x = g.center;
    cot.F.resize(out_state.size());
    for (std::size_t k = 0; k < out_state.size(); ++k) {
      cot.F[k] = mpm::kernel_deform_vjp(rest_.covariances[k], out_state.F[k], g.covariance[k]);
    }
    const auto gE = engine_.substep_backward(r.tapes.at(f - 1), cot);
    for (std::size_t k = 0; k < gE.size(); ++k) grad_young[k] += gE[k];
  }

 private:
  Scene scene_;
  SimConfig config_;
  mpm::Engine<Real> engine_;
  render::Renderer<Real> renderer_;
  render::SplatState<Real> rest_;
  std::vector<Vec3d> rest_positions_;
  std::vector<render::Camera<Real>> cameras_;
};

template <typename Real>
void quantize_video(Video<Real>& v) {
  for (auto& x : v.data) x = image_io::quantize(x);
}

template <typename Real>
double mean_log10(std::span<const Real> young) {
  double s = 0.0;
  for (Real e : young) s += std::log10(static_cast<double>(e));
  return young.empty() ? 0.0 : s / static_cast<double>(young.size());
}

/// log10 of the arithmetic mean; the quantity the convergence rule tracks.
template <typename Real>
double log10_mean(std::span<const Real> young) {
  double s = 0.0;
  for (Real e : young) s += static_cast<double>(e);
  return young.empty() ? 0.0 : std::log10(s / static_cast<double>(young.size()));
}

// ---------------------------------------------------------------------------
// Training loop

struct IterationLog {
  int k = 0;
  double mean_log10_E = 0.0;
  double log10_mean_E = 0.0;
  double score_norm = 0.0;
  double wall_ms = 0.0;
  int timestep = 0;
  bool nonfinite_gradient = false;
};

struct OptimizeResult {
  std::vector<IterationLog> log;
  std::vector<double> history;  // log10 of mean E after each iteration
  bool converged = false;
  int iterations = 0;
  double total_ms = 0.0;
  std::vector<double> final_young;
  std::vector<std::string> events;
};

template <typename Real>
class Trainer {
 public:
  Trainer(Pipeline<Real>& pipeline, field::MaterialField<Real>& field, Denoiser<Real>& backend, Condition cond,
          OptimizerConfig cfg)
      : pipe_(pipeline),
        field_(field),
        backend_(backend),
        cond_(std::move(cond)),
        cfg_(cfg),
        adam_(field.param_count()),
        rng_(cfg.seed),
        groups_(split_groups(pipeline.config().frame_count, cfg.groups)) {
    anchor_ = pipe_.render_anchor();
    if (cfg_.quantize_render) {
      for (auto& x : anchor_.data) x = image_io::quantize(x);
    }
  }

  const std::vector<std::vector<int>>& groups() const { return groups_; }
  const std::vector<double>& history() const { return history_; }
  const Image<Real>& anchor() const { return anchor_; }
  std::vector<std::string>& events() { return events_; }

  /// Field gradient of one iteration without updating anything. `group_ids`
  /// selects the groups; the result is their mean. Also returns the score
  /// norm via `score_norm`.
  std::vector<Real> gradient(std::span<const int> group_ids, int timestep, const Video<Real>& eps,
                             double* score_norm = nullptr) {
    const auto& pts = pipe_.rest_positions();
    typename field::MaterialField<Real>::Record frec;
    const std::vector<Real> young = field_.eval_young(pts, &frec);
    auto rollout = pipe_.simulate(young, true);

    guidance::DiffusionSchedule schedule;
    guidance::Query q;
    q.timestep = timestep;
    q.alpha_bar = schedule.alpha_bar(timestep);
    const double omega = schedule.omega(timestep);

    std::vector<Real> grad_young(young.size(), Real(0));
    double norm2 = 0.0;
    const Real scale = Real(1) / static_cast<Real>(group_ids.size());
    for (int g : group_ids) {
      std::vector<render::ForwardRecord<Real>> recs;
      Video<Real> V = pipe_.render_frames(rollout, groups_.at(g), &recs);
      if (cfg_.quantize_render) quantize_video(V);
      q.group = g;
      const Video<Real> score = cfg_.score == ScoreKind::Mds
                                    ? guidance::mds_score(V, anchor_, eps, q, backend_, cond_, omega)
                                    : guidance::sds_t_score(V, eps, q, backend_, cond_, omega);
      for (Real s : score.data) norm2 += static_cast<double>(s) * s;
      for (int t = 0; t < V.frames; ++t) {
        Image<Real> gimg = score.image(t);
        for (auto& x : gimg.data) x *= scale;
        pipe_.backward_frame(rollout, groups_[g][t], recs[t], gimg, grad_young);
      }
    }
    if (score_norm) *score_norm = std::sqrt(norm2);
    std::vector<Real> grad(field_.param_count(), Real(0));
    field_.backward_young(frec, young, grad_young, grad);
    return grad;
  }

  IterationLog iterate() {
    const auto t0 = std::chrono::steady_clock::now();
    const int k = static_cast<int>(history_.size()) + 1;
    field_.update_normalization(pipe_.rest_positions(), cfg_.normalization_blend);

    guidance::DiffusionSchedule schedule;
    const int timestep = schedule.sample_timestep(rng_);
    const auto& cfg = pipe_.config();
    const Video<Real> eps = guidance::gaussian_noise<Real>(cfg.frame_count / cfg_.groups, cfg.image_height,
                                                           cfg.image_width, rng_);
    std::vector<int> ids;
    if (cfg_.schedule == GroupSchedule::Averaged) {
      for (int g = 0; g < cfg_.groups; ++g) ids.push_back(g);
    } else {
      ids.push_back((k - 1) % cfg_.groups);
    }

    IterationLog log;
    log.k = k;
    log.timestep = timestep;
    std::vector<Real> grad = gradient(ids, timestep, eps, &log.score_norm);
    bool finite = true;
    for (Real g : grad) finite = finite && std::isfinite(static_cast<double>(g));
    if (!finite) {
      std::fill(grad.begin(), grad.end(), Real(0));
      log.nonfinite_gradient = true;
      events_.push_back("iteration " + std::to_string(k) + ": non-finite gradient replaced by zero");
    }
    adam_.step(field_.mutable_params(), std::span<const Real>(grad), cfg_.adam);

    const std::vector<Real> young = field_.eval_young(pipe_.rest_positions());
    log.mean_log10_E = mean_log10<Real>(young);
    log.log10_mean_E = log10_mean<Real>(young);
    history_.push_back(log.log10_mean_E);
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return log;
  }

  OptimizeResult run(const std::function<void(const IterationLog&)>& on_iteration = {}) {
    OptimizeResult res;
    const auto t0 = std::chrono::steady_clock::now();
    while (static_cast<int>(history_.size()) < cfg_.max_iterations) {
      const IterationLog log = iterate();
      res.log.push_back(log);
      if (on_iteration) on_iteration(log);
      if (check_convergence(history_, cfg_.convergence_window)) {
        res.converged = true;
        break;
      }
    }
    res.history = history_;
    res.iterations = static_cast<int>(history_.size());
    res.total_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const std::vector<Real> young = field_.eval_young(pipe_.rest_positions());
    res.final_young.assign(young.begin(), young.end());
    res.events = events_;
    return res;
  }

 private:
  Pipeline<Real>& pipe_;
  field::MaterialField<Real>& field_;
  Denoiser<Real>& backend_;
  Condition cond_;
  OptimizerConfig cfg_;
  Adam adam_;
  std::mt19937_64 rng_;
  std::vector<std::vector<int>> groups_;
  Image<Real> anchor_;
  std::vector<double> history_;
  std::vector<std::string> events_;
};

/// Analytic oracle whose per-group references come from a full reference
/// video (frames 1..N in order) and its first-frame anchor.
template <typename Real>
guidance::AnalyticDenoiser<Real> analytic_backend(const Video<Real>& reference, const Image<Real>& reference_anchor,
                                                  int groups) {
  const auto split = split_groups(reference.frames, groups);
  std::vector<Video<Real>> refs;
  for (const auto& g : split) {
    Video<Real> v(static_cast<int>(g.size()), reference.height, reference.width);
    for (std::size_t t = 0; t < g.size(); ++t) {
      v.set_frame(static_cast<int>(t), reference.image(g[t] - 1));
      v.camera_ids[t] = g[t] - 1;
    }
    refs.push_back(std::move(v));
  }
  return guidance::AnalyticDenoiser<Real>(std::move(refs), reference_anchor);
}

}  // namespace dreamphys::optimize
