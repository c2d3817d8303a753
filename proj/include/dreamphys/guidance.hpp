#pragma once

// Diffusion schedule, noise injection, denoiser backends, and the motion
// distillation (MDS) and temporal SDS scores.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dreamphys/error.hpp"
#include "dreamphys/render.hpp"

namespace dreamphys::guidance {

using render::Image;
using render::Video;

/// Linear DDPM schedule: beta from 1e-4 to 2e-2 over N steps.
class DiffusionSchedule {
 public:
  explicit DiffusionSchedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2) {
    if (steps < 2) raise(ErrorKind::Range, "schedule needs at least 2 steps");
    alpha_bar_.resize(steps);
    double prod = 1.0;
    for (int i = 0; i < steps; ++i) {
      const double beta = beta_start + (beta_end - beta_start) * i / (steps - 1);
      prod *= 1.0 - beta;
      alpha_bar_[i] = prod;
    }
  }

  int steps() const { return static_cast<int>(alpha_bar_.size()); }
  double alpha_bar(int mu) const {
    if (mu < 0 || mu >= steps()) raise(ErrorKind::Range, "timestep outside the schedule");
    return alpha_bar_[mu];
  }
  /// SDS weighting w(mu) = 1 - alpha_bar(mu).
  double omega(int mu) const { return 1.0 - alpha_bar(mu); }
  int min_timestep() const { return static_cast<int>(std::lround(0.02 * steps())); }
  int max_timestep() const { return static_cast<int>(std::lround(0.98 * steps())); }

  template <typename Rng>
  int sample_timestep(Rng& rng) const {
    std::uniform_int_distribution<int> dist(min_timestep(), max_timestep());
    return dist(rng);
  }

 private:
  std::vector<double> alpha_bar_;
};

template <typename Real, typename Rng>
Video<Real> gaussian_noise(int frames, int height, int width, Rng& rng) {
  Video<Real> eps(frames, height, width);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : eps.data) v = static_cast<Real>(normal(rng));
  return eps;
}

/// V_t = sqrt(a) V + sqrt(1 - a) eps, a = alpha_bar.
template <typename Real>
Video<Real> add_noise(const Video<Real>& V, const Video<Real>& eps, double alpha_bar) {
  if (!V.same_shape(eps)) raise(ErrorKind::ShapeMismatch, "noise and video shapes differ");
  const Real a = static_cast<Real>(std::sqrt(alpha_bar)), b = static_cast<Real>(std::sqrt(1.0 - alpha_bar));
  Video<Real> out = V;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * V.data[i] + b * eps.data[i];
  return out;
}

/// Exact noise prediction for a prior concentrated at `reference`.
template <typename Real>
Video<Real> analytic_denoise(const Video<Real>& Vt, double alpha_bar, const Video<Real>& reference) {
  if (!Vt.same_shape(reference)) raise(ErrorKind::ShapeMismatch, "reference and query shapes differ");
  const Real a = static_cast<Real>(std::sqrt(alpha_bar));
  const Real inv_b = static_cast<Real>(1.0 / std::sqrt(1.0 - alpha_bar));
  Video<Real> out = Vt;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = (Vt.data[i] - a * reference.data[i]) * inv_b;
  return out;
}

/// Video made of `frame` repeated `frames` times.
template <typename Real>
Video<Real> repeat_frame(const Image<Real>& frame, int frames) {
  Video<Real> v(frames, frame.height, frame.width);
  for (int t = 0; t < frames; ++t) v.set_frame(t, frame);
  return v;
}

// ---------------------------------------------------------------------------
// Conditions and backends

struct Condition {
  enum class Kind { None, Text, Image };
  Kind kind = Kind::None;
  std::string text;
  Image<float> image;

  static Condition none() { return {}; }
  static Condition from_text(std::string t) {
    Condition c;
    c.kind = Kind::Text;
    c.text = std::move(t);
    return c;
  }
  static Condition from_image(Image<float> img) {
    Condition c;
    c.kind = Kind::Image;
    c.image = std::move(img);
    return c;
  }
};

inline std::string to_string(Condition::Kind k) {
  switch (k) {
    case Condition::Kind::Text: return "text";
    case Condition::Kind::Image: return "image";
    case Condition::Kind::None: break;
  }
  return "none";
}

/// Which video a denoiser call is about: the rendered motion group or the
/// repeated first-frame anchor. Only the analytic oracle uses it.
struct Query {
  int group = 0;
  bool anchor = false;
  int timestep = 0;
  double alpha_bar = 1.0;
};

template <typename Real>
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Video<Real> denoise(const Video<Real>& Vt, const Query& q, const Condition& cond) = 0;

  /// eps_hat(add_noise(V, eps)). Backends that can evaluate this without
  /// forming V_t override it.
  virtual Video<Real> denoise_clean(const Video<Real>& V, const Video<Real>& eps, const Query& q,
                                    const Condition& cond) {
    return denoise(add_noise(V, eps, q.alpha_bar), q, cond);
  }
};

/// Point-mass prior per group: motion queries use the group's reference
/// video, anchor queries its first frame repeated.
template <typename Real>
class AnalyticDenoiser : public Denoiser<Real> {
 public:
  AnalyticDenoiser(std::vector<Video<Real>> references, Image<Real> reference_first_frame)
      : refs_(std::move(references)), first_(std::move(reference_first_frame)) {}

  Video<Real> denoise(const Video<Real>& Vt, const Query& q, const Condition&) override {
    if (q.group < 0 || q.group >= static_cast<int>(refs_.size())) raise(ErrorKind::ShapeMismatch, "no such group");
    if (q.anchor) return analytic_denoise(Vt, q.alpha_bar, repeat_frame(first_, Vt.frames));
    return analytic_denoise(Vt, q.alpha_bar, refs_[q.group]);
  }

  /// Same value as denoise(add_noise(V, eps)) written as
  /// eps + sqrt(a)/sqrt(1-a) (V - ref), which is exactly eps when V == ref.
  Video<Real> denoise_clean(const Video<Real>& V, const Video<Real>& eps, const Query& q, const Condition&) override {
    if (q.group < 0 || q.group >= static_cast<int>(refs_.size())) raise(ErrorKind::ShapeMismatch, "no such group");
    const Video<Real> ref = q.anchor ? repeat_frame(first_, V.frames) : refs_[q.group];
    if (!V.same_shape(ref) || !V.same_shape(eps)) raise(ErrorKind::ShapeMismatch, "reference and query shapes differ");
    const Real k = static_cast<Real>(std::sqrt(q.alpha_bar) / std::sqrt(1.0 - q.alpha_bar));
    Video<Real> out = eps;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = eps.data[i] + k * (V.data[i] - ref.data[i]);
    return out;
  }

  const std::vector<Video<Real>>& references() const { return refs_; }

 private:
  std::vector<Video<Real>> refs_;
  Image<Real> first_;
};

// ---------------------------------------------------------------------------
// Scores

/// w * (eps_hat(V_t) - eps_hat(V0_t)), V0 = first frame repeated, both noised
/// with the same eps.
template <typename Real>
Video<Real> mds_score(const Video<Real>& V, const Image<Real>& first_frame, const Video<Real>& eps, const Query& q,
                      Denoiser<Real>& backend, const Condition& cond, double omega) {
  if (!V.same_shape(eps)) raise(ErrorKind::ShapeMismatch, "noise and video shapes differ");
  Video<Real> score(V.frames, V.height, V.width);
  score.camera_ids = V.camera_ids;
  if (omega == 0.0) return score;
  const Video<Real> anchor = repeat_frame(first_frame, V.frames);
  Query motion_q = q, anchor_q = q;
  motion_q.anchor = false;
  anchor_q.anchor = true;
  const Video<Real> e_motion = backend.denoise_clean(V, eps, motion_q, cond);
  const Video<Real> e_anchor = backend.denoise_clean(anchor, eps, anchor_q, cond);
  if (!e_motion.same_shape(V) || !e_anchor.same_shape(V)) raise(ErrorKind::ShapeMismatch, "denoiser output shape");
  const Real w = static_cast<Real>(omega);
  for (std::size_t i = 0; i < score.data.size(); ++i) score.data[i] = w * (e_motion.data[i] - e_anchor.data[i]);
  return score;
}

/// w * (eps_hat(V_t) - eps).
template <typename Real>
Video<Real> sds_t_score(const Video<Real>& V, const Video<Real>& eps, const Query& q, Denoiser<Real>& backend,
                        const Condition& cond, double omega) {
  if (!V.same_shape(eps)) raise(ErrorKind::ShapeMismatch, "noise and video shapes differ");
  Video<Real> score(V.frames, V.height, V.width);
  score.camera_ids = V.camera_ids;
  if (omega == 0.0) return score;
  Query motion_q = q;
  motion_q.anchor = false;
  const Video<Real> e = backend.denoise_clean(V, eps, motion_q, cond);
  if (!e.same_shape(V)) raise(ErrorKind::ShapeMismatch, "denoiser output shape");
  const Real w = static_cast<Real>(omega);
  for (std::size_t i = 0; i < score.data.size(); ++i) score.data[i] = w * (e.data[i] - eps.data[i]);
  return score;
}

}  // namespace dreamphys::guidance
