#pragma once

// Differentiable Gaussian splat rasterizer: perspective projection with a
// 0.3 px^2 low-pass, global front-to-back sort, per-pixel alpha compositing.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "dreamphys/config.hpp"
#include "dreamphys/error.hpp"
#include "dreamphys/math.hpp"
#include "dreamphys/mpm.hpp"
#include "dreamphys/parallel.hpp"
#include "dreamphys/scene.hpp"

namespace dreamphys::render {

inline constexpr double kNearPlane = 0.01;
inline constexpr double kLowPass = 0.3;
inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kMinAlpha = 1.0 / 255.0;
inline constexpr double kMinTransmittance = 1e-4;

// ---------------------------------------------------------------------------
// Images and videos

template <typename Real>
struct Image {
  int height = 0;
  int width = 0;
  std::vector<Real> data;  // row-major RGB

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, Real(0)) {}

  Real& at(int i, int j, int c) { return data[(static_cast<std::size_t>(i) * width + j) * 3 + c]; }
  Real at(int i, int j, int c) const { return data[(static_cast<std::size_t>(i) * width + j) * 3 + c]; }
};

/// T x H x W x 3 frame stack, frame-major then row-major RGB.
template <typename Real>
struct Video {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<Real> data;
  std::vector<int> camera_ids;

  Video() = default;
  Video(int t, int h, int w)
      : frames(t), height(h), width(w), data(static_cast<std::size_t>(t) * h * w * 3, Real(0)), camera_ids(t, 0) {}

  std::size_t frame_size() const { return static_cast<std::size_t>(height) * width * 3; }
  std::span<Real> frame(int t) { return {data.data() + t * frame_size(), frame_size()}; }
  std::span<const Real> frame(int t) const { return {data.data() + t * frame_size(), frame_size()}; }
  std::array<int, 4> shape() const { return {frames, height, width, 3}; }
  bool same_shape(const Video& o) const { return frames == o.frames && height == o.height && width == o.width; }

  Image<Real> image(int t) const {
    Image<Real> img(height, width);
    std::copy(frame(t).begin(), frame(t).end(), img.data.begin());
    return img;
  }
  void set_frame(int t, const Image<Real>& img) {
    if (img.height != height || img.width != width) raise(ErrorKind::ShapeMismatch, "frame size mismatch");
    std::copy(img.data.begin(), img.data.end(), frame(t).begin());
  }
};

// ---------------------------------------------------------------------------
// Camera

/// World-to-camera rigid transform; camera x right, y down, z forward.
template <typename Real>
struct Camera {
  Mat3<Real> rotation = Mat3<Real>::Identity();
  Vec3<Real> translation = Vec3<Real>::Zero();
  Real fov_y = Real(0.6981317007977318);  // radians
  int height = 64;
  int width = 64;

  Real focal() const { return Real(0.5) * Real(height) / std::tan(Real(0.5) * fov_y); }
  Real cx() const { return Real(0.5) * Real(width); }
  Real cy() const { return Real(0.5) * Real(height); }
  Vec3<Real> position() const { return -rotation.transpose() * translation; }

  static Camera look_at(const Vec3d& eye, const Vec3d& target, const Vec3d& up, double fov_y_deg, int h, int w) {
    const Vec3d z = (target - eye).normalized();
    Vec3d x = z.cross(up);
    if (x.norm() < 1e-12) raise(ErrorKind::Range, "camera up vector is parallel to the view direction");
    x.normalize();
    const Vec3d y = z.cross(x);
    Mat3d R;
    R.row(0) = x.transpose();
    R.row(1) = y.transpose();
    R.row(2) = z.transpose();
    const double fov = fov_y_deg * M_PI / 180.0;
    if (!(fov > 0.0 && fov < M_PI)) raise(ErrorKind::Range, "fov must be in (0, 180) degrees");
    Camera c;
    c.rotation = R.cast<Real>();
    c.translation = (-R * eye).cast<Real>();
    c.fov_y = static_cast<Real>(fov);
    c.height = h;
    c.width = w;
    return c;
  }

  static Camera from_pose(const CameraPose& pose, int h, int w) {
    return look_at(pose.eye, pose.target, pose.up, pose.fov_y_deg, h, w);
  }
};

template <typename Real>
Camera<Real> camera_for_frame(const SimConfig& config, int frame) {
  return Camera<Real>::from_pose(config.camera_for_frame(frame), config.image_height, config.image_width);
}

// ---------------------------------------------------------------------------
// Kernel states

/// Renderable kernel set (possibly deformed). SH stored kernel-major,
/// (degree+1)^2 RGB triples per kernel.
template <typename Real>
struct SplatState {
  std::vector<Vec3<Real>> centers;
  std::vector<Mat3<Real>> covariances;
  std::vector<Mat3<Real>> rotations;
  std::vector<Real> opacities;
  int sh_degree = 0;
  std::vector<Vec3<Real>> sh;

  std::size_t size() const { return centers.size(); }
  int sh_count() const { return sh_coefficient_count(sh_degree); }
  std::span<const Vec3<Real>> sh_of(std::size_t k) const {
    return {sh.data() + k * static_cast<std::size_t>(sh_count()), static_cast<std::size_t>(sh_count())};
  }
};

template <typename Real>
SplatState<Real> splats_from_scene(const Scene& scene) {
  SplatState<Real> s;
  s.sh_degree = scene.sh_degree;
  for (const auto& k : scene.kernels) {
    s.centers.push_back(k.center.cast<Real>());
    s.covariances.push_back(k.covariance().cast<Real>());
    s.rotations.push_back(Mat3<Real>::Identity());
    s.opacities.push_back(static_cast<Real>(k.opacity));
    for (int i = 0; i < sh_coefficient_count(scene.sh_degree); ++i) s.sh.push_back(k.sh[i].cast<Real>());
  }
  return s;
}

/// Applies each particle's x and F to its rest kernel.
template <typename Real>
SplatState<Real> deform_splats(const SplatState<Real>& rest, const mpm::ParticleState<Real>& particles) {
  if (rest.size() != particles.size()) raise(ErrorKind::ShapeMismatch, "kernel and particle counts differ");
  SplatState<Real> out = rest;
  for (std::size_t k = 0; k < rest.size(); ++k) {
    const auto d = mpm::kernel_deform(rest.covariances[k], particles.x[k], particles.F[k]);
    out.centers[k] = d.center;
    out.covariances[k] = d.covariance;
    out.rotations[k] = d.rotation;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spherical harmonics

namespace sh_const {
inline constexpr double C0 = 0.28209479177387814;
inline constexpr double C1 = 0.4886025119029199;
inline constexpr double C2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
                                 0.5462742152960396};
inline constexpr double C3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
                                 -0.4570457994644658, 1.445305721320277, -0.5900435899266435};
}  // namespace sh_const

/// Real SH color in the 3DGS convention. The view direction is expressed in
/// the kernel's rest frame by R^T before evaluation.
template <typename Real>
Vec3<Real> eval_color(std::span<const Vec3<Real>> sh, const Vec3<Real>& view_dir, const Mat3<Real>& R) {
  using namespace sh_const;
  Vec3<Real> c = Real(C0) * sh[0];
  if (sh.size() > 1) {
    const Vec3<Real> d = (R.transpose() * view_dir).normalized();
    const Real x = d.x(), y = d.y(), z = d.z();
    c += -Real(C1) * y * sh[1] + Real(C1) * z * sh[2] - Real(C1) * x * sh[3];
    if (sh.size() > 4) {
      const Real xx = x * x, yy = y * y, zz = z * z, xy = x * y, yz = y * z, xz = x * z;
      c += Real(C2[0]) * xy * sh[4] + Real(C2[1]) * yz * sh[5] + Real(C2[2]) * (Real(2) * zz - xx - yy) * sh[6] +
           Real(C2[3]) * xz * sh[7] + Real(C2[4]) * (xx - yy) * sh[8];
      if (sh.size() > 9) {
        c += Real(C3[0]) * y * (Real(3) * xx - yy) * sh[9] + Real(C3[1]) * xy * z * sh[10] +
             Real(C3[2]) * y * (Real(4) * zz - xx - yy) * sh[11] +
             Real(C3[3]) * z * (Real(2) * zz - Real(3) * xx - Real(3) * yy) * sh[12] +
             Real(C3[4]) * x * (Real(4) * zz - xx - yy) * sh[13] + Real(C3[5]) * z * (xx - yy) * sh[14] +
             Real(C3[6]) * x * (xx - Real(3) * yy) * sh[15];
      }
    }
  }
  c.array() += Real(0.5);
  return c.cwiseMax(Real(0)).cwiseMin(Real(1));
}

// ---------------------------------------------------------------------------
// Projection

template <typename Real>
struct Projection {
  Vec2<Real> mean;     // pixels
  Mat2<Real> cov;      // pixels^2, low-pass included
  Real depth;
  Vec3<Real> p_cam;
  Eigen::Matrix<Real, 2, 3> J;
};

template <typename Real>
bool try_project(const Vec3<Real>& center, const Mat3<Real>& cov, const Camera<Real>& cam, Projection<Real>& out) {
  const Vec3<Real> p = cam.rotation * center + cam.translation;
  if (!(p.z() > Real(kNearPlane))) return false;
  const Real f = cam.focal();
  const Real iz = Real(1) / p.z();
  out.p_cam = p;
  out.depth = p.z();
  out.mean = Vec2<Real>(f * p.x() * iz + cam.cx(), f * p.y() * iz + cam.cy());
  out.J << f * iz, Real(0), -f * p.x() * iz * iz, Real(0), f * iz, -f * p.y() * iz * iz;
  const Eigen::Matrix<Real, 2, 3> JW = out.J * cam.rotation;
  out.cov = JW * cov * JW.transpose();
  out.cov(0, 0) += Real(kLowPass);
  out.cov(1, 1) += Real(kLowPass);
  return true;
}

template <typename Real>
Projection<Real> project(const Vec3<Real>& center, const Mat3<Real>& cov, const Camera<Real>& cam) {
  Projection<Real> out;
  if (!try_project(center, cov, cam, out)) raise(ErrorKind::BehindCamera, "kernel is behind the near plane");
  return out;
}

template <typename Real>
Mat2<Real> inverse2(const Mat2<Real>& m) {
  const Real det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  Mat2<Real> inv;
  inv << m(1, 1), -m(0, 1), -m(1, 0), m(0, 0);
  return inv / det;
}

/// alpha before the skip test: min(0.99, opacity * exp(-d^T A d / 2)).
template <typename Real>
Real splat_alpha(Real opacity, const Mat2<Real>& conic, const Vec2<Real>& d) {
  const Real power = Real(-0.5) * d.dot(conic * d);
  return std::min(Real(kMaxAlpha), opacity * std::exp(power));
}

// ---------------------------------------------------------------------------
// Forward

struct Contribution {
  std::uint32_t kernel;
  float alpha;
};

/// Everything render_backward needs. Tied to one render call by its
/// fingerprint of the kernel inputs.
template <typename Real>
struct ForwardRecord {
  Camera<Real> camera;
  std::size_t kernel_count = 0;
  std::uint64_t fingerprint = 0;
  std::vector<std::uint8_t> visible;
  std::vector<Projection<Real>> proj;
  std::vector<Mat3<Real>> covariance;
  std::vector<Mat2<Real>> conic;
  std::vector<Vec3<Real>> color;
  std::vector<Real> opacity;
  std::vector<std::vector<std::uint32_t>> pixel_kernels;  // sorted front to back, alpha >= 1/255 only
  std::vector<Real> final_transmittance;
};

template <typename Real>
std::uint64_t fingerprint(const SplatState<Real>& s) {
  // FNV-1a over the geometric inputs.
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  const std::size_t n = s.size();
  mix(&n, sizeof(n));
  if (n) {
    mix(s.centers.data(), n * sizeof(s.centers[0]));
    mix(s.covariances.data(), n * sizeof(s.covariances[0]));
    mix(s.opacities.data(), n * sizeof(s.opacities[0]));
  }
  return h;
}

template <typename Real>
class Renderer {
 public:
  explicit Renderer(int threads = 1) : pool_(std::make_unique<ThreadPool>(threads)) {}

  Image<Real> render(const SplatState<Real>& s, const Camera<Real>& cam, ForwardRecord<Real>* record = nullptr) {
    ForwardRecord<Real> local;
    ForwardRecord<Real>& rec = record ? *record : local;
    prepare(s, cam, rec);

    const int H = cam.height, W = cam.width;
    Image<Real> img(H, W);
    const std::size_t pixels = static_cast<std::size_t>(H) * W;
    rec.final_transmittance.assign(pixels, Real(1));

    // Bin kernels into pixels in depth order.
    std::vector<std::uint32_t> order;
    order.reserve(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (rec.visible[k]) order.push_back(static_cast<std::uint32_t>(k));
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return rec.proj[a].depth < rec.proj[b].depth; });
    std::vector<std::vector<std::uint32_t>> bins(pixels);
    for (std::uint32_t k : order) {
      const auto box = pixel_box(rec, k, H, W);
      for (int i = box[1]; i <= box[3]; ++i) {
        for (int j = box[0]; j <= box[2]; ++j) bins[static_cast<std::size_t>(i) * W + j].push_back(k);
      }
    }

    rec.pixel_kernels.assign(pixels, {});
    const int chunks = std::min(pool_->size(), H);
    pool_->run(chunks, [&](int c) {
      for (int i = H * c / chunks; i < H * (c + 1) / chunks; ++i) {
        for (int j = 0; j < W; ++j) {
          const std::size_t px = static_cast<std::size_t>(i) * W + j;
          Real T = Real(1);
          Vec3<Real> acc = Vec3<Real>::Zero();
          auto& used = rec.pixel_kernels[px];
          for (std::uint32_t k : bins[px]) {
            const Vec2<Real> d = Vec2<Real>(Real(j), Real(i)) - rec.proj[k].mean;
            const Real alpha = splat_alpha(rec.opacity[k], rec.conic[k], d);
            if (alpha < Real(kMinAlpha)) continue;
            const Real next_T = T * (Real(1) - alpha);
            if (next_T < Real(kMinTransmittance)) break;
            acc += rec.color[k] * (alpha * T);
            T = next_T;
            used.push_back(k);
          }
          rec.final_transmittance[px] = T;
          for (int ch = 0; ch < 3; ++ch) img.at(i, j, ch) = acc[ch];
        }
      }
    });
    return img;
  }

  /// Per-kernel dL/dcenter and dL/dcovariance for the record's render call.
  struct Gradients {
    std::vector<Vec3<Real>> center;
    std::vector<Mat3<Real>> covariance;
  };

  Gradients backward(const Image<Real>& grad, const ForwardRecord<Real>& rec) {
    const int H = rec.camera.height, W = rec.camera.width;
    if (grad.height != H || grad.width != W || rec.pixel_kernels.size() != static_cast<std::size_t>(H) * W) {
      raise(ErrorKind::StaleRecord, "gradient image does not match the forward record");
    }
    const std::size_t n = rec.kernel_count;
    const int chunks = std::min(pool_->size(), H);
    // Per-chunk 2D gradients merged in chunk order.
    std::vector<std::vector<Vec2<Real>>> g_mean(chunks, std::vector<Vec2<Real>>(n, Vec2<Real>::Zero()));
    std::vector<std::vector<Mat2<Real>>> g_conic(chunks, std::vector<Mat2<Real>>(n, Mat2<Real>::Zero()));
    pool_->run(chunks, [&](int c) {
      auto& gm = g_mean[c];
      auto& ga = g_conic[c];
      for (int i = H * c / chunks; i < H * (c + 1) / chunks; ++i) {
        for (int j = 0; j < W; ++j) {
          const std::size_t px = static_cast<std::size_t>(i) * W + j;
          const Vec3<Real> g(grad.at(i, j, 0), grad.at(i, j, 1), grad.at(i, j, 2));
          if (g.isZero()) continue;
          const auto& used = rec.pixel_kernels[px];
          Real T = rec.final_transmittance[px];
          Vec3<Real> behind = Vec3<Real>::Zero();  // color accumulated behind the current kernel, / T
          for (std::size_t u = used.size(); u-- > 0;) {
            const std::uint32_t k = used[u];
            const Vec2<Real> d = Vec2<Real>(Real(j), Real(i)) - rec.proj[k].mean;
            const Real power = Real(-0.5) * d.dot(rec.conic[k] * d);
            const Real raw = rec.opacity[k] * std::exp(power);
            const Real alpha = std::min(Real(kMaxAlpha), raw);
            T /= (Real(1) - alpha);  // transmittance in front of k
            // C = ... + T c_k alpha + T (1 - alpha) behind
            const Real dL_dalpha = T * g.dot(rec.color[k] - behind);
            behind = alpha * rec.color[k] + (Real(1) - alpha) * behind;
            if (raw >= Real(kMaxAlpha)) continue;
            const Real dL_dpower = dL_dalpha * alpha;
            // power = -1/2 d^T A d, d = pixel - mean
            gm[k] += dL_dpower * Vec2<Real>(rec.conic[k] * d + rec.conic[k].transpose() * d) * Real(0.5);
            ga[k] += Real(-0.5) * dL_dpower * d * d.transpose();
          }
        }
      }
    });

    Gradients out;
    out.center.assign(n, Vec3<Real>::Zero());
    out.covariance.assign(n, Mat3<Real>::Zero());
    const Mat3<Real>& W3 = rec.camera.rotation;
    const Real f = rec.camera.focal();
    for (std::size_t k = 0; k < n; ++k) {
      if (!rec.visible[k]) continue;
      Vec2<Real> gmean = Vec2<Real>::Zero();
      Mat2<Real> gA = Mat2<Real>::Zero();
      for (int c = 0; c < chunks; ++c) {
        gmean += g_mean[c][k];
        gA += g_conic[c][k];
      }
      if (gmean.isZero() && gA.isZero()) continue;
      const auto& pr = rec.proj[k];
      const Mat2<Real>& A = rec.conic[k];
      // A = cov^-1
      const Mat2<Real> gcov = -A.transpose() * gA * A.transpose();
      const Mat3<Real> M = W3 * rec.covariance[k] * W3.transpose();
      out.covariance[k] = W3.transpose() * pr.J.transpose() * gcov * pr.J * W3;
      const Eigen::Matrix<Real, 2, 3> gJ = gcov * pr.J * M.transpose() + gcov.transpose() * pr.J * M;

      const Real x = pr.p_cam.x(), y = pr.p_cam.y(), z = pr.p_cam.z();
      const Real iz = Real(1) / z, iz2 = iz * iz, iz3 = iz2 * iz;
      Vec3<Real> gp;
      gp.x() = gmean.x() * f * iz + gJ(0, 2) * (-f * iz2);
      gp.y() = gmean.y() * f * iz + gJ(1, 2) * (-f * iz2);
      gp.z() = gmean.x() * (-f * x * iz2) + gmean.y() * (-f * y * iz2) + (gJ(0, 0) + gJ(1, 1)) * (-f * iz2) +
               gJ(0, 2) * (Real(2) * f * x * iz3) + gJ(1, 2) * (Real(2) * f * y * iz3);
      out.center[k] = W3.transpose() * gp;
    }
    return out;
  }

  /// Same as backward() but first checks that `s` is the state the record
  /// was made from.
  Gradients backward(const Image<Real>& grad, const ForwardRecord<Real>& rec, const SplatState<Real>& s) {
    if (fingerprint(s) != rec.fingerprint || s.size() != rec.kernel_count) {
      raise(ErrorKind::StaleRecord, "kernel states changed since the forward pass");
    }
    return backward(grad, rec);
  }

 private:
  void prepare(const SplatState<Real>& s, const Camera<Real>& cam, ForwardRecord<Real>& rec) {
    const std::size_t n = s.size();
    if (s.covariances.size() != n || s.opacities.size() != n || s.rotations.size() != n ||
        s.sh.size() != n * static_cast<std::size_t>(s.sh_count())) {
      raise(ErrorKind::ShapeMismatch, "splat state arrays have inconsistent sizes");
    }
    rec.camera = cam;
    rec.kernel_count = n;
    rec.fingerprint = fingerprint(s);
    rec.visible.assign(n, 0);
    rec.proj.assign(n, Projection<Real>{});
    rec.conic.assign(n, Mat2<Real>::Zero());
    rec.color.assign(n, Vec3<Real>::Zero());
    rec.opacity.assign(n, Real(0));
    rec.covariance = s.covariances;
    const Vec3<Real> eye = cam.position();
    for (std::size_t k = 0; k < n; ++k) {
      if (!s.centers[k].allFinite() || !s.covariances[k].allFinite()) continue;
      if (!(s.opacities[k] >= Real(kMinAlpha))) continue;
      if (!try_project(s.centers[k], s.covariances[k], cam, rec.proj[k])) continue;
      const Mat2<Real>& cov = rec.proj[k].cov;
      const Real det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
      if (!(det > Real(0))) continue;
      rec.visible[k] = 1;
      rec.conic[k] = inverse2(cov);
      rec.opacity[k] = s.opacities[k];
      rec.color[k] = eval_color(s.sh_of(k), Vec3<Real>((s.centers[k] - eye).normalized()), s.rotations[k]);
    }
  }

  /// Inclusive pixel box {j0, i0, j1, i1} outside which alpha < 1/255.
  static std::array<int, 4> pixel_box(const ForwardRecord<Real>& rec, std::size_t k, int H, int W) {
    const Mat2<Real>& cov = rec.proj[k].cov;
    const Real a = cov(0, 0), c = cov(1, 1), b = Real(0.5) * (cov(0, 1) + cov(1, 0));
    const Real lambda_max = Real(0.5) * (a + c) + std::sqrt(Real(0.25) * (a - c) * (a - c) + b * b);
    const Real reach = Real(2) * std::log(Real(255) * rec.opacity[k]);
    const Real r = std::sqrt(std::max(Real(0), reach) * lambda_max) + Real(1);
    const Vec2<Real>& m = rec.proj[k].mean;
    auto clampi = [](Real v, int lo, int hi) {
      if (!(v > Real(lo))) return lo;
      if (!(v < Real(hi))) return hi;
      return static_cast<int>(v);
    };
    return {clampi(std::ceil(m.x() - r), 0, W), clampi(std::ceil(m.y() - r), 0, H),
            clampi(std::floor(m.x() + r), -1, W - 1), clampi(std::floor(m.y() + r), -1, H - 1)};
  }

  std::unique_ptr<ThreadPool> pool_;
};

template <typename Real>
Image<Real> render(const SplatState<Real>& s, const Camera<Real>& cam) {
  return Renderer<Real>(1).render(s, cam);
}

/// One state set and camera per frame.
template <typename Real>
Video<Real> render_video(Renderer<Real>& renderer, std::span<const SplatState<Real>> states,
                         std::span<const Camera<Real>> cameras, std::vector<ForwardRecord<Real>>* records = nullptr,
                         std::span<const int> camera_ids = {}) {
  if (states.size() != cameras.size()) raise(ErrorKind::ShapeMismatch, "one camera per frame required");
  if (states.empty()) return Video<Real>();
  const int T = static_cast<int>(states.size());
  Video<Real> video(T, cameras[0].height, cameras[0].width);
  if (records) records->assign(T, ForwardRecord<Real>{});
  for (int t = 0; t < T; ++t) {
    if (cameras[t].height != video.height || cameras[t].width != video.width) {
      raise(ErrorKind::ShapeMismatch, "all cameras must share the image size");
    }
    video.set_frame(t, renderer.render(states[t], cameras[t], records ? &(*records)[t] : nullptr));
    video.camera_ids[t] = camera_ids.empty() ? t : camera_ids[t];
  }
  return video;
}

}  // namespace dreamphys::render
