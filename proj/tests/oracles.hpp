#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance runner. They are written from the definitions and share no code
// paths with the library beyond its data types.

#include <algorithm>
#include <cmath>
#include <vector>

#include "dreamphys/dreamphys.hpp"

namespace dreamphys::oracles {

/// Straightforward per-pixel compositor written from the definitions.
inline render::Image<double> brute_force(const render::SplatState<double>& s, const render::Camera<double>& cam) {
  const double f = 0.5 * cam.height / std::tan(0.5 * cam.fov_y);
  struct Item {
    double depth;
    Vec2<double> mean;
    Mat2<double> conic;
    double opacity;
    Vec3d color;
  };
  std::vector<Item> items;
  for (std::size_t k = 0; k < s.size(); ++k) {
    const Vec3d p = cam.rotation * s.centers[k] + cam.translation;
    if (p.z() <= 0.01) continue;
    Eigen::Matrix<double, 2, 3> J;
    J << f / p.z(), 0, -f * p.x() / (p.z() * p.z()), 0, f / p.z(), -f * p.y() / (p.z() * p.z());
    Mat2<double> cov = J * cam.rotation * s.covariances[k] * cam.rotation.transpose() * J.transpose();
    cov += 0.3 * Mat2<double>::Identity();
    const Vec3d rgb = (Vec3d::Constant(0.5) + 0.28209479177387814 * s.sh[k]).cwiseMax(0.0).cwiseMin(1.0);
    items.push_back({p.z(), Vec2<double>(f * p.x() / p.z() + 0.5 * cam.width, f * p.y() / p.z() + 0.5 * cam.height),
                     cov.inverse(), s.opacities[k], rgb});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.depth < b.depth; });
  render::Image<double> img(cam.height, cam.width);
  for (int i = 0; i < cam.height; ++i) {
    for (int j = 0; j < cam.width; ++j) {
      double T = 1.0;
      Vec3d acc = Vec3d::Zero();
      for (const auto& it : items) {
        const Vec2<double> d = Vec2<double>(j, i) - it.mean;
        const double alpha = std::min(0.99, it.opacity * std::exp(-0.5 * d.dot(it.conic * d)));
        if (alpha < 1.0 / 255.0) continue;
        if (T * (1.0 - alpha) < 1e-4) break;
        acc += it.color * alpha * T;
        T *= 1.0 - alpha;
      }
      for (int c = 0; c < 3; ++c) img.at(i, j, c) = acc[c];
    }
  }
  return img;
}

/// Cox-de Boor recursion on the extended uniform knot vector.
inline double de_boor(int m, int k, double u, int G) {
  using field::knot;
  if (k == 0) {
    const double a = knot(m, G), b = knot(m + 1, G);
    // The last interior interval is closed so u = 1 belongs to it.
    if (m == G + 2) return u >= a && u <= b ? 1.0 : 0.0;
    if (m > G + 2 && u == 1.0) return 0.0;
    return u >= a && u < b ? 1.0 : 0.0;
  }
  const double a = knot(m, G), b = knot(m + k, G), c = knot(m + 1, G), d = knot(m + k + 1, G);
  return (u - a) / (b - a) * de_boor(m, k - 1, u, G) + (d - u) / (d - c) * de_boor(m + 1, k - 1, u, G);
}

/// One KAN layer evaluated term by term with the recursive basis.
inline std::vector<double> kan_layer(const field::MaterialField<double>& f, int layer, const std::vector<double>& u) {
  const auto ls = f.shape().layers()[layer];
  const int nb = f.shape().bases();
  std::vector<double> out(ls.out, 0.0);
  for (int j = 0; j < ls.out; ++j) {
    for (int i = 0; i < ls.in; ++i) {
      out[j] += f.params()[f.base_offset(layer) + j * ls.in + i] * u[i] / (1.0 + std::exp(-u[i]));
      for (int m = 0; m < nb; ++m) {
        out[j] += f.params()[f.coef_offset(layer) + (j * ls.in + i) * nb + m] * de_boor(m, 3, u[i], f.shape().grid_size);
      }
    }
  }
  return out;
}

/// Backend whose noise prediction is the noisy input itself; exercises the
/// generic denoise_clean path.
class IdentityDenoiser : public guidance::Denoiser<double> {
 public:
  render::Video<double> denoise(const render::Video<double>& Vt, const guidance::Query&,
                                const guidance::Condition&) override {
    return Vt;
  }
};

}  // namespace dreamphys::oracles
