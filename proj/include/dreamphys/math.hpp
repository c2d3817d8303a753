#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace dreamphys {

template <typename Real> using Vec2 = Eigen::Matrix<Real, 2, 1>;
template <typename Real> using Vec3 = Eigen::Matrix<Real, 3, 1>;
template <typename Real> using Vec4 = Eigen::Matrix<Real, 4, 1>;
template <typename Real> using Mat2 = Eigen::Matrix<Real, 2, 2>;
template <typename Real> using Mat3 = Eigen::Matrix<Real, 3, 3>;

using Vec3d = Vec3<double>;
using Mat3d = Mat3<double>;

/// Axis-aligned box.
template <typename Real>
struct Aabb {
  Vec3<Real> min = Vec3<Real>::Zero();
  Vec3<Real> max = Vec3<Real>::Zero();

  bool contains(const Vec3<Real>& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
  Vec3<Real> extent() const { return max - min; }
  Vec3<Real> center() const { return Real(0.5) * (min + max); }

  /// Grow by `fraction` of the extent on every side.
  Aabb padded(Real fraction) const {
    Vec3<Real> pad = fraction * extent();
    // Degenerate axes (single kernel, planar scenes) still need a nonzero span.
    for (int a = 0; a < 3; ++a) {
      if (pad[a] <= Real(0)) pad[a] = Real(fraction);
    }
    return {min - pad, max + pad};
  }

  template <typename Other>
  Aabb<Other> cast() const {
    return {min.template cast<Other>(), max.template cast<Other>()};
  }
};

template <typename Real>
inline Real sigmoid(Real x) {
  if (x >= Real(0)) {
    return Real(1) / (Real(1) + std::exp(-x));
  }
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Singular value decomposition with det(U) = det(V) = +1; the sign of a
/// reflection is carried by the smallest singular value.
template <typename Real>
struct RotationSvd {
  Mat3<Real> U;
  Vec3<Real> sigma;
  Mat3<Real> V;
};

template <typename Real>
RotationSvd<Real> rotation_svd(const Mat3<Real>& F) {
  Eigen::JacobiSVD<Mat3<Real>> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
  RotationSvd<Real> out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
  if (out.U.determinant() < Real(0)) {
    out.U.col(2) *= Real(-1);
    out.sigma[2] *= Real(-1);
  }
  if (out.V.determinant() < Real(0)) {
    out.V.col(2) *= Real(-1);
    out.sigma[2] *= Real(-1);
  }
  return out;
}

/// Rotation factor of the polar decomposition F = R S with det(R) = +1.
/// Uses the scaled Newton iteration X <- (gX + X^-T / g) / 2 when det(F) > 0
/// and falls back to the SVD otherwise.
template <typename Real>
Mat3<Real> polar_rotation(const Mat3<Real>& F) {
  if (!(F.determinant() > Real(0))) {
    const auto svd = rotation_svd(F);
    return svd.U * svd.V.transpose();
  }
  const Real tol = Real(100) * std::numeric_limits<Real>::epsilon();
  Mat3<Real> X = F;
  for (int it = 0; it < 40; ++it) {
    const Real det = X.determinant();
    Mat3<Real> X_inv_t;
    X_inv_t << X(1, 1) * X(2, 2) - X(1, 2) * X(2, 1), X(1, 2) * X(2, 0) - X(1, 0) * X(2, 2),
        X(1, 0) * X(2, 1) - X(1, 1) * X(2, 0), X(0, 2) * X(2, 1) - X(0, 1) * X(2, 2),
        X(0, 0) * X(2, 2) - X(0, 2) * X(2, 0), X(0, 1) * X(2, 0) - X(0, 0) * X(2, 1),
        X(0, 1) * X(1, 2) - X(0, 2) * X(1, 1), X(0, 2) * X(1, 0) - X(0, 0) * X(1, 2),
        X(0, 0) * X(1, 1) - X(0, 1) * X(1, 0);
    X_inv_t /= det;
    Real g = std::sqrt(std::sqrt(X_inv_t.squaredNorm() / X.squaredNorm()));
    // Frobenius scaling only helps far from convergence.
    if (it > 3 || std::abs(g - Real(1)) < Real(1e-2)) g = Real(1);
    const Mat3<Real> Y = Real(0.5) * (g * X + X_inv_t / g);
    const Real change = (Y - X).template lpNorm<Eigen::Infinity>();
    X = Y;
    if (change < tol) break;
  }
  return X;
}

/// Reverse mode of R = polar_rotation(F): maps dL/dR to dL/dF.
///
/// With F = U diag(s) V^T and M = U^T dF V, dR = U W V^T where
/// W_ij = (M_ij - M_ji) / (s_i + s_j). Near-singular pairs are clamped by
/// `min_denominator`.
template <typename Real>
Mat3<Real> polar_rotation_vjp(const RotationSvd<Real>& svd, const Mat3<Real>& grad_R,
                              Real min_denominator) {
  const Mat3<Real> A = svd.U.transpose() * grad_R * svd.V;
  Mat3<Real> gM = Mat3<Real>::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      Real denom = svd.sigma[i] + svd.sigma[j];
      if (std::abs(denom) < min_denominator) {
        denom = std::copysign(min_denominator, denom == Real(0) ? Real(1) : denom);
      }
      gM(i, j) = (A(i, j) - A(j, i)) / denom;
    }
  }
  return svd.U * gM * svd.V.transpose();
}

/// Matrix of cofactors, d det(F) / dF.
template <typename Real>
Mat3<Real> cofactor(const Mat3<Real>& F) {
  Mat3<Real> c;
  c(0, 0) = F(1, 1) * F(2, 2) - F(1, 2) * F(2, 1);
  c(0, 1) = F(1, 2) * F(2, 0) - F(1, 0) * F(2, 2);
  c(0, 2) = F(1, 0) * F(2, 1) - F(1, 1) * F(2, 0);
  c(1, 0) = F(0, 2) * F(2, 1) - F(0, 1) * F(2, 2);
  c(1, 1) = F(0, 0) * F(2, 2) - F(0, 2) * F(2, 0);
  c(1, 2) = F(0, 1) * F(2, 0) - F(0, 0) * F(2, 1);
  c(2, 0) = F(0, 1) * F(1, 2) - F(0, 2) * F(1, 1);
  c(2, 1) = F(0, 2) * F(1, 0) - F(0, 0) * F(1, 2);
  c(2, 2) = F(0, 0) * F(1, 1) - F(0, 1) * F(1, 0);
  return c;
}

template <typename Real>
Mat3<Real> skew(const Vec3<Real>& w) {
  Mat3<Real> m;
  m << Real(0), -w.z(), w.y(), w.z(), Real(0), -w.x(), -w.y(), w.x(), Real(0);
  return m;
}

}  // namespace dreamphys
