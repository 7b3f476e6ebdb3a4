#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "eqnio/core.hpp"

namespace eqnio::group {

/// An element of the yaw roto-reflection group: rotations about the gravity
/// axis and reflections across planes containing it, stored as the 2x2
/// orthogonal block acting on the xy-plane. det = +1 for rotations, -1 for
/// reflections. All arithmetic is double precision.
class YawFrame {
 public:
  YawFrame() : m_(Mat2::Identity()) {}

  static YawFrame rotation(double angle) {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    Mat2 m;
    m << c, -s, s, c;
    return YawFrame(m, /*trusted=*/true);
  }

  /// Reflection across the line through the origin at `axis_angle`.
  static YawFrame reflection(double axis_angle) {
    const double c = std::cos(2.0 * axis_angle);
    const double s = std::sin(2.0 * axis_angle);
    Mat2 m;
    m << c, s, s, -c;
    return YawFrame(m, /*trusted=*/true);
  }

  /// Accepts a nearly-orthogonal matrix; snaps it to the closest orthogonal
  /// one (polar factor) when the defect exceeds 1e-9.
  static YawFrame from_matrix(const Mat2& m) {
    const double defect = (m.transpose() * m - Mat2::Identity())
                              .cwiseAbs()
                              .maxCoeff();
    if (defect <= 1e-9) return YawFrame(m, /*trusted=*/true);
    Eigen::JacobiSVD<Mat2> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    return YawFrame(svd.matrixU() * svd.matrixV().transpose(),
                    /*trusted=*/true);
  }

  const Mat2& matrix() const { return m_; }
  double det() const { return m_.determinant(); }
  bool is_reflection() const { return det() < 0.0; }

  YawFrame inverse() const { return YawFrame(m_.transpose(), true); }

  YawFrame operator*(const YawFrame& rhs) const {
    return YawFrame(m_ * rhs.m_, true);
  }

 private:
  YawFrame(const Mat2& m, bool /*trusted*/) : m_(m) {}
  Mat2 m_;
};

/// Block-diagonal lift to 3x3: the xy block acts in the plane, z is fixed.
inline Mat3 lift3(const YawFrame& f) {
  Mat3 out = Mat3::Identity();
  out.topLeftCorner<2, 2>() = f.matrix();
  return out;
}

/// Action on accelerations (also displacements and the decomposed angular
/// rate vectors): plain application of the lifted matrix.
inline Vec3 act_accel(const YawFrame& f, const Vec3& a) {
  return lift3(f) * a;
}

/// Action on angular rates. Reflections must additionally invert the
/// rotation sense, hence the det factor.
inline Vec3 act_omega(const YawFrame& f, const Vec3& w) {
  return f.det() * (lift3(f) * w);
}

/// Action on covariances: congruence by the lifted matrix. Symmetry and the
/// eigenvalue multiset are preserved.
inline Mat3 act_cov(const YawFrame& f, const Mat3& sigma) {
  const Mat3 r = lift3(f);
  return r * sigma * r.transpose();
}

}  // namespace eqnio::group
