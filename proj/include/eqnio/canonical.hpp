#pragma once

#include <Eigen/Eigenvalues>

#include <optional>

#include "eqnio/core.hpp"
#include "eqnio/group.hpp"
#include "eqnio/imu.hpp"

namespace eqnio::canonical {

inline constexpr double kNormEps = 1e-8;

/// Number of 2-D vector / invariant scalar channels fed to the frame network.
inline int vector_channels(GroupMode mode) { return mode == GroupMode::kSO2 ? 2 : 3; }
inline int scalar_channels(GroupMode mode) { return mode == GroupMode::kSO2 ? 5 : 9; }

// ---------------------------------------------------------------------------
// Angular-rate decomposition
// ---------------------------------------------------------------------------

/// Perpendicular pair with v1 x v2 = omega and |v1| = |v2| = sqrt(|omega|).
/// Unlike omega itself, both vectors transform like accelerations under yaw
/// roto-reflections, which lets them share feature channels.
struct OmegaPair {
  Vec3 v1 = Vec3::Zero();
  Vec3 v2 = Vec3::Zero();
};

/// Splits omega into the canonical pair. Generic direction uses
/// w1 = (-wy, wx, 0); when omega is vertical, w1 = a x omega; when that also
/// vanishes, w1 = omega x e1 (fixed axis, not equivariant). omega = 0 maps to
/// the zero pair.
inline OmegaPair decompose_omega(const Vec3& w, const Vec3& a) {
  OmegaPair out;
  const double wn = w.norm();
  if (wn == 0.0) return out;

  Vec3 w1(-w.y(), w.x(), 0.0);
  if (w1.isZero(0.0)) {
    w1 = a.cross(w);
    if (w1.isZero(0.0)) w1 = w.cross(Vec3::UnitX());
  }
  const Vec3 w2 = w.cross(w1);
  const double scale = std::sqrt(wn);
  out.v1 = scale * w1.normalized();
  out.v2 = scale * w2.normalized();
  return out;
}

inline Vec3 recompose_omega(const OmegaPair& p) { return p.v1.cross(p.v2); }

// ---------------------------------------------------------------------------
// Frame-network features
// ---------------------------------------------------------------------------

/// Input bundle for the frame network: per-sample 2-D vector channels (xy
/// rows interleaved, shape 2n x Cv) and invariant scalars (n x Cs).
struct FeatureBundle {
  MatXd vectors;  // (2n) x Cv
  MatXd scalars;  // n x Cs
  int samples() const { return static_cast<int>(scalars.rows()); }
};

inline FeatureBundle extract_features(const imu::ImuWindow& win, GroupMode mode) {
  const int n = static_cast<int>(win.samples.size());
  FeatureBundle fb;
  fb.vectors.setZero(2 * n, vector_channels(mode));
  fb.scalars.setZero(n, scalar_channels(mode));

  for (int i = 0; i < n; ++i) {
    const Vec3& a = win.samples[i].accel;
    const Vec3& w = win.samples[i].omega;
    const Vec2 axy = a.head<2>();

    if (mode == GroupMode::kSO2) {
      const Vec2 wxy = w.head<2>();
      fb.vectors.block<2, 1>(2 * i, 0) = axy;
      fb.vectors.block<2, 1>(2 * i, 1) = wxy;
      fb.scalars(i, 0) = a.z();
      fb.scalars(i, 1) = w.z();
      fb.scalars(i, 2) = axy.norm();
      fb.scalars(i, 3) = wxy.norm();
      fb.scalars(i, 4) = axy.dot(wxy);
    } else {
      const OmegaPair p = decompose_omega(w, a);
      const Vec2 v1 = p.v1.head<2>();
      const Vec2 v2 = p.v2.head<2>();
      fb.vectors.block<2, 1>(2 * i, 0) = axy;
      fb.vectors.block<2, 1>(2 * i, 1) = v1;
      fb.vectors.block<2, 1>(2 * i, 2) = v2;
      fb.scalars(i, 0) = a.z();
      fb.scalars(i, 1) = p.v1.z();
      fb.scalars(i, 2) = p.v2.z();
      fb.scalars(i, 3) = axy.norm();
      fb.scalars(i, 4) = v1.norm();
      fb.scalars(i, 5) = v2.norm();
      fb.scalars(i, 6) = axy.dot(v1);
      fb.scalars(i, 7) = axy.dot(v2);
      fb.scalars(i, 8) = v1.dot(v2);
    }
  }
  return fb;
}

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

/// Builds a frame from the two raw network outputs. SO(2) mode normalizes
/// raw1 and takes its 90-degree rotation as the second basis vector (det is
/// always +1, raw2 is unused); O(2) mode Gram-Schmidts both, so the second
/// output chooses the handedness. Returns nothing when a normalization falls
/// below kNormEps; callers fall back to the identity frame.
inline std::optional<group::YawFrame> orthonormalize_frame(const Vec2& raw1,
                                                           const Vec2& raw2,
                                                           GroupMode mode) {
  const double n1 = raw1.norm();
  if (n1 < kNormEps) return std::nullopt;
  const Vec2 b1 = raw1 / n1;

  Vec2 b2;
  if (mode == GroupMode::kSO2) {
    b2 = Vec2(-b1.y(), b1.x());
  } else {
    const Vec2 w = raw2 - raw2.dot(b1) * b1;
    const double nw = w.norm();
    if (nw < kNormEps) return std::nullopt;
    b2 = w / nw;
  }
  Mat2 m;
  m.col(0) = b1;
  m.col(1) = b2;
  return group::YawFrame::from_matrix(m);
}

// ---------------------------------------------------------------------------
// Canonicalization
// ---------------------------------------------------------------------------

/// Maps a gravity-aligned window into the canonical frame, producing the
/// n x 6 channel matrix consumed by the displacement backbone.
///   SO(2) columns: a'_x, a'_y, w'_x, w'_y, a_z, w_z
///   O(2)  columns: a'_x, a'_y, a'_z, w'_x, w'_y, w'_z
/// In O(2) mode the angular rate is decomposed, both halves are mapped like
/// accelerations, and w' is recomposed from the mapped pair.
inline MatXd canonicalize(const imu::ImuWindow& win, const group::YawFrame& f,
                          GroupMode mode) {
  const int n = static_cast<int>(win.samples.size());
  MatXd channels(n, 6);
  const Mat2 mt = f.matrix().transpose();

  for (int i = 0; i < n; ++i) {
    const Vec3& a = win.samples[i].accel;
    const Vec3& w = win.samples[i].omega;
    if (mode == GroupMode::kSO2) {
      const Vec2 axy = mt * a.head<2>();
      const Vec2 wxy = mt * w.head<2>();
      channels(i, 0) = axy.x();
      channels(i, 1) = axy.y();
      channels(i, 2) = wxy.x();
      channels(i, 3) = wxy.y();
      channels(i, 4) = a.z();
      channels(i, 5) = w.z();
    } else {
      const OmegaPair p = decompose_omega(w, a);
      const auto finv = f.inverse();
      const Vec3 a_c = group::act_accel(finv, a);
      const Vec3 v1_c = group::act_accel(finv, p.v1);
      const Vec3 v2_c = group::act_accel(finv, p.v2);
      const Vec3 w_c = v1_c.cross(v2_c);
      channels.row(i) << a_c.x(), a_c.y(), a_c.z(), w_c.x(), w_c.y(), w_c.z();
    }
  }
  return channels;
}

/// Displacement and covariance expressed in the original gravity-aligned
/// frame. The covariance keeps zero xz/yz blocks by construction.
struct PriorOutput {
  Vec3 d = Vec3::Zero();
  Mat3 sigma = Mat3::Identity();
};

/// Maps the backbone outputs (canonical-frame displacement and log-stds)
/// back through the frame: d = F3 d', Sigma = F3 diag(e^{2u}) F3^T.
inline PriorOutput decanonicalize(const Vec3& out_d, const Vec3& out_u,
                                  const group::YawFrame& f) {
  const Mat3 f3 = group::lift3(f);
  PriorOutput out;
  out.d = f3 * out_d;
  const Vec3 var = (2.0 * out_u).array().exp();
  out.sigma = f3 * var.asDiagonal() * f3.transpose();
  return out;
}

/// Hand-crafted baseline: principal axes of the xy accelerometer scatter,
/// sign-fixed so the mean acceleration projects positively on the first
/// basis vector. Rotation-equivariant only; reflections are invisible to it.
inline std::optional<group::YawFrame> pca_frame(const imu::ImuWindow& win) {
  const int n = static_cast<int>(win.samples.size());
  if (n < 2) return std::nullopt;

  Vec2 mean = Vec2::Zero();
  for (const auto& s : win.samples) mean += s.accel.head<2>();
  mean /= n;

  Mat2 cov = Mat2::Zero();
  for (const auto& s : win.samples) {
    const Vec2 d = s.accel.head<2>() - mean;
    cov += d * d.transpose();
  }
  cov /= n;

  Eigen::SelfAdjointEigenSolver<Mat2> eig(cov);
  const double lo = eig.eigenvalues()(0);
  const double hi = eig.eigenvalues()(1);
  if (hi < 1e-12 || lo < 1e-8 * hi) return std::nullopt;

  Vec2 b1 = eig.eigenvectors().col(1);
  if (mean.dot(b1) < 0.0) b1 = -b1;
  Mat2 m;
  m.col(0) = b1;
  m.col(1) = Vec2(-b1.y(), b1.x());
  return group::YawFrame::from_matrix(m);
}

}  // namespace eqnio::canonical
