#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <deque>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "eqnio/canonical.hpp"
#include "eqnio/core.hpp"
#include "eqnio/imu.hpp"

// Stochastic-cloning EKF fed by displacement priors. The error state stacks
// clone blocks (attitude, position; 6 each) ahead of the current block
// (attitude, velocity, position, gyro bias, accel bias; 15), so P is
// (6n + 15)^2. Attitude errors are world-frame left perturbations:
// R = exp(theta) * R_hat.

namespace eqnio::ekf {

struct NoiseParams {
  double gyro_noise = 1e-4;        // rad/s/sqrt(Hz)
  double accel_noise = 1e-3;       // m/s^2/sqrt(Hz)
  double gyro_bias_walk = 1e-6;    // rad/s/sqrt(s)
  double accel_bias_walk = 1e-5;   // m/s^2/sqrt(s)
};

struct Clone {
  Mat3 rot = Mat3::Identity();
  Vec3 pos = Vec3::Zero();
  double t = 0.0;
  std::int64_t sample_idx = -1;
};

struct EkfState {
  std::vector<Clone> clones;
  Mat3 rot = Mat3::Identity();
  Vec3 vel = Vec3::Zero();
  Vec3 pos = Vec3::Zero();
  Vec3 bg = Vec3::Zero();
  Vec3 ba = Vec3::Zero();
  MatXd P;

  int clone_count() const { return static_cast<int>(clones.size()); }
  int dim() const { return 6 * clone_count() + 15; }
  int cur() const { return 6 * clone_count(); }  // offset of the current block

  void init_covariance(double sig_theta, double sig_vel, double sig_pos,
                       double sig_bg, double sig_ba) {
    clones.clear();
    P = MatXd::Zero(15, 15);
    P.block<3, 3>(0, 0) = sig_theta * sig_theta * Mat3::Identity();
    P.block<3, 3>(3, 3) = sig_vel * sig_vel * Mat3::Identity();
    P.block<3, 3>(6, 6) = sig_pos * sig_pos * Mat3::Identity();
    P.block<3, 3>(9, 9) = sig_bg * sig_bg * Mat3::Identity();
    P.block<3, 3>(12, 12) = sig_ba * sig_ba * Mat3::Identity();
  }
};

namespace detail {

inline void symmetrize(MatXd& p) { p = 0.5 * (p + p.transpose()).eval(); }

/// Current-block transition for one strapdown step (15x15).
inline Eigen::Matrix<double, 15, 15> transition(const Mat3& rot_next,
                                                const Vec3& accel_world,
                                                const Mat3& rot, double dt) {
  Eigen::Matrix<double, 15, 15> a = Eigen::Matrix<double, 15, 15>::Identity();
  const Mat3 ax = skew(accel_world);
  a.block<3, 3>(0, 9) = -rot_next * dt;          // dtheta / dbg
  a.block<3, 3>(3, 0) = -ax * dt;                // dvel / dtheta
  a.block<3, 3>(3, 12) = -rot * dt;              // dvel / dba
  a.block<3, 3>(6, 0) = -0.5 * dt * dt * ax;     // dpos / dtheta
  a.block<3, 3>(6, 3) = Mat3::Identity() * dt;   // dpos / dvel
  a.block<3, 3>(6, 12) = -0.5 * dt * dt * rot;   // dpos / dba
  return a;
}

/// Noise input matrix (15x12) for [gyro white, accel white, bias walks].
inline Eigen::Matrix<double, 15, 12> noise_input(const Mat3& rot_next,
                                                 const Mat3& rot, double dt) {
  Eigen::Matrix<double, 15, 12> b = Eigen::Matrix<double, 15, 12>::Zero();
  b.block<3, 3>(0, 0) = -rot_next * dt;
  b.block<3, 3>(3, 3) = -rot * dt;
  b.block<3, 3>(6, 3) = -0.5 * dt * dt * rot;
  b.block<3, 3>(9, 6) = Mat3::Identity();
  b.block<3, 3>(12, 9) = Mat3::Identity();
  return b;
}

inline Eigen::Matrix<double, 12, 12> noise_covariance(const NoiseParams& np, double dt) {
  Eigen::Matrix<double, 12, 12> w = Eigen::Matrix<double, 12, 12>::Zero();
  w.block<3, 3>(0, 0) = (np.gyro_noise * np.gyro_noise / dt) * Mat3::Identity();
  w.block<3, 3>(3, 3) = (np.accel_noise * np.accel_noise / dt) * Mat3::Identity();
  w.block<3, 3>(6, 6) = (np.gyro_bias_walk * np.gyro_bias_walk * dt) * Mat3::Identity();
  w.block<3, 3>(9, 9) = (np.accel_bias_walk * np.accel_bias_walk * dt) * Mat3::Identity();
  return w;
}

}  // namespace detail

/// One strapdown propagation step with covariance. Clone blocks are frozen
/// (identity transition); only the current block and its cross terms move.
inline void propagate(EkfState& s, const imu::ImuSample& sample, double dt,
                      const NoiseParams& np) {
  if (dt <= 0.0) throw std::invalid_argument("propagate: dt must be positive");
  if (!sample.omega.allFinite() || !sample.accel.allFinite())
    throw std::invalid_argument("propagate: non-finite sample");

  const Vec3 w = sample.omega - s.bg;
  const Vec3 a_body = sample.accel - s.ba;
  const Mat3 rot_next = s.rot * exp_so3(w * dt);
  const Vec3 accel_world = s.rot * a_body;

  const auto a = detail::transition(rot_next, accel_world, s.rot, dt);
  const auto b = detail::noise_input(rot_next, s.rot, dt);
  const auto q = detail::noise_covariance(np, dt);

  const int c = s.cur();
  const MatXd pss = s.P.block(c, c, 15, 15);
  if (c > 0) {
    const MatXd pcs = s.P.block(0, c, c, 15) * a.transpose();
    s.P.block(0, c, c, 15) = pcs;
    s.P.block(c, 0, 15, c) = pcs.transpose();
  }
  s.P.block(c, c, 15, 15) = a * pss * a.transpose() + b * q * b.transpose();
  detail::symmetrize(s.P);

  s.pos += s.vel * dt + 0.5 * dt * dt * (kGravityWorld + accel_world);
  s.vel += kGravityWorld * dt + accel_world * dt;
  s.rot = rot_next;
}

/// Clones the current attitude/position into a new block. The covariance
/// grows by copying the corresponding rows/columns (exact copy Jacobian).
inline void augment_state(EkfState& s, double t, std::int64_t sample_idx) {
  const int n = s.dim();
  const int c = s.cur();

  MatXd j = MatXd::Zero(6, n);
  j.block<3, 3>(0, c) = Mat3::Identity();       // attitude rows
  j.block<3, 3>(3, c + 6) = Mat3::Identity();   // position rows

  MatXd grown(n + 6, n + 6);
  grown.topLeftCorner(n, n) = s.P;
  grown.topRightCorner(n, 6) = s.P * j.transpose();
  grown.bottomLeftCorner(6, n) = j * s.P;
  grown.bottomRightCorner(6, 6) = j * s.P * j.transpose();

  // New clone block goes in front of the current block: shuffle the current
  // 15 rows/cols to the end.
  Eigen::VectorXi perm(n + 6);
  for (int i = 0; i < c; ++i) perm(i) = i;
  for (int i = 0; i < 6; ++i) perm(c + i) = n + i;
  for (int i = 0; i < 15; ++i) perm(c + 6 + i) = c + i;
  MatXd reordered(n + 6, n + 6);
  for (int r = 0; r < n + 6; ++r)
    for (int col = 0; col < n + 6; ++col) reordered(r, col) = grown(perm(r), perm(col));

  s.P = std::move(reordered);
  s.clones.push_back(Clone{s.rot, s.pos, t, sample_idx});
  detail::symmetrize(s.P);
}

/// Drops the oldest clones until at most `keep` remain (marginalization:
/// delete their rows and columns).
inline void drop_old_clones(EkfState& s, int keep) {
  while (s.clone_count() > keep) {
    const int n = s.dim();
    const MatXd shrunk = s.P.block(6, 6, n - 6, n - 6).eval();
    s.P = shrunk;
    s.clones.erase(s.clones.begin());
  }
}

enum class UpdateOutcome { kApplied, kSkippedSingular, kSkippedPitch };

struct UpdateConfig {
  double sigma_floor = 1e-6;       // m^2, eigenvalue floor for the measurement
  double sigma_scale = 1.0;        // multiplier on the predicted covariance
  double pitch_guard_deg = 85.0;   // skip updates when |pitch| exceeds this
};

/// Displacement update between clones i and j: the prediction
/// h(X) = R_yaw(i)^T (p_j - p_i) is compared against the prior's d-hat in the
/// window-anchored yaw-free frame. Joseph-form covariance update.
inline UpdateOutcome measurement_update(EkfState& s, const Vec3& d_hat,
                                        const Mat3& sigma_hat, int clone_i, int clone_j,
                                        const UpdateConfig& cfg = {}) {
  if (clone_i < 0 || clone_j < 0 || clone_i >= s.clone_count() ||
      clone_j >= s.clone_count() || clone_i == clone_j)
    throw std::out_of_range("measurement_update: clone indices");

  const Clone& ci = s.clones[static_cast<std::size_t>(clone_i)];
  const Clone& cj = s.clones[static_cast<std::size_t>(clone_j)];

  const double pitch = imu::extrinsic_xyz_pitch(ci.rot);
  if (std::abs(pitch) > cfg.pitch_guard_deg * kPi / 180.0)
    return UpdateOutcome::kSkippedPitch;
  const auto split = imu::extrinsic_xyz_yaw(ci.rot);
  const double yaw = split.yaw;
  const Mat3 r_yaw_t = rot_z(yaw).transpose();

  // Floor the measurement covariance's spectrum.
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cfg.sigma_scale * sigma_hat);
  const Vec3 evals = eig.eigenvalues().cwiseMax(cfg.sigma_floor);
  const Mat3 sigma = eig.eigenvectors() * evals.asDiagonal() * eig.eigenvectors().transpose();

  const Vec3 h = r_yaw_t * (cj.pos - ci.pos);

  // Measurement Jacobian: nonzero at clone i attitude, clone i / j position.
  Mat3 hz = Mat3::Zero();
  hz(2, 0) = std::cos(yaw) * std::tan(pitch);
  hz(2, 1) = std::sin(yaw) * std::tan(pitch);
  hz(2, 2) = 1.0;
  const int n = s.dim();
  MatXd big_h = MatXd::Zero(3, n);
  big_h.block<3, 3>(0, 6 * clone_i) = r_yaw_t * skew(cj.pos - ci.pos) * hz;
  big_h.block<3, 3>(0, 6 * clone_i + 3) = -r_yaw_t;
  big_h.block<3, 3>(0, 6 * clone_j + 3) = r_yaw_t;

  const Mat3 innovation_cov = big_h * s.P * big_h.transpose() + sigma;
  const Eigen::LLT<Mat3> llt(innovation_cov);
  if (llt.info() != Eigen::Success) return UpdateOutcome::kSkippedSingular;

  const MatXd k = s.P * big_h.transpose() * llt.solve(Mat3::Identity());
  const VecXd dx = k * (d_hat - h);

  for (int idx = 0; idx < s.clone_count(); ++idx) {
    auto& cl = s.clones[static_cast<std::size_t>(idx)];
    cl.rot = exp_so3(dx.segment<3>(6 * idx)) * cl.rot;
    cl.pos += dx.segment<3>(6 * idx + 3);
  }
  const int c = s.cur();
  s.rot = exp_so3(dx.segment<3>(c)) * s.rot;
  s.vel += dx.segment<3>(c + 3);
  s.pos += dx.segment<3>(c + 6);
  s.bg += dx.segment<3>(c + 9);
  s.ba += dx.segment<3>(c + 12);

  const MatXd ikh = MatXd::Identity(n, n) - k * big_h;
  s.P = ikh * s.P * ikh.transpose() + k * sigma * k.transpose();
  detail::symmetrize(s.P);
  return UpdateOutcome::kApplied;
}

// ---------------------------------------------------------------------------
// Filter driver
// ---------------------------------------------------------------------------

/// Displacement prior callback: given a gravity-aligned window, return the
/// predicted displacement and covariance in that frame, or nothing to skip.
using PriorFn =
    std::function<std::optional<std::pair<Vec3, Mat3>>(const imu::ImuWindow&)>;

struct FilterConfig {
  int window = 200;        // samples spanned by one displacement measurement
  int update_stride = 20;  // samples between clone/update events
  NoiseParams noise;
  UpdateConfig update;
  // Initial state and uncertainty.
  Mat3 rot0 = Mat3::Identity();
  Vec3 vel0 = Vec3::Zero();
  Vec3 pos0 = Vec3::Zero();
  Vec3 bg0 = Vec3::Zero();
  Vec3 ba0 = Vec3::Zero();
  double sig_theta0 = 1e-3;
  double sig_vel0 = 1e-2;
  double sig_pos0 = 1e-4;
  double sig_bg0 = 1e-3;
  double sig_ba0 = 1e-2;
};

struct FilterResult {
  std::vector<imu::PoseSample> trajectory;  // one pose per IMU sample
  int updates_applied = 0;
  int updates_skipped = 0;
  int degenerate_frames = 0;  // bumped by callers' prior functions if needed
  EkfState final_state;
};

/// Runs the filter over an IMU sequence: propagate every sample, clone at
/// the update stride, and once the clone horizon spans a full window, call
/// the prior on the gravity-aligned trailing window (aligned with the
/// propagated per-sample orientation estimates, yaw-anchored at the window
/// start clone) and apply the displacement update between the end clones.
inline FilterResult run_filter(const std::vector<imu::ImuSample>& samples,
                               const PriorFn& prior, const FilterConfig& cfg) {
  if (samples.size() < 2) throw std::invalid_argument("run_filter: need samples");
  if (cfg.window <= 0 || cfg.update_stride <= 0 || cfg.window % cfg.update_stride != 0)
    throw std::invalid_argument("run_filter: window must be a multiple of update_stride");

  EkfState s;
  s.rot = cfg.rot0;
  s.vel = cfg.vel0;
  s.pos = cfg.pos0;
  s.bg = cfg.bg0;
  s.ba = cfg.ba0;
  s.init_covariance(cfg.sig_theta0, cfg.sig_vel0, cfg.sig_pos0, cfg.sig_bg0, cfg.sig_ba0);

  const int max_clones = cfg.window / cfg.update_stride + 1;

  FilterResult out;
  out.trajectory.reserve(samples.size());
  std::vector<Mat3> rot_buffer(samples.size());

  out.trajectory.push_back(imu::PoseSample{samples[0].t, s.rot, s.pos, s.vel});
  rot_buffer[0] = s.rot;
  augment_state(s, samples[0].t, 0);

  for (std::size_t k = 1; k < samples.size(); ++k) {
    const double dt = samples[k].t - samples[k - 1].t;
    propagate(s, samples[k - 1], dt, cfg.noise);
    rot_buffer[k] = s.rot;
    out.trajectory.push_back(imu::PoseSample{samples[k].t, s.rot, s.pos, s.vel});

    if (k % static_cast<std::size_t>(cfg.update_stride) != 0) continue;
    augment_state(s, samples[k].t, static_cast<std::int64_t>(k));

    // Oldest clone exactly one window behind the newest?
    const int j = s.clone_count() - 1;
    int i = -1;
    for (int idx = 0; idx < j; ++idx) {
      if (s.clones[static_cast<std::size_t>(idx)].sample_idx ==
          static_cast<std::int64_t>(k) - cfg.window) {
        i = idx;
        break;
      }
    }
    if (i >= 0 && prior) {
      const std::size_t begin = static_cast<std::size_t>(k) - cfg.window;
      auto win = imu::gravity_align(samples, rot_buffer, begin, k);
      // Anchor the yaw at the window-start clone's current estimate, which
      // is what the measurement model linearizes around.
      const double yaw_clone =
          imu::extrinsic_xyz_yaw(s.clones[static_cast<std::size_t>(i)].rot).yaw;
      const double yaw_buffer = imu::extrinsic_xyz_yaw(rot_buffer[begin]).yaw;
      const Mat3 adjust = rot_z(yaw_clone).transpose() * rot_z(yaw_buffer);
      for (auto& smp : win.samples) {
        smp.accel = adjust * smp.accel;
        smp.omega = adjust * smp.omega;
      }
      win.align_rot = adjust * win.align_rot;

      if (const auto meas = prior(win)) {
        const auto outcome =
            measurement_update(s, meas->first, meas->second, i, j, cfg.update);
        if (outcome == UpdateOutcome::kApplied) {
          ++out.updates_applied;
        } else {
          ++out.updates_skipped;
        }
        // The update moved the whole clone stack; refresh the trajectory tail
        // and the orientation buffer entry at the current sample.
        out.trajectory.back() = imu::PoseSample{samples[k].t, s.rot, s.pos, s.vel};
        rot_buffer[k] = s.rot;
      }
    }
    drop_old_clones(s, max_clones);
  }
  out.final_state = std::move(s);
  return out;
}

}  // namespace eqnio::ekf
