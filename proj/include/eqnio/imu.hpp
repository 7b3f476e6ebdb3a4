#pragma once

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eqnio/core.hpp"

namespace eqnio::imu {

/// One IMU reading in the body frame. Accelerometer output is specific
/// force: gravity is not compensated.
struct ImuSample {
  double t = 0.0;
  Vec3 omega = Vec3::Zero();
  Vec3 accel = Vec3::Zero();
};

/// Ground-truth (or estimated) pose at one timestamp. `rot` maps body to
/// world, det +1.
struct PoseSample {
  double t = 0.0;
  Mat3 rot = Mat3::Identity();
  Vec3 pos = Vec3::Zero();
  Vec3 vel = Vec3::Zero();
};

/// A run of gravity-aligned samples. `align_rot` is the yaw-free
/// world-from-body rotation applied at the window start.
struct ImuWindow {
  std::vector<ImuSample> samples;
  Mat3 align_rot = Mat3::Identity();
};

struct YawSplit {
  double yaw = 0.0;
  Mat3 yaw_free = Mat3::Identity();
  bool degenerate = false;
};

/// Factors a rotation as Rz(yaw) * yaw_free using the extrinsic XYZ Euler
/// convention (R = Rz(c) Ry(b) Rx(a)). Near |pitch| = 90 deg the yaw is
/// unobservable; we return yaw = 0 and set the degenerate flag.
inline YawSplit extrinsic_xyz_yaw(const Mat3& rot) {
  YawSplit out;
  const double cb = std::hypot(rot(0, 0), rot(1, 0));
  if (cb < 1e-7) {
    out.degenerate = true;
    out.yaw = 0.0;
    out.yaw_free = rot;
    return out;
  }
  out.yaw = std::atan2(rot(1, 0), rot(0, 0));
  out.yaw_free = rot_z(out.yaw).transpose() * rot;
  return out;
}

/// Pitch angle of the extrinsic XYZ factorization, for the measurement
/// model's tan(beta) guard.
inline double extrinsic_xyz_pitch(const Mat3& rot) {
  return std::asin(std::clamp(-rot(2, 0), -1.0, 1.0));
}

/// Rotates body-frame samples [begin, end) into the local gravity-aligned
/// frame anchored at the window start: sample k is mapped by
/// Rz(yaw_begin)^T * R_k, so z matches world z and the start yaw is zero.
inline ImuWindow gravity_align(const std::vector<ImuSample>& raw,
                               const std::vector<Mat3>& orientations,
                               std::size_t begin, std::size_t end) {
  if (end > raw.size() || begin >= end)
    throw std::out_of_range("gravity_align: window out of bounds");
  if (orientations.size() != raw.size())
    throw std::invalid_argument("gravity_align: one orientation per sample");

  const double yaw0 = extrinsic_xyz_yaw(orientations[begin]).yaw;
  const Mat3 deyaw = rot_z(yaw0).transpose();

  ImuWindow win;
  win.samples.reserve(end - begin);
  for (std::size_t k = begin; k < end; ++k) {
    const Mat3 r = deyaw * orientations[k];
    ImuSample s;
    s.t = raw[k].t;
    s.omega = r * raw[k].omega;
    s.accel = r * raw[k].accel;
    win.samples.push_back(s);
  }
  win.align_rot = deyaw * orientations[begin];
  return win;
}

// ---------------------------------------------------------------------------
// Synthetic trajectories
// ---------------------------------------------------------------------------

struct SimConfig {
  double duration = 60.0;  // seconds
  double rate = 200.0;     // Hz
  int waypoints = 8;
  double arena = 4.0;        // waypoint box extent, meters
  double height_var = 0.3;   // z extent of waypoints, meters
  double roll_amp = 0.08;    // rad
  double pitch_amp = 0.06;   // rad
  double roll_freq = 0.45;   // Hz
  double pitch_freq = 0.31;  // Hz
  double yaw_jitter = 0.2;   // rad added to waypoint headings

  double gyro_noise = 0.0;        // rad/s/sqrt(Hz)
  double accel_noise = 0.0;       // m/s^2/sqrt(Hz)
  double gyro_bias = 0.0;         // rad/s, constant-bias magnitude
  double accel_bias = 0.0;        // m/s^2
  double gyro_bias_walk = 0.0;    // rad/s/sqrt(s)
  double accel_bias_walk = 0.0;   // m/s^2/sqrt(s)
};

struct SimResult {
  std::vector<PoseSample> poses;
  std::vector<ImuSample> imu;
  Vec3 gyro_bias0 = Vec3::Zero();
  Vec3 accel_bias0 = Vec3::Zero();
};

namespace detail {

/// Uniform-knot Catmull-Rom interpolation with clamped ends. Piecewise cubic,
/// C1 at the knots; first and second parameter derivatives are analytic.
template <typename Point>
class CatmullRom {
 public:
  CatmullRom(std::vector<Point> points, double t0, double t1)
      : pts_(std::move(points)), t0_(t0) {
    dt_ = pts_.size() > 1 ? (t1 - t0) / double(pts_.size() - 1) : 1.0;
  }

  void eval(double t, Point& p, Point& dp, Point& ddp) const {
    if (pts_.size() == 1) {
      p = pts_[0];
      dp = Point::Zero();
      ddp = Point::Zero();
      return;
    }
    const int last = static_cast<int>(pts_.size()) - 2;
    double s = (t - t0_) / dt_;
    int i = std::clamp(static_cast<int>(std::floor(s)), 0, last);
    const double u = s - i;
    const Point& p0 = pts_[std::max(i - 1, 0)];
    const Point& p1 = pts_[i];
    const Point& p2 = pts_[i + 1];
    const Point& p3 = pts_[std::min(i + 2, last + 1)];

    const Point c1 = 0.5 * (p2 - p0);
    const Point c2 = 0.5 * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3);
    const Point c3 = 0.5 * (-p0 + 3.0 * p1 - 3.0 * p2 + p3);

    p = p1 + u * (c1 + u * (c2 + u * c3));
    dp = (c1 + u * (2.0 * c2 + u * 3.0 * c3)) / dt_;
    ddp = (2.0 * c2 + 6.0 * u * c3) / (dt_ * dt_);
  }

  /// Knot spacing in seconds; consumers that sample near knots may want to
  /// know where the curvature jumps live.
  double knot_spacing() const { return dt_; }

 private:
  std::vector<Point> pts_;
  double t0_;
  double dt_;
};

using Scalar1 = Eigen::Matrix<double, 1, 1>;

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 v(n(rng), n(rng), n(rng));
  const double len = v.norm();
  return len > 1e-12 ? Vec3(v / len) : Vec3::UnitX();
}

}  // namespace detail

/// Analytic pose/IMU generator. Positions follow a Catmull-Rom spline through
/// random waypoints, yaw follows the waypoint headings (plus jitter), and
/// roll/pitch are small sinusoids. Body rates and specific force are derived
/// in closed form from the same curves, then corrupted with constant bias,
/// bias random walk, and white noise. Deterministic for a fixed seed.
inline SimResult simulate_trajectory(const SimConfig& cfg, std::uint64_t seed) {
  if (cfg.rate <= 0.0 || cfg.duration <= 0.0)
    throw std::invalid_argument("simulate_trajectory: rate and duration must be positive");
  if (cfg.waypoints < 1)
    throw std::invalid_argument("simulate_trajectory: need at least one waypoint");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> un(-0.5, 0.5);

  std::vector<Vec3> wps(static_cast<std::size_t>(cfg.waypoints));
  for (auto& w : wps) {
    w = Vec3(un(rng) * cfg.arena, un(rng) * cfg.arena, un(rng) * cfg.height_var);
  }

  // Waypoint yaws track the heading of the upcoming segment, unwrapped so the
  // interpolant never takes the long way around.
  std::vector<detail::Scalar1> yaws(wps.size());
  double prev = 0.0;
  for (std::size_t i = 0; i < wps.size(); ++i) {
    double yaw = prev;
    if (i + 1 < wps.size()) {
      const Vec2 d = (wps[i + 1] - wps[i]).head<2>();
      if (d.norm() > 1e-9) yaw = std::atan2(d.y(), d.x());
    }
    yaw += un(rng) * 2.0 * cfg.yaw_jitter;
    while (yaw - prev > kPi) yaw -= 2.0 * kPi;
    while (yaw - prev < -kPi) yaw += 2.0 * kPi;
    yaws[i](0) = yaw;
    prev = yaw;
  }

  const detail::CatmullRom<Vec3> pos_spline(wps, 0.0, cfg.duration);
  const detail::CatmullRom<detail::Scalar1> yaw_spline(yaws, 0.0, cfg.duration);

  SimResult out;
  out.gyro_bias0 = cfg.gyro_bias * detail::random_unit(rng);
  out.accel_bias0 = cfg.accel_bias * detail::random_unit(rng);

  const double dt = 1.0 / cfg.rate;
  const std::size_t n = static_cast<std::size_t>(std::llround(cfg.duration * cfg.rate)) + 1;
  out.poses.resize(n);
  out.imu.resize(n);

  std::normal_distribution<double> gauss(0.0, 1.0);
  const double gyro_white = cfg.gyro_noise * std::sqrt(cfg.rate);
  const double accel_white = cfg.accel_noise * std::sqrt(cfg.rate);
  Vec3 bg = out.gyro_bias0;
  Vec3 ba = out.accel_bias0;

  for (std::size_t k = 0; k < n; ++k) {
    const double t = k * dt;
    Vec3 p, v, a;
    pos_spline.eval(t, p, v, a);
    detail::Scalar1 y, dy, ddy;
    yaw_spline.eval(t, y, dy, ddy);

    const double roll = cfg.roll_amp * std::sin(2.0 * kPi * cfg.roll_freq * t);
    const double droll = cfg.roll_amp * 2.0 * kPi * cfg.roll_freq *
                         std::cos(2.0 * kPi * cfg.roll_freq * t);
    const double pitch = cfg.pitch_amp * std::sin(2.0 * kPi * cfg.pitch_freq * t + 1.0);
    const double dpitch = cfg.pitch_amp * 2.0 * kPi * cfg.pitch_freq *
                          std::cos(2.0 * kPi * cfg.pitch_freq * t + 1.0);

    const Mat3 rx = rot_x(roll);
    const Mat3 ry = rot_y(pitch);
    const Mat3 rot = rot_z(y(0)) * ry * rx;

    // Body rate for R = Rz(c)Ry(b)Rx(a):
    //   w = c' Rx^T Ry^T e_z + b' Rx^T e_y + a' e_x
    const Vec3 omega_true = dy(0) * (rx.transpose() * (ry.transpose() * Vec3::UnitZ())) +
                            dpitch * (rx.transpose() * Vec3::UnitY()) +
                            droll * Vec3::UnitX();
    const Vec3 accel_true = rot.transpose() * a;

    out.poses[k] = PoseSample{t, rot, p, v};

    ImuSample m;
    m.t = t;
    m.omega = omega_true + bg;
    m.accel = accel_true - rot.transpose() * kGravityWorld + ba;
    if (gyro_white > 0.0)
      m.omega += gyro_white * Vec3(gauss(rng), gauss(rng), gauss(rng));
    if (accel_white > 0.0)
      m.accel += accel_white * Vec3(gauss(rng), gauss(rng), gauss(rng));
    out.imu[k] = m;

    if (cfg.gyro_bias_walk > 0.0)
      bg += cfg.gyro_bias_walk * std::sqrt(dt) * Vec3(gauss(rng), gauss(rng), gauss(rng));
    if (cfg.accel_bias_walk > 0.0)
      ba += cfg.accel_bias_walk * std::sqrt(dt) * Vec3(gauss(rng), gauss(rng), gauss(rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV interchange
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<double> parse_row(const std::string& line, std::size_t expected,
                                     const std::string& context) {
  std::vector<double> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw std::runtime_error(context + ": bad numeric field '" + cell + "'");
    }
  }
  if (out.size() != expected)
    throw std::runtime_error(context + ": expected " + std::to_string(expected) +
                             " fields, got " + std::to_string(out.size()));
  return out;
}

inline void expect_header(std::istream& in, const std::string& header,
                          const std::string& context) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(context + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header)
    throw std::runtime_error(context + ": header mismatch, expected '" + header + "'");
}

}  // namespace detail

inline constexpr const char* kImuCsvHeader = "t,wx,wy,wz,ax,ay,az";
inline constexpr const char* kPoseCsvHeader = "t,qw,qx,qy,qz,px,py,pz,vx,vy,vz";

inline void write_imu_csv(const std::string& path, const std::vector<ImuSample>& samples) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << kImuCsvHeader << "\n";
  for (const auto& s : samples) {
    f << detail::fmt(s.t) << ',' << detail::fmt(s.omega.x()) << ','
      << detail::fmt(s.omega.y()) << ',' << detail::fmt(s.omega.z()) << ','
      << detail::fmt(s.accel.x()) << ',' << detail::fmt(s.accel.y()) << ','
      << detail::fmt(s.accel.z()) << "\n";
  }
}

inline std::vector<ImuSample> read_imu_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  detail::expect_header(f, kImuCsvHeader, path);
  std::vector<ImuSample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto v = detail::parse_row(line, 7, path);
    ImuSample s;
    s.t = v[0];
    s.omega = Vec3(v[1], v[2], v[3]);
    s.accel = Vec3(v[4], v[5], v[6]);
    out.push_back(s);
  }
  return out;
}

inline void write_pose_csv(const std::string& path, const std::vector<PoseSample>& poses) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << kPoseCsvHeader << "\n";
  for (const auto& p : poses) {
    const Eigen::Quaterniond q(p.rot);
    f << detail::fmt(p.t) << ',' << detail::fmt(q.w()) << ',' << detail::fmt(q.x())
      << ',' << detail::fmt(q.y()) << ',' << detail::fmt(q.z()) << ','
      << detail::fmt(p.pos.x()) << ',' << detail::fmt(p.pos.y()) << ','
      << detail::fmt(p.pos.z()) << ',' << detail::fmt(p.vel.x()) << ','
      << detail::fmt(p.vel.y()) << ',' << detail::fmt(p.vel.z()) << "\n";
  }
}

inline std::vector<PoseSample> read_pose_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  detail::expect_header(f, kPoseCsvHeader, path);
  std::vector<PoseSample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto v = detail::parse_row(line, 11, path);
    PoseSample p;
    p.t = v[0];
    p.rot = Eigen::Quaterniond(v[1], v[2], v[3], v[4]).normalized().toRotationMatrix();
    p.pos = Vec3(v[5], v[6], v[7]);
    p.vel = Vec3(v[8], v[9], v[10]);
    out.push_back(p);
  }
  return out;
}

}  // namespace eqnio::imu
