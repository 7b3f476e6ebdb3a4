#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "eqnio/group.hpp"
#include "eqnio/imu.hpp"
#include "test_support.hpp"

using namespace eqnio;
using Catch::Approx;

TEST_CASE("extrinsic XYZ yaw split", "[imu]") {
  const auto id = imu::extrinsic_xyz_yaw(Mat3::Identity());
  CHECK(id.yaw == 0.0);
  CHECK(id.yaw_free.isApprox(Mat3::Identity()));
  CHECK_FALSE(id.degenerate);

  const double deg30 = kPi / 6.0;
  const auto pure = imu::extrinsic_xyz_yaw(rot_z(deg30));
  CHECK(pure.yaw == Approx(deg30).margin(1e-12));
  CHECK(pure.yaw_free.isApprox(Mat3::Identity(), 1e-12));

  const double deg40 = 40.0 * kPi / 180.0;
  const double deg10 = 10.0 * kPi / 180.0;
  const auto mixed = imu::extrinsic_xyz_yaw(rot_z(deg40) * rot_x(deg10));
  CHECK(mixed.yaw == Approx(deg40).margin(1e-12));
  CHECK(mixed.yaw_free.isApprox(rot_x(deg10), 1e-12));

  // Reassembly holds for arbitrary rotations.
  auto g = test::rng(21);
  for (int i = 0; i < 40; ++i) {
    const Mat3 r = exp_so3(test::random_vec3(g));
    const auto s = imu::extrinsic_xyz_yaw(r);
    CHECK((rot_z(s.yaw) * s.yaw_free - r).cwiseAbs().maxCoeff() < 1e-12);
    // The yaw-free factor has no extrinsic-z yaw left.
    CHECK(std::abs(imu::extrinsic_xyz_yaw(s.yaw_free).yaw) < 1e-12);
  }

  const auto gimbal = imu::extrinsic_xyz_yaw(rot_y(kPi / 2.0));
  CHECK(gimbal.degenerate);
  CHECK(gimbal.yaw == 0.0);
}

TEST_CASE("gravity alignment basics", "[imu]") {
  std::vector<imu::ImuSample> raw(4);
  for (int k = 0; k < 4; ++k) {
    raw[k].t = 0.1 * k;
    raw[k].omega = Vec3(0.1 * k, -0.2, 0.3);
    raw[k].accel = Vec3(1.0, 2.0 + k, -0.5);
  }

  SECTION("identity orientations leave the window unchanged") {
    std::vector<Mat3> rots(4, Mat3::Identity());
    const auto win = imu::gravity_align(raw, rots, 0, 4);
    REQUIRE(win.samples.size() == 4);
    for (int k = 0; k < 4; ++k) {
      CHECK(win.samples[k].omega.isApprox(raw[k].omega));
      CHECK(win.samples[k].accel.isApprox(raw[k].accel));
    }
    CHECK(win.align_rot.isApprox(Mat3::Identity()));
  }

  SECTION("pure yaw orientations cancel") {
    std::vector<Mat3> rots(4, rot_z(1.2));
    const auto win = imu::gravity_align(raw, rots, 0, 4);
    for (int k = 0; k < 4; ++k) {
      CHECK(win.samples[k].accel.isApprox(raw[k].accel, 1e-12));
      CHECK(win.samples[k].omega.isApprox(raw[k].omega, 1e-12));
    }
  }

  SECTION("stationary tilted IMU aligns gravity onto +z") {
    const Mat3 tilt = rot_x(0.4) * rot_y(-0.25) * rot_z(0.9);
    std::vector<imu::ImuSample> still(3);
    for (auto& s : still) s.accel = -tilt.transpose() * kGravityWorld;
    std::vector<Mat3> rots(3, tilt);
    const auto win = imu::gravity_align(still, rots, 0, 3);
    for (const auto& s : win.samples) {
      CHECK(s.accel.isApprox(Vec3(0, 0, 9.81), 1e-10));
    }
  }

  SECTION("window bounds are checked") {
    std::vector<Mat3> rots(4, Mat3::Identity());
    CHECK_THROWS_AS(imu::gravity_align(raw, rots, 2, 8), std::out_of_range);
    CHECK_THROWS_AS(imu::gravity_align(raw, rots, 3, 3), std::out_of_range);
  }
}

namespace {

imu::SimConfig quiet_cfg(double duration = 10.0) {
  imu::SimConfig cfg;
  cfg.duration = duration;
  cfg.waypoints = 6;
  return cfg;
}

}  // namespace

TEST_CASE("gravity alignment is yaw invariant and reflection equivariant", "[imu]") {
  const auto sim = imu::simulate_trajectory(quiet_cfg(), 5);
  std::vector<Mat3> rots(sim.poses.size());
  for (std::size_t i = 0; i < rots.size(); ++i) rots[i] = sim.poses[i].rot;

  const std::size_t b = 200, e = 400;
  const auto base = imu::gravity_align(sim.imu, rots, b, e);

  SECTION("world yaw rotation leaves aligned windows unchanged") {
    for (double theta : {0.4, 1.9, -2.7}) {
      std::vector<Mat3> rotated(rots.size());
      for (std::size_t i = 0; i < rots.size(); ++i) rotated[i] = rot_z(theta) * rots[i];
      const auto win = imu::gravity_align(sim.imu, rotated, b, e);
      for (std::size_t k = 0; k < win.samples.size(); ++k) {
        CHECK((win.samples[k].accel - base.samples[k].accel).norm() < 1e-9);
        CHECK((win.samples[k].omega - base.samples[k].omega).norm() < 1e-9);
      }
    }
  }

  SECTION("mirrored trajectory maps the window by the group actions") {
    // Mirror the world across a vertical plane and the body frame across
    // another; the mirrored raw data are what a reflected run would record.
    const Mat3 s_world = group::lift3(group::YawFrame::reflection(0.35));
    const Mat3 s_body = group::lift3(group::YawFrame::reflection(-0.6));

    std::vector<imu::ImuSample> mirrored(sim.imu.size());
    std::vector<Mat3> mrots(rots.size());
    for (std::size_t i = 0; i < rots.size(); ++i) {
      mrots[i] = s_world * rots[i] * s_body;
      mirrored[i].t = sim.imu[i].t;
      mirrored[i].accel = s_body * sim.imu[i].accel;
      mirrored[i].omega = -(s_body * sim.imu[i].omega);
    }
    const auto win = imu::gravity_align(mirrored, mrots, b, e);

    // The two windows must differ by a fixed yaw roto-reflection.
    const double yaw0 = imu::extrinsic_xyz_yaw(rots[b]).yaw;
    const double myaw0 = imu::extrinsic_xyz_yaw(mrots[b]).yaw;
    const Mat2 m2 = (rot_z(myaw0).transpose() * s_world * rot_z(yaw0)).topLeftCorner<2, 2>();
    const auto frame = group::YawFrame::from_matrix(m2);
    REQUIRE(frame.det() == Approx(-1.0).margin(1e-9));

    for (std::size_t k = 0; k < win.samples.size(); ++k) {
      CHECK((win.samples[k].accel - group::act_accel(frame, base.samples[k].accel)).norm() < 1e-9);
      CHECK((win.samples[k].omega - group::act_omega(frame, base.samples[k].omega)).norm() < 1e-9);
    }
  }
}

TEST_CASE("simulator is deterministic and honors the measurement model", "[imu]") {
  SECTION("same seed, same bytes") {
    imu::SimConfig cfg = quiet_cfg(4.0);
    cfg.gyro_noise = 1e-3;
    cfg.accel_noise = 1e-2;
    cfg.gyro_bias = 0.01;
    cfg.accel_bias = 0.05;
    const auto a = imu::simulate_trajectory(cfg, 42);
    const auto b = imu::simulate_trajectory(cfg, 42);
    REQUIRE(a.imu.size() == b.imu.size());
    for (std::size_t i = 0; i < a.imu.size(); ++i) {
      CHECK(a.imu[i].omega == b.imu[i].omega);
      CHECK(a.imu[i].accel == b.imu[i].accel);
      CHECK(a.poses[i].pos == b.poses[i].pos);
    }
  }

  SECTION("zero-velocity config reads pure gravity") {
    imu::SimConfig cfg;
    cfg.duration = 2.0;
    cfg.waypoints = 4;
    cfg.arena = 0.0;
    cfg.height_var = 0.0;
    cfg.roll_amp = cfg.pitch_amp = 0.0;
    cfg.yaw_jitter = 0.0;
    const auto sim = imu::simulate_trajectory(cfg, 7);
    for (const auto& s : sim.imu) {
      CHECK(s.omega.norm() < 1e-14);
      CHECK((s.accel - Vec3(0, 0, 9.81)).norm() < 1e-12);
    }
    for (const auto& p : sim.poses) CHECK((p.pos - sim.poses[0].pos).norm() < 1e-14);
  }

  SECTION("invalid configs are rejected") {
    imu::SimConfig cfg;
    cfg.rate = 0.0;
    CHECK_THROWS_AS(imu::simulate_trajectory(cfg, 1), std::invalid_argument);
    cfg = imu::SimConfig{};
    cfg.duration = -1.0;
    CHECK_THROWS_AS(imu::simulate_trajectory(cfg, 1), std::invalid_argument);
  }
}

TEST_CASE("noise-free IMU double-integrates back to the trajectory", "[imu]") {
  const auto sim = imu::simulate_trajectory(quiet_cfg(10.0), 3);
  const double dt = 1.0 / 200.0;

  // Trapezoidal strapdown oracle.
  Mat3 r = sim.poses[0].rot;
  Vec3 v = sim.poses[0].vel;
  Vec3 p = sim.poses[0].pos;
  double path = 0.0, worst = 0.0;
  for (std::size_t k = 0; k + 1 < sim.imu.size(); ++k) {
    const Vec3 w_mid = 0.5 * (sim.imu[k].omega + sim.imu[k + 1].omega);
    const Mat3 r_next = r * exp_so3(w_mid * dt);
    const Vec3 acc_w0 = r * sim.imu[k].accel + kGravityWorld;
    const Vec3 acc_w1 = r_next * sim.imu[k + 1].accel + kGravityWorld;
    const Vec3 v_next = v + 0.5 * dt * (acc_w0 + acc_w1);
    p += 0.5 * dt * (v + v_next);
    r = r_next;
    v = v_next;
    path += (sim.poses[k + 1].pos - sim.poses[k].pos).norm();
    worst = std::max(worst, (p - sim.poses[k + 1].pos).norm());
  }
  REQUIRE(path > 1.0);
  CHECK(worst / path < 1e-3);
}

TEST_CASE("finite differences of poses match the analytic rates", "[imu]") {
  const auto cfg = quiet_cfg(10.0);
  const auto sim = imu::simulate_trajectory(cfg, 9);
  const double dt = 1.0 / cfg.rate;
  const double knot = cfg.duration / (cfg.waypoints - 1);

  double worst_w = 0.0, worst_a = 0.0;
  for (std::size_t k = 1; k + 1 < sim.poses.size(); ++k) {
    const double t = sim.poses[k].t;
    // The interpolant's curvature jumps at the knots; sample inside segments.
    const double frac = std::abs(t / knot - std::round(t / knot)) * knot;
    if (frac < 2.5 * dt) continue;

    const Vec3 w_fd =
        log_so3(sim.poses[k - 1].rot.transpose() * sim.poses[k + 1].rot) / (2.0 * dt);
    const Vec3 a_fd = sim.poses[k].rot.transpose() *
                      ((sim.poses[k + 1].pos - 2.0 * sim.poses[k].pos +
                        sim.poses[k - 1].pos) /
                       (dt * dt));
    // Noise-free measurements expose the true rates directly.
    const Vec3 w_true = sim.imu[k].omega;
    const Vec3 a_true = sim.imu[k].accel + sim.poses[k].rot.transpose() * kGravityWorld;
    worst_w = std::max(worst_w, (w_fd - w_true).norm());
    worst_a = std::max(worst_a, (a_fd - a_true).norm());
  }
  CHECK(worst_w < 1e-4);
  CHECK(worst_a < 1e-4);
}

TEST_CASE("CSV round trip is exact", "[imu]") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "eqnio_imu_csv_test";
  fs::create_directories(dir);

  imu::SimConfig cfg = quiet_cfg(1.0);
  cfg.gyro_noise = 1e-3;
  const auto sim = imu::simulate_trajectory(cfg, 11);

  const auto imu_path = (dir / "imu.csv").string();
  const auto gt_path = (dir / "gt.csv").string();
  imu::write_imu_csv(imu_path, sim.imu);
  imu::write_pose_csv(gt_path, sim.poses);

  const auto imu_back = imu::read_imu_csv(imu_path);
  REQUIRE(imu_back.size() == sim.imu.size());
  for (std::size_t i = 0; i < imu_back.size(); ++i) {
    CHECK(imu_back[i].t == sim.imu[i].t);
    CHECK(imu_back[i].omega == sim.imu[i].omega);
    CHECK(imu_back[i].accel == sim.imu[i].accel);
  }

  const auto poses_back = imu::read_pose_csv(gt_path);
  REQUIRE(poses_back.size() == sim.poses.size());
  for (std::size_t i = 0; i < poses_back.size(); ++i) {
    CHECK((poses_back[i].rot - sim.poses[i].rot).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(poses_back[i].pos == sim.poses[i].pos);
    CHECK(poses_back[i].vel == sim.poses[i].vel);
  }

  CHECK_THROWS_WITH(imu::read_imu_csv(gt_path),
                    Catch::Matchers::ContainsSubstring("header mismatch"));
  fs::remove_all(dir);
}
