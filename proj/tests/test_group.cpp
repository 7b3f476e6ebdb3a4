#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/KroneckerProduct>

#include "eqnio/group.hpp"
#include "test_support.hpp"

using namespace eqnio;
using group::YawFrame;

namespace {

Mat3 lift_oracle(const Mat2& m) {
  Mat3 out = Mat3::Identity();
  out.topLeftCorner<2, 2>() = m;
  return out;
}

}  // namespace

TEST_CASE("lift3 embeds the planar block and fixes z", "[group]") {
  CHECK(group::lift3(YawFrame()).isApprox(Mat3::Identity(), 1e-15));

  Mat3 quarter;
  quarter << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  CHECK(group::lift3(YawFrame::rotation(kPi / 2)).isApprox(quarter, 1e-12));

  const Mat3 refl = group::lift3(YawFrame::reflection(0.0));
  CHECK(refl.isApprox(Vec3(1, -1, 1).asDiagonal().toDenseMatrix(), 1e-12));

  for (const auto& f : test::sample_frames(GroupMode::kO2)) {
    const Mat3 l = group::lift3(f);
    CHECK((l.transpose() * l - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((l * Vec3::UnitZ() - Vec3::UnitZ()).norm() == 0.0);
  }
}

TEST_CASE("acceleration action", "[group]") {
  CHECK(group::act_accel(YawFrame(), Vec3(1, 2, 3)).isApprox(Vec3(1, 2, 3)));
  CHECK(group::act_accel(YawFrame::rotation(kPi / 2), Vec3(1, 0, 5))
            .isApprox(Vec3(0, 1, 5), 1e-12));
  CHECK(group::act_accel(YawFrame::reflection(0.0), Vec3(1, 2, 3))
            .isApprox(Vec3(1, -2, 3), 1e-12));

  // z is untouched bit-for-bit.
  auto g = test::rng(11);
  for (int i = 0; i < 50; ++i) {
    const Vec3 v = test::random_vec3(g, 2.0);
    const auto f = test::random_frame(g, GroupMode::kO2);
    CHECK(group::act_accel(f, v).z() == v.z());
  }
}

TEST_CASE("angular-rate action flips sign on reflections", "[group]") {
  const Vec3 w(0.3, -0.2, 0.9);
  CHECK(group::act_omega(YawFrame(), w).isApprox(w));

  const auto rot = YawFrame::rotation(1.1);
  CHECK(group::act_omega(rot, w).isApprox(group::act_accel(rot, w), 1e-14));

  CHECK(group::act_omega(YawFrame::reflection(0.0), Vec3(0, 0, 1))
            .isApprox(Vec3(0, 0, -1), 1e-14));

  auto g = test::rng(12);
  for (int i = 0; i < 20; ++i) {
    const auto f = YawFrame::reflection(test::uniform(g, -kPi, kPi));
    const Vec3 v = test::random_vec3(g);
    CHECK(group::act_omega(f, v).isApprox(-group::act_accel(f, v), 1e-13));
  }
}

TEST_CASE("covariance action is a congruence", "[group]") {
  const Mat3 sigma = Vec3(1, 4, 9).asDiagonal();
  CHECK(group::act_cov(YawFrame(), sigma).isApprox(sigma));
  CHECK(group::act_cov(YawFrame::rotation(kPi / 2), sigma)
            .isApprox(Vec3(4, 1, 9).asDiagonal().toDenseMatrix(), 1e-12));

  auto g = test::rng(13);
  for (int i = 0; i < 40; ++i) {
    const Mat3 s = test::random_psd(g);
    const auto f = test::random_frame(g, GroupMode::kO2);
    const Mat3 out = group::act_cov(f, s);

    CHECK((out - out.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(out.trace() - s.trace()) < 1e-10);
    CHECK(std::abs(out.determinant() - s.determinant()) < 1e-10);

    // Eigendecomposition oracle: the spectrum must be preserved.
    Eigen::SelfAdjointEigenSolver<Mat3> ein(s), eout(out);
    CHECK((ein.eigenvalues() - eout.eigenvalues()).cwiseAbs().maxCoeff() <
          1e-10);
  }
}

TEST_CASE("covariance action agrees with the Kronecker route", "[group]") {
  auto g = test::rng(14);
  for (int i = 0; i < 20; ++i) {
    const Mat3 s = test::random_psd(g);
    const auto f = test::random_frame(g, GroupMode::kO2);
    const Mat3 r3 = group::lift3(f);

    Eigen::Matrix<double, 9, 9> rho = Eigen::kroneckerProduct(r3, r3);
    Eigen::Matrix<double, 9, 1> vec_s(s.reshaped());
    const Mat3 via_kron = Mat3((rho * vec_s).reshaped(3, 3));
    CHECK(via_kron.isApprox(group::act_cov(f, s), 1e-12));
  }
}

TEST_CASE("actions are homomorphisms", "[group]") {
  auto g = test::rng(15);
  for (int i = 0; i < 60; ++i) {
    const auto f1 = test::random_frame(g, GroupMode::kO2);
    const auto f2 = test::random_frame(g, GroupMode::kO2);
    const auto f12 = f1 * f2;
    const Vec3 v = test::random_vec3(g);
    const Mat3 s = test::random_psd(g);

    CHECK((group::act_accel(f12, v) -
           group::act_accel(f1, group::act_accel(f2, v)))
              .norm() < 1e-12);
    CHECK((group::act_omega(f12, v) -
           group::act_omega(f1, group::act_omega(f2, v)))
              .norm() < 1e-12);
    CHECK((group::act_cov(f12, s) - group::act_cov(f1, group::act_cov(f2, s)))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
  }
}

TEST_CASE("frame construction snaps to the orthogonal group", "[group]") {
  Mat2 dirty;
  dirty << 1.0 + 3e-5, 2e-5, -1e-5, 1.0 - 4e-5;
  const auto f = YawFrame::from_matrix(dirty);
  const Mat2 m = f.matrix();
  CHECK((m.transpose() * m - Mat2::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(std::abs(f.det()) - 1.0) < 1e-12);

  // A matrix that is already orthogonal passes through untouched.
  const Mat2 clean = YawFrame::rotation(0.7).matrix();
  CHECK(YawFrame::from_matrix(clean).matrix().isApprox(clean, 1e-15));

  CHECK(YawFrame::rotation(0.3).inverse().matrix().isApprox(
      YawFrame::rotation(-0.3).matrix(), 1e-15));
}
