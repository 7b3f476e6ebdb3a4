#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "eqnio/checkpoint.hpp"
#include "eqnio/eqnet.hpp"
#include "test_support.hpp"

using namespace eqnio;
using Catch::Approx;

namespace {

template <typename T>
eqnet::EqTensor<T> random_tensor(std::mt19937_64& g, int n, int cv, int cs) {
  eqnet::EqTensor<T> t;
  t.vectors.resize(2 * n, cv);
  t.scalars.resize(n, cs);
  for (Eigen::Index c = 0; c < t.vectors.cols(); ++c)
    for (Eigen::Index r = 0; r < t.vectors.rows(); ++r)
      t.vectors(r, c) = static_cast<T>(test::gauss(g));
  for (Eigen::Index c = 0; c < t.scalars.cols(); ++c)
    for (Eigen::Index r = 0; r < t.scalars.rows(); ++r)
      t.scalars(r, c) = static_cast<T>(test::gauss(g));
  return t;
}

template <typename T>
eqnet::EqTensor<T> act(const group::YawFrame& f, const eqnet::EqTensor<T>& in) {
  eqnet::EqTensor<T> out = in;
  out.vectors = eqnet::apply_planar<T>(f.matrix().cast<T>(), in.vectors);
  return out;
}

/// Central-difference check of accumulated parameter gradients against a
/// scalar loss functional. Returns the worst relative error over `probes`
/// randomly chosen parameter coordinates.
template <typename Model, typename LossFn>
double max_param_grad_err(Model& model, LossFn&& loss, int probes,
                          std::mt19937_64& g, double step = 1e-6) {
  std::vector<std::pair<MatX<double>*, MatX<double>*>> params;
  model.visit("p", [&](const std::string&, MatX<double>& w, MatX<double>& gw) {
    params.push_back({&w, &gw});
  });

  double worst = 0.0;
  for (int p = 0; p < probes; ++p) {
    auto& [w, gw] = params[g() % params.size()];
    if (w->size() == 0) continue;
    const Eigen::Index idx = static_cast<Eigen::Index>(g() % w->size());
    const double analytic = (*gw)(idx);
    const double saved = (*w)(idx);
    (*w)(idx) = saved + step;
    const double up = loss();
    (*w)(idx) = saved - step;
    const double dn = loss();
    (*w)(idx) = saved;
    const double numeric = (up - dn) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace

TEST_CASE("weight basis solver", "[eqnet]") {
  const auto so2 = eqnet::solve_weight_basis(GroupMode::kSO2);
  CHECK(so2.size() == 2);
  const auto o2 = eqnet::solve_weight_basis(GroupMode::kO2);
  CHECK(o2.size() == 1);

  // Every basis element commutes with fresh group samples.
  for (const auto& basis : {so2, o2}) {
    for (const auto& w : basis) {
      for (const auto& f : test::sample_frames(basis.size() == 1 ? GroupMode::kO2
                                                                 : GroupMode::kSO2)) {
        const Mat2 r = f.matrix();
        CHECK((r * w - w * r).cwiseAbs().maxCoeff() < 1e-10);
      }
    }
  }

  // The O(2) solution is a multiple of the identity; SO(2) spans {I, R90}.
  CHECK(std::abs(o2[0](0, 0) - o2[0](1, 1)) < 1e-10);
  CHECK(std::abs(o2[0](0, 1)) < 1e-10);
  Mat2 r90;
  r90 << 0, -1, 1, 0;
  for (const auto& w : so2) {
    // Components outside span{I, R90} must vanish.
    const double ci = 0.5 * (w(0, 0) + w(1, 1));
    const double cr = 0.5 * (w(1, 0) - w(0, 1));
    CHECK((w - ci * Mat2::Identity() - cr * r90).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("equivariant linear layer", "[eqnet]") {
  auto g = test::rng(51);

  SECTION("identity weights") {
    eqnet::EqLinear<double> lin;
    lin.init(3, 3, GroupMode::kSO2, g);
    lin.w1 = Mat3::Identity();
    lin.w2.setZero();
    const auto x = random_tensor<double>(g, 4, 3, 1);
    CHECK(lin.forward(x.vectors).isApprox(x.vectors, 1e-14));
  }

  SECTION("frozen single-channel case") {
    eqnet::EqLinear<double> lin;
    lin.init(1, 1, GroupMode::kSO2, g);
    lin.w1(0, 0) = 2.0;
    lin.w2(0, 0) = 3.0;
    MatX<double> v(2, 1);
    v << 1.0, 0.0;
    const MatX<double> y = lin.forward(v);
    CHECK(y(0, 0) == Approx(2.0));
    CHECK(y(1, 0) == Approx(3.0));

    MatX<double> v_rot(2, 1);
    v_rot << 0.0, 1.0;  // R90 * (1,0)
    const MatX<double> y_rot = lin.forward(v_rot);
    CHECK(y_rot(0, 0) == Approx(-3.0));
    CHECK(y_rot(1, 0) == Approx(2.0));
  }

  SECTION("equivariance in both modes") {
    for (auto mode : {GroupMode::kSO2, GroupMode::kO2}) {
      eqnet::EqLinear<double> lin;
      lin.init(3, 5, mode, g);
      const auto x = random_tensor<double>(g, 6, 3, 1);
      const MatX<double> y = lin.forward(x.vectors);
      for (const auto& f : test::sample_frames(mode)) {
        const Mat2 r = f.matrix();
        const MatX<double> yr = lin.forward(eqnet::apply_planar<double>(r, x.vectors));
        CHECK((yr - eqnet::apply_planar<double>(r, y)).cwiseAbs().maxCoeff() < 1e-9);
      }
    }
  }

  SECTION("shape mismatch throws") {
    eqnet::EqLinear<double> lin;
    lin.init(3, 5, GroupMode::kSO2, g);
    MatX<double> bad(4, 2);
    bad.setZero();
    CHECK_THROWS_AS(lin.forward(bad), std::invalid_argument);
  }

  SECTION("gradients match finite differences") {
    eqnet::EqLinear<double> lin;
    lin.init(3, 4, GroupMode::kSO2, g);
    const auto x = random_tensor<double>(g, 5, 3, 1);
    MatX<double> c(10, 4);
    for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = test::gauss(g);

    const auto loss = [&] { return (lin.forward(x.vectors).array() * c.array()).sum(); };
    lin.zero_grad();
    lin.backward(x.vectors, c);
    CHECK(max_param_grad_err(lin, loss, 40, g) < 1e-7);

    // Input gradient against finite differences.
    lin.zero_grad();
    const MatX<double> gx = lin.backward(x.vectors, c);
    auto xs = x;
    for (int p = 0; p < 20; ++p) {
      const Eigen::Index idx = static_cast<Eigen::Index>(g() % xs.vectors.size());
      const double saved = xs.vectors(idx);
      xs.vectors(idx) = saved + 1e-6;
      const double up = (lin.forward(xs.vectors).array() * c.array()).sum();
      xs.vectors(idx) = saved - 1e-6;
      const double dn = (lin.forward(xs.vectors).array() * c.array()).sum();
      xs.vectors(idx) = saved;
      CHECK(gx(idx) == Approx((up - dn) / 2e-6).margin(1e-7));
    }
  }
}

TEST_CASE("equivariant temporal convolution", "[eqnet]") {
  auto g = test::rng(52);

  SECTION("k = 1 reduces to the linear layer") {
    eqnet::EqConv1d<double> conv;
    conv.init(3, 4, 1, GroupMode::kSO2, g, 1, 0);
    eqnet::EqLinear<double> lin;
    lin.init(3, 4, GroupMode::kSO2, g);
    lin.w1 = conv.w1;
    lin.w2 = conv.w2;
    const auto x = random_tensor<double>(g, 6, 3, 1);
    CHECK(conv.forward(x.vectors).isApprox(lin.forward(x.vectors), 1e-13));
  }

  SECTION("constant input sums the taps") {
    eqnet::EqConv1d<double> conv;
    conv.init(2, 3, 4, GroupMode::kSO2, g, 1, 0);  // valid convolution
    MatX<double> block(2, 2);
    block << 0.3, -1.2, 0.8, 0.4;
    MatX<double> x(2 * 9, 2);
    for (int t = 0; t < 9; ++t) x.middleRows(2 * t, 2) = block;

    eqnet::EqLinear<double> summed;
    summed.init(2, 3, GroupMode::kSO2, g);
    summed.w1.setZero();
    summed.w2.setZero();
    for (int tap = 0; tap < 4; ++tap) {
      summed.w1 += conv.w1.middleRows(2 * tap, 2);
      summed.w2 += conv.w2.middleRows(2 * tap, 2);
    }
    const MatX<double> y = conv.forward(x);
    const MatX<double> expect = summed.forward(block);
    REQUIRE(y.rows() == 2 * 6);
    for (int t = 0; t < 6; ++t) {
      CHECK((y.middleRows(2 * t, 2) - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  SECTION("equivariance with padding and stride") {
    for (auto mode : {GroupMode::kSO2, GroupMode::kO2}) {
      eqnet::EqConv1d<double> conv;
      conv.init(3, 4, 5, mode, g, 2, 2);
      const auto x = random_tensor<double>(g, 11, 3, 1);
      const MatX<double> y = conv.forward(x.vectors);
      for (const auto& f : test::sample_frames(mode)) {
        const Mat2 r = f.matrix();
        const MatX<double> yr = conv.forward(eqnet::apply_planar<double>(r, x.vectors));
        CHECK((yr - eqnet::apply_planar<double>(r, y)).cwiseAbs().maxCoeff() < 1e-9);
      }
    }
  }

  SECTION("gradients match finite differences") {
    eqnet::EqConv1d<double> conv;
    conv.init(2, 3, 3, GroupMode::kSO2, g);
    const auto x = random_tensor<double>(g, 7, 2, 1);
    MatX<double> c(2 * 7, 3);
    for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = test::gauss(g);
    const auto loss = [&] { return (conv.forward(x.vectors).array() * c.array()).sum(); };
    conv.zero_grad();
    conv.backward(x.vectors, c);
    CHECK(max_param_grad_err(conv, loss, 60, g) < 1e-7);
  }
}

TEST_CASE("gated nonlinearity", "[eqnet]") {
  auto g = test::rng(53);

  SECTION("unit gains pass vectors through") {
    eqnet::GatedNonlin<double> gate;
    gate.init(3, g);
    gate.m1.w.setZero();
    gate.m1.b.setZero();
    gate.m2.w.setZero();
    gate.m2.b.setZero();
    gate.m2.b.row(0).head(3).setOnes();  // gamma = 1
    const auto x = random_tensor<double>(g, 5, 3, 3);
    typename eqnet::GatedNonlin<double>::Cache cache;
    const auto [v_out, s_out] = gate.forward(x.vectors, x.scalars, cache);
    CHECK(v_out.isApprox(x.vectors, 1e-14));
  }

  SECTION("vectors stay equivariant, scalars invariant") {
    eqnet::GatedNonlin<double> gate;
    gate.init(4, g);
    const auto x = random_tensor<double>(g, 6, 4, 4);
    typename eqnet::GatedNonlin<double>::Cache cache;
    const auto [v0, s0] = gate.forward(x.vectors, x.scalars, cache);
    for (const auto& f : test::sample_frames(GroupMode::kO2)) {
      const auto xr = act(f, x);
      typename eqnet::GatedNonlin<double>::Cache cr;
      const auto [vr, sr] = gate.forward(xr.vectors, xr.scalars, cr);
      CHECK((vr - eqnet::apply_planar<double>(f.matrix(), v0)).cwiseAbs().maxCoeff() < 1e-9);
      CHECK((sr - s0).cwiseAbs().maxCoeff() < 1e-9);
    }
  }

  SECTION("zero-vector channels stay zero with finite gradients") {
    eqnet::GatedNonlin<double> gate;
    gate.init(2, g);
    auto x = random_tensor<double>(g, 4, 2, 2);
    x.vectors.col(0).setZero();
    typename eqnet::GatedNonlin<double>::Cache cache;
    const auto [v_out, s_out] = gate.forward(x.vectors, x.scalars, cache);
    CHECK(v_out.col(0).isZero(0.0));

    MatX<double> gv = MatX<double>::Ones(4 * 2, 2);
    MatX<double> gs = MatX<double>::Ones(4, 2);
    gate.zero_grad();
    const auto [gx, gsx] = gate.backward(x.vectors, x.scalars, cache, gv, gs);
    CHECK(gx.allFinite());
    CHECK(gsx.allFinite());
  }

  SECTION("gradients match finite differences") {
    eqnet::GatedNonlin<double> gate;
    gate.init(3, g);
    const auto x = random_tensor<double>(g, 4, 3, 3);
    MatX<double> cv(8, 3), cs(4, 3);
    for (Eigen::Index i = 0; i < cv.size(); ++i) cv(i) = test::gauss(g);
    for (Eigen::Index i = 0; i < cs.size(); ++i) cs(i) = test::gauss(g);
    const auto loss = [&] {
      typename eqnet::GatedNonlin<double>::Cache cache;
      const auto [v, s] = gate.forward(x.vectors, x.scalars, cache);
      return (v.array() * cv.array()).sum() + (s.array() * cs.array()).sum();
    };
    typename eqnet::GatedNonlin<double>::Cache cache;
    gate.forward(x.vectors, x.scalars, cache);
    gate.zero_grad();
    gate.backward(x.vectors, x.scalars, cache, cv, cs);
    CHECK(max_param_grad_err(gate, loss, 60, g) < 1e-6);
  }
}

TEST_CASE("vector layer norm", "[eqnet]") {
  auto g = test::rng(54);

  SECTION("single unit-norm channel is nearly unchanged") {
    MatX<double> v(2, 1);
    v << 0.6, 0.8;
    const MatX<double> out = eqnet::vector_layernorm(v);
    CHECK((out - v).cwiseAbs().maxCoeff() < 1e-5);
  }

  SECTION("scale normalization") {
    const auto x = random_tensor<double>(g, 5, 3, 1);
    const MatX<double> base = eqnet::vector_layernorm(x.vectors);
    const MatX<double> scaled = eqnet::vector_layernorm(MatX<double>(3.7 * x.vectors));
    CHECK((scaled - base).cwiseAbs().maxCoeff() < 1e-5);
  }

  SECTION("equivariance") {
    const auto x = random_tensor<double>(g, 5, 3, 1);
    const MatX<double> base = eqnet::vector_layernorm(x.vectors);
    for (const auto& f : test::sample_frames(GroupMode::kO2)) {
      const Mat2 r = f.matrix();
      const MatX<double> out =
          eqnet::vector_layernorm(eqnet::apply_planar<double>(r, x.vectors));
      CHECK((out - eqnet::apply_planar<double>(r, base)).cwiseAbs().maxCoeff() < 1e-9);
    }
  }

  SECTION("gradient matches finite differences") {
    auto x = random_tensor<double>(g, 4, 3, 1);
    MatX<double> c(8, 3);
    for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = test::gauss(g);
    const MatX<double> gx = eqnet::vector_layernorm_backward(x.vectors, c);
    for (int p = 0; p < 30; ++p) {
      const Eigen::Index idx = static_cast<Eigen::Index>(g() % x.vectors.size());
      const double saved = x.vectors(idx);
      x.vectors(idx) = saved + 1e-6;
      const double up = (eqnet::vector_layernorm(x.vectors).array() * c.array()).sum();
      x.vectors(idx) = saved - 1e-6;
      const double dn = (eqnet::vector_layernorm(x.vectors).array() * c.array()).sum();
      x.vectors(idx) = saved;
      CHECK(gx(idx) == Approx((up - dn) / 2e-6).margin(1e-6));
    }
  }
}

TEST_CASE("frame network", "[eqnet]") {
  auto g = test::rng(55);

  SECTION("end-to-end equivariance, double precision") {
    for (auto mode : {GroupMode::kSO2, GroupMode::kO2}) {
      eqnet::FrameNetConfig cfg = eqnet::default_frame_config(mode);
      cfg.hidden = 12;
      cfg.kernel = 5;
      for (int draw = 0; draw < 3; ++draw) {
        eqnet::FrameNet<double> net;
        net.init(cfg, g);
        const auto x = random_tensor<double>(g, 24, canonical::vector_channels(mode),
                                             canonical::scalar_channels(mode));
        typename eqnet::FrameNet<double>::Cache cache;
        const auto [r1, r2] = net.forward(x, cache);
        for (const auto& f : test::sample_frames(mode)) {
          typename eqnet::FrameNet<double>::Cache cr;
          const auto [m1, m2] = net.forward(act(f, x), cr);
          CHECK((m1 - f.matrix() * r1).cwiseAbs().maxCoeff() < 1e-9);
          CHECK((m2 - f.matrix() * r2).cwiseAbs().maxCoeff() < 1e-9);
        }
      }
    }
  }

  SECTION("reflections flip the O(2) frame determinant") {
    eqnet::FrameNetConfig cfg = eqnet::default_frame_config(GroupMode::kO2);
    cfg.hidden = 12;
    eqnet::FrameNet<double> net;
    net.init(cfg, g);
    const auto x = random_tensor<double>(g, 20, 3, 9);
    typename eqnet::FrameNet<double>::Cache c0, c1;
    const auto [r1, r2] = net.forward(x, c0);
    const auto f0 = canonical::orthonormalize_frame(Vec2(r1), Vec2(r2), GroupMode::kO2);
    REQUIRE(f0);
    const auto refl = group::YawFrame::reflection(0.3);
    const auto [m1, m2] = net.forward(act(refl, x), c1);
    const auto f1 = canonical::orthonormalize_frame(Vec2(m1), Vec2(m2), GroupMode::kO2);
    REQUIRE(f1);
    CHECK(f1->det() == Approx(-f0->det()).margin(1e-9));
  }

  SECTION("float32 equivariance within 1e-5") {
    eqnet::FrameNetConfig cfg = eqnet::default_frame_config(GroupMode::kO2);
    cfg.hidden = 12;
    cfg.kernel = 5;
    eqnet::FrameNet<float> net;
    net.init(cfg, g);
    const auto x = random_tensor<float>(g, 24, 3, 9);
    typename eqnet::FrameNet<float>::Cache cache;
    const auto [r1, r2] = net.forward(x, cache);
    for (const auto& f : test::sample_frames(GroupMode::kO2)) {
      typename eqnet::FrameNet<float>::Cache cr;
      const auto [m1, m2] = net.forward(act<float>(f, x), cr);
      CHECK((m1 - f.matrix().cast<float>() * r1).cwiseAbs().maxCoeff() < 1e-5f);
    }
  }

  SECTION("all-zero input yields zero raw vectors") {
    for (auto mode : {GroupMode::kSO2, GroupMode::kO2}) {
      eqnet::FrameNetConfig cfg = eqnet::default_frame_config(mode);
      cfg.hidden = 8;
      eqnet::FrameNet<double> net;
      net.init(cfg, g);
      eqnet::EqTensor<double> zero;
      zero.vectors = MatX<double>::Zero(2 * 16, canonical::vector_channels(mode));
      zero.scalars = MatX<double>::Zero(16, canonical::scalar_channels(mode));
      typename eqnet::FrameNet<double>::Cache cache;
      const auto [r1, r2] = net.forward(zero, cache);
      CHECK(r1.norm() == 0.0);
      CHECK(r2.norm() == 0.0);
    }
  }

  SECTION("gradients through the whole stack match finite differences") {
    eqnet::FrameNetConfig cfg;
    cfg.mode = GroupMode::kSO2;
    cfg.hidden = 4;
    cfg.kernel = 3;
    cfg.conv_blocks = 1;
    eqnet::FrameNet<double> net;
    net.init(cfg, g);
    const auto x = random_tensor<double>(g, 8, 2, 5);
    const Vec2 c1(0.7, -1.1), c2(0.4, 0.9);
    const auto loss = [&] {
      typename eqnet::FrameNet<double>::Cache cache;
      const auto [r1, r2] = net.forward(x, cache);
      return c1.dot(r1) + c2.dot(r2);
    };
    typename eqnet::FrameNet<double>::Cache cache;
    net.forward(x, cache);
    net.zero_grad();
    net.backward(cache, c1, c2);
    CHECK(max_param_grad_err(net, loss, 120, g) < 1e-5);
  }
}

TEST_CASE("unconstrained baseline frame net", "[eqnet]") {
  auto g = test::rng(56);
  eqnet::NonEqFrameNet<double> net;
  net.init(GroupMode::kO2, 16, 5, 2, g);
  const auto x = random_tensor<double>(g, 20, 3, 9);

  SECTION("is not equivariant") {
    typename eqnet::NonEqFrameNet<double>::Cache c0, c1;
    const auto [r1, r2] = net.forward(x, c0);
    const auto f = group::YawFrame::rotation(1.3);
    const auto [m1, m2] = net.forward(act(f, x), c1);
    CHECK((m1 - f.matrix() * r1).norm() > 1e-3);
  }

  SECTION("gradients match finite differences") {
    const Vec2 c1(0.7, -1.1), c2(0.4, 0.9);
    const auto loss = [&] {
      typename eqnet::NonEqFrameNet<double>::Cache cache;
      const auto [r1, r2] = net.forward(x, cache);
      return c1.dot(r1) + c2.dot(r2);
    };
    typename eqnet::NonEqFrameNet<double>::Cache cache;
    net.forward(x, cache);
    net.zero_grad();
    net.backward(cache, c1, c2);
    CHECK(max_param_grad_err(net, loss, 80, g) < 1e-5);
  }
}

TEST_CASE("checkpoint round trip", "[eqnet]") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "eqnio_ckpt_test";
  fs::create_directories(dir);
  const std::string stem = (dir / "net").string();

  auto g = test::rng(57);
  eqnet::FrameNetConfig cfg = eqnet::default_frame_config(GroupMode::kO2);
  cfg.hidden = 8;
  eqnet::FrameNet<float> net;
  net.init(cfg, g);

  checkpoint::Writer<float> w(stem);
  w.add_meta("mode", "o2");
  w.add_meta("hidden", "8");
  net.visit("frame", [&](const std::string& name, MatX<float>& value, MatX<float>&) {
    w.add(name, value);
  });
  w.finish();

  const auto back = checkpoint::load<float>(stem);
  CHECK(back.meta.at("mode") == "o2");
  net.visit("frame", [&](const std::string& name, MatX<float>& value, MatX<float>&) {
    REQUIRE(back.tensors.count(name) == 1);
    CHECK(back.tensors.at(name) == value);
  });

  // Cross-precision load reproduces the values exactly (f32 -> f64 widening).
  const auto wide = checkpoint::load<double>(stem);
  net.visit("frame", [&](const std::string& name, MatX<float>& value, MatX<float>&) {
    CHECK(wide.tensors.at(name).cast<float>() == value);
  });
  fs::remove_all(dir);
}
