#pragma once

#include <Eigen/Cholesky>

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "eqnio/canonical.hpp"
#include "eqnio/checkpoint.hpp"
#include "eqnio/core.hpp"
#include "eqnio/eqnet.hpp"
#include "eqnio/imu.hpp"
#include "eqnio/nn.hpp"

// Displacement prior: frame prediction, canonicalization, a conventional
// 1-D conv backbone on the canonical channels, and the two-stage MSE -> MLE
// training loop. The whole pipeline is differentiable by hand-written VJPs,
// including the paths through frame orthonormalization and canonicalization,
// so the frame network trains end to end from the displacement loss alone.

namespace eqnio::prior {

using canonical::PriorOutput;

template <typename T>
using Vec2T = eqnet::Vec2T<T>;
template <typename T>
using Vec3T = Eigen::Matrix<T, 3, 1>;
template <typename T>
using Mat2T = eqnet::Mat2T<T>;

enum class FrameSource { kEquivariant, kNonEquivariant, kPca, kIdentity };
enum class CovMode { kEquivariant, kInvariant, kPearson };

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

struct BackboneConfig {
  int width = 32;
  int blocks = 4;
  int kernel = 5;
};

/// Residual 1-D conv stack over the canonical n x 6 channels, global mean
/// pool, then dense heads for displacement and log-std (plus raw Pearson
/// coefficients when the full-covariance ablation is on).
template <typename T>
struct Backbone {
  BackboneConfig cfg;
  int out_dim = 6;
  nn::Conv1d<T> stem;
  struct ResBlock {
    nn::Conv1d<T> c1, c2;
  };
  std::vector<ResBlock> blocks;
  nn::Dense<T> fc;
  nn::Dense<T> head;

  void init(const BackboneConfig& c, bool pearson, std::mt19937_64& rng) {
    cfg = c;
    out_dim = pearson ? 9 : 6;
    stem.init(6, cfg.width, cfg.kernel, rng);
    blocks.resize(cfg.blocks);
    for (auto& b : blocks) {
      b.c1.init(cfg.width, cfg.width, cfg.kernel, rng);
      b.c2.init(cfg.width, cfg.width, cfg.kernel, rng);
    }
    fc.init(cfg.width, cfg.width, rng);
    // Small-gain head keeps the initial displacement near zero and the
    // initial covariance near identity, which the MLE stage needs.
    head.init(cfg.width, out_dim, rng, 0.1);
  }

  void zero_grad() {
    stem.zero_grad();
    for (auto& b : blocks) {
      b.c1.zero_grad();
      b.c2.zero_grad();
    }
    fc.zero_grad();
    head.zero_grad();
  }

  struct Cache {
    MatX<T> x, s0, h0;
    struct BlockCache {
      MatX<T> in, a, b, c, sum;
    };
    std::vector<BlockCache> blk;
    MatX<T> pooled, f1, f1_act;
  };

  VecX<T> forward(const MatX<T>& channels, Cache& c) const {
    c.x = channels;
    c.s0 = stem.forward(c.x);
    c.h0 = nn::gelu(c.s0);
    const MatX<T>* h = &c.h0;
    c.blk.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& bc = c.blk[i];
      bc.in = *h;
      bc.a = blocks[i].c1.forward(bc.in);
      bc.b = nn::gelu(bc.a);
      bc.c = blocks[i].c2.forward(bc.b);
      bc.sum = bc.in + bc.c;
      h = &bc.sum;
    }
    const MatX<T> act = nn::gelu(*h);
    c.pooled = nn::mean_pool(act);
    c.f1 = fc.forward(c.pooled);
    c.f1_act = nn::gelu(c.f1);
    return head.forward(c.f1_act).row(0).transpose();
  }

  /// Returns the gradient w.r.t. the input channels.
  MatX<T> backward(const Cache& c, const VecX<T>& gout) {
    MatX<T> g(1, out_dim);
    g.row(0) = gout.transpose();
    MatX<T> gf1_act = head.backward(c.f1_act, g);
    MatX<T> gf1 = nn::gelu_backward(c.f1, gf1_act);
    MatX<T> gpooled = fc.backward(c.pooled, gf1);

    const MatX<T>& last = blocks.empty() ? c.h0 : c.blk.back().sum;
    MatX<T> gact = nn::mean_pool_backward(last.rows(), gpooled);
    MatX<T> gh = nn::gelu_backward(last, gact);
    for (int i = static_cast<int>(blocks.size()) - 1; i >= 0; --i) {
      const auto& bc = c.blk[i];
      MatX<T> gc = gh;  // sum = in + c
      MatX<T> gb = blocks[i].c2.backward(bc.b, gc);
      MatX<T> ga = nn::gelu_backward(bc.a, gb);
      gh += blocks[i].c1.backward(bc.in, ga);
    }
    MatX<T> gs0 = nn::gelu_backward(c.s0, gh);
    return stem.backward(c.x, gs0);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    stem.visit(prefix + ".stem", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].c1.visit(prefix + ".block" + std::to_string(i) + ".c1", f);
      blocks[i].c2.visit(prefix + ".block" + std::to_string(i) + ".c2", f);
    }
    fc.visit(prefix + ".fc", f);
    head.visit(prefix + ".head", f);
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct PriorConfig {
  GroupMode mode = GroupMode::kO2;
  FrameSource frame_source = FrameSource::kEquivariant;
  CovMode cov_mode = CovMode::kEquivariant;
  int window = 200;
  eqnet::FrameNetConfig frame_net = eqnet::default_frame_config(GroupMode::kO2);
  int noneq_hidden = 48;
  BackboneConfig backbone;
};

template <typename T>
struct PriorModel {
  PriorConfig cfg;
  eqnet::FrameNet<T> frame_net;
  eqnet::NonEqFrameNet<T> noneq_net;
  Backbone<T> backbone;

  void init(const PriorConfig& c, std::uint64_t seed) {
    cfg = c;
    cfg.frame_net.mode = cfg.mode;
    std::mt19937_64 rng(seed);
    if (cfg.frame_source == FrameSource::kEquivariant) {
      frame_net.init(cfg.frame_net, rng);
    } else if (cfg.frame_source == FrameSource::kNonEquivariant) {
      noneq_net.init(cfg.mode, cfg.noneq_hidden, cfg.frame_net.kernel,
                     cfg.frame_net.conv_blocks, rng);
    }
    backbone.init(cfg.backbone, cfg.cov_mode == CovMode::kPearson, rng);
  }

  void zero_grad() {
    if (cfg.frame_source == FrameSource::kEquivariant) frame_net.zero_grad();
    if (cfg.frame_source == FrameSource::kNonEquivariant) noneq_net.zero_grad();
    backbone.zero_grad();
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    if (cfg.frame_source == FrameSource::kEquivariant)
      frame_net.visit(prefix + ".frame", f);
    if (cfg.frame_source == FrameSource::kNonEquivariant)
      noneq_net.visit(prefix + ".noneq", f);
    backbone.visit(prefix + ".backbone", f);
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    visit("", [&](const std::string&, MatX<T>& w, MatX<T>&) { n += w.size(); });
    return n;
  }
};

/// Closed-form parameter count of the unconstrained baseline head, used to
/// pick a width that matches the equivariant frame net.
inline std::int64_t noneq_param_count(GroupMode mode, int hidden, int kernel, int blocks) {
  const std::int64_t cin =
      2 * canonical::vector_channels(mode) + canonical::scalar_channels(mode);
  const std::int64_t h = hidden;
  std::int64_t n = cin * h + h;                       // input dense
  n += static_cast<std::int64_t>(blocks) * (kernel * h * h + h);  // convs
  n += h * h + h;                                     // fc1
  n += 4 * h + 4;                                     // fc2
  return n;
}

inline int match_noneq_hidden(GroupMode mode, int kernel, int blocks,
                              std::int64_t target_params) {
  int best = 4;
  std::int64_t best_err = std::numeric_limits<std::int64_t>::max();
  for (int h = 4; h <= 512; ++h) {
    const std::int64_t err =
        std::abs(noneq_param_count(mode, h, kernel, blocks) - target_params);
    if (err < best_err) {
      best_err = err;
      best = h;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Differentiable frame orthonormalization and canonicalization
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Vec2T<T> rot90(const Vec2T<T>& v) {
  return Vec2T<T>(-v.y(), v.x());
}

template <typename T>
struct OrthoCache {
  Vec2T<T> b1, b2;
  T n1 = T(0), nw = T(0);
  Vec2T<T> r2;
  T proj = T(0);  // r2 . b1 (O(2) mode)
};

template <typename T>
bool orthonormalize(const Vec2T<T>& raw1, const Vec2T<T>& raw2, GroupMode mode,
                    OrthoCache<T>& c, Mat2T<T>& m) {
  c.n1 = raw1.norm();
  if (c.n1 < T(canonical::kNormEps)) return false;
  c.b1 = raw1 / c.n1;
  c.r2 = raw2;
  if (mode == GroupMode::kSO2) {
    c.b2 = rot90(c.b1);
  } else {
    c.proj = raw2.dot(c.b1);
    const Vec2T<T> w = raw2 - c.proj * c.b1;
    c.nw = w.norm();
    if (c.nw < T(canonical::kNormEps)) return false;
    c.b2 = w / c.nw;
  }
  m.col(0) = c.b1;
  m.col(1) = c.b2;
  return true;
}

template <typename T>
void orthonormalize_backward(const OrthoCache<T>& c, GroupMode mode,
                             const Mat2T<T>& gm, Vec2T<T>& graw1, Vec2T<T>& graw2) {
  Vec2T<T> gb1 = gm.col(0);
  graw2.setZero();
  if (mode == GroupMode::kSO2) {
    // b2 = R90 b1  =>  gb1 += R90^T gm.col(1)
    const Vec2T<T> g2 = gm.col(1);
    gb1 += Vec2T<T>(g2.y(), -g2.x());
  } else {
    const Vec2T<T> gb2 = gm.col(1);
    // b2 = w / |w|, w = r2 - (r2.b1) b1
    const Vec2T<T> gw = (gb2 - c.b2 * c.b2.dot(gb2)) / c.nw;
    graw2 = gw - c.b1 * c.b1.dot(gw);
    gb1 += -c.r2 * gw.dot(c.b1) - c.proj * gw;
  }
  // b1 = r1 / |r1|
  graw1 = (gb1 - c.b1 * c.b1.dot(gb1)) / c.n1;
}

template <typename T>
struct CanonSample {
  Vec2T<T> a_xy, w_xy;      // SO(2) path
  Vec3T<T> a, v1, v2;       // O(2) path, original frame
  Vec3T<T> v1c, v2c;        // mapped pair (cached for the cross-product VJP)
};

/// Frame-differentiable mirror of canonical::canonicalize. The window data
/// are constants; only the 2x2 frame matrix carries gradient.
template <typename T>
MatX<T> canonicalize_fwd(const imu::ImuWindow& win, const Mat2T<T>& m, GroupMode mode,
                         std::vector<CanonSample<T>>& cache) {
  const int n = static_cast<int>(win.samples.size());
  MatX<T> channels(n, 6);
  cache.resize(n);
  const Mat2T<T> mt = m.transpose();
  for (int i = 0; i < n; ++i) {
    auto& cs = cache[i];
    const Vec3& a = win.samples[i].accel;
    const Vec3& w = win.samples[i].omega;
    if (mode == GroupMode::kSO2) {
      cs.a_xy = a.head<2>().cast<T>();
      cs.w_xy = w.head<2>().cast<T>();
      const Vec2T<T> ac = mt * cs.a_xy;
      const Vec2T<T> wc = mt * cs.w_xy;
      channels(i, 0) = ac.x();
      channels(i, 1) = ac.y();
      channels(i, 2) = wc.x();
      channels(i, 3) = wc.y();
      channels(i, 4) = static_cast<T>(a.z());
      channels(i, 5) = static_cast<T>(w.z());
    } else {
      const canonical::OmegaPair p = canonical::decompose_omega(w, a);
      cs.a = a.cast<T>();
      cs.v1 = p.v1.cast<T>();
      cs.v2 = p.v2.cast<T>();
      Vec3T<T> ac, v1c, v2c;
      ac << mt * cs.a.template head<2>(), cs.a.z();
      v1c << mt * cs.v1.template head<2>(), cs.v1.z();
      v2c << mt * cs.v2.template head<2>(), cs.v2.z();
      cs.v1c = v1c;
      cs.v2c = v2c;
      const Vec3T<T> wc = v1c.cross(v2c);
      channels(i, 0) = ac.x();
      channels(i, 1) = ac.y();
      channels(i, 2) = ac.z();
      channels(i, 3) = wc.x();
      channels(i, 4) = wc.y();
      channels(i, 5) = wc.z();
    }
  }
  return channels;
}

template <typename T>
Mat2T<T> canonicalize_bwd(const std::vector<CanonSample<T>>& cache, GroupMode mode,
                          const MatX<T>& gchannels) {
  Mat2T<T> gm = Mat2T<T>::Zero();
  for (std::size_t i = 0; i < cache.size(); ++i) {
    const auto& cs = cache[i];
    if (mode == GroupMode::kSO2) {
      const Vec2T<T> ga(gchannels(i, 0), gchannels(i, 1));
      const Vec2T<T> gw(gchannels(i, 2), gchannels(i, 3));
      gm += cs.a_xy * ga.transpose() + cs.w_xy * gw.transpose();
    } else {
      const Vec2T<T> ga(gchannels(i, 0), gchannels(i, 1));
      const Vec3T<T> gwc(gchannels(i, 3), gchannels(i, 4), gchannels(i, 5));
      // wc = v1c x v2c
      const Vec3T<T> gv1c = cs.v2c.cross(gwc);
      const Vec3T<T> gv2c = gwc.cross(cs.v1c);
      gm += cs.a.template head<2>() * ga.transpose();
      gm += cs.v1.template head<2>() * gv1c.template head<2>().transpose();
      gm += cs.v2.template head<2>() * gv2c.template head<2>().transpose();
    }
  }
  return gm;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Squared error averaged over the three axes.
inline double loss_mse(const Vec3& pred, const Vec3& target) {
  return (pred - target).squaredNorm() / 3.0;
}

inline Vec3 loss_mse_grad(const Vec3& pred, const Vec3& target) {
  return 2.0 / 3.0 * (pred - target);
}

/// Gaussian negative log-likelihood (constant dropped), generic covariance
/// route. The training path evaluates the same quantity in the canonical
/// frame where the covariance is diagonal; this form is the independent
/// cross-check and the evaluation-time implementation.
inline double loss_mle_general(const PriorOutput& pred, const Vec3& target) {
  const Eigen::LLT<Mat3> llt(pred.sigma);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("loss_mle: covariance not positive definite");
  const Vec3 r = pred.d - target;
  const Vec3 w = llt.solve(r);
  const Mat3 l = llt.matrixL();
  double logdet = 0.0;
  for (int i = 0; i < 3; ++i) logdet += 2.0 * std::log(l(i, i));
  return 0.5 * r.dot(w) + 0.5 * logdet;
}

// ---------------------------------------------------------------------------
// Forward pipeline
// ---------------------------------------------------------------------------

struct Prediction {
  PriorOutput out;
  group::YawFrame frame;
  bool degenerate = false;
  Vec3 d_canon = Vec3::Zero();
  Vec3 u = Vec3::Zero();
  Vec3 pearson = Vec3::Zero();
};

namespace detail {

template <typename T>
struct PipelineCache {
  eqnet::EqTensor<T> feat;
  typename eqnet::FrameNet<T>::Cache fnet;
  typename eqnet::NonEqFrameNet<T>::Cache nnet;
  Vec2T<T> raw1, raw2;
  OrthoCache<T> ortho;
  bool degenerate = false;
  Mat2T<T> fmat = Mat2T<T>::Identity();
  std::vector<CanonSample<T>> canon;
  MatX<T> channels;
  typename Backbone<T>::Cache bb;
  VecX<T> head;
};

template <typename T>
void forward_pipeline(const PriorModel<T>& model, const imu::ImuWindow& win,
                      PipelineCache<T>& c) {
  const auto& cfg = model.cfg;
  c.degenerate = false;
  c.fmat = Mat2T<T>::Identity();

  switch (cfg.frame_source) {
    case FrameSource::kEquivariant: {
      c.feat = eqnet::to_eq_tensor<T>(canonical::extract_features(win, cfg.mode));
      std::tie(c.raw1, c.raw2) = model.frame_net.forward(c.feat, c.fnet);
      c.degenerate = !orthonormalize(c.raw1, c.raw2, cfg.mode, c.ortho, c.fmat);
      if (c.degenerate) c.fmat = Mat2T<T>::Identity();
      break;
    }
    case FrameSource::kNonEquivariant: {
      c.feat = eqnet::to_eq_tensor<T>(canonical::extract_features(win, cfg.mode));
      std::tie(c.raw1, c.raw2) = model.noneq_net.forward(c.feat, c.nnet);
      c.degenerate = !orthonormalize(c.raw1, c.raw2, cfg.mode, c.ortho, c.fmat);
      if (c.degenerate) c.fmat = Mat2T<T>::Identity();
      break;
    }
    case FrameSource::kPca: {
      const auto f = canonical::pca_frame(win);
      c.degenerate = !f.has_value();
      if (f) c.fmat = f->matrix().cast<T>();
      break;
    }
    case FrameSource::kIdentity:
      break;
  }

  c.channels = canonicalize_fwd(win, c.fmat, cfg.mode, c.canon);
  c.head = model.backbone.forward(c.channels, c.bb);
}

/// Routes gradients from the head and the frame matrix back into the
/// parameters. gm collects loss terms that touch the frame directly; the
/// canonicalized channels add their own contribution here.
template <typename T>
void backward_pipeline(PriorModel<T>& model, PipelineCache<T>& c,
                       const VecX<T>& ghead, Mat2T<T> gm) {
  const auto& cfg = model.cfg;
  const MatX<T> gchannels = model.backbone.backward(c.bb, ghead);
  gm += canonicalize_bwd(c.canon, cfg.mode, gchannels);

  if (c.degenerate) return;
  switch (cfg.frame_source) {
    case FrameSource::kEquivariant: {
      Vec2T<T> graw1, graw2;
      orthonormalize_backward(c.ortho, cfg.mode, gm, graw1, graw2);
      model.frame_net.backward(c.fnet, graw1, graw2);
      break;
    }
    case FrameSource::kNonEquivariant: {
      Vec2T<T> graw1, graw2;
      orthonormalize_backward(c.ortho, cfg.mode, gm, graw1, graw2);
      model.noneq_net.backward(c.nnet, graw1, graw2);
      break;
    }
    case FrameSource::kPca:
    case FrameSource::kIdentity:
      break;  // nothing upstream of the frame
  }
}

template <typename T>
Mat3 lift3_t(const Mat2T<T>& m) {
  Mat3 out = Mat3::Identity();
  out.topLeftCorner<2, 2>() = m.template cast<double>();
  return out;
}

}  // namespace detail

/// Inference-time prediction: returns the displacement/covariance in the
/// original gravity-aligned frame plus the frame used (for diagnostics).
template <typename T>
Prediction predict(const PriorModel<T>& model, const imu::ImuWindow& win) {
  if (model.cfg.window > 0 &&
      static_cast<int>(win.samples.size()) != model.cfg.window)
    throw std::invalid_argument("predict: window length mismatch");

  detail::PipelineCache<T> c;
  detail::forward_pipeline(model, win, c);

  Prediction p;
  p.degenerate = c.degenerate;
  p.frame = group::YawFrame::from_matrix(c.fmat.template cast<double>());
  p.d_canon = Vec3(c.head(0), c.head(1), c.head(2));
  p.u = Vec3(c.head(3), c.head(4), c.head(5));

  switch (model.cfg.cov_mode) {
    case CovMode::kEquivariant:
      p.out = canonical::decanonicalize(p.d_canon, p.u, p.frame);
      break;
    case CovMode::kInvariant: {
      p.out.d = group::lift3(p.frame) * p.d_canon;
      p.out.sigma = Vec3((2.0 * p.u).array().exp()).asDiagonal();
      break;
    }
    case CovMode::kPearson: {
      p.pearson = Vec3(std::tanh(double(c.head(6))), std::tanh(double(c.head(7))),
                       std::tanh(double(c.head(8))));
      const Vec3 s = p.u.array().exp();
      Mat3 sig;
      sig << s.x() * s.x(), p.pearson.x() * s.x() * s.y(), p.pearson.z() * s.x() * s.z(),
          p.pearson.x() * s.x() * s.y(), s.y() * s.y(), p.pearson.y() * s.y() * s.z(),
          p.pearson.z() * s.x() * s.z(), p.pearson.y() * s.y() * s.z(), s.z() * s.z();
      const Mat3 f3 = group::lift3(p.frame);
      p.out.d = f3 * p.d_canon;
      p.out.sigma = f3 * sig * f3.transpose();
      break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class LossKind { kMse, kMle };

struct TrainSample {
  imu::ImuWindow window;
  Vec3 target = Vec3::Zero();  // displacement in the window's aligned frame
};

/// Forward + backward for one sample; accumulates parameter gradients and
/// returns the loss. The loss is evaluated in the canonical frame (where the
/// covariance parameterization is diagonal), which equals the original-frame
/// value; the target's rotation into that frame carries frame gradients.
template <typename T>
T train_step_sample(PriorModel<T>& model, const imu::ImuWindow& win, const Vec3& target,
                    LossKind kind) {
  detail::PipelineCache<T> c;
  detail::forward_pipeline(model, win, c);

  const auto& cfg = model.cfg;
  const Vec3T<T> t = target.cast<T>();
  const Vec3T<T> d_canon(c.head(0), c.head(1), c.head(2));
  const Vec3T<T> u(c.head(3), c.head(4), c.head(5));

  VecX<T> ghead = VecX<T>::Zero(c.head.size());
  Mat2T<T> gm = Mat2T<T>::Zero();
  T loss = T(0);

  // Target in the canonical frame: t_c = F3^T t.
  Vec3T<T> t_c;
  t_c << c.fmat.transpose() * t.template head<2>(), t.z();

  if (kind == LossKind::kMse) {
    const Vec3T<T> r = d_canon - t_c;
    loss = r.squaredNorm() / T(3);
    const Vec3T<T> gd = T(2.0 / 3.0) * r;
    ghead.template head<3>() = gd;
    // gm from t_c = M^T t (xy block only).
    gm += t.template head<2>() * (-gd.template head<2>()).transpose();
  } else {
    switch (cfg.cov_mode) {
      case CovMode::kEquivariant: {
        const Vec3T<T> r = d_canon - t_c;
        const Vec3T<T> inv_var = (T(-2) * u).array().exp();
        loss = T(0.5) * (r.array().square() * inv_var.array() + T(2) * u.array()).sum();
        const Vec3T<T> gd = r.cwiseProduct(inv_var);
        ghead.template head<3>() = gd;
        ghead.template segment<3>(3) =
            (Vec3T<T>::Ones() - r.array().square().matrix().cwiseProduct(inv_var)).eval();
        gm += t.template head<2>() * (-gd.template head<2>()).transpose();
        break;
      }
      case CovMode::kInvariant: {
        // Covariance lives in the original frame; only d maps back.
        Vec3T<T> d;
        d << c.fmat * d_canon.template head<2>(), d_canon.z();
        const Vec3T<T> r = d - t;
        const Vec3T<T> inv_var = (T(-2) * u).array().exp();
        loss = T(0.5) * (r.array().square() * inv_var.array() + T(2) * u.array()).sum();
        const Vec3T<T> gr = r.cwiseProduct(inv_var);
        Vec3T<T> gd;
        gd << c.fmat.transpose() * gr.template head<2>(), gr.z();
        ghead.template head<3>() = gd;
        ghead.template segment<3>(3) =
            (Vec3T<T>::Ones() - r.array().square().matrix().cwiseProduct(inv_var)).eval();
        gm += gr.template head<2>() * d_canon.template head<2>().transpose();
        break;
      }
      case CovMode::kPearson: {
        const Vec3T<T> r = d_canon - t_c;
        const Vec3T<T> s = u.array().exp();
        const Vec3T<T> rho(std::tanh(c.head(6)), std::tanh(c.head(7)), std::tanh(c.head(8)));
        Eigen::Matrix<T, 3, 3> sig;
        sig << s.x() * s.x(), rho.x() * s.x() * s.y(), rho.z() * s.x() * s.z(),
            rho.x() * s.x() * s.y(), s.y() * s.y(), rho.y() * s.y() * s.z(),
            rho.z() * s.x() * s.z(), rho.y() * s.y() * s.z(), s.z() * s.z();
        const Eigen::LLT<Eigen::Matrix<T, 3, 3>> llt(sig);
        if (llt.info() != Eigen::Success)
          throw std::runtime_error("train: Pearson covariance lost positive definiteness");
        const Eigen::Matrix<T, 3, 3> a = llt.solve(Eigen::Matrix<T, 3, 3>::Identity());
        const Eigen::Matrix<T, 3, 3> l = llt.matrixL();
        T logdet = T(0);
        for (int i = 0; i < 3; ++i) logdet += T(2) * std::log(l(i, i));
        const Vec3T<T> ar = a * r;
        loss = T(0.5) * r.dot(ar) + T(0.5) * logdet;

        ghead.template head<3>() = ar;
        gm += t.template head<2>() * (-ar.template head<2>()).transpose();

        const Eigen::Matrix<T, 3, 3> gsig = T(0.5) * (a - ar * ar.transpose());
        Vec3T<T> gu;
        for (int i = 0; i < 3; ++i) {
          T acc = T(2) * gsig(i, i) * sig(i, i);
          for (int j = 0; j < 3; ++j)
            if (j != i) acc += T(2) * gsig(i, j) * sig(i, j);
          gu(i) = acc;
        }
        ghead.template segment<3>(3) = gu;
        // rho order: (xy, yz, xz) -> heads 6, 7, 8.
        const T grho_xy = T(2) * gsig(0, 1) * s.x() * s.y();
        const T grho_yz = T(2) * gsig(1, 2) * s.y() * s.z();
        const T grho_xz = T(2) * gsig(0, 2) * s.x() * s.z();
        ghead(6) = grho_xy * (T(1) - rho.x() * rho.x());
        ghead(7) = grho_yz * (T(1) - rho.y() * rho.y());
        ghead(8) = grho_xz * (T(1) - rho.z() * rho.z());
        break;
      }
    }
  }

  detail::backward_pipeline(model, c, ghead, gm);
  return loss;
}

/// Forward-only loss (no gradient accumulation), for finite-difference
/// verification and evaluation.
template <typename T>
T sample_loss(const PriorModel<T>& model, const imu::ImuWindow& win, const Vec3& target,
              LossKind kind) {
  detail::PipelineCache<T> c;
  detail::forward_pipeline(model, win, c);
  const Vec3T<T> t = target.cast<T>();
  const Vec3T<T> d_canon(c.head(0), c.head(1), c.head(2));
  const Vec3T<T> u(c.head(3), c.head(4), c.head(5));
  Vec3T<T> t_c;
  t_c << c.fmat.transpose() * t.template head<2>(), t.z();

  if (kind == LossKind::kMse) return (d_canon - t_c).squaredNorm() / T(3);

  switch (model.cfg.cov_mode) {
    case CovMode::kEquivariant: {
      const Vec3T<T> r = d_canon - t_c;
      const Vec3T<T> inv_var = (T(-2) * u).array().exp();
      return T(0.5) * (r.array().square() * inv_var.array() + T(2) * u.array()).sum();
    }
    case CovMode::kInvariant: {
      Vec3T<T> d;
      d << c.fmat * d_canon.template head<2>(), d_canon.z();
      const Vec3T<T> r = d - t;
      const Vec3T<T> inv_var = (T(-2) * u).array().exp();
      return T(0.5) * (r.array().square() * inv_var.array() + T(2) * u.array()).sum();
    }
    case CovMode::kPearson: {
      const Vec3T<T> r = d_canon - t_c;
      const Vec3T<T> s = u.array().exp();
      const Vec3T<T> rho(std::tanh(c.head(6)), std::tanh(c.head(7)), std::tanh(c.head(8)));
      Eigen::Matrix<T, 3, 3> sig;
      sig << s.x() * s.x(), rho.x() * s.x() * s.y(), rho.z() * s.x() * s.z(),
          rho.x() * s.x() * s.y(), s.y() * s.y(), rho.y() * s.y() * s.z(),
          rho.z() * s.x() * s.z(), rho.y() * s.y() * s.z(), s.z() * s.z();
      const Eigen::LLT<Eigen::Matrix<T, 3, 3>> llt(sig);
      if (llt.info() != Eigen::Success)
        throw std::runtime_error("loss: Pearson covariance lost positive definiteness");
      const Eigen::Matrix<T, 3, 3> l = llt.matrixL();
      T logdet = T(0);
      for (int i = 0; i < 3; ++i) logdet += T(2) * std::log(l(i, i));
      return T(0.5) * r.dot(llt.solve(r)) + T(0.5) * logdet;
    }
  }
  return T(0);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  bool yaw = false;
  bool reflect = false;       // only meaningful for O(2) baselines
  bool gravity_tilt = false;
  double tilt_deg = 5.0;
};

/// Applies a shared random yaw roto-reflection (via the group actions) and an
/// optional small gravity-direction tilt to a window/target pair.
inline std::pair<imu::ImuWindow, Vec3> augment(const imu::ImuWindow& win, const Vec3& target,
                                               const AugmentConfig& cfg,
                                               std::mt19937_64& rng) {
  imu::ImuWindow out = win;
  Vec3 t = target;
  if (cfg.yaw) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double angle = u01(rng) * 2.0 * kPi;
    group::YawFrame f = group::YawFrame::rotation(angle);
    if (cfg.reflect && u01(rng) < 0.5) f = group::YawFrame::reflection(0.5 * angle);
    for (auto& s : out.samples) {
      s.accel = group::act_accel(f, s.accel);
      s.omega = group::act_omega(f, s.omega);
    }
    t = group::act_accel(f, t);
  }
  if (cfg.gravity_tilt) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double mag = (2.0 * u01(rng) - 1.0) * cfg.tilt_deg * kPi / 180.0;
    const double axis = u01(rng) * 2.0 * kPi;
    const Mat3 r = exp_so3(mag * Vec3(std::cos(axis), std::sin(axis), 0.0));
    for (auto& s : out.samples) {
      s.accel = r * s.accel;
      s.omega = r * s.omega;
    }
    t = r * t;
  }
  return {std::move(out), t};
}

// ---------------------------------------------------------------------------
// Optimizer and training loop
// ---------------------------------------------------------------------------

template <typename T>
struct Adam {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<MatX<T>> m, v;
  std::int64_t t = 0;

  template <typename Model>
  void step(Model& model) {
    ++t;
    const T b1t = static_cast<T>(1.0 - std::pow(beta1, double(t)));
    const T b2t = static_cast<T>(1.0 - std::pow(beta2, double(t)));
    std::size_t i = 0;
    model.visit("", [&](const std::string&, MatX<T>& w, MatX<T>& g) {
      if (i >= m.size()) {
        m.emplace_back(MatX<T>::Zero(w.rows(), w.cols()));
        v.emplace_back(MatX<T>::Zero(w.rows(), w.cols()));
      }
      m[i] = T(beta1) * m[i] + T(1.0 - beta1) * g;
      v[i] = T(beta2) * v[i] + T(1.0 - beta2) * g.cwiseProduct(g);
      w.array() -= T(lr) * (m[i].array() / b1t) /
                   ((v[i].array() / b2t).sqrt() + T(eps));
      ++i;
    });
  }
};

struct TrainConfig {
  int epochs_mse = 10;
  int epochs_mle = 40;
  double lr = 1e-3;
  int batch = 64;
  std::uint64_t seed = 0;
  AugmentConfig augment;
};

struct EpochStats {
  int epoch = 0;
  LossKind kind = LossKind::kMse;
  double mean_loss = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
};

class TrainAbort : public std::runtime_error {
 public:
  TrainAbort(int epoch, int batch, const std::string& what)
      : std::runtime_error("training aborted at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch) + ": " + what),
        epoch_(epoch),
        batch_(batch) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_, batch_;
};

/// Two-stage schedule: MSE epochs on the displacement, then MLE epochs on
/// displacement and covariance jointly. Deterministic for a fixed seed
/// (single-threaded, fixed shuffle and augmentation streams).
template <typename T>
TrainLog train(PriorModel<T>& model, const std::vector<TrainSample>& data,
               const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  std::mt19937_64 rng(cfg.seed);
  Adam<T> adam;
  adam.lr = cfg.lr;

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainLog log;
  int epoch_counter = 0;
  const bool augment_on = cfg.augment.yaw || cfg.augment.gravity_tilt;

  for (const LossKind kind : {LossKind::kMse, LossKind::kMle}) {
    const int epochs = kind == LossKind::kMse ? cfg.epochs_mse : cfg.epochs_mle;
    for (int e = 0; e < epochs; ++e, ++epoch_counter) {
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      std::size_t seen = 0;
      int batch_id = 0;
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(cfg.batch), ++batch_id) {
        const std::size_t stop =
            std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
        model.zero_grad();
        double batch_loss = 0.0;
        for (std::size_t i = start; i < stop; ++i) {
          const TrainSample& s = data[order[i]];
          double li;
          if (augment_on) {
            const auto [win, target] = augment(s.window, s.target, cfg.augment, rng);
            li = static_cast<double>(train_step_sample(model, win, target, kind));
          } else {
            li = static_cast<double>(train_step_sample(model, s.window, s.target, kind));
          }
          if (!std::isfinite(li))
            throw TrainAbort(epoch_counter, batch_id, "non-finite loss");
          batch_loss += li;
        }
        const T inv = T(1) / static_cast<T>(stop - start);
        model.visit("", [&](const std::string&, MatX<T>&, MatX<T>& g) { g *= inv; });
        adam.step(model);
        epoch_loss += batch_loss;
        seen += stop - start;
      }
      log.epochs.push_back({epoch_counter, kind, epoch_loss / double(seen)});
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Model checkpointing
// ---------------------------------------------------------------------------

inline std::string to_string(GroupMode m) { return m == GroupMode::kSO2 ? "so2" : "o2"; }
inline std::string to_string(FrameSource s) {
  switch (s) {
    case FrameSource::kEquivariant: return "eq";
    case FrameSource::kNonEquivariant: return "noneq";
    case FrameSource::kPca: return "pca";
    case FrameSource::kIdentity: return "identity";
  }
  return "eq";
}
inline std::string to_string(CovMode c) {
  switch (c) {
    case CovMode::kEquivariant: return "eq";
    case CovMode::kInvariant: return "invariant";
    case CovMode::kPearson: return "pearson";
  }
  return "eq";
}

inline GroupMode group_mode_from_string(const std::string& s) {
  if (s == "so2") return GroupMode::kSO2;
  if (s == "o2") return GroupMode::kO2;
  throw std::runtime_error("unknown group mode '" + s + "'");
}
inline FrameSource frame_source_from_string(const std::string& s) {
  if (s == "eq") return FrameSource::kEquivariant;
  if (s == "noneq") return FrameSource::kNonEquivariant;
  if (s == "pca") return FrameSource::kPca;
  if (s == "identity") return FrameSource::kIdentity;
  throw std::runtime_error("unknown frame source '" + s + "'");
}
inline CovMode cov_mode_from_string(const std::string& s) {
  if (s == "eq") return CovMode::kEquivariant;
  if (s == "invariant") return CovMode::kInvariant;
  if (s == "pearson") return CovMode::kPearson;
  throw std::runtime_error("unknown covariance mode '" + s + "'");
}

template <typename T>
void save_model(const std::string& stem, PriorModel<T>& model) {
  checkpoint::Writer<T> w(stem);
  const auto& cfg = model.cfg;
  w.add_meta("mode", to_string(cfg.mode));
  w.add_meta("frame_source", to_string(cfg.frame_source));
  w.add_meta("cov_mode", to_string(cfg.cov_mode));
  w.add_meta("window", std::to_string(cfg.window));
  w.add_meta("fn_hidden", std::to_string(cfg.frame_net.hidden));
  w.add_meta("fn_kernel", std::to_string(cfg.frame_net.kernel));
  w.add_meta("fn_blocks", std::to_string(cfg.frame_net.conv_blocks));
  w.add_meta("noneq_hidden", std::to_string(cfg.noneq_hidden));
  w.add_meta("bb_width", std::to_string(cfg.backbone.width));
  w.add_meta("bb_blocks", std::to_string(cfg.backbone.blocks));
  w.add_meta("bb_kernel", std::to_string(cfg.backbone.kernel));
  model.visit("model", [&](const std::string& name, MatX<T>& value, MatX<T>&) {
    w.add(name, value);
  });
  w.finish();
}

template <typename T>
PriorModel<T> load_model(const std::string& stem) {
  const auto ck = checkpoint::load<T>(stem);
  PriorConfig cfg;
  cfg.mode = group_mode_from_string(ck.meta.at("mode"));
  cfg.frame_source = frame_source_from_string(ck.meta.at("frame_source"));
  cfg.cov_mode = cov_mode_from_string(ck.meta.at("cov_mode"));
  cfg.window = std::stoi(ck.meta.at("window"));
  cfg.frame_net.mode = cfg.mode;
  cfg.frame_net.hidden = std::stoi(ck.meta.at("fn_hidden"));
  cfg.frame_net.kernel = std::stoi(ck.meta.at("fn_kernel"));
  cfg.frame_net.conv_blocks = std::stoi(ck.meta.at("fn_blocks"));
  cfg.noneq_hidden = std::stoi(ck.meta.at("noneq_hidden"));
  cfg.backbone.width = std::stoi(ck.meta.at("bb_width"));
  cfg.backbone.blocks = std::stoi(ck.meta.at("bb_blocks"));
  cfg.backbone.kernel = std::stoi(ck.meta.at("bb_kernel"));

  PriorModel<T> model;
  model.init(cfg, 0);
  model.visit("model", [&](const std::string& name, MatX<T>& value, MatX<T>&) {
    const auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw std::runtime_error(stem + ": checkpoint is missing tensor " + name);
    if (it->second.rows() != value.rows() || it->second.cols() != value.cols())
      throw std::runtime_error(stem + ": shape mismatch for tensor " + name);
    value = it->second;
  });
  return model;
}

/// Slices a sequence into training windows: samples [s, s+window) aligned
/// with the given orientations, target displacement over [t_s, t_{s+window}]
/// expressed in the window-start yaw-free frame.
inline std::vector<TrainSample> build_windows(const std::vector<imu::PoseSample>& poses,
                                              const std::vector<imu::ImuSample>& samples,
                                              int window, int stride) {
  if (poses.size() != samples.size())
    throw std::invalid_argument("build_windows: pose/imu length mismatch");
  std::vector<Mat3> rots(poses.size());
  for (std::size_t i = 0; i < rots.size(); ++i) rots[i] = poses[i].rot;

  std::vector<TrainSample> out;
  for (std::size_t s = 0; s + static_cast<std::size_t>(window) < poses.size();
       s += static_cast<std::size_t>(stride)) {
    TrainSample ts;
    ts.window = imu::gravity_align(samples, rots, s, s + window);
    const double yaw = imu::extrinsic_xyz_yaw(rots[s]).yaw;
    ts.target = rot_z(yaw).transpose() * (poses[s + window].pos - poses[s].pos);
    out.push_back(std::move(ts));
  }
  return out;
}

inline std::vector<TrainSample> build_windows(const imu::SimResult& sim, int window,
                                              int stride) {
  return build_windows(sim.poses, sim.imu, window, stride);
}

}  // namespace eqnio::prior
