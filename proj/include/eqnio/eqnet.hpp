#pragma once

#include <Eigen/SVD>

#include <optional>
#include <utility>
#include <vector>

#include "eqnio/canonical.hpp"
#include "eqnio/core.hpp"
#include "eqnio/nn.hpp"

// Equivariant network layers. Vector features are 2-D channels stored as
// (2n) x C matrices with interleaved xy rows; a yaw roto-reflection acts by
// multiplying every 2-row block from the left. Scalar features (n x C) are
// invariant and flow through conventional layers. Each layer provides a
// reverse-mode VJP next to its forward pass, mirroring nn.hpp's tape
// discipline.

namespace eqnio::eqnet {

template <typename T>
using Vec2T = Eigen::Matrix<T, 2, 1>;
template <typename T>
using Mat2T = Eigen::Matrix<T, 2, 2>;

template <typename T>
struct EqTensor {
  MatX<T> vectors;  // (2n) x Cv
  MatX<T> scalars;  // n x Cs
};

/// In-plane quarter turn applied to every xy block: (x, y) -> (-y, x).
template <typename T>
MatX<T> rotate90_blocks(const MatX<T>& m) {
  MatX<T> out(m.rows(), m.cols());
  for (Eigen::Index t = 0; t < m.rows() / 2; ++t) {
    out.row(2 * t) = -m.row(2 * t + 1);
    out.row(2 * t + 1) = m.row(2 * t);
  }
  return out;
}

/// Adjoint of rotate90_blocks: (x, y) -> (y, -x).
template <typename T>
MatX<T> rotate270_blocks(const MatX<T>& m) {
  MatX<T> out(m.rows(), m.cols());
  for (Eigen::Index t = 0; t < m.rows() / 2; ++t) {
    out.row(2 * t) = m.row(2 * t + 1);
    out.row(2 * t + 1) = -m.row(2 * t);
  }
  return out;
}

/// Applies a 2x2 matrix to every xy block (the group action on vector
/// channels when r is orthogonal).
template <typename T>
MatX<T> apply_planar(const Mat2T<T>& r, const MatX<T>& m) {
  MatX<T> out(m.rows(), m.cols());
  for (Eigen::Index t = 0; t < m.rows() / 2; ++t) {
    out.middleRows(2 * t, 2) = r * m.middleRows(2 * t, 2);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weight-basis solver
// ---------------------------------------------------------------------------

/// Solves (R (x) R) vec(W) = vec(W) over the group generators and returns an
/// orthonormal basis of the commuting 2x2 weights: dimension 2 for SO(2)
/// (identity and quarter turn), dimension 1 for O(2) (identity only).
inline std::vector<Mat2> solve_weight_basis(GroupMode mode) {
  std::vector<Mat2> gens;
  for (double angle : {0.9, 2.31}) {
    Mat2 r;
    r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
    gens.push_back(r);
  }
  if (mode == GroupMode::kO2) {
    for (double axis : {0.0, 0.7}) {
      Mat2 s;
      s << std::cos(2 * axis), std::sin(2 * axis), std::sin(2 * axis), -std::cos(2 * axis);
      gens.push_back(s);
    }
  }

  MatXd constraints(4 * gens.size(), 4);
  for (std::size_t i = 0; i < gens.size(); ++i) {
    Eigen::Matrix4d kron;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        kron.block<2, 2>(2 * a, 2 * b) = gens[i](a, b) * gens[i];
    constraints.middleRows<4>(4 * i) = kron - Eigen::Matrix4d::Identity();
  }

  Eigen::JacobiSVD<MatXd> svd(constraints, Eigen::ComputeFullV);
  const double tol = 1e-10 * svd.singularValues()(0);
  std::vector<Mat2> basis;
  for (int i = 3; i >= 0; --i) {
    if (svd.singularValues()(i) < tol) {
      const Eigen::Vector4d v = svd.matrixV().col(i);
      basis.push_back(Mat2(v.reshaped(2, 2)));
    }
  }
  return basis;
}

// ---------------------------------------------------------------------------
// Equivariant linear / convolution
// ---------------------------------------------------------------------------

/// Linear map on vector channels built from the commuting weight basis:
/// y = v W1 + R90 v W2 in SO(2) mode, y = v W1 in O(2) mode.
template <typename T>
struct EqLinear {
  MatX<T> w1, w2;  // Cin x Cout; w2 empty in O(2) mode
  MatX<T> gw1, gw2;

  void init(int cin, int cout, GroupMode mode, std::mt19937_64& rng) {
    w1.resize(cin, cout);
    nn::fill_uniform(w1, 1.0 / std::sqrt(double(cin)), rng);
    if (mode == GroupMode::kSO2) {
      w2.resize(cin, cout);
      nn::fill_uniform(w2, 1.0 / std::sqrt(double(cin)), rng);
    } else {
      w2.resize(0, 0);
    }
    zero_grad();
  }

  void zero_grad() {
    gw1.setZero(w1.rows(), w1.cols());
    gw2.setZero(w2.rows(), w2.cols());
  }

  MatX<T> forward(const MatX<T>& v) const {
    if (v.cols() != w1.rows()) throw std::invalid_argument("EqLinear: channel mismatch");
    MatX<T> y = v * w1;
    if (w2.size() > 0) y.noalias() += rotate90_blocks(v) * w2;
    return y;
  }

  MatX<T> backward(const MatX<T>& v, const MatX<T>& gout) {
    gw1.noalias() += v.transpose() * gout;
    MatX<T> gv = gout * w1.transpose();
    if (w2.size() > 0) {
      gw2.noalias() += rotate90_blocks(v).transpose() * gout;
      gv.noalias() += rotate270_blocks(MatX<T>(gout * w2.transpose()));
    }
    return gv;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1, gw1);
    if (w2.size() > 0) f(prefix + ".w2", w2, gw2);
  }
};

/// Temporal convolution whose taps are EqLinear maps. Vector rows come in
/// xy pairs, so time index t lives at rows (2t, 2t+1).
template <typename T>
struct EqConv1d {
  MatX<T> w1, w2;  // (k*Cin) x Cout, tap-major; w2 empty in O(2) mode
  MatX<T> gw1, gw2;
  int k = 1, cin = 0, stride = 1, pad = 0;

  void init(int cin_, int cout, int k_, GroupMode mode, std::mt19937_64& rng,
            int stride_ = 1, int pad_ = -1) {
    k = k_;
    cin = cin_;
    stride = stride_;
    pad = pad_ >= 0 ? pad_ : (k_ - 1) / 2;
    w1.resize(k * cin, cout);
    nn::fill_uniform(w1, 1.0 / std::sqrt(double(k * cin)), rng);
    if (mode == GroupMode::kSO2) {
      w2.resize(k * cin, cout);
      nn::fill_uniform(w2, 1.0 / std::sqrt(double(k * cin)), rng);
    } else {
      w2.resize(0, 0);
    }
    zero_grad();
  }

  void zero_grad() {
    gw1.setZero(w1.rows(), w1.cols());
    gw2.setZero(w2.rows(), w2.cols());
  }

  int out_len(int n) const {
    const int m = (n + 2 * pad - k) / stride + 1;
    if (m <= 0) throw std::invalid_argument("EqConv1d: kernel longer than padded input");
    return m;
  }

  MatX<T> forward(const MatX<T>& v) const {
    if (v.cols() != cin) throw std::invalid_argument("EqConv1d: channel mismatch");
    const int n = static_cast<int>(v.rows()) / 2;
    const int m = out_len(n);
    const MatX<T> vr = w2.size() > 0 ? rotate90_blocks(v) : MatX<T>();
    MatX<T> y = MatX<T>::Zero(2 * m, w1.cols());
    for (int tap = 0; tap < k; ++tap) {
      const auto w1t = w1.middleRows(tap * cin, cin);
      for (int t = 0; t < m; ++t) {
        const int s = t * stride - pad + tap;
        if (s < 0 || s >= n) continue;
        y.middleRows(2 * t, 2).noalias() += v.middleRows(2 * s, 2) * w1t;
        if (w2.size() > 0) {
          y.middleRows(2 * t, 2).noalias() +=
              vr.middleRows(2 * s, 2) * w2.middleRows(tap * cin, cin);
        }
      }
    }
    return y;
  }

  MatX<T> backward(const MatX<T>& v, const MatX<T>& gout) {
    const int n = static_cast<int>(v.rows()) / 2;
    const int m = static_cast<int>(gout.rows()) / 2;
    const MatX<T> vr = w2.size() > 0 ? rotate90_blocks(v) : MatX<T>();
    MatX<T> gv = MatX<T>::Zero(v.rows(), v.cols());
    MatX<T> gvr = w2.size() > 0 ? MatX<T>::Zero(v.rows(), v.cols()) : MatX<T>();
    for (int tap = 0; tap < k; ++tap) {
      const auto w1t = w1.middleRows(tap * cin, cin);
      auto gw1t = gw1.middleRows(tap * cin, cin);
      for (int t = 0; t < m; ++t) {
        const int s = t * stride - pad + tap;
        if (s < 0 || s >= n) continue;
        const auto go = gout.middleRows(2 * t, 2);
        gv.middleRows(2 * s, 2).noalias() += go * w1t.transpose();
        gw1t.noalias() += v.middleRows(2 * s, 2).transpose() * go;
        if (w2.size() > 0) {
          gvr.middleRows(2 * s, 2).noalias() +=
              go * w2.middleRows(tap * cin, cin).transpose();
          gw2.middleRows(tap * cin, cin).noalias() +=
              vr.middleRows(2 * s, 2).transpose() * go;
        }
      }
    }
    if (w2.size() > 0) gv.noalias() += rotate270_blocks(gvr);
    return gv;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1, gw1);
    if (w2.size() > 0) f(prefix + ".w2", w2, gw2);
  }
};

// ---------------------------------------------------------------------------
// Gated nonlinearity
// ---------------------------------------------------------------------------

/// Mixes vector and scalar features without breaking equivariance: an MLP on
/// [channel norms | scalars] emits per-channel gains for the vectors and new
/// scalar activations. The gradient through a zero-norm channel is defined
/// as zero.
template <typename T>
struct GatedNonlin {
  nn::Dense<T> m1, m2;
  int channels = 0;

  void init(int c, std::mt19937_64& rng) {
    channels = c;
    m1.init(2 * c, 2 * c, rng);
    m2.init(2 * c, 2 * c, rng);
  }

  void zero_grad() {
    m1.zero_grad();
    m2.zero_grad();
  }

  struct Cache {
    MatX<T> norms, mlp_in, h_pre, h, out;
  };

  std::pair<MatX<T>, MatX<T>> forward(const MatX<T>& v, const MatX<T>& s,
                                      Cache& c) const {
    const Eigen::Index n = s.rows();
    if (v.cols() != channels || s.cols() != channels || v.rows() != 2 * n)
      throw std::invalid_argument("GatedNonlin: shape mismatch");

    c.norms.resize(n, channels);
    for (Eigen::Index t = 0; t < n; ++t)
      c.norms.row(t) = v.middleRows(2 * t, 2).colwise().norm();

    c.mlp_in.resize(n, 2 * channels);
    c.mlp_in << c.norms, s;
    c.h_pre = m1.forward(c.mlp_in);
    c.h = nn::gelu(c.h_pre);
    c.out = m2.forward(c.h);

    const auto gamma = c.out.leftCols(channels);
    MatX<T> v_out(v.rows(), channels);
    for (Eigen::Index t = 0; t < n; ++t) {
      v_out.row(2 * t) = v.row(2 * t).cwiseProduct(gamma.row(t));
      v_out.row(2 * t + 1) = v.row(2 * t + 1).cwiseProduct(gamma.row(t));
    }
    return {std::move(v_out), nn::gelu(MatX<T>(c.out.rightCols(channels)))};
  }

  std::pair<MatX<T>, MatX<T>> backward(const MatX<T>& v, const MatX<T>& /*s*/,
                                       const Cache& c, const MatX<T>& gv_out,
                                       const MatX<T>& gs_out) {
    const Eigen::Index n = c.norms.rows();
    const auto gamma = c.out.leftCols(channels);

    MatX<T> gout(n, 2 * channels);
    MatX<T> gv(v.rows(), channels);
    for (Eigen::Index t = 0; t < n; ++t) {
      gout.row(t).head(channels) =
          v.row(2 * t).cwiseProduct(gv_out.row(2 * t)) +
          v.row(2 * t + 1).cwiseProduct(gv_out.row(2 * t + 1));
      gv.row(2 * t) = gv_out.row(2 * t).cwiseProduct(gamma.row(t));
      gv.row(2 * t + 1) = gv_out.row(2 * t + 1).cwiseProduct(gamma.row(t));
    }
    gout.rightCols(channels) =
        nn::gelu_backward(MatX<T>(c.out.rightCols(channels)), gs_out);

    const MatX<T> gh = m2.backward(c.h, gout);
    const MatX<T> gh_pre = nn::gelu_backward(c.h_pre, gh);
    const MatX<T> gmlp_in = m1.backward(c.mlp_in, gh_pre);

    const auto gnorm = gmlp_in.leftCols(channels);
    for (Eigen::Index t = 0; t < n; ++t) {
      for (int ch = 0; ch < channels; ++ch) {
        const T nv = c.norms(t, ch);
        if (nv > T(0)) {
          const T scale = gnorm(t, ch) / nv;
          gv(2 * t, ch) += scale * v(2 * t, ch);
          gv(2 * t + 1, ch) += scale * v(2 * t + 1, ch);
        }
      }
    }
    return {std::move(gv), MatX<T>(gmlp_in.rightCols(channels))};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    m1.visit(prefix + ".m1", f);
    m2.visit(prefix + ".m2", f);
  }
};

// ---------------------------------------------------------------------------
// Vector layer norm
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-6;

/// Divides each time step's vector channels by the RMS of their norms plus
/// eps. Norms only, hence equivariant.
template <typename T>
MatX<T> vector_layernorm(const MatX<T>& v) {
  const Eigen::Index n = v.rows() / 2;
  MatX<T> out(v.rows(), v.cols());
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto block = v.middleRows(2 * t, 2);
    const T rms = std::sqrt(block.squaredNorm() / static_cast<T>(v.cols()));
    out.middleRows(2 * t, 2) = block / (rms + T(kLayerNormEps));
  }
  return out;
}

template <typename T>
MatX<T> vector_layernorm_backward(const MatX<T>& v, const MatX<T>& gout) {
  const Eigen::Index n = v.rows() / 2;
  const T c = static_cast<T>(v.cols());
  MatX<T> gv(v.rows(), v.cols());
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto block = v.middleRows(2 * t, 2);
    const auto gblock = gout.middleRows(2 * t, 2);
    const T rms = std::sqrt(block.squaredNorm() / c);
    const T denom = rms + T(kLayerNormEps);
    gv.middleRows(2 * t, 2) = gblock / denom;
    if (rms > T(0)) {
      const T dot = (gblock.array() * block.array()).sum();
      gv.middleRows(2 * t, 2) -= (dot / (denom * denom * rms * c)) * block;
    }
  }
  return gv;
}

/// Mean over time of the xy blocks: (2n) x C -> 2 x C.
template <typename T>
MatX<T> mean_pool_vectors(const MatX<T>& v) {
  const Eigen::Index n = v.rows() / 2;
  MatX<T> out = MatX<T>::Zero(2, v.cols());
  for (Eigen::Index t = 0; t < n; ++t) out += v.middleRows(2 * t, 2);
  return out / static_cast<T>(n);
}

template <typename T>
MatX<T> mean_pool_vectors_backward(Eigen::Index n_blocks, const MatX<T>& gout) {
  MatX<T> gv(2 * n_blocks, gout.cols());
  for (Eigen::Index t = 0; t < n_blocks; ++t)
    gv.middleRows(2 * t, 2) = gout / static_cast<T>(n_blocks);
  return gv;
}

// ---------------------------------------------------------------------------
// Frame network
// ---------------------------------------------------------------------------

struct FrameNetConfig {
  GroupMode mode = GroupMode::kO2;
  int hidden = 32;
  int kernel = 7;
  int conv_blocks = 2;  // the SO(2) variant conventionally uses 1
};

inline FrameNetConfig default_frame_config(GroupMode mode) {
  FrameNetConfig cfg;
  cfg.mode = mode;
  cfg.conv_blocks = mode == GroupMode::kSO2 ? 1 : 2;
  return cfg;
}

/// Predicts the two raw basis vectors of the yaw frame from a feature
/// bundle. Vector path: equivariant linear -> gated nonlinearity ->
/// conv blocks (eq-conv, gate, vector layer norm) -> time pooling -> fully
/// connected block -> two output vector channels. Scalars ride along in
/// parallel dense/conv layers and only meet the vectors inside the gates.
template <typename T>
struct FrameNet {
  FrameNetConfig cfg;
  EqLinear<T> lin_v;
  nn::Dense<T> lin_s;
  GatedNonlin<T> gate0;
  struct Block {
    EqConv1d<T> conv_v;
    nn::Conv1d<T> conv_s;
    GatedNonlin<T> gate;
  };
  std::vector<Block> blocks;
  EqLinear<T> fc_v;
  nn::Dense<T> fc_s;
  GatedNonlin<T> fc_gate;
  EqLinear<T> out_v;

  void init(const FrameNetConfig& c, std::mt19937_64& rng) {
    cfg = c;
    const int cv = canonical::vector_channels(cfg.mode);
    const int cs = canonical::scalar_channels(cfg.mode);
    const int h = cfg.hidden;
    lin_v.init(cv, h, cfg.mode, rng);
    lin_s.init(cs, h, rng);
    gate0.init(h, rng);
    blocks.resize(cfg.conv_blocks);
    for (auto& b : blocks) {
      b.conv_v.init(h, h, cfg.kernel, cfg.mode, rng);
      b.conv_s.init(h, h, cfg.kernel, rng);
      b.gate.init(h, rng);
    }
    fc_v.init(h, h, cfg.mode, rng);
    fc_s.init(h, h, rng);
    fc_gate.init(h, rng);
    out_v.init(h, 2, cfg.mode, rng);
  }

  void zero_grad() {
    lin_v.zero_grad();
    lin_s.zero_grad();
    gate0.zero_grad();
    for (auto& b : blocks) {
      b.conv_v.zero_grad();
      b.conv_s.zero_grad();
      b.gate.zero_grad();
    }
    fc_v.zero_grad();
    fc_s.zero_grad();
    fc_gate.zero_grad();
    out_v.zero_grad();
  }

  struct Cache {
    EqTensor<T> in;
    MatX<T> va, sa;                  // input linear outputs
    typename GatedNonlin<T>::Cache g0;
    MatX<T> vb, sb;
    struct BlockCache {
      MatX<T> vc, sc;                // conv outputs
      typename GatedNonlin<T>::Cache g;
      MatX<T> vd, sd;                // gate outputs (vd feeds layer norm)
      MatX<T> ve;                    // layer norm output
    };
    std::vector<BlockCache> blk;
    MatX<T> vp, sp;                  // pooled
    MatX<T> vf, sf;                  // fc linear outputs
    typename GatedNonlin<T>::Cache gf;
    MatX<T> vg, sg;
    MatX<T> vh;                      // layer norm output
    MatX<T> vout;                    // 2 x 2
  };

  std::pair<Vec2T<T>, Vec2T<T>> forward(const EqTensor<T>& in, Cache& c) const {
    c.in = in;
    c.va = lin_v.forward(in.vectors);
    c.sa = lin_s.forward(in.scalars);
    std::tie(c.vb, c.sb) = gate0.forward(c.va, c.sa, c.g0);

    const MatX<T>* v = &c.vb;
    const MatX<T>* s = &c.sb;
    c.blk.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& bc = c.blk[i];
      bc.vc = blocks[i].conv_v.forward(*v);
      bc.sc = blocks[i].conv_s.forward(*s);
      std::tie(bc.vd, bc.sd) = blocks[i].gate.forward(bc.vc, bc.sc, bc.g);
      bc.ve = vector_layernorm(bc.vd);
      v = &bc.ve;
      s = &bc.sd;
    }

    c.vp = mean_pool_vectors(*v);
    c.sp = nn::mean_pool(*s);
    c.vf = fc_v.forward(c.vp);
    c.sf = fc_s.forward(c.sp);
    std::tie(c.vg, c.sg) = fc_gate.forward(c.vf, c.sf, c.gf);
    c.vh = vector_layernorm(c.vg);
    c.vout = out_v.forward(c.vh);
    return {c.vout.col(0), c.vout.col(1)};
  }

  void backward(const Cache& c, const Vec2T<T>& graw1, const Vec2T<T>& graw2) {
    MatX<T> gvout(2, 2);
    gvout.col(0) = graw1;
    gvout.col(1) = graw2;

    MatX<T> gvh = out_v.backward(c.vh, gvout);
    MatX<T> gvg = vector_layernorm_backward(c.vg, gvh);
    auto [gvf, gsf] = fc_gate.backward(c.vf, c.sf, c.gf, gvg,
                                       MatX<T>::Zero(c.sg.rows(), c.sg.cols()));
    MatX<T> gvp = fc_v.backward(c.vp, gvf);
    MatX<T> gsp = fc_s.backward(c.sp, gsf);

    const Eigen::Index n_last = (blocks.empty() ? c.vb : c.blk.back().ve).rows() / 2;
    MatX<T> gv = mean_pool_vectors_backward(n_last, gvp);
    MatX<T> gs = nn::mean_pool_backward((blocks.empty() ? c.sb : c.blk.back().sd).rows(), gsp);

    for (int i = static_cast<int>(blocks.size()) - 1; i >= 0; --i) {
      auto& bc = c.blk[i];
      const MatX<T>& v_in = i == 0 ? c.vb : c.blk[i - 1].ve;
      const MatX<T>& s_in = i == 0 ? c.sb : c.blk[i - 1].sd;
      MatX<T> gvd = vector_layernorm_backward(bc.vd, gv);
      auto [gvc, gsc] = blocks[i].gate.backward(bc.vc, bc.sc, bc.g, gvd, gs);
      gv = blocks[i].conv_v.backward(v_in, gvc);
      gs = blocks[i].conv_s.backward(s_in, gsc);
    }

    auto [gva, gsa] = gate0.backward(c.va, c.sa, c.g0, gv, gs);
    lin_v.backward(c.in.vectors, gva);
    lin_s.backward(c.in.scalars, gsa);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    lin_v.visit(prefix + ".lin_v", f);
    lin_s.visit(prefix + ".lin_s", f);
    gate0.visit(prefix + ".gate0", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string bp = prefix + ".block" + std::to_string(i);
      blocks[i].conv_v.visit(bp + ".conv_v", f);
      blocks[i].conv_s.visit(bp + ".conv_s", f);
      blocks[i].gate.visit(bp + ".gate", f);
    }
    fc_v.visit(prefix + ".fc_v", f);
    fc_s.visit(prefix + ".fc_s", f);
    fc_gate.visit(prefix + ".fc_gate", f);
    out_v.visit(prefix + ".out_v", f);
  }

  std::int64_t param_count() {
    std::int64_t total = 0;
    visit("", [&](const std::string&, MatX<T>& w, MatX<T>&) { total += w.size(); });
    return total;
  }
};

// ---------------------------------------------------------------------------
// Unconstrained baseline head
// ---------------------------------------------------------------------------

/// Frame predictor with the same stage layout but no equivariance
/// constraint: the bundle is flattened to plain channels and pushed through
/// dense/conv/GELU layers ending in four numbers (two raw basis vectors).
template <typename T>
struct NonEqFrameNet {
  GroupMode mode = GroupMode::kO2;
  int hidden = 32;
  nn::Dense<T> lin_in;
  std::vector<nn::Conv1d<T>> convs;
  nn::Dense<T> fc1, fc2;

  void init(GroupMode mode_, int hidden_, int kernel, int conv_blocks,
            std::mt19937_64& rng) {
    mode = mode_;
    hidden = hidden_;
    const int cin = 2 * canonical::vector_channels(mode) + canonical::scalar_channels(mode);
    lin_in.init(cin, hidden, rng);
    convs.resize(conv_blocks);
    for (auto& cv : convs) cv.init(hidden, hidden, kernel, rng);
    fc1.init(hidden, hidden, rng);
    fc2.init(hidden, 4, rng);
  }

  void zero_grad() {
    lin_in.zero_grad();
    for (auto& cv : convs) cv.zero_grad();
    fc1.zero_grad();
    fc2.zero_grad();
  }

  static MatX<T> flatten(const EqTensor<T>& in) {
    const Eigen::Index n = in.scalars.rows();
    const Eigen::Index cv = in.vectors.cols();
    MatX<T> x(n, 2 * cv + in.scalars.cols());
    for (Eigen::Index t = 0; t < n; ++t) {
      for (Eigen::Index ch = 0; ch < cv; ++ch) {
        x(t, 2 * ch) = in.vectors(2 * t, ch);
        x(t, 2 * ch + 1) = in.vectors(2 * t + 1, ch);
      }
      x.row(t).tail(in.scalars.cols()) = in.scalars.row(t);
    }
    return x;
  }

  struct Cache {
    MatX<T> x0, a0;
    std::vector<MatX<T>> conv_in, conv_out;
    MatX<T> pooled, f1, f2_in;
  };

  std::pair<Vec2T<T>, Vec2T<T>> forward(const EqTensor<T>& in, Cache& c) const {
    c.x0 = flatten(in);
    c.a0 = lin_in.forward(c.x0);
    MatX<T> h = nn::gelu(c.a0);
    c.conv_in.clear();
    c.conv_out.clear();
    for (const auto& cv : convs) {
      c.conv_in.push_back(h);
      c.conv_out.push_back(cv.forward(h));
      h = nn::gelu(c.conv_out.back());
    }
    c.pooled = nn::mean_pool(h);
    c.f1 = fc1.forward(c.pooled);
    c.f2_in = nn::gelu(c.f1);
    const MatX<T> out = fc2.forward(c.f2_in);
    return {Vec2T<T>(out(0, 0), out(0, 1)), Vec2T<T>(out(0, 2), out(0, 3))};
  }

  void backward(const Cache& c, const Vec2T<T>& graw1, const Vec2T<T>& graw2) {
    MatX<T> gout(1, 4);
    gout << graw1(0), graw1(1), graw2(0), graw2(1);
    MatX<T> gf2_in = fc2.backward(c.f2_in, gout);
    MatX<T> gf1 = nn::gelu_backward(c.f1, gf2_in);
    MatX<T> gpooled = fc1.backward(c.pooled, gf1);
    const Eigen::Index rows =
        convs.empty() ? c.a0.rows() : c.conv_out.back().rows();
    MatX<T> gh = nn::mean_pool_backward(rows, gpooled);
    for (int i = static_cast<int>(convs.size()) - 1; i >= 0; --i) {
      MatX<T> gconv = nn::gelu_backward(c.conv_out[i], gh);
      gh = convs[i].backward(c.conv_in[i], gconv);
    }
    MatX<T> ga0 = nn::gelu_backward(c.a0, gh);
    lin_in.backward(c.x0, ga0);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    lin_in.visit(prefix + ".lin_in", f);
    for (std::size_t i = 0; i < convs.size(); ++i)
      convs[i].visit(prefix + ".conv" + std::to_string(i), f);
    fc1.visit(prefix + ".fc1", f);
    fc2.visit(prefix + ".fc2", f);
  }

  std::int64_t param_count() {
    std::int64_t total = 0;
    visit("", [&](const std::string&, MatX<T>& w, MatX<T>&) { total += w.size(); });
    return total;
  }
};

/// Casts a double-precision feature bundle into the network scalar type.
template <typename T>
EqTensor<T> to_eq_tensor(const canonical::FeatureBundle& fb) {
  EqTensor<T> out;
  out.vectors = fb.vectors.cast<T>();
  out.scalars = fb.scalars.cast<T>();
  return out;
}

}  // namespace eqnio::eqnet
