#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "eqnio/core.hpp"

// Plain (non-equivariant) differentiable building blocks. Every layer owns
// its parameters and gradient accumulators and exposes
//   forward(x)            -> y
//   backward(x, dL/dy)    -> dL/dx, accumulating dL/dparams
// Composition is an explicit tape: callers keep the forward inputs around
// and replay the layers in reverse. Matrices are time-major (rows = time
// steps, cols = channels).

namespace eqnio::nn {

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
  const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

template <typename T>
MatX<T> gelu(const MatX<T>& x) {
  return x.unaryExpr([](T v) { return gelu_scalar(v); });
}

template <typename T>
MatX<T> gelu_backward(const MatX<T>& x, const MatX<T>& gout) {
  return gout.cwiseProduct(x.unaryExpr([](T v) { return gelu_grad_scalar(v); }));
}

template <typename T>
void fill_uniform(MatX<T>& m, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = static_cast<T>(dist(rng));
}

/// Fully connected layer with bias, Kaiming-uniform init.
template <typename T>
struct Dense {
  MatX<T> w;  // Cin x Cout
  MatX<T> b;  // 1 x Cout
  MatX<T> gw, gb;

  void init(int cin, int cout, std::mt19937_64& rng, double gain = 1.0) {
    w.resize(cin, cout);
    fill_uniform(w, gain * std::sqrt(6.0 / cin), rng);
    b.setZero(1, cout);
    zero_grad();
  }

  void zero_grad() {
    gw.setZero(w.rows(), w.cols());
    gb.setZero(1, b.cols());
  }

  MatX<T> forward(const MatX<T>& x) const {
    if (x.cols() != w.rows()) throw std::invalid_argument("Dense: channel mismatch");
    return (x * w).rowwise() + b.row(0);
  }

  MatX<T> backward(const MatX<T>& x, const MatX<T>& gout) {
    gw.noalias() += x.transpose() * gout;
    gb.row(0) += gout.colwise().sum();
    return gout * w.transpose();
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w, gw);
    f(prefix + ".b", b, gb);
  }
};

/// 1-D convolution over time, channels-last. Zero padding; output length is
/// (n + 2*pad - k) / stride + 1.
template <typename T>
struct Conv1d {
  MatX<T> w;  // (k*Cin) x Cout, tap-major row blocks
  MatX<T> b;  // 1 x Cout
  MatX<T> gw, gb;
  int k = 1, cin = 0, stride = 1, pad = 0;

  void init(int cin_, int cout, int k_, std::mt19937_64& rng, int stride_ = 1,
            int pad_ = -1) {
    k = k_;
    cin = cin_;
    stride = stride_;
    pad = pad_ >= 0 ? pad_ : (k_ - 1) / 2;  // default keeps n at stride 1, odd k
    w.resize(k * cin, cout);
    fill_uniform(w, std::sqrt(6.0 / (k * cin)), rng);
    b.setZero(1, cout);
    zero_grad();
  }

  void zero_grad() {
    gw.setZero(w.rows(), w.cols());
    gb.setZero(1, b.cols());
  }

  int out_len(int n) const {
    const int m = (n + 2 * pad - k) / stride + 1;
    if (m <= 0) throw std::invalid_argument("Conv1d: kernel longer than padded input");
    return m;
  }

  MatX<T> forward(const MatX<T>& x) const {
    if (x.cols() != cin) throw std::invalid_argument("Conv1d: channel mismatch");
    const int n = static_cast<int>(x.rows());
    const int m = out_len(n);
    MatX<T> y = MatX<T>::Zero(m, w.cols());
    y.rowwise() += b.row(0);
    for (int tap = 0; tap < k; ++tap) {
      const auto wt = w.middleRows(tap * cin, cin);
      if (stride == 1) {
        const int t0 = std::max(0, pad - tap);
        const int t1 = std::min(m, n + pad - tap);
        if (t1 <= t0) continue;
        y.middleRows(t0, t1 - t0).noalias() +=
            x.middleRows(t0 + tap - pad, t1 - t0) * wt;
      } else {
        for (int t = 0; t < m; ++t) {
          const int s = t * stride - pad + tap;
          if (s < 0 || s >= n) continue;
          y.row(t).noalias() += x.row(s) * wt;
        }
      }
    }
    return y;
  }

  MatX<T> backward(const MatX<T>& x, const MatX<T>& gout) {
    const int n = static_cast<int>(x.rows());
    const int m = static_cast<int>(gout.rows());
    MatX<T> gx = MatX<T>::Zero(n, cin);
    gb.row(0) += gout.colwise().sum();
    for (int tap = 0; tap < k; ++tap) {
      const auto wt = w.middleRows(tap * cin, cin);
      auto gwt = gw.middleRows(tap * cin, cin);
      if (stride == 1) {
        const int t0 = std::max(0, pad - tap);
        const int t1 = std::min(m, n + pad - tap);
        if (t1 <= t0) continue;
        const auto go = gout.middleRows(t0, t1 - t0);
        gx.middleRows(t0 + tap - pad, t1 - t0).noalias() += go * wt.transpose();
        gwt.noalias() += x.middleRows(t0 + tap - pad, t1 - t0).transpose() * go;
      } else {
        for (int t = 0; t < m; ++t) {
          const int s = t * stride - pad + tap;
          if (s < 0 || s >= n) continue;
          gx.row(s).noalias() += gout.row(t) * wt.transpose();
          gwt.noalias() += x.row(s).transpose() * gout.row(t);
        }
      }
    }
    return gx;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w, gw);
    f(prefix + ".b", b, gb);
  }
};

/// Mean over time (rows). Backward spreads the gradient uniformly.
template <typename T>
MatX<T> mean_pool(const MatX<T>& x) {
  MatX<T> y(1, x.cols());
  y.row(0) = x.colwise().mean();
  return y;
}

template <typename T>
MatX<T> mean_pool_backward(Eigen::Index rows, const MatX<T>& gout) {
  return MatX<T>(gout.row(0).replicate(rows, 1) / static_cast<T>(rows));
}

}  // namespace eqnio::nn
