#pragma once

// Differentiable building blocks. Every op is a plain forward function plus a
// matching backward that takes the upstream gradient and whatever the forward
// cached. Parameter gradients accumulate (+=); input gradients are assigned.
// Feature maps are single samples laid out [channels, height, width].

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "dctir/nn_tensor.hpp"

namespace dctir::ops {

// GEMM operands are always Eigen-owned (aligned) matrices. Vectorized
// kernels on mapped std::vector storage change their summation order with
// the buffer's address, which would break bitwise reproducibility.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMatrix, Eigen::Unaligned>;

inline RowMatrix owned(const std::vector<double>& v, int rows, int cols) { return ConstMatMap(v.data(), rows, cols); }

inline int conv_out(int in, int kernel, int stride, int pad) { return (in + 2 * pad - kernel) / stride + 1; }

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)

struct ConvCache {
  RowMatrix cols;  // [C*k*k, Ho*Wo]
  int in_c = 0, in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  int kernel = 0, stride = 1, pad = 0;
};

namespace detail {

inline void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int oh, int ow, double* cols) {
  const std::size_t P = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + (static_cast<std::size_t>(ci * k + ky) * k + kx) * P;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* out = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + ow, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            out[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
}

inline void col2im(const double* cols, int c, int h, int w, int k, int stride, int pad, int oh, int ow, double* x) {
  const std::size_t P = static_cast<std::size_t>(oh) * ow;
  std::fill(x, x + static_cast<std::size_t>(c) * h * w, 0.0);
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + (static_cast<std::size_t>(ci * k + ky) * k + kx) * P;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + (static_cast<std::size_t>(ci) * h + iy) * w;
          const double* in = row + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += in[ox];
          }
        }
      }
}

}  // namespace detail

/// x [C,H,W], w [O,C,k,k], b [O] -> y [O,Ho,Wo].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad, ConvCache* cache = nullptr) {
  require(x.shape.size() == 3 && w.shape.size() == 4 && w.dim(1) == x.dim(0) && w.dim(2) == w.dim(3),
          ErrorCode::ShapeMismatch, "conv2d: input " + shape_string(x.shape) + " vs kernel " + shape_string(w.shape));
  require_shape(b, {w.dim(0)}, "conv2d bias");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2), O = w.dim(0), k = w.dim(2);
  const int oh = conv_out(H, k, stride, pad), ow = conv_out(W, k, stride, pad);
  require(oh > 0 && ow > 0, ErrorCode::ShapeMismatch, "conv2d: input smaller than kernel");
  const int K = C * k * k;
  const int P = oh * ow;

  ConvCache local;
  ConvCache& cc = cache ? *cache : local;
  cc = {{}, C, H, W, oh, ow, k, stride, pad};
  if (k == 1 && stride == 1 && pad == 0) {
    cc.cols = owned(x.data, K, P);
  } else {
    cc.cols.resize(K, P);
    detail::im2col(x.data.data(), C, H, W, k, stride, pad, oh, ow, cc.cols.data());
  }
  RowMatrix Y(O, P);
  Y.noalias() = owned(w.data, O, K) * cc.cols;
  Tensor y({O, oh, ow});
  for (int o = 0; o < O; ++o)
    for (int i = 0; i < P; ++i) y.data[static_cast<std::size_t>(o) * P + i] = Y(o, i) + b.data[o];
  return y;
}

/// Accumulates dw, db; writes dx when requested.
inline void conv2d_backward(const Tensor& dy, const Tensor& w, const ConvCache& cc, std::vector<double>& dw,
                            std::vector<double>& db, Tensor* dx) {
  const int O = w.dim(0), K = cc.in_c * cc.kernel * cc.kernel, P = cc.out_h * cc.out_w;
  require(dy.size() == static_cast<std::size_t>(O) * P, ErrorCode::ShapeMismatch, "conv2d_backward: gradient shape");
  const RowMatrix dY = owned(dy.data, O, P);
  RowMatrix dW(O, K);
  dW.noalias() = dY * cc.cols.transpose();
  for (int o = 0; o < O; ++o) {
    for (int i = 0; i < K; ++i) dw[static_cast<std::size_t>(o) * K + i] += dW(o, i);
    double s = 0.0;
    for (int i = 0; i < P; ++i) s += dY(o, i);
    db[o] += s;
  }
  if (!dx) return;
  *dx = Tensor({cc.in_c, cc.in_h, cc.in_w});
  RowMatrix dcols(K, P);
  dcols.noalias() = owned(w.data, O, K).transpose() * dY;
  if (cc.kernel == 1 && cc.stride == 1 && cc.pad == 0) {
    std::copy(dcols.data(), dcols.data() + dx->data.size(), dx->data.begin());
    return;
  }
  detail::col2im(dcols.data(), cc.in_c, cc.in_h, cc.in_w, cc.kernel, cc.stride, cc.pad, cc.out_h, cc.out_w,
                 dx->data.data());
}

// ---------------------------------------------------------------------------
// Pointwise

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  y.grad.clear();
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

/// Uses the forward output: y > 0 exactly where x > 0.
inline Tensor relu_backward(const Tensor& dy, const Tensor& y) {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(y.data[i] > 0.0)) dx.data[i] = 0.0;
  return dx;
}

inline double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor softplus(const Tensor& x) {
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = softplus(x.data[i]);
  return y;
}

inline Tensor softplus_backward(const Tensor& dy, const Tensor& x) {
  Tensor dx(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) dx.data[i] = dy.data[i] * sigmoid(x.data[i]);
  return dx;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), ErrorCode::ShapeMismatch, "add: shapes differ");
  Tensor y = a;
  y.grad.clear();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += b.data[i];
  return y;
}

// ---------------------------------------------------------------------------
// Max pooling (only the spatial-input comparison model uses it)

struct PoolCache {
  std::vector<std::size_t> argmax;
  std::vector<int> in_shape;
};

inline Tensor maxpool2d(const Tensor& x, int k, int stride, int pad, PoolCache* cache = nullptr) {
  require(x.shape.size() == 3, ErrorCode::ShapeMismatch, "maxpool2d: expects [C,H,W]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int oh = conv_out(H, k, stride, pad), ow = conv_out(W, k, stride, pad);
  Tensor y({C, oh, ow});
  std::vector<std::size_t> arg(y.size());
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t where = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
            const std::size_t idx = (static_cast<std::size_t>(c) * H + iy) * W + ix;
            if (x.data[idx] > best) {
              best = x.data[idx];
              where = idx;
            }
          }
        const std::size_t o = (static_cast<std::size_t>(c) * oh + oy) * ow + ox;
        y.data[o] = best;
        arg[o] = where;
      }
  if (cache) *cache = {std::move(arg), x.shape};
  return y;
}

inline Tensor maxpool2d_backward(const Tensor& dy, const PoolCache& cache) {
  Tensor dx(cache.in_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx.data[cache.argmax[i]] += dy.data[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Pooling heads

inline constexpr double kGemClamp = 1e-6;

/// Generalized mean per channel: (mean over positions of max(x, 1e-6)^p)^(1/p).
inline std::vector<double> gem(const Tensor& x, double p) {
  require(x.shape.size() == 3, ErrorCode::ShapeMismatch, "gem: expects [C,H,W]");
  require(p > 0.0, ErrorCode::InvalidArgument, "gem power must be positive");
  const int C = x.dim(0);
  const std::size_t N = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  std::vector<double> y(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    const double* v = x.data.data() + c * N;
    double sum = 0.0;
    for (std::size_t i = 0; i < N; ++i) sum += std::pow(std::max(v[i], kGemClamp), p);
    y[c] = std::pow(sum / static_cast<double>(N), 1.0 / p);
  }
  return y;
}

inline Tensor gem_backward(std::span<const double> dy, const Tensor& x, std::span<const double> y, double p) {
  const int C = x.dim(0);
  const std::size_t N = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor dx(x.shape);
  for (int c = 0; c < C; ++c) {
    // d y / d x_i = x_i^(p-1) * y^(1-p) / N
    const double scale = dy[c] * std::pow(y[c], 1.0 - p) / static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) {
      const double v = x.data[c * N + i];
      dx.data[c * N + i] = v > kGemClamp ? scale * std::pow(v, p - 1.0) : 0.0;
    }
  }
  return dx;
}

inline constexpr double kAttentionEps = 1e-8;

/// v[c] = sum_i A_i S[c,i] / (sum_i A_i + 1e-8), with A [1,H,W] and S [C,H,W].
inline std::vector<double> attention_pool(const Tensor& S, const Tensor& A) {
  require(S.shape.size() == 3 && A.shape == std::vector<int>{1, S.dim(1), S.dim(2)}, ErrorCode::ShapeMismatch,
          "attention_pool: map sizes differ");
  const int C = S.dim(0);
  const std::size_t N = A.size();
  const double Z = std::accumulate(A.data.begin(), A.data.end(), 0.0) + kAttentionEps;
  std::vector<double> v(static_cast<std::size_t>(C), 0.0);
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) s += A.data[i] * S.data[c * N + i];
    v[c] = s / Z;
  }
  return v;
}

inline void attention_pool_backward(std::span<const double> dv, const Tensor& S, const Tensor& A,
                                    std::span<const double> v, Tensor* dS, Tensor* dA) {
  const int C = S.dim(0);
  const std::size_t N = A.size();
  const double Z = std::accumulate(A.data.begin(), A.data.end(), 0.0) + kAttentionEps;
  if (dA) {
    *dA = Tensor(A.shape);
    for (std::size_t i = 0; i < N; ++i) {
      double g = 0.0;
      for (int c = 0; c < C; ++c) g += dv[c] * (S.data[c * N + i] - v[c]);
      dA->data[i] = g / Z;
    }
  }
  if (dS) {
    *dS = Tensor(S.shape);
    for (int c = 0; c < C; ++c)
      for (std::size_t i = 0; i < N; ++i) dS->data[c * N + i] = dv[c] * A.data[i] / Z;
  }
}

// ---------------------------------------------------------------------------
// Vector ops

/// y = W x + b with W [O,I].
inline std::vector<double> linear(const Tensor& w, const Tensor& b, std::span<const double> x) {
  require(w.shape.size() == 2 && static_cast<std::size_t>(w.dim(1)) == x.size(), ErrorCode::ShapeMismatch,
          "linear: input size " + std::to_string(x.size()) + " vs weight " + shape_string(w.shape));
  require_shape(b, {w.dim(0)}, "linear bias");
  const int O = w.dim(0), I = w.dim(1);
  std::vector<double> y(static_cast<std::size_t>(O));
  for (int o = 0; o < O; ++o) {
    double s = 0.0;
    for (int i = 0; i < I; ++i) s += w.data[static_cast<std::size_t>(o) * I + i] * x[i];
    y[o] = s + b.data[o];
  }
  return y;
}

inline std::vector<double> linear_backward(std::span<const double> dy, const Tensor& w, std::span<const double> x,
                                           std::vector<double>& dw, std::vector<double>& db) {
  const int O = w.dim(0), I = w.dim(1);
  std::vector<double> dx(static_cast<std::size_t>(I), 0.0);
  for (int o = 0; o < O; ++o) {
    db[o] += dy[o];
    for (int i = 0; i < I; ++i) {
      dw[static_cast<std::size_t>(o) * I + i] += dy[o] * x[i];
      dx[i] += w.data[static_cast<std::size_t>(o) * I + i] * dy[o];
    }
  }
  return dx;
}

inline double l2_norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

inline constexpr double kNormFloor = 1e-12;

inline std::vector<double> l2_normalize(std::span<const double> x) {
  const double n = std::max(l2_norm(x), kNormFloor);
  std::vector<double> y(x.begin(), x.end());
  for (double& v : y) v /= n;
  return y;
}

/// dx = (dy - y (y . dy)) / |x|
inline std::vector<double> l2_normalize_backward(std::span<const double> dy, std::span<const double> x,
                                                 std::span<const double> y) {
  const double n = std::max(l2_norm(x), kNormFloor);
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * dy[i];
  std::vector<double> dx(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = (dy[i] - y[i] * dot) / n;
  return dx;
}

// ---------------------------------------------------------------------------
// Losses

struct CrossEntropy {
  double loss = 0.0;
  std::vector<double> dlogits;  // softmax - onehot
};

inline CrossEntropy softmax_cross_entropy(std::span<const double> logits, int label) {
  require(label >= 0 && static_cast<std::size_t>(label) < logits.size(), ErrorCode::InvalidArgument, "label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  CrossEntropy ce;
  ce.loss = std::log(z) + mx - logits[label];
  ce.dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) ce.dlogits[i] = std::exp(logits[i] - mx) / z;
  ce.dlogits[label] -= 1.0;
  return ce;
}

inline constexpr double kArcCosGuard = 1e-7;

struct ArcFaceResult {
  double loss = 0.0;
  std::vector<double> logits;
  std::vector<double> cosines;
};

struct ArcFaceGrad {
  std::vector<double> dg;
  std::vector<double> dw;  // same layout as the raw class weights
  double dgamma = 0.0;
};

/// Additive angular margin on the target class, softmax cross-entropy over
/// gamma-scaled cosines. Class rows of w [K,G] are L2-normalized here.
/// The logit value uses the exact angle; only its derivative goes through
/// the clamped cosine, so g on the class axis gives gamma*cos(m) exactly.
inline ArcFaceResult arcface(std::span<const double> g, const Tensor& w, double gamma, double margin, int label,
                             ArcFaceGrad* grad = nullptr) {
  require(w.shape.size() == 2 && static_cast<std::size_t>(w.dim(1)) == g.size(), ErrorCode::ShapeMismatch,
          "arcface: descriptor size vs class weights " + shape_string(w.shape));
  const int K = w.dim(0), G = w.dim(1);
  require(label >= 0 && label < K, ErrorCode::InvalidArgument, "label out of range");
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(K));
  ArcFaceResult r;
  r.cosines.resize(static_cast<std::size_t>(K));
  r.logits.resize(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    rows[k] = l2_normalize(std::span<const double>(w.data.data() + static_cast<std::size_t>(k) * G, G));
    double c = 0.0;
    for (int i = 0; i < G; ++i) c += rows[k][i] * g[i];
    r.cosines[k] = c;
    r.logits[k] = gamma * c;
  }
  const double ct = std::clamp(r.cosines[label], -1.0, 1.0);
  r.logits[label] = gamma * std::cos(std::acos(ct) + margin);
  const CrossEntropy ce = softmax_cross_entropy(r.logits, label);
  r.loss = ce.loss;
  if (!grad) return r;

  grad->dg.assign(g.size(), 0.0);
  grad->dw.assign(w.size(), 0.0);
  grad->dgamma = 0.0;
  for (int k = 0; k < K; ++k) {
    grad->dgamma += ce.dlogits[k] * r.logits[k] / gamma;
    double dcos;
    if (k == label) {
      // d/dc cos(acos c + m) = cos m + sin m * c / sqrt(1 - c^2)
      const double c = std::clamp(r.cosines[k], -1.0 + kArcCosGuard, 1.0 - kArcCosGuard);
      dcos = ce.dlogits[k] * gamma * (std::cos(margin) + std::sin(margin) * c / std::sqrt(1.0 - c * c));
    } else {
      dcos = ce.dlogits[k] * gamma;
    }
    if (dcos == 0.0) continue;
    std::vector<double> drow(static_cast<std::size_t>(G));
    for (int i = 0; i < G; ++i) {
      grad->dg[i] += dcos * rows[k][i];
      drow[i] = dcos * g[i];
    }
    const auto raw = std::span<const double>(w.data.data() + static_cast<std::size_t>(k) * G, G);
    const auto dw = l2_normalize_backward(drow, raw, rows[k]);
    std::copy(dw.begin(), dw.end(), grad->dw.begin() + static_cast<std::ptrdiff_t>(k) * G);
  }
  return r;
}

}  // namespace dctir::ops
