#pragma once

// Finite-difference checks for every differentiable op, each over several
// random shapes. Shared by the unit tests and the acceptance runner.

#include <functional>
#include <string>
#include <vector>

#include "dctir/nn_model.hpp"
#include "gradcheck.hpp"

namespace dctir::testing {

struct OpCheck {
  std::string op;
  int shapes = 0;
  double worst = 0.0;  // largest relative error over all shapes and inputs
};

namespace detail {

inline Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Values kept away from zero so ReLU kinks are not straddled by the step.
inline Tensor off_zero_tensor(Rng& rng, std::vector<int> shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = (rng.coin() ? 1 : -1) * rng.uniform(0.05, 1.0);
  return t;
}

inline std::vector<double> random_vec(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void track(OpCheck& c, const std::vector<double>& analytic, std::vector<double>& x, const std::function<double()>& f) {
  c.worst = std::max(c.worst, relative_error(analytic, numeric_gradient(x, f)));
}

}  // namespace detail

inline OpCheck check_conv2d(Rng& rng) {
  using namespace detail;
  OpCheck c{"conv2d"};
  struct Case { int C, H, W, O, k, stride, pad; };
  const Case cases[] = {{1, 5, 5, 1, 3, 1, 1}, {2, 6, 7, 3, 3, 2, 1}, {3, 4, 4, 2, 1, 1, 0},
                        {2, 7, 5, 2, 1, 2, 0}, {4, 5, 6, 3, 3, 1, 0}, {2, 9, 9, 2, 7, 2, 3}};
  for (const Case& k : cases) {
    Tensor x = random_tensor(rng, {k.C, k.H, k.W}), w = random_tensor(rng, {k.O, k.C, k.k, k.k}),
           b = random_tensor(rng, {k.O});
    const Tensor y0 = ops::conv2d(x, w, b, k.stride, k.pad);
    const auto r = random_vec(rng, y0.size());
    auto f = [&] { return dot(ops::conv2d(x, w, b, k.stride, k.pad).data, r); };
    ops::ConvCache cc;
    ops::conv2d(x, w, b, k.stride, k.pad, &cc);
    Tensor dy(y0.shape);
    dy.data = r;
    std::vector<double> dw(w.size(), 0.0), db(b.size(), 0.0);
    Tensor dx;
    ops::conv2d_backward(dy, w, cc, dw, db, &dx);
    track(c, dx.data, x.data, f);
    track(c, dw, w.data, f);
    track(c, db, b.data, f);
    ++c.shapes;
  }
  return c;
}

inline OpCheck check_relu(Rng& rng) {
  using namespace detail;
  OpCheck c{"relu"};
  for (auto shape : std::vector<std::vector<int>>{{1, 3, 3}, {2, 4, 5}, {3, 2, 7}, {5, 1, 1}, {2, 6, 6}}) {
    Tensor x = off_zero_tensor(rng, shape);
    const auto r = random_vec(rng, x.size());
    Tensor dy(shape);
    dy.data = r;
    const Tensor dx = ops::relu_backward(dy, ops::relu(x));
    track(c, dx.data, x.data, [&] { return dot(ops::relu(x).data, r); });
    ++c.shapes;
  }
  return c;
}

inline OpCheck check_softplus(Rng& rng) {
  using namespace detail;
  OpCheck c{"softplus"};
  for (auto shape : std::vector<std::vector<int>>{{1, 3, 3}, {2, 4, 5}, {1, 8, 2}, {4, 1, 3}, {3, 3, 3}}) {
    Tensor x = random_tensor(rng, shape, -6, 6);
    const auto r = random_vec(rng, x.size());
    Tensor dy(shape);
    dy.data = r;
    const Tensor dx = ops::softplus_backward(dy, x);
    track(c, dx.data, x.data, [&] { return dot(ops::softplus(x).data, r); });
    ++c.shapes;
  }
  return c;
}

inline OpCheck check_maxpool(Rng& rng) {
  using namespace detail;
  OpCheck c{"maxpool2d"};
  for (auto shape : std::vector<std::vector<int>>{{1, 4, 4}, {2, 5, 6}, {3, 7, 7}, {1, 8, 3}, {2, 6, 9}}) {
    Tensor x = random_tensor(rng, shape);
    ops::PoolCache pc;
    const Tensor y = ops::maxpool2d(x, 3, 2, 1, &pc);
    const auto r = random_vec(rng, y.size());
    Tensor dy(y.shape);
    dy.data = r;
    track(c, ops::maxpool2d_backward(dy, pc).data, x.data, [&] { return dot(ops::maxpool2d(x, 3, 2, 1).data, r); });
    ++c.shapes;
  }
  return c;
}

inline OpCheck check_gem(Rng& rng) {
  using namespace detail;
  OpCheck c{"gem"};
  const std::vector<std::vector<int>> shapes{{1, 2, 2}, {3, 4, 4}, {2, 3, 5}, {4, 1, 6}, {5, 3, 3}};
  for (const auto& shape : shapes) {
    for (double p : {3.0, 1.0, 2.5}) {
      Tensor x = random_tensor(rng, shape, 0.05, 2.0);
      // A few clamped entries exercise the zero-gradient region.
      if (x.size() > 3) x.data[1] = -0.5;
      const auto y = ops::gem(x, p);
      const auto r = random_vec(rng, y.size());
      track(c, ops::gem_backward(r, x, y, p).data, x.data, [&] { return dot(ops::gem(x, p), r); });
    }
    ++c.shapes;
  }
  return c;
}

inline OpCheck check_attention_pool(Rng& rng) {
  using namespace detail;
  OpCheck c{"attention_pool"};
  for (auto [C, H, W] : std::vector<std::array<int, 3>>{{1, 2, 2}, {3, 3, 4}, {4, 5, 2}, {2, 1, 7}, {6, 3, 3}}) {
    Tensor S = random_tensor(rng, {C, H, W}), A = random_tensor(rng, {1, H, W}, 0.05, 3.0);
    const auto v = ops::attention_pool(S, A);
    const auto r = random_vec(rng, v.size());
    Tensor dS, dA;
    ops::attention_pool_backward(r, S, A, v, &dS, &dA);
    auto f = [&] { return dot(ops::attention_pool(S, A), r); };
    track(c, dS.data, S.data, f);
    track(c, dA.data, A.data, f);
    ++c.shapes;
  }
  return c;
}

inline OpCheck check_linear(Rng& rng) {
  using namespace detail;
  OpCheck c{"linear"};
  for (auto [O, I] : std::vector<std::pair<int, int>>{{1, 1}, {3, 5}, {8, 2}, {4, 4}, {2, 9}}) {
    Tensor w = random_tensor(rng, {O, I}), b = random_tensor(rng, {O});
    auto x = random_vec(rng, static_cast<std::size_t>(I));
    const auto r = random_vec(rng, static_cast<std::size_t>(O));
    std::vector<double> dw(w.size(), 0.0), db(b.size(), 0.0);
    const auto dx = ops::linear_backward(r, w, x, dw, db);
    auto f = [&] { return dot(ops::linear(w, b, x), r); };
    track(c, dx, x, f);
    track(c, dw, w.data, f);
    track(c, db, b.data, f);
    ++c.shapes;
  }
  return c;
}

inline OpCheck check_l2_normalize(Rng& rng) {
  using namespace detail;
  OpCheck c{"l2_normalize"};
  for (std::size_t n : {1u, 2u, 5u, 16u, 33u}) {
    auto x = random_vec(rng, n, -2, 2);
    if (n == 1) x[0] = 0.7;
    const auto r = random_vec(rng, n);
    const auto y = ops::l2_normalize(x);
    track(c, ops::l2_normalize_backward(r, x, y), x, [&] { return dot(ops::l2_normalize(x), r); });
    ++c.shapes;
  }
  return c;
}

inline OpCheck check_cross_entropy(Rng& rng) {
  using namespace detail;
  OpCheck c{"softmax_cross_entropy"};
  for (std::size_t n : {2u, 3u, 5u, 10u, 17u}) {
    auto x = random_vec(rng, n, -4, 4);
    const int label = static_cast<int>(rng.below(n));
    track(c, ops::softmax_cross_entropy(x, label).dlogits, x,
          [&] { return ops::softmax_cross_entropy(x, label).loss; });
    ++c.shapes;
  }
  return c;
}

inline OpCheck check_arcface(Rng& rng) {
  using namespace detail;
  OpCheck c{"arcface"};
  for (auto [K, G] : std::vector<std::pair<int, int>>{{2, 3}, {3, 4}, {5, 8}, {4, 2}, {7, 6}}) {
    for (double margin : {0.15, 0.0, 0.5}) {
      Tensor w = random_tensor(rng, {K, G});
      // g need not be unit for the op itself; keep it near the sphere anyway.
      auto g = ops::l2_normalize(random_vec(rng, static_cast<std::size_t>(G)));
      std::vector<double> gamma{rng.uniform(5, 30)};
      const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
      ops::ArcFaceGrad ag;
      ops::arcface(g, w, gamma[0], margin, label, &ag);
      auto f = [&] { return ops::arcface(g, w, gamma[0], margin, label).loss; };
      track(c, ag.dg, g, f);
      track(c, ag.dw, w.data, f);
      track(c, {ag.dgamma}, gamma, f);
    }
    ++c.shapes;
  }
  return c;
}

inline std::vector<OpCheck> run_op_gradient_suite(std::uint64_t seed = 2024) {
  Rng rng(seed);
  return {check_conv2d(rng),         check_relu(rng),    check_softplus(rng),      check_maxpool(rng),
          check_gem(rng),            check_attention_pool(rng), check_linear(rng), check_l2_normalize(rng),
          check_cross_entropy(rng), check_arcface(rng)};
}

}  // namespace dctir::testing
