#pragma once

#include <chrono>
#include <cmath>
#include <numbers>

#include "dctir/retrieval.hpp"

namespace dctir::testing {

struct RansacBench {
  int trials = 0;
  int successes = 0;
  double worst_error = 0.0;  // mean reprojection error vs truth, worst trial
  int fewest_inliers = 1 << 30;
  double seconds = 0.0;
};

inline std::vector<float> noisy_tag(const std::vector<double>& tag, Rng& rng, double sigma) {
  std::vector<double> v = tag;
  for (double& x : v) x += rng.normal(0.0, sigma);
  v = ops::l2_normalize(v);
  return {v.begin(), v.end()};
}

/// 50 points under rotation 20 deg, scale 1.2, translation (30, -10), plus
/// 20 uniformly placed outliers. Both sides carry the same random tag per
/// point, with independent descriptor noise. A trial succeeds when the
/// recovered model is within 0.5 px mean reprojection error of the truth on
/// the inlier points and keeps at least 48 of them.
inline RansacBench run_ransac_benchmark(int seeds = 100) {
  const auto t0 = std::chrono::steady_clock::now();
  RansacBench out;
  const double th = 20.0 * std::numbers::pi / 180.0, s = 1.2;
  const Affine truth{{s * std::cos(th), -s * std::sin(th), 30.0, s * std::sin(th), s * std::cos(th), -10.0}};
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(mix_seed(9000, static_cast<std::uint64_t>(seed)));
    std::vector<LocalFeature> q, c;
    std::vector<std::array<double, 2>> inlier_src;
    for (int i = 0; i < 70; ++i) {
      std::vector<double> tag(32);
      for (double& v : tag) v = rng.normal();
      LocalFeature a, b;
      const double x = rng.uniform(0, 400), y = rng.uniform(0, 400);
      a.x = static_cast<float>(x);
      a.y = static_cast<float>(y);
      if (i < 50) {
        const auto p = truth.apply(x, y);
        b.x = static_cast<float>(p[0] + rng.normal(0, 0.2));
        b.y = static_cast<float>(p[1] + rng.normal(0, 0.2));
        inlier_src.push_back({a.x, a.y});
      } else {
        b.x = static_cast<float>(rng.uniform(-100, 500));
        b.y = static_cast<float>(rng.uniform(-100, 500));
      }
      a.descriptor = noisy_tag(tag, rng, 0.02);
      b.descriptor = noisy_tag(tag, rng, 0.02);
      q.push_back(std::move(a));
      c.push_back(std::move(b));
    }
    // Candidate side in a different order than the query side.
    for (std::size_t i = c.size(); i > 1; --i) std::swap(c[i - 1], c[rng.below(i)]);
    const Verification v = match_and_verify(q, c, RansacConfig{}, static_cast<std::uint64_t>(seed));
    ++out.trials;
    if (!v.model) continue;
    double err = 0.0;
    for (const auto& p : inlier_src) {
      const auto e = v.model->apply(p[0], p[1]);
      const auto t = truth.apply(p[0], p[1]);
      err += std::hypot(e[0] - t[0], e[1] - t[1]);
    }
    err /= static_cast<double>(inlier_src.size());
    out.worst_error = std::max(out.worst_error, err);
    out.fewest_inliers = std::min(out.fewest_inliers, v.inliers);
    if (err < 0.5 && v.inliers >= 48) ++out.successes;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace dctir::testing
