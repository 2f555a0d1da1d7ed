#pragma once

#include "core.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <utility>
#include <vector>

namespace eigensoc {

inline constexpr int kHermiteCap = 60;
inline constexpr int kNormalizedHermiteCap = 300;

// Physicists' Hermite polynomial H_n(x) and its derivative 2n H_{n-1}(x).
inline std::pair<double, double> hermite_eval(int n, double x) {
  require(n >= 0, ErrorKind::invalid_argument, "hermite_eval: negative degree");
  if (n > kHermiteCap)
    throw Error(ErrorKind::numerical, "hermite_eval: degree " + std::to_string(n) +
                                          " exceeds overflow cap " + std::to_string(kHermiteCap));
  double hm1 = 0.0, h = 1.0;
  for (int k = 0; k < n; ++k) {
    const double hn = 2.0 * x * h - 2.0 * k * hm1;
    hm1 = h;
    h = hn;
  }
  return {h, 2.0 * n * hm1};
}

// p_n = H_n / sqrt(2^n n!) for n <= nmax, with first and second derivatives.
// The normalized recurrence keeps values O(poly(y)) instead of O(2^n n!).
inline void hermite_normalized(int nmax, double y, double* p, double* dp, double* ddp = nullptr) {
  p[0] = 1.0;
  if (nmax >= 1) p[1] = std::sqrt(2.0) * y;
  for (int n = 1; n < nmax; ++n)
    p[n + 1] = std::sqrt(2.0 / (n + 1)) * y * p[n] - std::sqrt(double(n) / (n + 1)) * p[n - 1];
  dp[0] = 0.0;
  for (int n = 1; n <= nmax; ++n) dp[n] = std::sqrt(2.0 * n) * p[n - 1];
  if (ddp) {
    ddp[0] = 0.0;
    if (nmax >= 1) ddp[1] = 0.0;
    for (int n = 2; n <= nmax; ++n) ddp[n] = std::sqrt(2.0 * n) * std::sqrt(2.0 * (n - 1)) * p[n - 2];
  }
}

// Gauss-Hermite rule for int e^{-x^2} f(x) dx (Golub-Welsch).
struct GaussHermite {
  std::vector<double> nodes, weights;
};

inline GaussHermite gauss_hermite(int n) {
  require(n >= 1, ErrorKind::invalid_argument, "gauss_hermite: n must be >= 1");
  Mat J = Mat::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(i / 2.0);
  Eigen::SelfAdjointEigenSolver<Mat> es(J);
  GaussHermite g;
  const double sqpi = std::sqrt(M_PI);
  for (int i = 0; i < n; ++i) {
    g.nodes.push_back(es.eigenvalues()[i]);
    const double v = es.eigenvectors()(0, i);
    g.weights.push_back(sqpi * v * v);
  }
  return g;
}

}  // namespace eigensoc
