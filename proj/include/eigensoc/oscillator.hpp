#pragma once

#include "core.hpp"
#include "eigensystem.hpp"
#include "hermite.hpp"
#include "multi_index.hpp"
#include "problem.hpp"

#include <Eigen/Eigenvalues>

#include <memory>
#include <optional>
#include <vector>

namespace eigensoc {

// Drift -Ax, running cost x^T P x, terminal cost (x-a)^T Q (x-a).
struct QuadraticProblem {
  Mat A;
  Mat P;
  std::optional<Mat> Q;
  Vec q_center;  // a; empty means 0
  double beta = 1.0;
  double horizon = 1.0;

  int dim() const { return int(A.rows()); }

  Vec center() const { return q_center.size() ? q_center : Vec::Zero(dim()); }

  void validate() const {
    require(A.rows() == A.cols() && P.rows() == A.rows() && P.cols() == A.cols(),
            ErrorKind::dimension, "QuadraticProblem: A and P must be square of equal size");
    require((A - A.transpose()).cwiseAbs().maxCoeff() <= 1e-12, ErrorKind::invalid_argument,
            "QuadraticProblem: A is not symmetric");
    require(beta > 0 && horizon > 0, ErrorKind::invalid_argument,
            "QuadraticProblem: beta and horizon must be positive");
    if (Q) check_dim(Q->rows(), dim(), "QuadraticProblem Q");
    if (q_center.size()) check_dim(q_center.size(), dim(), "QuadraticProblem center");
  }

  // Same problem as fields: E = x^T A x / 2, f = x^T P x, g = (x-a)^T Q (x-a) or 0.
  SocProblem to_soc(InitialLaw p0) const {
    validate();
    FieldPtr E = std::make_shared<QuadraticField>(0.5 * A);
    FieldPtr f = std::make_shared<QuadraticField>(P);
    FieldPtr g = Q ? FieldPtr(std::make_shared<QuadraticField>(*Q, center())) : zero_field(dim());
    return SocProblem(dim(), E, f, g, beta, horizon, std::move(p0));
  }
};

// Eigensystem of L for E = x^T A x / 2, f = x^T P x (A symmetric). With
// A^T A + 2P = U^T diag(Lam) U, y = sqrt(beta) Lam^{1/4} U x:
//   phi_alpha = C_alpha exp(-beta/2 x^T M x) prod_j p_{alpha_j}(y_j),  M = -A + U^T Lam^{1/2} U,
//   lambda_alpha = beta(-tr A + sum_j Lam_j^{1/2} (2 alpha_j + 1)).
// C_alpha is fixed by Gauss-Hermite quadrature so that phi_alpha has unit L2(mu) norm.
class HarmonicEigenSystem final : public EigenSystem {
 public:
  HarmonicEigenSystem(const Mat& A, const Mat& P, double beta, std::size_t k) : A_(A), beta_(beta) {
    const int d = int(A.rows());
    require(k >= 1, ErrorKind::invalid_argument, "lqr_eigensystem: k must be >= 1");
    require((A - A.transpose()).cwiseAbs().maxCoeff() <= 1e-12, ErrorKind::invalid_argument,
            "lqr_eigensystem: A is not symmetric");
    Mat S = A.transpose() * A + 2.0 * P;
    S = 0.5 * (S + S.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> es(S);
    lam_ = es.eigenvalues();
    require(lam_.minCoeff() > 0.0, ErrorKind::invalid_argument,
            "lqr_eigensystem: A^T A + 2P is not positive definite");
    U_ = es.eigenvectors().transpose();
    sqrt_lam_ = lam_.cwiseSqrt();
    scale_ = (std::sqrt(beta) * sqrt_lam_.cwiseSqrt());
    M_ = -A + U_.transpose() * sqrt_lam_.asDiagonal() * U_;
    M_ = 0.5 * (M_ + M_.transpose());

    const double shift = -A.trace();
    indices_ = enumerate_multi_indices(d, k, [&](int i, int n) { return sqrt_lam_[i] * (2.0 * n + 1.0); });
    max_deg_.assign(d, 0);
    for (const auto& a : indices_) {
      double l = shift;
      for (int j = 0; j < d; ++j) {
        l += sqrt_lam_[j] * (2.0 * a[j] + 1.0);
        max_deg_[j] = std::max(max_deg_[j], a[j]);
      }
      eig_.push_back(beta * l);
    }
    // The normalized recurrence never forms 2^n n!, so the raw-polynomial cap
    // does not apply here; this bound only keeps p_n(y) finite for |y| < 20.
    require(*std::max_element(max_deg_.begin(), max_deg_.end()) <= kNormalizedHermiteCap, ErrorKind::numerical,
            "lqr_eigensystem: Hermite degree above overflow cap");

    // G_n = int e^{-y^2} p_n(y)^2 dy by Gauss-Hermite (exact for degree 2n).
    const int nmax = *std::max_element(max_deg_.begin(), max_deg_.end());
    const auto gh = gauss_hermite(nmax + 2);
    std::vector<double> G(nmax + 1, 0.0), p(nmax + 1), dp(nmax + 1);
    for (std::size_t q = 0; q < gh.nodes.size(); ++q) {
      hermite_normalized(nmax, gh.nodes[q], p.data(), dp.data());
      for (int n = 0; n <= nmax; ++n) G[n] += gh.weights[q] * p[n] * p[n];
    }
    log_c0_ = 0.0;
    for (int j = 0; j < d; ++j) log_c0_ += 0.5 * std::log(scale_[j] / G[0]);
    for (const auto& a : indices_) {
      Support s;
      double norm = 1.0;
      for (int j = 0; j < d; ++j)
        if (a[j] > 0) {
          s.push_back({j, a[j]});
          norm *= std::sqrt(G[0] / G[a[j]]);
        }
      support_.push_back(std::move(s));
      norm_.push_back(norm);
    }
  }

  int dim() const override { return int(A_.rows()); }
  std::size_t size() const override { return eig_.size(); }
  double eigenvalue(std::size_t i) const override { return eig_.at(i); }

  double log_ground(const Vec& x) const override {
    check_dim(x.size(), dim(), "HarmonicEigenSystem");
    return log_c0_ - 0.5 * beta_ * x.dot(M_ * x);
  }
  Vec grad_log_ground(const Vec& x) const override {
    check_dim(x.size(), dim(), "HarmonicEigenSystem");
    return -beta_ * (M_ * x);
  }

  void ratios(const Vec& x, std::size_t k, Vec& r, Mat& dr) const override {
    check_dim(x.size(), dim(), "HarmonicEigenSystem");
    require(k <= size(), ErrorKind::invalid_argument, "HarmonicEigenSystem: mode index out of range");
    const int d = dim();
    r.resize(Eigen::Index(k));
    dr.setZero(d, Eigen::Index(k));
    if (k == 0) return;
    r[0] = 1.0;
    if (k == 1) return;
    const Vec y = scale_.cwiseProduct(U_ * x);
    Tables t = tables(y, k, false);
    Vec dy(d);
    for (std::size_t i = 1; i < k; ++i) {
      const auto& s = support_[i];
      double prod = norm_[i];
      for (const auto& [j, n] : s) prod *= t.p[j][n];
      r[Eigen::Index(i)] = prod;
      dy.setZero();
      for (std::size_t a = 0; a < s.size(); ++a) {
        double g = norm_[i] * t.dp[s[a].first][s[a].second];
        for (std::size_t b = 0; b < s.size(); ++b)
          if (b != a) g *= t.p[s[b].first][s[b].second];
        dy[s[a].first] = g * scale_[s[a].first];
      }
      dr.col(Eigen::Index(i)) = U_.transpose() * dy;
    }
  }

  // Analytic Laplacian of phi_i.
  double laplacian(std::size_t i, const Vec& x) const override {
    check_dim(x.size(), dim(), "HarmonicEigenSystem");
    const int d = dim();
    const Vec y = scale_.cwiseProduct(U_ * x);
    Tables t = tables(y, i + 1, true);
    const auto& s = support_.at(i);
    double R = norm_[i];
    for (const auto& [j, n] : s) R *= t.p[j][n];
    Vec gy = Vec::Zero(d);
    double lapR = 0.0;
    for (std::size_t a = 0; a < s.size(); ++a) {
      double g = norm_[i] * t.dp[s[a].first][s[a].second];
      double h = norm_[i] * t.ddp[s[a].first][s[a].second];
      for (std::size_t b = 0; b < s.size(); ++b)
        if (b != a) {
          g *= t.p[s[b].first][s[b].second];
          h *= t.p[s[b].first][s[b].second];
        }
      gy[s[a].first] = g * scale_[s[a].first];
      lapR += h * scale_[s[a].first] * scale_[s[a].first];
    }
    const Vec gR = U_.transpose() * gy;
    const Vec gh = -beta_ * (M_ * x);
    const double lh = -beta_ * M_.trace();
    return std::exp(log_ground(x)) * (R * (gh.squaredNorm() + lh) + 2.0 * gh.dot(gR) + lapR);
  }

  const MultiIndex& index(std::size_t i) const { return indices_.at(i); }
  const Mat& rotation() const { return U_; }     // rows are the eigenvectors
  const Vec& spectrum() const { return lam_; }    // eigenvalues of A^T A + 2P
  const Vec& scale() const { return scale_; }     // y = scale .* (U x)
  const Mat& ground_matrix() const { return M_; }
  double beta() const { return beta_; }
  const Mat& drift_matrix() const { return A_; }
  double mode_norm(std::size_t i) const { return norm_.at(i); }

 private:
  using Support = std::vector<std::pair<int, int>>;
  struct Tables {
    std::vector<std::vector<double>> p, dp, ddp;
  };

  Tables tables(const Vec& y, std::size_t k, bool second) const {
    const int d = dim();
    std::vector<int> deg(d, 0);
    for (std::size_t i = 0; i < k; ++i)
      for (const auto& [j, n] : support_[i]) deg[j] = std::max(deg[j], n);
    Tables t;
    t.p.resize(d);
    t.dp.resize(d);
    if (second) t.ddp.resize(d);
    for (int j = 0; j < d; ++j) {
      if (deg[j] == 0) continue;
      t.p[j].resize(deg[j] + 1);
      t.dp[j].resize(deg[j] + 1);
      if (second) t.ddp[j].resize(deg[j] + 1);
      hermite_normalized(deg[j], y[j], t.p[j].data(), t.dp[j].data(), second ? t.ddp[j].data() : nullptr);
    }
    return t;
  }

  Mat A_;
  double beta_;
  Vec lam_, sqrt_lam_, scale_;
  Mat U_, M_;
  std::vector<MultiIndex> indices_;
  std::vector<Support> support_;
  std::vector<double> norm_, eig_;
  std::vector<int> max_deg_;
  double log_c0_ = 0.0;
};

using HarmonicPtr = std::shared_ptr<const HarmonicEigenSystem>;

inline HarmonicPtr lqr_eigensystem(const QuadraticProblem& p, std::size_t k) {
  p.validate();
  return std::make_shared<HarmonicEigenSystem>(p.A, p.P, p.beta, k);
}

// Eigenpairs of -Lap + x^T A_cost x in L2(dx).
inline HarmonicPtr oscillator_eigensystem_dd(const Mat& A_cost, std::size_t k) {
  require(A_cost.rows() == A_cost.cols(), ErrorKind::dimension, "oscillator: A_cost not square");
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (A_cost + A_cost.transpose()));
  require(es.eigenvalues().minCoeff() > 0.0, ErrorKind::invalid_argument,
          "oscillator: A_cost is not positive definite");
  const Mat Z = Mat::Zero(A_cost.rows(), A_cost.cols());
  return std::make_shared<HarmonicEigenSystem>(Z, 0.5 * A_cost, 1.0, k);
}

inline HarmonicPtr oscillator_eigensystem_1d(std::size_t n_max) {
  require(n_max >= 1, ErrorKind::invalid_argument, "oscillator_eigensystem_1d: n_max must be >= 1");
  return oscillator_eigensystem_dd(Mat::Identity(1, 1), n_max);
}

namespace detail {

// E[prod_{(j,n) in s} p_n(y_j)] for y ~ N(m, C) restricted to the support,
// by tensor Gauss-Hermite with enough nodes to be exact for the polynomial.
inline double gaussian_hermite_moment(const std::vector<std::pair<int, int>>& s, const Vec& m, const Mat& C) {
  if (s.empty()) return 1.0;
  const int q = int(s.size());
  require(q <= 4, ErrorKind::numerical, "lqr series coefficients: mode couples more than 4 coordinates");
  int total = 0;
  Vec ms(q);
  Mat Cs(q, q);
  for (int a = 0; a < q; ++a) {
    total += s[a].second;
    ms[a] = m[s[a].first];
    for (int b = 0; b < q; ++b) Cs(a, b) = C(s[a].first, s[b].first);
  }
  Eigen::LLT<Mat> llt(Cs);
  require(llt.info() == Eigen::Success, ErrorKind::numerical, "lqr series coefficients: covariance not PD");
  const Mat L = llt.matrixL();
  const int n = total / 2 + 1;
  const auto gh = gauss_hermite(n);
  std::vector<int> idx(q, 0);
  std::vector<double> p, dp;
  double acc = 0.0;
  const double c = std::pow(M_PI, -0.5 * q);
  while (true) {
    Vec xi(q);
    double w = c;
    for (int a = 0; a < q; ++a) {
      xi[a] = std::sqrt(2.0) * gh.nodes[idx[a]];
      w *= gh.weights[idx[a]];
    }
    const Vec y = ms + L * xi;
    double prod = 1.0;
    for (int a = 0; a < q; ++a) {
      const int deg = s[a].second;
      p.resize(deg + 1);
      dp.resize(deg + 1);
      hermite_normalized(deg, y[a], p.data(), dp.data());
      prod *= p[deg];
    }
    acc += w * prod;
    int a = 0;
    while (a < q && ++idx[a] == n) idx[a++] = 0;
    if (a == q) break;
  }
  return acc;
}

}  // namespace detail

// c_i = <e^{-beta g}, phi_i>_mu / <e^{-beta g}, phi_0>_mu for the first k modes.
// Quadratic (possibly off-centre) and constant g are handled exactly; other
// g by tensor Gauss-Hermite in up to three dimensions.
inline Vec lqr_series_coefficients(const HarmonicEigenSystem& sys, const ScalarField& g, std::size_t k,
                                   int gh_nodes = 40) {
  const int d = sys.dim();
  check_dim(g.dim(), d, "lqr_series_coefficients");
  require(k >= 1 && k <= sys.size(), ErrorKind::invalid_argument, "lqr_series_coefficients: bad k");
  const double beta = sys.beta();
  // phi_0 mu = C exp(-beta/2 x^T W x), W = A + U^T Lam^{1/2} U.
  const Mat W = sys.ground_matrix() + 2.0 * sys.drift_matrix();
  Mat prec = W;
  Vec lin = Vec::Zero(d);
  bool closed = false;
  if (dynamic_cast<const ConstantField*>(&g)) {
    closed = true;
  } else if (auto qf = dynamic_cast<const QuadraticField*>(&g)) {
    prec += 2.0 * qf->matrix();
    lin = 2.0 * qf->matrix() * qf->center();
    closed = true;
  }
  Vec c = Vec::Zero(Eigen::Index(k));
  c[0] = 1.0;
  const Mat& U = sys.rotation();
  const Vec& sc = sys.scale();
  if (closed) {
    Eigen::LLT<Mat> llt(beta * prec);
    if (llt.info() != Eigen::Success)
      throw Error(ErrorKind::numerical, "lqr series coefficients: e^{-beta g} phi_0 mu is not integrable");
    const Vec mx = llt.solve(beta * lin);
    const Mat Cx = llt.solve(Mat::Identity(d, d));
    const Vec my = sc.cwiseProduct(U * mx);
    const Mat Cy = sc.asDiagonal() * U * Cx * U.transpose() * sc.asDiagonal();
    for (std::size_t i = 1; i < k; ++i) {
      std::vector<std::pair<int, int>> s;
      const auto& a = sys.index(i);
      for (int j = 0; j < d; ++j)
        if (a[j] > 0) s.push_back({j, a[j]});
      c[Eigen::Index(i)] = sys.mode_norm(i) * detail::gaussian_hermite_moment(s, my, Cy);
    }
  } else {
    require(d <= 3, ErrorKind::numerical,
            "lqr series coefficients: non-quadratic terminal cost needs d <= 3");
    Eigen::LLT<Mat> llt(beta * W);
    require(llt.info() == Eigen::Success, ErrorKind::numerical, "lqr series coefficients: W not PD");
    // x = L^{-T} sqrt(2) xi has law N(0, (beta W)^{-1}).
    const Mat Linv = Mat(llt.matrixU()).inverse();
    const auto gh = gauss_hermite(gh_nodes);
    std::vector<int> idx(d, 0);
    Vec acc = Vec::Zero(Eigen::Index(k));
    double acc0 = 0.0;
    Vec r;
    Mat dr;
    while (true) {
      Vec xi(d);
      double w = 1.0;
      for (int j = 0; j < d; ++j) {
        xi[j] = std::sqrt(2.0) * gh.nodes[idx[j]];
        w *= gh.weights[idx[j]];
      }
      const Vec x = Linv * xi;
      const double wg = w * std::exp(-beta * g.value(x));
      sys.ratios(x, k, r, dr);
      acc += wg * r;
      acc0 += wg;
      int j = 0;
      while (j < d && ++idx[j] == gh_nodes) idx[j++] = 0;
      if (j == d) break;
    }
    require(std::isfinite(acc0) && acc0 > 0.0, ErrorKind::numerical,
            "lqr series coefficients: <e^{-beta g}, phi_0> is not positive");
    c = acc / acc0;
  }
  require(c.allFinite(), ErrorKind::numerical, "lqr series coefficients: non-finite coefficient");
  return c;
}

inline std::shared_ptr<EigenSeriesControl> lqr_series_control(HarmonicPtr sys, const ScalarField& g, double T,
                                                              std::size_t k) {
  Vec c = lqr_series_coefficients(*sys, g, k);
  return std::make_shared<EigenSeriesControl>(sys, std::move(c), sys->beta(), T, k);
}

}  // namespace eigensoc
