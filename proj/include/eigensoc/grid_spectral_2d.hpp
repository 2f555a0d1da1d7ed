#pragma once

#include "grid_spectral.hpp"
#include "random.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cstdio>

namespace eigensoc {

using SpMat = Eigen::SparseMatrix<double>;

// Node j = ix + nx * iy.
class GridEigenSystem2D final : public GridEigenSystem {
 public:
  GridEigenSystem2D(const Grid1D& gx, const Grid1D& gy, Vec eigenvalues, Vec log0, Mat ratios) : gx_(gx), gy_(gy) {
    gx.validate();
    gy.validate();
    const int nx = gx.n, ny = gy.n, N = nx * ny;
    check_dim(log0.size(), N, "GridEigenSystem2D log ground");
    check_dim(ratios.rows(), N, "GridEigenSystem2D ratios");
    check_dim(ratios.cols(), eigenvalues.size(), "GridEigenSystem2D ratios");
    eig_ = std::move(eigenvalues);
    log0_ = std::move(log0);
    R_ = std::move(ratios);
    nodes_.resize(2, N);
    for (int iy = 0; iy < ny; ++iy)
      for (int ix = 0; ix < nx; ++ix) nodes_.col(ix + nx * iy) << gx.x(ix), gy.x(iy);
    cell_ = gx.h() * gy.h();
    const int k = int(eig_.size());
    dlog_.resize(N, 2);
    dR_[0].resize(N, k);
    dR_[1].resize(N, k);
    Vec scratch(N);
    auto diff = [&](const double* f, double* dx, double* dy) {
      for (int iy = 0; iy < ny; ++iy)
        detail::fd_derivatives(f + nx * iy, nx, 1, gx.h(), dx + nx * iy, scratch.data() + nx * iy, 1);
      for (int ix = 0; ix < nx; ++ix) detail::fd_derivatives(f + ix, ny, nx, gy.h(), dy + ix, scratch.data() + ix, nx);
    };
    diff(log0_.data(), dlog_.col(0).data(), dlog_.col(1).data());
    for (int i = 0; i < k; ++i) diff(R_.col(i).data(), dR_[0].col(i).data(), dR_[1].col(i).data());
  }

  int dim() const override { return 2; }
  const Grid1D& grid_x() const { return gx_; }
  const Grid1D& grid_y() const { return gy_; }

  std::shared_ptr<GridEigenSystem> clone() const override { return std::make_shared<GridEigenSystem2D>(*this); }

  void ratios(const Vec& x, std::size_t k, Vec& r, Mat& dr) const override {
    check_dim(x.size(), 2, "GridEigenSystem2D");
    require(k <= size(), ErrorKind::invalid_argument, "GridEigenSystem2D: mode index out of range");
    const Stencil s = stencil(x);
    const auto K = Eigen::Index(k);
    r.setZero(K);
    dr.setZero(2, K);
    for (int b = 0; b < 4; ++b)
      for (int a = 0; a < 4; ++a) {
        const int j = s.j0 + a + gx_.n * b;
        const double w = s.wx[a] * s.wy[b];
        r += w * R_.row(j).head(K).transpose();
        dr.row(0) += w * dR_[0].row(j).head(K);
        dr.row(1) += w * dR_[1].row(j).head(K);
      }
    if (k > 0) r[0] = 1.0, dr.col(0).setZero();
  }

 protected:
  double log_ground_s(const Vec& x) const override {
    const Stencil s = stencil(x);
    double v = 0.0;
    Vec2 g = Vec2::Zero();
    for (int b = 0; b < 4; ++b)
      for (int a = 0; a < 4; ++a) {
        const int j = s.j0 + a + gx_.n * b;
        const double w = s.wx[a] * s.wy[b];
        v += w * log0_[j];
        g += w * dlog_.row(j).transpose();
      }
    return v + g[0] * (x[0] - s.xc[0]) + g[1] * (x[1] - s.xc[1]);
  }
  Vec grad_log_ground_s(const Vec& x) const override {
    const Stencil s = stencil(x);
    Vec g = Vec::Zero(2);
    for (int b = 0; b < 4; ++b)
      for (int a = 0; a < 4; ++a) {
        const int j = s.j0 + a + gx_.n * b;
        g += s.wx[a] * s.wy[b] * dlog_.row(j).transpose();
      }
    return g;
  }

 private:
  using Vec2 = Eigen::Vector2d;
  struct Stencil {
    int j0;
    std::array<double, 4> wx, wy;
    Vec2 xc;
  };
  Stencil stencil(const Vec& x) const {
    Stencil s;
    s.xc << std::min(std::max(x[0], gx_.x(0)), gx_.x(gx_.n - 1)), std::min(std::max(x[1], gy_.x(0)), gy_.x(gy_.n - 1));
    int jx, jy;
    double tx, ty;
    detail::locate(s.xc[0], gx_.x(0), gx_.h(), gx_.n, jx, tx);
    detail::locate(s.xc[1], gy_.x(0), gy_.h(), gy_.n, jy, ty);
    s.wx = detail::lagrange4(tx);
    s.wy = detail::lagrange4(ty);
    s.j0 = (jx - 1) + gx_.n * (jy - 1);
    return s;
  }

  Grid1D gx_, gy_;
  Mat dlog_;  // N x 2
  std::array<Mat, 2> dR_;
};

using Grid2DPtr = std::shared_ptr<const GridEigenSystem2D>;

namespace detail {

struct LanczosOutcome {
  std::vector<double> values;
  std::vector<Vec> vectors;
  double worst_residual;
};

// Smallest k eigenpairs of the sparse symmetric S by Lanczos on (S - sigma)^{-1}
// with full reorthogonalization. Converged pairs are locked and the run is
// restarted from a fresh vector orthogonal to them, which also recovers
// multiplicities a single Krylov space cannot see.
inline LanczosOutcome lanczos_smallest(const SpMat& S, double sigma, int k, double tol, int max_len, int max_restarts,
                                       std::uint64_t seed) {
  const Eigen::Index N = S.rows();
  SpMat I(N, N);
  I.setIdentity();
  Eigen::SimplicialLDLT<SpMat> ldlt(S - sigma * I);
  require(ldlt.info() == Eigen::Success, ErrorKind::numerical, "schrodinger_fd_2d: factorization failed");
  max_len = int(std::min<Eigen::Index>(max_len, N));

  std::vector<double> lv;
  std::vector<Vec> lx;
  SplitMix64 rng(seed);
  double worst = std::numeric_limits<double>::infinity();
  auto project_locked = [&](Vec& w) {
    for (const auto& y : lx) w -= y.dot(w) * y;
  };
  auto kth = [&]() {
    std::vector<double> s = lv;
    std::sort(s.begin(), s.end());
    return s.size() >= std::size_t(k) ? s[std::size_t(k) - 1] : std::numeric_limits<double>::infinity();
  };

  for (int run = 0; run < max_restarts; ++run) {
    const bool verify = lv.size() >= std::size_t(k);
    const int want = verify ? 1 : k - int(lv.size());
    Vec q = normal_vec(rng, N);
    project_locked(q);
    q.normalize();
    Mat Q(N, max_len);
    std::vector<double> alpha, beta;
    Vec qprev = Vec::Zero(N);
    int m = 0;
    bool done = false, breakdown = false;
    std::vector<double> found_v;
    std::vector<Vec> found_x;
    while (!done) {
      Q.col(m) = q;
      Vec w = ldlt.solve(q);
      if (m > 0) w -= beta.back() * qprev;
      alpha.push_back(q.dot(w));
      w -= alpha.back() * q;
      for (int pass = 0; pass < 2; ++pass) {
        w -= Q.leftCols(m + 1) * (Q.leftCols(m + 1).transpose() * w);
        project_locked(w);
      }
      const double b = w.norm();
      ++m;
      breakdown = b < 1e-14 || m == max_len;
      if (m % 10 == 0 || breakdown) {
        Mat T = Mat::Zero(m, m);
        for (int i = 0; i < m; ++i) T(i, i) = alpha[std::size_t(i)];
        for (int i = 0; i + 1 < m; ++i) T(i, i + 1) = T(i + 1, i) = beta[std::size_t(i)];
        Eigen::SelfAdjointEigenSolver<Mat> es(T);
        found_v.clear();
        found_x.clear();
        double run_worst = 0.0;
        int good = 0;
        const int top = std::min(want, m);
        for (int t = 0; t < top; ++t) {
          const int col = m - 1 - t;
          const double theta = es.eigenvalues()[col];
          const double est = std::abs(b * es.eigenvectors()(m - 1, col)) / std::max(theta * theta, 1e-300);
          if (!(theta > 0) || est > 1e3 * tol) {
            run_worst = std::max(run_worst, est);
            continue;
          }
          Vec y = Q.leftCols(m) * es.eigenvectors().col(col);
          y.normalize();
          const double lam = sigma + 1.0 / theta;
          const double res = (S * y - lam * y).norm();
          run_worst = std::max(run_worst, res / std::max(1.0, std::abs(lam)));
          if (res <= tol * std::max(1.0, std::abs(lam))) {
            ++good;
            found_v.push_back(lam);
            found_x.push_back(std::move(y));
          }
        }
        worst = run_worst;
        done = good >= top || breakdown;
      }
      if (!done) {
        beta.push_back(b);
        qprev = q;
        q = w / b;
      }
    }
    if (verify) {
      if (found_v.empty() || found_v[0] >= kth() - tol * std::max(1.0, std::abs(kth()))) {
        if (!found_v.empty() || breakdown) break;
        continue;
      }
    }
    for (std::size_t i = 0; i < found_v.size(); ++i) {
      lv.push_back(found_v[i]);
      lx.push_back(std::move(found_x[i]));
    }
  }
  if (lv.size() < std::size_t(k)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "schrodinger_fd_2d: Lanczos did not converge, %zu of %d pairs, last residual %.3e",
                  lv.size(), k, worst);
    throw Error(ErrorKind::convergence, buf);
  }
  std::vector<std::size_t> ord(lv.size());
  for (std::size_t i = 0; i < ord.size(); ++i) ord[i] = i;
  std::sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) { return lv[a] < lv[b]; });
  LanczosOutcome out{{}, {}, worst};
  for (int i = 0; i < k; ++i) {
    out.values.push_back(lv[ord[std::size_t(i)]]);
    out.vectors.push_back(lx[ord[std::size_t(i)]]);
  }
  return out;
}

}  // namespace detail

struct Lanczos2DOptions {
  double tol = 1e-8;
  int max_len = 240;
  int max_restarts = 24;
  std::uint64_t seed = 0x5eed2d;
  // Below kTailCut of the peak, eigenvectors are rounding noise. There log phi_0
  // + gauge and the ratios are continued harmonically from the resolved region.
  // A gauge of beta E makes the continued log phi_0 decay like -beta E.
  std::function<double(double, double)> gauge;
};

inline constexpr double kTailCut = 1e-10;

inline Grid2DPtr schrodinger_fd_2d(const std::function<double(double, double)>& v, const Grid1D& gx, const Grid1D& gy,
                                   int k, const Lanczos2DOptions& opt = {}) {
  gx.validate();
  gy.validate();
  const int nx = gx.n, ny = gy.n, N = nx * ny;
  require(N <= 40000, ErrorKind::invalid_argument, "schrodinger_fd_2d: more than 40000 unknowns");
  require(k >= 1 && k <= 16, ErrorKind::invalid_argument, "schrodinger_fd_2d: k must be in [1, 16]");
  const double ix2 = 1.0 / (gx.h() * gx.h()), iy2 = 1.0 / (gy.h() * gy.h());
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(std::size_t(N) * 5);
  double vmin = std::numeric_limits<double>::infinity();
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      const int j = ix + nx * iy;
      const double p = v(gx.x(ix), gy.x(iy));
      require(std::isfinite(p), ErrorKind::numerical, "schrodinger_fd_2d: potential not finite on grid");
      vmin = std::min(vmin, p);
      trip.emplace_back(j, j, 2 * ix2 + 2 * iy2 + p);
      if (ix > 0) trip.emplace_back(j, j - 1, -ix2);
      if (ix + 1 < nx) trip.emplace_back(j, j + 1, -ix2);
      if (iy > 0) trip.emplace_back(j, j - nx, -iy2);
      if (iy + 1 < ny) trip.emplace_back(j, j + nx, -iy2);
    }
  SpMat S(N, N);
  S.setFromTriplets(trip.begin(), trip.end());
  auto res = detail::lanczos_smallest(S, vmin - 1.0, k, opt.tol, opt.max_len, opt.max_restarts, opt.seed);

  const double nrm = 1.0 / std::sqrt(gx.h() * gy.h());
  Mat Z(N, k);
  for (int i = 0; i < k; ++i) {
    Vec z = res.vectors[std::size_t(i)] * nrm;
    bool flip;
    if (i == 0) {
      flip = z.sum() < 0;
    } else {
      int first = 0;
      while (first < N && std::abs(z[first]) <= 1e-8) ++first;
      flip = first < N && z[first] < 0;
    }
    Z.col(i) = flip ? Vec(-z) : z;
  }

  // resolved region: phi_0 above kTailCut of its peak
  const double cut = kTailCut * Z.col(0).maxCoeff();
  std::vector<int> tail_id(std::size_t(N), -1);
  int nt = 0;
  for (int j = 0; j < N; ++j)
    if (!(Z(j, 0) > cut)) tail_id[std::size_t(j)] = nt++;
  auto gauge = [&](int j) { return opt.gauge ? opt.gauge(gx.x(j % nx), gy.x(j / nx)) : 0.0; };
  Mat F(N, k);  // column 0: log phi_0 + gauge, columns i > 0: ratios
  for (int j = 0; j < N; ++j) {
    if (tail_id[std::size_t(j)] >= 0) continue;
    F(j, 0) = std::log(Z(j, 0)) + gauge(j);
    for (int i = 1; i < k; ++i) F(j, i) = Z(j, i) / Z(j, 0);
  }
  if (nt > 0) {
    std::vector<Eigen::Triplet<double>> lt;
    Mat rhs = Mat::Zero(nt, k);
    for (int j = 0; j < N; ++j) {
      const int u = tail_id[std::size_t(j)];
      if (u < 0) continue;
      const int ix = j % nx, iy = j / nx;
      int deg = 0;
      for (int nb : {ix > 0 ? j - 1 : -1, ix + 1 < nx ? j + 1 : -1, iy > 0 ? j - nx : -1, iy + 1 < ny ? j + nx : -1}) {
        if (nb < 0) continue;
        ++deg;
        const int w = tail_id[std::size_t(nb)];
        if (w >= 0)
          lt.emplace_back(u, w, -1.0);
        else
          rhs.row(u) += F.row(nb);
      }
      lt.emplace_back(u, u, double(deg));
    }
    SpMat Lt(nt, nt);
    Lt.setFromTriplets(lt.begin(), lt.end());
    Eigen::SimplicialLDLT<SpMat> sol(Lt);
    require(sol.info() == Eigen::Success, ErrorKind::numerical, "schrodinger_fd_2d: tail continuation failed");
    const Mat X = sol.solve(rhs);
    for (int j = 0; j < N; ++j)
      if (tail_id[std::size_t(j)] >= 0) F.row(j) = X.row(tail_id[std::size_t(j)]);
  }
  Vec log0(N);
  Mat R(N, k);
  for (int j = 0; j < N; ++j) {
    log0[j] = F(j, 0) - gauge(j);
    R(j, 0) = 1.0;
    for (int i = 1; i < k; ++i) R(j, i) = F(j, i);
  }
  Vec eig = Eigen::Map<const Vec>(res.values.data(), k);
  return std::make_shared<GridEigenSystem2D>(gx, gy, eig, log0, R);
}

}  // namespace eigensoc
