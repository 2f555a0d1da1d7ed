#pragma once

#include "core.hpp"
#include "eigensystem.hpp"
#include "multi_index.hpp"
#include "scalar_field.hpp"

#include <lapacke.h>

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace eigensoc {

// n interior nodes lo + (j+1) h, j = 0..n-1, with Dirichlet walls at lo and hi.
struct Grid1D {
  double lo = -8.0;
  double hi = 8.0;
  int n = 2000;

  double h() const { return (hi - lo) / (n + 1); }
  double x(int j) const { return lo + (j + 1) * h(); }
  void validate() const {
    require(lo < hi, ErrorKind::invalid_argument, "Grid1D: lo must be < hi");
    require(n >= 16, ErrorKind::invalid_argument, "Grid1D: need at least 16 nodes");
  }
};

enum class Space { schrodinger, L };

namespace detail {

inline std::array<double, 4> lagrange4(double t) {
  return {-t * (t - 1) * (t - 2) / 6.0, (t + 1) * (t - 1) * (t - 2) / 2.0, -(t + 1) * t * (t - 2) / 2.0,
          (t + 1) * t * (t - 1) / 6.0};
}

// First and second derivatives of samples f with spacing h: fourth order in
// the interior, second order next to the ends.
inline void fd_derivatives(const double* f, int n, long stride, double h, double* d1, double* d2, long ostride) {
  auto F = [&](int j) { return f[j * stride]; };
  for (int j = 0; j < n; ++j) {
    double a, b;
    if (j >= 2 && j <= n - 3) {
      a = (F(j - 2) - 8 * F(j - 1) + 8 * F(j + 1) - F(j + 2)) / (12 * h);
      b = (-F(j - 2) + 16 * F(j - 1) - 30 * F(j) + 16 * F(j + 1) - F(j + 2)) / (12 * h * h);
    } else if (j >= 1 && j <= n - 2) {
      a = (F(j + 1) - F(j - 1)) / (2 * h);
      b = (F(j - 1) - 2 * F(j) + F(j + 1)) / (h * h);
    } else if (j == 0) {
      a = (-3 * F(0) + 4 * F(1) - F(2)) / (2 * h);
      b = (F(0) - 2 * F(1) + F(2)) / (h * h);
    } else {
      a = (3 * F(n - 1) - 4 * F(n - 2) + F(n - 3)) / (2 * h);
      b = (F(n - 1) - 2 * F(n - 2) + F(n - 3)) / (h * h);
    }
    d1[j * ostride] = a;
    d2[j * ostride] = b;
  }
}

// Cell lookup for 4-point interpolation: base index and local coordinate.
inline void locate(double x, double x0, double h, int n, int& j, double& t) {
  const double s = (x - x0) / h;
  j = int(std::floor(s));
  j = std::max(1, std::min(j, n - 3));
  t = s - j;
}

}  // namespace detail

// Eigensystem known on grid nodes. Node data are kept in Schroedinger space
// (log phi_0 and ratios phi_i/phi_0); the L-space view adds beta E.
class GridEigenSystem : public EigenSystem {
 public:
  Space space() const { return space_; }
  double beta() const { return beta_; }
  const FieldPtr& energy() const { return E_; }

  std::size_t size() const override { return std::size_t(eig_.size()); }
  double eigenvalue(std::size_t i) const override { return eig_[Eigen::Index(i)]; }
  const Vec& eigenvalue_vector() const { return eig_; }

  std::size_t n_nodes() const { return std::size_t(nodes_.cols()); }
  Vec node(std::size_t j) const { return nodes_.col(Eigen::Index(j)); }
  const Mat& nodes() const { return nodes_; }
  double cell() const { return cell_; }
  // log phi_{S,0} at node j
  double node_log_ground_s(std::size_t j) const { return log0_[Eigen::Index(j)]; }
  double node_ratio(std::size_t i, std::size_t j) const { return R_(Eigen::Index(j), Eigen::Index(i)); }
  const Vec& node_log_ground_s() const { return log0_; }
  const Mat& node_ratios() const { return R_; }
  // beta E at node j (0 in Schroedinger space)
  double node_beta_energy(std::size_t j) const { return space_ == Space::L ? bE_[Eigen::Index(j)] : 0.0; }

  virtual std::shared_ptr<GridEigenSystem> clone() const = 0;

  std::shared_ptr<GridEigenSystem> in_L_space(FieldPtr E, double beta) const {
    check_dim(E->dim(), dim(), "to_L_eigenfunctions");
    auto c = clone();
    c->space_ = Space::L;
    c->E_ = std::move(E);
    c->beta_ = beta;
    c->bE_.resize(nodes_.cols());
    for (Eigen::Index j = 0; j < nodes_.cols(); ++j) c->bE_[j] = beta * c->E_->value(nodes_.col(j));
    return c;
  }

  double log_ground(const Vec& x) const override {
    check_dim(x.size(), dim(), "GridEigenSystem");
    double v = log_ground_s(x);
    if (space_ == Space::L) v += beta_ * E_->value(x);
    return v;
  }
  Vec grad_log_ground(const Vec& x) const override {
    check_dim(x.size(), dim(), "GridEigenSystem");
    Vec g = grad_log_ground_s(x);
    if (space_ == Space::L) g += beta_ * E_->gradient(x);
    return g;
  }

 protected:
  virtual double log_ground_s(const Vec& x) const = 0;
  virtual Vec grad_log_ground_s(const Vec& x) const = 0;

  Vec eig_;
  Mat nodes_;  // d x N
  Vec log0_;   // N
  Mat R_;      // N x k
  double cell_ = 1.0;
  Space space_ = Space::schrodinger;
  FieldPtr E_;
  double beta_ = 1.0;
  Vec bE_;
};

using GridPtr = std::shared_ptr<const GridEigenSystem>;

class GridEigenSystem1D final : public GridEigenSystem {
 public:
  GridEigenSystem1D(const Grid1D& g, Vec eigenvalues, Vec log0, Mat ratios) : g_(g) {
    g.validate();
    const int n = g.n;
    check_dim(log0.size(), n, "GridEigenSystem1D log ground");
    check_dim(ratios.rows(), n, "GridEigenSystem1D ratios");
    check_dim(ratios.cols(), eigenvalues.size(), "GridEigenSystem1D ratios");
    eig_ = std::move(eigenvalues);
    log0_ = std::move(log0);
    R_ = std::move(ratios);
    nodes_.resize(1, n);
    for (int j = 0; j < n; ++j) nodes_(0, j) = g.x(j);
    cell_ = g.h();
    const int k = int(eig_.size());
    dlog0_.resize(n);
    d2log0_.resize(n);
    dR_.resize(n, k);
    d2R_.resize(n, k);
    detail::fd_derivatives(log0_.data(), n, 1, g.h(), dlog0_.data(), d2log0_.data(), 1);
    for (int i = 0; i < k; ++i)
      detail::fd_derivatives(R_.col(i).data(), n, 1, g.h(), dR_.col(i).data(), d2R_.col(i).data(), 1);
  }

  int dim() const override { return 1; }
  const Grid1D& grid() const { return g_; }

  std::shared_ptr<GridEigenSystem> clone() const override { return std::make_shared<GridEigenSystem1D>(*this); }

  void ratios(const Vec& x, std::size_t k, Vec& r, Mat& dr) const override {
    check_dim(x.size(), 1, "GridEigenSystem1D");
    require(k <= size(), ErrorKind::invalid_argument, "GridEigenSystem1D: mode index out of range");
    int j;
    double t;
    detail::locate(clamp(x[0]), g_.x(0), g_.h(), g_.n, j, t);
    const auto w = detail::lagrange4(t);
    const auto K = Eigen::Index(k);
    r = w[0] * R_.row(j - 1).head(K).transpose() + w[1] * R_.row(j).head(K).transpose() +
        w[2] * R_.row(j + 1).head(K).transpose() + w[3] * R_.row(j + 2).head(K).transpose();
    dr = (w[0] * dR_.row(j - 1).head(K) + w[1] * dR_.row(j).head(K) + w[2] * dR_.row(j + 1).head(K) +
          w[3] * dR_.row(j + 2).head(K));
    if (k > 0) r[0] = 1.0, dr(0, 0) = 0.0;
  }

  // Laplacian of phi_i (second derivatives from node differences).
  double laplacian(std::size_t i, const Vec& x) const override {
    check_dim(x.size(), 1, "GridEigenSystem1D");
    int j;
    double t;
    detail::locate(clamp(x[0]), g_.x(0), g_.h(), g_.n, j, t);
    const auto w = detail::lagrange4(t);
    auto I = [&](const auto& f) { return w[0] * f(j - 1) + w[1] * f(j) + w[2] * f(j + 1) + w[3] * f(j + 2); };
    const auto ii = Eigen::Index(i);
    const double l1 = I([&](int m) { return dlog0_[m]; }), l2 = I([&](int m) { return d2log0_[m]; });
    const double r = i == 0 ? 1.0 : I([&](int m) { return R_(m, ii); });
    const double r1 = i == 0 ? 0.0 : I([&](int m) { return dR_(m, ii); });
    const double r2 = i == 0 ? 0.0 : I([&](int m) { return d2R_(m, ii); });
    const double p0 = std::exp(log_ground_s(x));
    const double ps = p0 * r, dps = p0 * (r1 + r * l1), d2ps = p0 * (r2 + 2 * r1 * l1 + r * (l2 + l1 * l1));
    if (space_ == Space::schrodinger) return d2ps;
    const auto e = E_->jet(x);
    const double b = beta_;
    const double e1 = e.grad[0];
    return std::exp(b * e.value) * (d2ps + 2 * b * e1 * dps + (b * e.lap + b * b * e1 * e1) * ps);
  }

 protected:
  double log_ground_s(const Vec& x) const override {
    const double xc = clamp(x[0]);
    int j;
    double t;
    detail::locate(xc, g_.x(0), g_.h(), g_.n, j, t);
    const auto w = detail::lagrange4(t);
    double v = w[0] * log0_[j - 1] + w[1] * log0_[j] + w[2] * log0_[j + 1] + w[3] * log0_[j + 2];
    if (xc != x[0]) {
      const double s = w[0] * dlog0_[j - 1] + w[1] * dlog0_[j] + w[2] * dlog0_[j + 1] + w[3] * dlog0_[j + 2];
      v += s * (x[0] - xc);
    }
    return v;
  }
  Vec grad_log_ground_s(const Vec& x) const override {
    int j;
    double t;
    detail::locate(clamp(x[0]), g_.x(0), g_.h(), g_.n, j, t);
    const auto w = detail::lagrange4(t);
    return Vec::Constant(1, w[0] * dlog0_[j - 1] + w[1] * dlog0_[j] + w[2] * dlog0_[j + 1] + w[3] * dlog0_[j + 2]);
  }

 private:
  double clamp(double x) const { return std::min(std::max(x, g_.x(0)), g_.x(g_.n - 1)); }

  Grid1D g_;
  Vec dlog0_, d2log0_;
  Mat dR_, d2R_;
};

using Grid1DPtr = std::shared_ptr<const GridEigenSystem1D>;

// Effective potential beta^2 E'^2 - beta E'' + 2 beta^2 f of one separable coordinate.
inline std::function<double(double)> effective_potential_1d(const Poly1D& E, const Poly1D& f, double beta) {
  const Poly1D d1 = E.derivative(), d2 = d1.derivative();
  return [=](double x) {
    const double e1 = d1(x);
    return beta * beta * e1 * e1 - beta * d2(x) + 2 * beta * beta * f(x);
  };
}

// k smallest eigenpairs of -D2/h^2 + diag(v) with Dirichlet walls. Eigenvectors
// are normalized with h sum phi^2 = 1. Below 1e-6 of the peak the vector is
// continued in log form with the exact ratio recurrence of the tridiagonal
// equation, so log phi stays accurate where phi itself underflows.
inline Grid1DPtr schrodinger_fd_1d(const std::function<double(double)>& v, const Grid1D& g, int k) {
  g.validate();
  require(k >= 1 && k <= g.n / 4, ErrorKind::invalid_argument,
          "schrodinger_fd_1d: k must be in [1, n/4], got " + std::to_string(k));
  const int n = g.n;
  const double h = g.h(), ih2 = 1.0 / (h * h);
  std::vector<double> pot(n), d(n), e(n - 1, -ih2);
  for (int j = 0; j < n; ++j) {
    pot[j] = v(g.x(j));
    require(std::isfinite(pot[j]), ErrorKind::numerical,
            "schrodinger_fd_1d: potential not finite at x = " + std::to_string(g.x(j)));
    d[j] = 2.0 * ih2 + pot[j];
  }
  std::vector<double> w(n), z(std::size_t(n) * k);
  std::vector<lapack_int> supp(2 * std::size_t(k));
  lapack_int m = 0;
  const lapack_int info = LAPACKE_dstevr(LAPACK_COL_MAJOR, 'V', 'I', n, d.data(), e.data(), 0.0, 0.0, 1, k, 0.0,
                                         &m, w.data(), z.data(), n, supp.data());
  require(info == 0 && m == k, ErrorKind::numerical, "schrodinger_fd_1d: dstevr failed, info " + std::to_string(info));

  Mat la(n, k);
  Eigen::ArrayXXd sg(n, k);
  for (int i = 0; i < k; ++i) {
    double* zi = z.data() + std::size_t(i) * n;
    const double nrm = 1.0 / std::sqrt(h);
    double amax = 0.0, sum = 0.0;
    for (int j = 0; j < n; ++j) {
      zi[j] *= nrm;
      amax = std::max(amax, std::abs(zi[j]));
      sum += zi[j];
    }
    bool flip;
    if (i == 0) {
      flip = sum < 0;
    } else {
      int first = 0;
      while (first < n && std::abs(zi[first]) <= 1e-8) ++first;
      flip = first < n && zi[first] < 0;
    }
    if (flip)
      for (int j = 0; j < n; ++j) zi[j] = -zi[j];
    const double thr = 1e-6 * amax;
    int jl = 0, jr = n - 1;
    while (jl < n && std::abs(zi[jl]) < thr) ++jl;
    while (jr >= 0 && std::abs(zi[jr]) < thr) --jr;
    for (int j = jl; j <= jr; ++j) {
      la(j, i) = std::log(std::abs(zi[j]));
      sg(j, i) = zi[j] < 0 ? -1.0 : 1.0;
    }
    const double lam = w[i];
    auto a = [&](int j) { return 2.0 + h * h * (pot[j] - lam); };
    // right tail: q_j = phi_{j+1}/phi_j, q_{n-1} = 0, q_{j-1} = 1/(a_j - q_j)
    std::vector<double> q(n, 0.0);
    for (int j = n - 1; j > jr; --j) q[j - 1] = 1.0 / (a(j) - q[j]);
    for (int j = jr + 1; j < n; ++j) {
      la(j, i) = la(j - 1, i) + std::log(std::abs(q[j - 1]));
      sg(j, i) = sg(j - 1, i) * (q[j - 1] < 0 ? -1.0 : 1.0);
    }
    // left tail: p_j = phi_{j-1}/phi_j, p_0 = 0, p_{j+1} = 1/(a_j - p_j)
    std::vector<double> p(n, 0.0);
    for (int j = 0; j < jl; ++j) p[j + 1] = 1.0 / (a(j) - p[j]);
    for (int j = jl - 1; j >= 0; --j) {
      la(j, i) = la(j + 1, i) + std::log(std::abs(p[j + 1]));
      sg(j, i) = sg(j + 1, i) * (p[j + 1] < 0 ? -1.0 : 1.0);
    }
  }
  require((sg.col(0) > 0).all(), ErrorKind::numerical, "schrodinger_fd_1d: ground state changes sign");
  Vec log0 = la.col(0);
  Mat R(n, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < n; ++j) R(j, i) = sg(j, i) * std::exp(la(j, i) - log0[j]);
  Vec eig = Eigen::Map<Vec>(w.data(), k);
  return std::make_shared<GridEigenSystem1D>(g, eig, log0, R);
}

// Products of one-dimensional eigensystems for separable potentials.
class TensorEigenSystem final : public EigenSystem {
 public:
  TensorEigenSystem(std::vector<GridPtr> per_dim, std::size_t k) : dims_(std::move(per_dim)) {
    require(!dims_.empty(), ErrorKind::invalid_argument, "tensor_eigensystem: no factors");
    std::vector<int> cap;
    std::size_t total = 0;
    for (const auto& s : dims_) {
      check_dim(s->dim(), 1, "tensor_eigensystem factor");
      cap.push_back(int(s->size()));
      total += s->size();
    }
    require(k >= 1, ErrorKind::invalid_argument, "tensor_eigensystem: k must be >= 1");
    try {
      idx_ = enumerate_multi_indices(int(dims_.size()), k,
                                     [&](int i, int n) { return dims_[std::size_t(i)]->eigenvalue(std::size_t(n)); }, cap);
    } catch (const Error&) {
      throw Error(ErrorKind::invalid_argument, "tensor_eigensystem: insufficient per-dimension modes for k = " +
                                                   std::to_string(k) + " (" + std::to_string(total) + " available)");
    }
    for (const auto& a : idx_) {
      double l = 0;
      for (std::size_t i = 0; i < dims_.size(); ++i) l += dims_[i]->eigenvalue(std::size_t(a[i]));
      eig_.push_back(l);
    }
  }

  int dim() const override { return int(dims_.size()); }
  std::size_t size() const override { return eig_.size(); }
  double eigenvalue(std::size_t i) const override { return eig_.at(i); }
  const MultiIndex& index(std::size_t i) const { return idx_.at(i); }
  const GridPtr& factor(std::size_t i) const { return dims_.at(i); }
  std::size_t n_factors() const { return dims_.size(); }

  double log_ground(const Vec& x) const override {
    check_dim(x.size(), dim(), "TensorEigenSystem");
    double s = 0;
    for (int i = 0; i < dim(); ++i) s += dims_[std::size_t(i)]->log_ground(x.segment(i, 1));
    return s;
  }
  Vec grad_log_ground(const Vec& x) const override {
    check_dim(x.size(), dim(), "TensorEigenSystem");
    Vec g(dim());
    for (int i = 0; i < dim(); ++i) g[i] = dims_[std::size_t(i)]->grad_log_ground(x.segment(i, 1))[0];
    return g;
  }
  void ratios(const Vec& x, std::size_t k, Vec& r, Mat& dr) const override {
    check_dim(x.size(), dim(), "TensorEigenSystem");
    require(k <= size(), ErrorKind::invalid_argument, "TensorEigenSystem: mode index out of range");
    const int d = dim();
    std::vector<int> deg(std::size_t(d), 0);
    for (std::size_t i = 0; i < k; ++i)
      for (int j = 0; j < d; ++j) deg[std::size_t(j)] = std::max(deg[std::size_t(j)], idx_[i][std::size_t(j)]);
    std::vector<Vec> rr(static_cast<std::size_t>(d));
    std::vector<Mat> dd(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j)
      if (deg[std::size_t(j)] > 0)
        dims_[std::size_t(j)]->ratios(x.segment(j, 1), std::size_t(deg[std::size_t(j)]) + 1, rr[std::size_t(j)],
                                      dd[std::size_t(j)]);
    r.resize(Eigen::Index(k));
    dr.setZero(d, Eigen::Index(k));
    for (std::size_t i = 0; i < k; ++i) {
      const auto& a = idx_[i];
      double prod = 1.0;
      for (int j = 0; j < d; ++j)
        if (a[std::size_t(j)] > 0) prod *= rr[std::size_t(j)][a[std::size_t(j)]];
      r[Eigen::Index(i)] = prod;
      for (int j = 0; j < d; ++j) {
        if (a[std::size_t(j)] == 0) continue;
        double g = dd[std::size_t(j)](0, a[std::size_t(j)]);
        for (int l = 0; l < d; ++l)
          if (l != j && a[std::size_t(l)] > 0) g *= rr[std::size_t(l)][a[std::size_t(l)]];
        dr(j, Eigen::Index(i)) = g;
      }
    }
  }

 private:
  std::vector<GridPtr> dims_;
  std::vector<MultiIndex> idx_;
  std::vector<double> eig_;
};

using TensorPtr = std::shared_ptr<const TensorEigenSystem>;

inline TensorPtr tensor_eigensystem(std::vector<GridPtr> per_dim, std::size_t k) {
  return std::make_shared<TensorEigenSystem>(std::move(per_dim), k);
}

}  // namespace eigensoc
