#pragma once

#include "control.hpp"
#include "core.hpp"
#include "oscillator.hpp"

#include <algorithm>
#include <memory>
#include <vector>

namespace eigensoc {

// Value function V(x,t) = x^T F_t x + h_t^T x + c_t of a quadratic problem:
//   dF/dt = A F + F A + 2 F^2 - P,     F_T = Q
//   dh/dt = (A + 2F) h,                h_T = -2 Q a
//   dc/dt = |h|^2 / 2 - tr(F) / beta, c_T = a^T Q a
// Optimal control u* = -2 F_t x - h_t.
struct RiccatiSolution {
  Vec time_grid;
  std::vector<Mat> F, dF;
  std::vector<Vec> h, dh;
  Vec c;

  int dim() const { return int(F.front().rows()); }

  // Cubic Hermite interpolation in time using the stored ODE right-hand sides.
  void at(double t, Mat& Ft, Vec& ht) const {
    const auto K = time_grid.size() - 1;
    const double t0 = time_grid[0], T = time_grid[K];
    const double dt = (T - t0) / double(K);
    double s = (std::clamp(t, t0, T) - t0) / dt;
    Eigen::Index j = std::min<Eigen::Index>(Eigen::Index(s), K - 1);
    const double u = s - double(j);
    const double h00 = (1 + 2 * u) * (1 - u) * (1 - u), h10 = u * (1 - u) * (1 - u);
    const double h01 = u * u * (3 - 2 * u), h11 = u * u * (u - 1);
    Ft = h00 * F[j] + h10 * dt * dF[j] + h01 * F[j + 1] + h11 * dt * dF[j + 1];
    ht = h00 * h[j] + h10 * dt * dh[j] + h01 * h[j + 1] + h11 * dt * dh[j + 1];
  }

  // E[V(X_0, 0)] for X_0 ~ N(m, diag(sd^2)).
  double expected_cost(const Vec& m, const Vec& sd) const {
    double v = m.dot(F[0] * m) + h[0].dot(m) + c[0];
    if (sd.size()) v += (F[0].diagonal().array() * sd.array().square()).sum();
    return v;
  }
};

namespace detail {
struct RicState {
  Mat F;
  Vec h;
  double c;
};

inline RicState ric_rhs(const QuadraticProblem& p, const RicState& s) {
  RicState r;
  r.F = p.A * s.F + s.F * p.A + 2.0 * s.F * s.F.transpose() - p.P;
  r.h = (p.A + 2.0 * s.F) * s.h;
  r.c = 0.5 * s.h.squaredNorm() - s.F.trace() / p.beta;
  return r;
}
}  // namespace detail

inline RiccatiSolution riccati_solve(const QuadraticProblem& p, int steps) {
  p.validate();
  require(p.Q.has_value(), ErrorKind::invalid_argument, "riccati_solve: terminal matrix Q required");
  require(steps >= 10, ErrorKind::invalid_argument, "riccati_solve: steps must be >= 10");
  const double T = p.horizon, dt = T / steps;
  RiccatiSolution sol;
  sol.time_grid = Vec::LinSpaced(steps + 1, 0.0, T);
  sol.time_grid[steps] = T;
  sol.F.resize(steps + 1);
  sol.dF.resize(steps + 1);
  sol.h.resize(steps + 1);
  sol.dh.resize(steps + 1);
  sol.c.resize(steps + 1);
  const Vec a = p.center();
  detail::RicState s{*p.Q, -2.0 * (*p.Q) * a, a.dot(*p.Q * a)};
  s.F = 0.5 * (s.F + s.F.transpose());
  auto store = [&](int j) {
    sol.F[j] = s.F;
    sol.h[j] = s.h;
    sol.c[j] = s.c;
    auto r = detail::ric_rhs(p, s);
    sol.dF[j] = 0.5 * (r.F + r.F.transpose());
    sol.dh[j] = r.h;
  };
  store(steps);
  auto axpy = [](const detail::RicState& x, double w, const detail::RicState& k) {
    return detail::RicState{x.F + w * k.F, x.h + w * k.h, x.c + w * k.c};
  };
  for (int j = steps; j > 0; --j) {
    const double hs = -dt;
    auto k1 = detail::ric_rhs(p, s);
    auto k2 = detail::ric_rhs(p, axpy(s, 0.5 * hs, k1));
    auto k3 = detail::ric_rhs(p, axpy(s, 0.5 * hs, k2));
    auto k4 = detail::ric_rhs(p, axpy(s, hs, k3));
    s.F += hs / 6.0 * (k1.F + 2.0 * k2.F + 2.0 * k3.F + k4.F);
    s.h += hs / 6.0 * (k1.h + 2.0 * k2.h + 2.0 * k3.h + k4.h);
    s.c += hs / 6.0 * (k1.c + 2.0 * k2.c + 2.0 * k3.c + k4.c);
    s.F = 0.5 * (s.F + s.F.transpose());
    if (!s.F.allFinite() || !s.h.allFinite() || !std::isfinite(s.c))
      throw Error(ErrorKind::divergence,
                  "riccati_solve: solution blew up at t = " + std::to_string(sol.time_grid[j - 1]));
    store(j - 1);
  }
  return sol;
}

class RiccatiControl final : public ControlField {
 public:
  explicit RiccatiControl(std::shared_ptr<const RiccatiSolution> s) : s_(std::move(s)) {}
  int dim() const override { return s_->dim(); }
  Vec eval(const Vec& x, double t) const override {
    check_dim(x.size(), dim(), "RiccatiControl");
    Mat F;
    Vec h;
    s_->at(t, F, h);
    return -2.0 * (F * x) - h;
  }
  void eval_batch(const Mat& X, double t, Mat& U) const override {
    check_dim(X.cols(), dim(), "RiccatiControl");
    Mat F;
    Vec h;
    s_->at(t, F, h);
    U.noalias() = -2.0 * X * F.transpose();
    U.rowwise() -= h.transpose();
  }
  const RiccatiSolution& solution() const { return *s_; }

 private:
  std::shared_ptr<const RiccatiSolution> s_;
};

}  // namespace eigensoc
