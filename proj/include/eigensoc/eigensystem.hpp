#pragma once

#include "control.hpp"
#include "core.hpp"
#include "scalar_field.hpp"

#include <atomic>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace eigensoc {

// Anything that can supply grad log phi_0. Shared by eigensystems and
// learned models so the hybrid control can take either.
class GroundState {
 public:
  virtual ~GroundState() = default;
  virtual int dim() const = 0;
  virtual double log_ground(const Vec& x) const = 0;
  virtual Vec grad_log_ground(const Vec& x) const = 0;
};

using GroundStatePtr = std::shared_ptr<const GroundState>;

// Ordered eigenpairs of L (or of the Schroedinger operator). Excited states
// are represented through the ratios r_i = phi_i / phi_0, which stay O(1)
// where phi_0 itself underflows.
class EigenSystem : public GroundState {
 public:
  virtual std::size_t size() const = 0;
  virtual double eigenvalue(std::size_t i) const = 0;

  // r(i) = phi_i(x)/phi_0(x) and dr.col(i) its gradient, for i < k.
  virtual void ratios(const Vec& x, std::size_t k, Vec& r, Mat& dr) const = 0;

  virtual double laplacian(std::size_t, const Vec&) const {
    throw Error(ErrorKind::invalid_argument, "EigenSystem: Laplacian not available");
  }

  double value(std::size_t i, const Vec& x) const {
    Vec r;
    Mat dr;
    ratios(x, i + 1, r, dr);
    return std::exp(log_ground(x)) * r[Eigen::Index(i)];
  }

  Vec gradient(std::size_t i, const Vec& x) const {
    Vec r;
    Mat dr;
    ratios(x, i + 1, r, dr);
    const double p0 = std::exp(log_ground(x));
    return p0 * (dr.col(Eigen::Index(i)) + r[Eigen::Index(i)] * grad_log_ground(x));
  }

  Vec grad_log(std::size_t i, const Vec& x) const {
    Vec r;
    Mat dr;
    ratios(x, i + 1, r, dr);
    return grad_log_ground(x) + dr.col(Eigen::Index(i)) / r[Eigen::Index(i)];
  }

  Vec eigenvalues(std::size_t k) const {
    Vec v = Vec::Zero(Eigen::Index(k));
    for (std::size_t i = 0; i < k; ++i) v[Eigen::Index(i)] = eigenvalue(i);
    return v;
  }
};

using EigenSystemPtr = std::shared_ptr<const EigenSystem>;

// Eigenfunction i viewed as a scalar field (Laplacian only where the system provides it).
class EigenfunctionField final : public ScalarField {
 public:
  EigenfunctionField(EigenSystemPtr sys, std::size_t i) : sys_(std::move(sys)), i_(i) {}
  int dim() const override { return sys_->dim(); }
  double value(const Vec& x) const override { return sys_->value(i_, x); }
  Vec gradient(const Vec& x) const override { return sys_->gradient(i_, x); }
  double laplacian(const Vec& x) const override { return sys_->laplacian(i_, x); }

 private:
  EigenSystemPtr sys_;
  std::size_t i_;
};

// u = beta^{-1} grad log phi_0
class GroundStateControl final : public ControlField {
 public:
  GroundStateControl(GroundStatePtr gs, double beta) : gs_(std::move(gs)), beta_(beta) {}
  int dim() const override { return gs_->dim(); }
  Vec eval(const Vec& x, double) const override { return gs_->grad_log_ground(x) / beta_; }

 private:
  GroundStatePtr gs_;
  double beta_;
};

// Truncated eigenfunction expansion of the optimal control:
// u = beta^{-1} [grad log phi_0 + grad log(1 + sum_{0<i<k} c_i e^{-(l_i - l_0)(T-t)/(2 beta)} r_i)].
// coeffs[i] = <e^{-beta g}, phi_i>_mu / <e^{-beta g}, phi_0>_mu, coeffs[0] = 1.
class EigenSeriesControl final : public ControlField {
 public:
  static constexpr double kClamp = 1e-12;

  EigenSeriesControl(EigenSystemPtr sys, Vec coeffs, double beta, double T, std::size_t k)
      : sys_(std::move(sys)), c_(std::move(coeffs)), beta_(beta), T_(T), k_(k) {
    require(k_ >= 1 && k_ <= sys_->size(), ErrorKind::invalid_argument,
            "EigenSeriesControl: truncation out of range");
    require(std::size_t(c_.size()) >= k_, ErrorKind::invalid_argument,
            "EigenSeriesControl: too few coefficients");
  }

  int dim() const override { return sys_->dim(); }

  Vec eval(const Vec& x, double t) const override {
    Vec u = sys_->grad_log_ground(x);
    if (k_ > 1) {
      Vec r;
      Mat dr;
      sys_->ratios(x, k_, r, dr);
      const double l0 = sys_->eigenvalue(0);
      double s = 1.0;
      Vec ds = Vec::Zero(dim());
      for (std::size_t i = 1; i < k_; ++i) {
        const auto ii = Eigen::Index(i);
        const double w = c_[ii] * std::exp(-(sys_->eigenvalue(i) - l0) * (T_ - t) / (2.0 * beta_));
        s += w * r[ii];
        ds += w * dr.col(ii);
      }
      if (!(s > kClamp)) {
        clamps_.fetch_add(1, std::memory_order_relaxed);
        s = kClamp;
      }
      u += ds / s;
    }
    return u / beta_;
  }

  std::uint64_t clamp_events() const { return clamps_.load(); }
  const Vec& coefficients() const { return c_; }
  const EigenSystemPtr& system() const { return sys_; }

 private:
  EigenSystemPtr sys_;
  Vec c_;
  double beta_, T_;
  std::size_t k_;
  mutable std::atomic<std::uint64_t> clamps_{0};
};

}  // namespace eigensoc
