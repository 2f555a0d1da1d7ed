#pragma once

#include "core.hpp"
#include "eigensystem.hpp"
#include "problem.hpp"
#include "random.hpp"
#include "sampling.hpp"
#include "scalar_field.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace eigensoc {

// Features rho_j: Gaussian radial functions exp(-|x - c_j|^2 / (2 s^2)) followed
// by the monomials of degree <= 2 (1, x_i, x_i x_j for i <= j).
struct FeatureBasis {
  int dim = 0;
  Mat centers;  // n_c x d
  double width = 1.0;
  bool quadratic = true;

  int n_radial() const { return int(centers.rows()); }
  int n_poly() const { return quadratic ? 1 + dim + dim * (dim + 1) / 2 : 0; }
  int size() const { return n_radial() + n_poly(); }

  void validate() const {
    require(dim >= 1, ErrorKind::invalid_argument, "FeatureBasis: dim must be >= 1");
    require(centers.rows() == 0 || centers.cols() == dim, ErrorKind::dimension, "FeatureBasis: center dimension");
    require(width > 0 && std::isfinite(width), ErrorKind::invalid_argument, "FeatureBasis: width must be > 0");
    require(size() >= 1, ErrorKind::invalid_argument, "FeatureBasis: empty basis");
  }

  // values only
  void values(const Vec& x, Vec& v) const {
    check_dim(x.size(), dim, "FeatureBasis");
    const int nc = n_radial(), d = dim;
    v.resize(size());
    const double s2 = width * width;
    for (int j = 0; j < nc; ++j) {
      double q = 0.0;
      for (int k = 0; k < d; ++k) q += (x[k] - centers(j, k)) * (x[k] - centers(j, k));
      v[j] = std::exp(-0.5 * q / s2);
    }
    if (!quadratic) return;
    int j = nc;
    v[j++] = 1.0;
    for (int i = 0; i < d; ++i) v[j++] = x[i];
    for (int i = 0; i < d; ++i)
      for (int k = i; k < d; ++k) v[j++] = x[i] * x[k];
  }

  // v (p), g (p x d), lap (p)
  void eval(const Vec& x, Vec& v, Mat& g, Vec& lap) const {
    check_dim(x.size(), dim, "FeatureBasis");
    const int p = size(), nc = n_radial(), d = dim;
    v.resize(p);
    g.setZero(p, d);
    lap.setZero(p);
    const double s2 = width * width;
    for (int j = 0; j < nc; ++j) {
      double q = 0.0;
      for (int k = 0; k < d; ++k) q += (x[k] - centers(j, k)) * (x[k] - centers(j, k));
      const double e = std::exp(-0.5 * q / s2);
      v[j] = e;
      for (int k = 0; k < d; ++k) g(j, k) = -e / s2 * (x[k] - centers(j, k));
      lap[j] = e * (q / (s2 * s2) - d / s2);
    }
    if (!quadratic) return;
    int j = nc;
    v[j++] = 1.0;
    for (int i = 0; i < d; ++i, ++j) {
      v[j] = x[i];
      g(j, i) = 1.0;
    }
    for (int i = 0; i < d; ++i)
      for (int k = i; k < d; ++k, ++j) {
        v[j] = x[i] * x[k];
        g(j, i) += x[k];
        g(j, k) += x[i];
        lap[j] = i == k ? 2.0 : 0.0;
      }
  }
};

using BasisPtr = std::shared_ptr<const FeatureBasis>;

// Centers by farthest-point selection from the samples, starting at the first;
// width is the median pairwise center distance.
inline BasisPtr make_basis(const std::vector<Vec>& samples, int n_centers, bool quadratic = true) {
  require(!samples.empty(), ErrorKind::invalid_argument, "make_basis: no samples");
  require(n_centers >= 0, ErrorKind::invalid_argument, "make_basis: n_centers must be >= 0");
  auto b = std::make_shared<FeatureBasis>();
  b->dim = int(samples[0].size());
  b->quadratic = quadratic;
  const std::size_t m = samples.size();
  const int nc = int(std::min<std::size_t>(std::size_t(n_centers), m));
  b->centers.resize(nc, b->dim);
  if (nc > 0) {
    std::vector<double> dist(m, INFINITY);
    std::size_t pick = 0;
    for (int c = 0; c < nc; ++c) {
      b->centers.row(c) = samples[pick].transpose();
      std::size_t far = 0;
      for (std::size_t i = 0; i < m; ++i) {
        dist[i] = std::min(dist[i], (samples[i] - samples[pick]).squaredNorm());
        if (dist[i] > dist[far]) far = i;
      }
      pick = far;
    }
    std::vector<double> pd;
    for (int i = 0; i < nc; ++i)
      for (int j = i + 1; j < nc; ++j) pd.push_back((b->centers.row(i) - b->centers.row(j)).norm());
    if (!pd.empty()) {
      std::nth_element(pd.begin(), pd.begin() + std::ptrdiff_t(pd.size() / 2), pd.end());
      b->width = pd[pd.size() / 2];
    }
    if (!(b->width > 0)) b->width = 1.0;
  }
  b->validate();
  return b;
}

enum class Parameterization { exponential, linear };

// phi = exp(-beta V0) (exponential) or phi = V0 (linear), where
// V0(x) = sum_j theta_j rho_j(x) + offset * E(x). The offset term lets a model
// trained on mu_bar samples represent phi_bar = phi e^{-2 beta E}.
class ParametricModel final : public ScalarField, public GroundState {
 public:
  ParametricModel(BasisPtr basis, double beta, Parameterization kind, Vec theta = Vec(), FieldPtr energy = nullptr,
                  double offset = 0.0)
      : basis_(std::move(basis)), beta_(beta), kind_(kind), theta_(std::move(theta)), E_(std::move(energy)),
        offset_(offset) {
    require(basis_ != nullptr, ErrorKind::invalid_argument, "ParametricModel: missing basis");
    basis_->validate();
    require(beta_ > 0, ErrorKind::invalid_argument, "ParametricModel: beta must be > 0");
    if (theta_.size() == 0) theta_ = Vec::Zero(basis_->size());
    check_dim(theta_.size(), basis_->size(), "ParametricModel theta");
    require(offset_ == 0.0 || E_ != nullptr, ErrorKind::invalid_argument, "ParametricModel: offset needs an energy");
    if (E_) check_dim(E_->dim(), basis_->dim, "ParametricModel energy");
  }

  int dim() const override { return basis_->dim; }
  const FeatureBasis& basis() const { return *basis_; }
  const BasisPtr& basis_ptr() const { return basis_; }
  double beta() const { return beta_; }
  Parameterization kind() const { return kind_; }
  const Vec& theta() const { return theta_; }
  Vec& theta() { return theta_; }
  double offset() const { return offset_; }
  const FieldPtr& energy() const { return E_; }
  int n_params() const { return int(theta_.size()); }

  // V0 with value, gradient and Laplacian
  Jet v0_jet(const Vec& x) const {
    Vec v, lap;
    Mat g;
    basis_->eval(x, v, g, lap);
    Jet j{theta_.dot(v), g.transpose() * theta_, lap.dot(theta_)};
    if (offset_ != 0.0) {
      const auto e = E_->jet(x);
      j.value += offset_ * e.value;
      j.grad += offset_ * e.grad;
      j.lap += offset_ * e.lap;
    }
    return j;
  }
  double v0(const Vec& x) const { return v0_jet(x).value; }
  Vec v0_gradient(const Vec& x) const { return v0_jet(x).grad; }
  double v0_laplacian(const Vec& x) const { return v0_jet(x).lap; }

  // d/dtheta of V0, grad V0 and Lap V0: the features themselves.
  void v0_dtheta(const Vec& x, Vec& dv, Mat& dg, Vec& dlap) const { basis_->eval(x, dv, dg, dlap); }

  Jet jet(const Vec& x) const override {
    const auto v = v0_jet(x);
    if (kind_ == Parameterization::linear) return v;
    const double p = std::exp(-beta_ * v.value);
    return {p, -beta_ * p * v.grad, p * (beta_ * beta_ * v.grad.squaredNorm() - beta_ * v.lap)};
  }
  double value(const Vec& x) const override { return jet(x).value; }
  Vec gradient(const Vec& x) const override { return jet(x).grad; }
  double laplacian(const Vec& x) const override { return jet(x).lap; }

  double log_ground(const Vec& x) const override {
    if (kind_ == Parameterization::exponential) return -beta_ * v0(x);
    return std::log(std::abs(v0(x)));
  }
  Vec grad_log_ground(const Vec& x) const override {
    const auto v = v0_jet(x);
    if (kind_ == Parameterization::exponential) return -beta_ * v.grad;
    return v.grad / v.value;
  }

 private:
  BasisPtr basis_;
  double beta_;
  Parameterization kind_;
  Vec theta_;
  FieldPtr E_;
  double offset_;
};

using ModelPtr = std::shared_ptr<ParametricModel>;

// Feature values of one basis on a sample set.
struct FeatureBatch {
  // p x m, one column per sample
  Mat val;
  std::vector<Mat> grad;  // d matrices
  Mat lap;
};

inline FeatureBatch eval_features(const FeatureBasis& b, const std::vector<Vec>& xs) {
  const auto m = Eigen::Index(xs.size());
  const int p = b.size(), d = b.dim, nc = b.n_radial();
  FeatureBatch fb;
  fb.val.resize(p, m);
  fb.lap.setZero(p, m);
  fb.grad.assign(std::size_t(d), Mat::Zero(p, m));
  const double s2 = b.width * b.width;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vec& x = xs[std::size_t(i)];
    check_dim(x.size(), d, "eval_features");
    for (int j = 0; j < nc; ++j) {
      double q = 0.0;
      for (int k = 0; k < d; ++k) {
        const double r = x[k] - b.centers(j, k);
        q += r * r;
      }
      const double e = std::exp(-0.5 * q / s2);
      fb.val(j, i) = e;
      fb.lap(j, i) = e * (q / (s2 * s2) - d / s2);
      for (int k = 0; k < d; ++k) fb.grad[std::size_t(k)](j, i) = -e / s2 * (x[k] - b.centers(j, k));
    }
    if (!b.quadratic) continue;
    int j = nc;
    fb.val(j++, i) = 1.0;
    for (int k = 0; k < d; ++k, ++j) {
      fb.val(j, i) = x[k];
      fb.grad[std::size_t(k)](j, i) = 1.0;
    }
    for (int k = 0; k < d; ++k)
      for (int l = k; l < d; ++l, ++j) {
        fb.val(j, i) = x[k] * x[l];
        fb.grad[std::size_t(k)](j, i) += x[l];
        fb.grad[std::size_t(l)](j, i) += x[k];
        if (k == l) fb.lap(j, i) = 2.0;
      }
  }
  return fb;
}

// Samples with the problem data the losses need. Inner products in L2(mu) are
// means over the samples with relative weights exp(log_w); log_w is empty when
// the samples are drawn from mu itself and -4 beta E when drawn from mu_bar.
struct LossBatch {
  std::vector<Vec> xs;
  double beta = 1.0;
  Vec f, energy;
  Mat grad_energy;  // m x d
  Vec log_w;

  std::size_t size() const { return xs.size(); }

  // Feature tables are cached per basis, so a fixed batch is evaluated once.
  const FeatureBatch& features(const BasisPtr& b) const {
    for (auto& [k, v] : cache_)
      if (k == b) return *v;
    cache_.emplace_back(b, std::make_shared<FeatureBatch>(eval_features(*b, xs)));
    return *cache_.back().second;
  }

 private:
  mutable std::vector<std::pair<BasisPtr, std::shared_ptr<FeatureBatch>>> cache_;
};

// importance: samples come from mu_bar ~ e^{2 beta E} (non-confining energies).
inline LossBatch make_batch(const SocProblem& p, std::vector<Vec> xs, bool importance = false) {
  require(!xs.empty(), ErrorKind::invalid_argument, "make_batch: no samples");
  LossBatch b;
  b.beta = p.beta;
  const auto m = Eigen::Index(xs.size());
  b.f.resize(m);
  b.energy.resize(m);
  b.grad_energy.resize(m, p.dim);
  Vec g;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vec& x = xs[std::size_t(i)];
    check_dim(x.size(), p.dim, "make_batch");
    b.energy[i] = p.energy->value_grad(x, g);
    b.grad_energy.row(i) = g.transpose();
    b.f[i] = p.running_cost->value(x);
  }
  if (importance) b.log_w = -4.0 * p.beta * b.energy;
  b.xs = std::move(xs);
  return b;
}

// A model on a batch. Every per-sample quantity of phi is stored scaled by
// exp(log_w_i / 2 - shift), so that mean(phi_i psi_i) of stored values times
// exp(shift_phi + shift_psi) is the weighted mu inner product without under- or
// overflow. Parameter derivatives are applied as pullbacks, never formed.
struct ModelEval {
  const FeatureBatch* fb = nullptr;
  Parameterization kind = Parameterization::exponential;
  double beta = 1.0, shift = 0.0;
  Vec phi, lap;   // m
  Mat dphi;       // m x d
  Vec V, lapV;    // V0 data
  Mat gradV;      // m x d
  Vec a;          // Lap phi / phi (exponential) or the scale factors (linear)

  // J0^T u0 + sum_k Jk^T u.col(k) + Jl^T ul, where J0, Jk and Jl are the
  // theta-Jacobians of phi, d_k phi and Lap phi over the samples.
  Vec pullback(const Vec* u0, const Mat* ug, const Vec* ul) const {
    const auto m = phi.size();
    const int d = int(dphi.cols());
    Vec c0 = Vec::Zero(m), cl = Vec::Zero(m);
    Mat cg = Mat::Zero(m, d);
    if (kind == Parameterization::exponential) {
      const double b = beta, b2 = beta * beta;
      if (u0) c0 -= b * phi.cwiseProduct(*u0);
      if (ug)
        for (int k = 0; k < d; ++k) {
          const Vec pu = phi.cwiseProduct(ug->col(k));
          c0 += b2 * pu.cwiseProduct(gradV.col(k));
          cg.col(k) -= b * pu;
        }
      if (ul) {
        const Vec pu = phi.cwiseProduct(*ul);
        c0 -= b * a.cwiseProduct(pu);
        for (int k = 0; k < d; ++k) cg.col(k) += 2 * b2 * gradV.col(k).cwiseProduct(pu);
        cl -= b * pu;
      }
    } else {
      if (u0) c0 = a.cwiseProduct(*u0);
      if (ug) cg = a.asDiagonal() * *ug;
      if (ul) cl = a.cwiseProduct(*ul);
    }
    Vec r = fb->val * c0;
    if (ul) r += fb->lap * cl;
    if (ug)
      for (int k = 0; k < d; ++k) r += fb->grad[std::size_t(k)] * cg.col(k);
    return r;
  }
};

inline ModelEval evaluate(const ParametricModel& model, const LossBatch& b) {
  const auto& fb = b.features(model.basis_ptr());
  const auto m = Eigen::Index(b.size());
  const int d = model.dim();
  const double beta = model.beta();
  ModelEval e;
  e.fb = &fb;
  e.kind = model.kind();
  e.beta = beta;
  e.V = fb.val.transpose() * model.theta();
  e.lapV = fb.lap.transpose() * model.theta();
  e.gradV.resize(m, d);
  for (int k = 0; k < d; ++k) e.gradV.col(k) = fb.grad[std::size_t(k)].transpose() * model.theta();
  if (model.offset() != 0.0) {
    const double c = model.offset();
    e.V += c * b.energy;
    e.gradV += c * b.grad_energy;
    for (Eigen::Index i = 0; i < m; ++i) e.lapV[i] += c * model.energy()->laplacian(b.xs[std::size_t(i)]);
  }
  Vec half_lw = b.log_w.size() ? Vec(0.5 * b.log_w) : Vec(Vec::Zero(m));
  if (model.kind() == Parameterization::exponential) {
    const Vec lp = -beta * e.V + half_lw;
    e.shift = lp.maxCoeff();
    require(std::isfinite(e.shift), ErrorKind::numerical, "evaluate: non-finite model values");
    e.phi = (lp.array() - e.shift).exp().matrix();
    e.a = beta * beta * e.gradV.rowwise().squaredNorm() - beta * e.lapV;
    e.lap = e.phi.cwiseProduct(e.a);
    e.dphi = -beta * (e.phi.asDiagonal() * e.gradV);
  } else {
    e.shift = half_lw.maxCoeff();
    e.a = (half_lw.array() - e.shift).exp().matrix();
    e.phi = e.a.cwiseProduct(e.V);
    e.lap = e.a.cwiseProduct(e.lapV);
    e.dphi = e.a.asDiagonal() * e.gradV;
  }
  return e;
}

struct LossValue {
  double value = 0.0;
  Vec grad;              // d/d theta
  double dlambda = 0.0;  // d/d lambda_hat where the loss takes one
  double main = 0.0;     // value without the regularizer
};

namespace detail {
// scaled <phi, phi>_mu and its theta-gradient
inline double norm2(const ModelEval& e, Vec& dn) {
  const double m = double(e.phi.size());
  dn = (2.0 / m) * e.pullback(&e.phi, nullptr, nullptr);
  return e.phi.squaredNorm() / m;
}

// scaled <phi, L phi>_mu in first-derivative form and its theta-gradient
inline double dirichlet(const ModelEval& e, const LossBatch& b, Vec& dn) {
  const double m = double(e.phi.size()), b2 = 2 * b.beta * b.beta;
  const Vec fphi = b.f.cwiseProduct(e.phi);
  const Vec u0 = b2 * fphi;
  dn = (2.0 / m) * e.pullback(&u0, &e.dphi, nullptr);
  return (e.dphi.squaredNorm() + b2 * fphi.dot(e.phi)) / m;
}

inline double log_norm2(const ModelEval& e, double n2s) { return std::log(n2s) + 2 * e.shift; }

inline void require_nondegenerate(double log_n2) {
  require(log_n2 > std::log(1e-14) && std::isfinite(log_n2), ErrorKind::numerical,
          "eigenlearn: degenerate model, <phi, phi> estimate <= 1e-14");
}

// K V0 per sample, the stationary HJB operator applied to V0
inline Vec hjb_operator(const ModelEval& e, const LossBatch& b) {
  const Vec ge = (e.gradV.array() * b.grad_energy.array()).rowwise().sum().matrix();
  return (e.lapV / (2 * b.beta) - ge - 0.5 * e.gradV.rowwise().squaredNorm() + b.f).eval();
}
}  // namespace detail

// <phi, L phi>_mu / <phi, phi>_mu + alpha (|phi|^2_mu - 1)^2
inline LossValue loss_deep_ritz(const ParametricModel& model, const LossBatch& b, double alpha) {
  const auto e = evaluate(model, b);
  Vec dn, dd;
  const double n = detail::dirichlet(e, b, dn), dsc = detail::norm2(e, dd);
  const double ln2 = detail::log_norm2(e, dsc);
  detail::require_nondegenerate(ln2);
  const double q = n / dsc, D = std::exp(ln2), s2 = std::exp(2 * e.shift);
  LossValue r;
  r.main = q;
  r.value = q + alpha * (D - 1) * (D - 1);
  r.grad = (dn - q * dd) / dsc + (2 * alpha * (D - 1) * s2) * dd;
  return r;
}

// <phi, L phi>_mu + alpha (|phi|^2_mu - 1)^2
inline LossValue loss_variational(const ParametricModel& model, const LossBatch& b, double alpha) {
  const auto e = evaluate(model, b);
  Vec dn, dd;
  const double n = detail::dirichlet(e, b, dn), dsc = detail::norm2(e, dd);
  const double s2 = std::exp(2 * e.shift), D = dsc * s2;
  LossValue r;
  r.main = n * s2;
  r.value = r.main + alpha * (D - 1) * (D - 1);
  r.grad = s2 * dn + (2 * alpha * (D - 1) * s2) * dd;
  return r;
}

namespace detail {
// alpha (log |phi|_mu)^2 added to r
inline void log_regularizer(const ModelEval& e, double alpha, LossValue& r) {
  Vec dd;
  const double dsc = norm2(e, dd), ln2 = log_norm2(e, dsc);
  require_nondegenerate(ln2);
  const double h = 0.5 * ln2;
  r.value += alpha * h * h;
  r.grad += (alpha * h / dsc) * dd;
}
}  // namespace detail

// |L phi - lambda phi|^2_rho + alpha (log |phi|_rho)^2 with rho = mu. L phi is
// formed from the jet of phi, second derivatives by the chain rule.
inline LossValue loss_pinn(const ParametricModel& model, double lambda, const LossBatch& b, double alpha) {
  const auto e = evaluate(model, b);
  const double m = double(b.size()), beta = b.beta, b2 = 2 * beta * beta;
  const Vec ge = (e.dphi.array() * b.grad_energy.array()).rowwise().sum().matrix();
  const Vec c = (b2 * b.f.array() - lambda).matrix();
  const Vec res = -e.lap + 2 * beta * ge + c.cwiseProduct(e.phi);
  // res = -Lap phi + 2 beta gradE . grad phi + c phi
  const Vec u0 = c.cwiseProduct(res), ul = -res;
  const Mat ug = (2 * beta) * (res.asDiagonal() * b.grad_energy);
  const double s2 = std::exp(2 * e.shift);
  LossValue r;
  r.main = s2 * res.squaredNorm() / m;
  r.value = r.main;
  r.grad = (2 * s2 / m) * e.pullback(&u0, &ug, &ul);
  r.dlambda = -(2 * s2 / m) * res.dot(e.phi);
  detail::log_regularizer(e, alpha, r);
  return r;
}

// |L phi / phi - lambda|^2_rho + alpha (log |phi|_mu)^2, with L phi / phi = 2 beta^2 K V0
// for the exponential parameterization and rho the sampling law.
inline LossValue loss_relative(const ParametricModel& model, double lambda, const LossBatch& b, double alpha) {
  require(model.kind() == Parameterization::exponential, ErrorKind::invalid_argument,
          "loss_relative: needs the exponential parameterization");
  const auto e = evaluate(model, b);
  const auto& fb = b.features(model.basis_ptr());
  const double m = double(b.size()), beta = b.beta, b2 = 2 * beta * beta;
  const Vec s = (b2 * detail::hjb_operator(e, b)).array() - lambda;
  // d(2 beta^2 K)/d theta = 2 beta^2 [lap rho / (2 beta) - sum_k (dE_k + dV_k) G_k]
  Vec ws = Vec::Zero(fb.val.rows());
  ws += (b2 / (2 * beta)) * (fb.lap * s);
  for (std::size_t k = 0; k < fb.grad.size(); ++k) {
    const auto kk = Eigen::Index(k);
    const Vec w = s.cwiseProduct(b.grad_energy.col(kk) + e.gradV.col(kk));
    ws -= b2 * (fb.grad[k] * w);
  }
  LossValue r;
  r.main = s.squaredNorm() / m;
  r.value = r.main;
  r.grad = (2.0 / m) * ws;
  r.dlambda = -2.0 * s.sum() / m;
  detail::log_regularizer(e, alpha, r);
  return r;
}

struct MultiLossValue {
  double value = 0.0;
  std::vector<Vec> grads;  // one per model
  Mat moments;             // E_mu[phi phi^T]
};

// sum_i <phi_i, L phi_i>_mu + alpha |E_mu[phi phi^T] - I|_F^2
inline MultiLossValue loss_variational_multi(const std::vector<const ParametricModel*>& models, const LossBatch& b,
                                             double alpha) {
  require(!models.empty(), ErrorKind::invalid_argument, "loss_variational_multi: no models");
  const std::size_t k = models.size();
  const double m = double(b.size());
  std::vector<ModelEval> ev;
  ev.reserve(k);
  for (auto* mp : models) ev.push_back(evaluate(*mp, b));
  MultiLossValue r;
  r.moments.resize(Eigen::Index(k), Eigen::Index(k));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      r.moments(Eigen::Index(i), Eigen::Index(j)) =
          std::exp(ev[i].shift + ev[j].shift) * ev[i].phi.dot(ev[j].phi) / m;
  const Mat Dm = r.moments - Mat::Identity(Eigen::Index(k), Eigen::Index(k));
  r.value = alpha * Dm.squaredNorm();
  r.grads.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    Vec dn;
    const double s2 = std::exp(2 * ev[i].shift);
    r.value += s2 * detail::dirichlet(ev[i], b, dn);
    Vec g = s2 * dn;
    Vec u = Vec::Zero(ev[i].phi.size());
    for (std::size_t l = 0; l < k; ++l)
      u += (4 * alpha * Dm(Eigen::Index(i), Eigen::Index(l)) * std::exp(ev[i].shift + ev[l].shift) / m) * ev[l].phi;
    g += ev[i].pullback(&u, nullptr, nullptr);
    r.grads[i] = std::move(g);
  }
  return r;
}

// sum_j w_j psi_j
class CombinationField final : public ScalarField {
 public:
  CombinationField(std::vector<FieldPtr> fs, Vec w) : fs_(std::move(fs)), w_(std::move(w)) {
    require(!fs_.empty() && std::size_t(w_.size()) == fs_.size(), ErrorKind::invalid_argument,
            "CombinationField: size mismatch");
  }
  int dim() const override { return fs_[0]->dim(); }
  double value(const Vec& x) const override { return jet(x).value; }
  Vec gradient(const Vec& x) const override { return jet(x).grad; }
  double laplacian(const Vec& x) const override { return jet(x).lap; }
  Jet jet(const Vec& x) const override {
    Jet j{0.0, Vec::Zero(dim()), 0.0};
    for (std::size_t i = 0; i < fs_.size(); ++i) {
      const auto a = fs_[i]->jet(x);
      const double w = w_[Eigen::Index(i)];
      j.value += w * a.value;
      j.grad += w * a.grad;
      j.lap += w * a.lap;
    }
    return j;
  }

 private:
  std::vector<FieldPtr> fs_;
  Vec w_;
};

struct Extraction {
  Vec eigenvalues;                 // ascending
  std::vector<FieldPtr> functions; // D^{-1/2} U^T psi, same order
  Mat moments;                     // E_mu[psi psi^T]
  Vec D;                           // moment eigenvalues, same order
};

// Eigenpairs from minimizers of the multi-function variational loss:
// diagonalize M = E_mu[psi psi^T] = U D U^T, phi = D^{-1/2} U^T psi and
// lambda_i = 2 alpha (1 - D_ii).
inline Extraction extract_eigvals(const Mat& moments, const std::vector<FieldPtr>& psi, double alpha,
                                  double tol = 1e-10) {
  const auto k = moments.rows();
  require(k >= 1 && moments.cols() == k && std::size_t(k) == psi.size(), ErrorKind::dimension,
          "extract_eigvals: moment matrix and function count differ");
  require(alpha > 0, ErrorKind::invalid_argument, "extract_eigvals: alpha must be > 0");
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (moments + moments.transpose()));
  require(es.info() == Eigen::Success, ErrorKind::numerical, "extract_eigvals: diagonalization failed");
  Extraction r;
  r.moments = moments;
  r.eigenvalues.resize(k);
  r.D.resize(k);
  // largest D first gives ascending lambda
  for (Eigen::Index i = 0; i < k; ++i) {
    const Eigen::Index c = k - 1 - i;
    const double Dii = es.eigenvalues()[c];
    require(Dii > tol && std::isfinite(Dii), ErrorKind::convergence,
            "extract_eigvals: second-moment eigenvalue not positive, model not converged");
    r.D[i] = Dii;
    r.eigenvalues[i] = 2 * alpha * (1 - Dii);
    r.functions.push_back(std::make_shared<CombinationField>(psi, Vec(es.eigenvectors().col(c) / std::sqrt(Dii))));
  }
  return r;
}

inline Extraction extract_eigvals(const std::vector<ModelPtr>& models, const LossBatch& b, double alpha) {
  std::vector<const ParametricModel*> raw;
  std::vector<FieldPtr> fs;
  for (auto& m : models) {
    raw.push_back(m.get());
    fs.push_back(m);
  }
  const auto mv = loss_variational_multi(raw, b, alpha);
  return extract_eigvals(mv.moments, fs, alpha);
}

// Adam: first-order steps scaled per parameter by moving averages of the
// gradient and its square.
struct Adam {
  explicit Adam(double lr_ = 1e-4) : lr(lr_) {}

  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Vec m, v;
  long t = 0;

  void step(Vec& theta, const Vec& g) {
    if (m.size() != theta.size()) {
      m = Vec::Zero(theta.size());
      v = Vec::Zero(theta.size());
      t = 0;
    }
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseAbs2();
    const double c1 = 1 - std::pow(b1, double(t)), c2 = 1 - std::pow(b2, double(t));
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

// Exponentially weighted mean and variance with weight a on each new value.
struct EmaVariance {
  double a = 0.5, mean = 0.0, var = INFINITY;
  long n = 0;
  void add(double x) {
    if (n++ == 0) {
      mean = x;
      return;
    }
    const double diff = x - mean, inc = a * diff;
    mean += inc;
    var = (1 - a) * ((std::isfinite(var) ? var : 0.0) + diff * inc);
  }
};

enum class GroundLoss { relative, pinn, deep_ritz, variational };

inline const char* to_string(GroundLoss l) {
  switch (l) {
    case GroundLoss::relative: return "relative";
    case GroundLoss::pinn: return "pinn";
    case GroundLoss::deep_ritz: return "deep_ritz";
    case GroundLoss::variational: return "variational";
  }
  return "unknown";
}

struct TrainConfig {
  double learning_rate = 1e-4;
  long iterations = 20000;       // phase 1 and phase 2 together
  double reg_alpha = 1.0;
  std::size_t batch = 4096;
  std::uint64_t seed = 0;
  double var_threshold = 1e-4;   // phase switch on the EMA variance of lambda_0 estimates
  long min_phase1 = 5000;
  long max_phase1 = 0;           // 0: up to `iterations`
  bool force_switch = false;     // switch at max_phase1 instead of failing
  int estimate_every = 100;
  double ema = 0.5;
  int mcmc_steps = 5;            // MALA steps per iteration
  int warmup_steps = 1000;
  double step_dt = 0.01;
  int n_centers = 24;
  bool quadratic = true;
  GroundLoss phase2_loss = GroundLoss::relative;
  bool joint_lambda = false;     // train lambda_hat jointly in phase 2
  bool train_excited = true;
  int excited_snapshots = 8;     // sample sets pooled for the excited state
  int excited_steps = 10;        // excited-model updates per iteration
  double excited_lr = 1e-2;
  double excited_alpha_floor = 10.0;
  bool importance = false;       // sample mu_bar and train phi_bar (non-confining E)

  void validate() const {
    require(learning_rate > 0 && iterations > 0 && reg_alpha > 0 && batch >= 2 && var_threshold > 0 &&
                min_phase1 >= 0 && max_phase1 >= 0 && estimate_every > 0 && ema > 0 && ema <= 1 &&
                mcmc_steps > 0 && warmup_steps >= 0 && step_dt > 0 && n_centers >= 0 && excited_snapshots > 0 && excited_steps > 0 &&
                excited_lr > 0 && excited_alpha_floor > 0,
            ErrorKind::config, "TrainConfig: every setting must be positive");
  }

  std::string describe() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "lr=%.17g it=%ld alpha=%.17g m=%zu seed=%" PRIu64
                  " var=%.17g min1=%ld max1=%ld every=%d ema=%.17g mcmc=%d warm=%d dt=%.17g nc=%d quad=%d "
                  "loss=%s joint=%d exc=%d snaps=%d esteps=%d elr=%.17g efloor=%.17g imp=%d force=%d",
                  learning_rate, iterations, reg_alpha, batch, seed, var_threshold, min_phase1, max_phase1,
                  estimate_every, ema, mcmc_steps, warmup_steps, step_dt, n_centers, int(quadratic),
                  to_string(phase2_loss), int(joint_lambda), int(train_excited), excited_snapshots, excited_steps, excited_lr,
                  excited_alpha_floor, int(importance), int(force_switch));
    return buf;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : describe()) h = (h ^ c) * 0x100000001b3ULL;
    return h;
  }
};

struct TrainDiagnostics {
  long phase1_iterations = 0;
  double switch_variance = 0.0;
  std::vector<double> lambda_estimates;  // every estimate_every phase-1 iterations
  std::vector<double> phase1_loss;       // loss per iteration
  std::vector<double> phase2_loss;       // main term of the phase-2 loss per iteration
  std::vector<double> excited_loss;
  std::vector<double> acceptance;        // MALA acceptance per iteration
  double excited_alpha = 0.0;
  bool forced_switch = false;
};

struct TrainResult {
  ModelPtr phi0;
  ModelPtr phi1;  // excited model (linear), null when not trained
  double lambda0 = 0.0, lambda1 = NAN;
  TrainDiagnostics diag;
};

namespace detail {
// The two-function variational loss with psi_0 held fixed and phi_1 linear is
// a quartic in theta_1 whose coefficients are moment matrices on the batch.
// The offset part of phi_1 rides along as a last feature with weight 1.
struct PairForm {
  Mat A, B;          // (p+1) x (p+1): <., L .>_mu and <., .>_mu of the features
  Vec b;             // <psi_0, feature>_mu
  double n00 = 0.0;  // <psi_0, L psi_0>_mu
  double m00 = 0.0;  // <psi_0, psi_0>_mu
  double alpha = 1.0;

  void build_features(const ParametricModel& phi1, const LossBatch& bt) {
    const auto& fb = bt.features(phi1.basis_ptr());
    const auto p = fb.val.rows(), m = fb.val.cols();
    const int d = phi1.dim();
    const double c = phi1.offset();
    Vec half_lw = bt.log_w.size() ? Vec(0.5 * bt.log_w) : Vec(Vec::Zero(m));
    shift_ = half_lw.maxCoeff();
    r_ = (half_lw.array() - shift_).exp().matrix();
    const double s2 = std::exp(2 * shift_) / double(m);
    phi_.resize(p + 1, m);
    phi_.topRows(p) = fb.val * r_.asDiagonal();
    phi_.row(p) = (c * bt.energy.cwiseProduct(r_)).transpose();
    B = s2 * (phi_ * phi_.transpose());
    A = s2 * (2 * bt.beta * bt.beta) * (phi_ * bt.f.asDiagonal() * phi_.transpose());
    Mat g(p + 1, m);
    for (int k = 0; k < d; ++k) {
      g.topRows(p) = fb.grad[std::size_t(k)] * r_.asDiagonal();
      g.row(p) = (c * bt.grad_energy.col(k).cwiseProduct(r_)).transpose();
      A.noalias() += s2 * (g * g.transpose());
    }
  }

  void set_ground(const ParametricModel& psi0, const LossBatch& bt) {
    const auto e = evaluate(psi0, bt);
    const double m = double(bt.size());
    Vec dn;
    n00 = std::exp(2 * e.shift) * detail::dirichlet(e, bt, dn);
    m00 = std::exp(2 * e.shift) * e.phi.squaredNorm() / m;
    b = (std::exp(e.shift + shift_) / m) * (phi_ * e.phi);
  }

  // loss value and its gradient in theta_1
  double value(const Vec& theta, Vec* grad) const {
    const auto p = theta.size();
    Vec t(p + 1);
    t << theta, 1.0;
    const Vec At = A * t, Bt = B * t;
    const double n11 = t.dot(At), d11 = t.dot(Bt), d01 = b.dot(t);
    if (grad) *grad = (2 * At + alpha * (4 * d01 * b + 4 * (d11 - 1) * Bt)).head(p);
    return n00 + n11 + alpha * ((m00 - 1) * (m00 - 1) + 2 * d01 * d01 + (d11 - 1) * (d11 - 1));
  }

 private:
  Mat phi_;
  Vec r_;
  double shift_ = 0.0;
};

inline LossValue ground_loss(GroundLoss l, const ParametricModel& m, double lambda, const LossBatch& b,
                             double alpha) {
  switch (l) {
    case GroundLoss::relative: return loss_relative(m, lambda, b, alpha);
    case GroundLoss::pinn: return loss_pinn(m, lambda, b, alpha);
    case GroundLoss::deep_ritz: return loss_deep_ritz(m, b, alpha);
    case GroundLoss::variational: return loss_variational(m, b, alpha);
  }
  throw Error(ErrorKind::invalid_argument, "unknown loss");
}
}  // namespace detail

// Phase 1 minimizes the deep Ritz loss. Every estimate_every iterations the
// mean Rayleigh quotient over that window is a lambda_0 estimate, and the
// phase ends once the EMA variance of the estimates is below var_threshold
// after at least min_phase1 iterations. Phase 2 freezes lambda_0 and
// fine-tunes phi_0 with the chosen loss. An excited model (linear
// parameterization) is trained with the two-function variational loss against
// the scaled phi_0 on a pooled fixed sample set, and lambda_1 is extracted from
// the second moments on that set.
inline TrainResult train_two_phase(const SocProblem& problem, const TrainConfig& cfg) {
  problem.validate();
  cfg.validate();
  const double beta = problem.beta;
  const int d = problem.dim;
  FieldPtr target = problem.energy;
  if (cfg.importance) target = std::make_shared<SumField>(problem.energy, problem.energy, -1.0, 0.0);
  auto s = make_sampler(cfg.batch, d, cfg.seed, cfg.step_dt);
  if (cfg.warmup_steps > 0) mala_warmup(s, *target, beta, cfg.warmup_steps);

  TrainResult out;
  auto basis = make_basis(samples_of(s), cfg.n_centers, cfg.quadratic);
  out.phi0 = std::make_shared<ParametricModel>(basis, beta, Parameterization::exponential, Vec(), problem.energy,
                                               cfg.importance ? -2.0 : 0.0);
  auto& model = *out.phi0;
  Adam opt{cfg.learning_rate};
  EmaVariance ema{cfg.ema};
  const long max1 = cfg.max_phase1 ? cfg.max_phase1 : cfg.iterations;
  long it = 0;
  bool switched = false;
  CompensatedSum window;  // Rayleigh quotients since the last estimate
  for (; it < max1; ++it) {
    mala_step(s, *target, beta, cfg.mcmc_steps);
    out.diag.acceptance.push_back(s.acceptance_rate);
    const auto b = make_batch(problem, samples_of(s), cfg.importance);
    const auto l = loss_deep_ritz(model, b, cfg.reg_alpha);
    require(std::isfinite(l.value) && l.grad.allFinite(), ErrorKind::divergence,
            "train_two_phase: non-finite phase-1 loss at iteration " + std::to_string(it));
    out.diag.phase1_loss.push_back(l.value);
    window.add(l.main);
    opt.step(model.theta(), l.grad);
    if ((it + 1) % cfg.estimate_every == 0) {
      const double est = window.value() / cfg.estimate_every;
      window = CompensatedSum{};
      out.diag.lambda_estimates.push_back(est);
      ema.add(est);
      if (it + 1 >= cfg.min_phase1 && ema.var < cfg.var_threshold) {
        ++it;
        switched = true;
        break;
      }
    }
  }
  if (!switched && cfg.force_switch && it < cfg.iterations) {
    switched = true;
    out.diag.forced_switch = true;
  }
  require(switched, ErrorKind::convergence,
          "train_two_phase: lambda_0 estimates did not settle in phase 1 (EMA variance " + std::to_string(ema.var) +
              ")");
  out.diag.phase1_iterations = it;
  out.diag.switch_variance = ema.var;
  double lambda = ema.mean;

  // excited state: a fixed pooled sample set and the scaled ground state
  std::shared_ptr<LossBatch> xb;
  ModelPtr psi0;
  detail::PairForm pair;
  double a_exc = std::max(std::abs(lambda), cfg.excited_alpha_floor);
  Adam xopt{cfg.excited_lr};
  if (cfg.train_excited) {
    std::vector<Vec> pool;
    for (int k = 0; k < cfg.excited_snapshots; ++k) {
      if (k) mala_step(s, *target, beta, 10 * cfg.mcmc_steps);
      for (auto& x : samples_of(s)) pool.push_back(std::move(x));
    }
    xb = std::make_shared<LossBatch>(make_batch(problem, std::move(pool), cfg.importance));
    out.phi1 = std::make_shared<ParametricModel>(basis, beta, Parameterization::linear, Vec(), problem.energy,
                                                 cfg.importance ? -2.0 : 0.0);
    // odd start so the excited model is not orthogonal to nothing
    for (int j = 0; j < basis->size(); ++j) out.phi1->theta()[j] = j % 2 ? 0.1 : -0.1;
    out.diag.excited_alpha = a_exc;
    pair.alpha = a_exc;
    pair.build_features(*out.phi1, *xb);
  }
  auto refresh_psi0 = [&] {
    psi0 = std::make_shared<ParametricModel>(model);
    const auto e = evaluate(*psi0, *xb);
    Vec dd;
    const double ln2 = detail::log_norm2(e, detail::norm2(e, dd));
    const double target_n2 = std::max(1e-6, 1 - lambda / (2 * a_exc));
    // phi = exp(-beta V0): adding c to the constant feature scales phi by e^{-beta c}
    psi0->theta()[basis->n_radial()] += (ln2 - std::log(target_n2)) / (2 * beta);
    pair.set_ground(*psi0, *xb);
  };
  require(!cfg.train_excited || cfg.quadratic, ErrorKind::config,
          "train_two_phase: excited-state training needs the polynomial block");
  if (cfg.train_excited) refresh_psi0();

  Adam opt2{cfg.learning_rate};
  for (; it < cfg.iterations; ++it) {
    mala_step(s, *target, beta, cfg.mcmc_steps);
    out.diag.acceptance.push_back(s.acceptance_rate);
    const auto b = make_batch(problem, samples_of(s), cfg.importance);
    const auto l = detail::ground_loss(cfg.phase2_loss, model, lambda, b, cfg.reg_alpha);
    require(std::isfinite(l.value) && l.grad.allFinite(), ErrorKind::divergence,
            "train_two_phase: non-finite phase-2 loss at iteration " + std::to_string(it));
    out.diag.phase2_loss.push_back(l.main);
    opt2.step(model.theta(), l.grad);
    if (cfg.joint_lambda) lambda -= cfg.learning_rate * l.dlambda;
    if (cfg.train_excited) {
      if ((it + 1) % cfg.estimate_every == 0) refresh_psi0();
      Vec g;
      for (int k = 0; k < cfg.excited_steps; ++k) {
        const double v = pair.value(out.phi1->theta(), &g);
        if (k == 0) out.diag.excited_loss.push_back(v);
        xopt.step(out.phi1->theta(), g);
      }
    }
  }
  out.lambda0 = lambda;
  if (cfg.train_excited) {
    refresh_psi0();
    const auto ex = extract_eigvals(std::vector<ModelPtr>{psi0, out.phi1}, *xb, a_exc);
    out.lambda1 = ex.eigenvalues[1];
  }
  return out;
}

// Checkpoint: a versioned text record of the basis, parameters and eigenvalues.
inline void save_checkpoint(const std::string& path, const ParametricModel& m, double lambda0, double lambda1,
                            std::uint64_t config_hash) {
  const auto& b = m.basis();
  std::ostringstream o;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    o << ' ' << buf;
  };
  o << "eigensoc-model 1\n";
  o << "kind " << (m.kind() == Parameterization::exponential ? "exponential" : "linear") << '\n';
  o << "beta";
  num(m.beta());
  o << "\noffset";
  num(m.offset());
  o << "\ndim " << b.dim << "\nquadratic " << int(b.quadratic) << "\nwidth";
  num(b.width);
  o << "\ncenters " << b.n_radial() << '\n';
  for (int i = 0; i < b.n_radial(); ++i) {
    for (int k = 0; k < b.dim; ++k) num(b.centers(i, k));
    o << '\n';
  }
  o << "theta " << m.n_params() << '\n';
  for (int j = 0; j < m.n_params(); ++j) num(m.theta()[j]);
  o << "\nlambda0";
  num(lambda0);
  o << "\nlambda1";
  num(lambda1);
  o << "\nconfig " << config_hash << '\n';
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(bool(f), ErrorKind::io, "save_checkpoint: cannot write " + tmp);
    f << o.str();
    require(bool(f), ErrorKind::io, "save_checkpoint: write failed for " + tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0, ErrorKind::io, "save_checkpoint: cannot rename to " + path);
}

struct Checkpoint {
  ModelPtr model;
  double lambda0 = 0.0, lambda1 = NAN;
  std::uint64_t config_hash = 0;
};

// energy is needed when the stored model has a nonzero offset.
inline Checkpoint load_checkpoint(const std::string& path, FieldPtr energy = nullptr) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), ErrorKind::io, "load_checkpoint: cannot open " + path);
  auto expect = [&](const char* key) {
    std::string k;
    f >> k;
    require(bool(f) && k == key, ErrorKind::io, std::string("load_checkpoint: expected '") + key + "' in " + path);
  };
  auto num = [&] {
    std::string t;
    f >> t;
    require(bool(f), ErrorKind::io, "load_checkpoint: truncated " + path);
    return std::strtod(t.c_str(), nullptr);
  };
  expect("eigensoc-model");
  int ver = 0;
  f >> ver;
  require(ver == 1, ErrorKind::io, "load_checkpoint: unsupported version in " + path);
  expect("kind");
  std::string kind;
  f >> kind;
  require(kind == "exponential" || kind == "linear", ErrorKind::io, "load_checkpoint: bad kind in " + path);
  expect("beta");
  const double beta = num();
  expect("offset");
  const double offset = num();
  auto b = std::make_shared<FeatureBasis>();
  expect("dim");
  f >> b->dim;
  expect("quadratic");
  int q = 0;
  f >> q;
  b->quadratic = q != 0;
  expect("width");
  b->width = num();
  expect("centers");
  int nc = 0;
  f >> nc;
  require(bool(f) && nc >= 0 && b->dim >= 1, ErrorKind::io, "load_checkpoint: bad header in " + path);
  b->centers.resize(nc, b->dim);
  for (int i = 0; i < nc; ++i)
    for (int k = 0; k < b->dim; ++k) b->centers(i, k) = num();
  expect("theta");
  int p = 0;
  f >> p;
  require(bool(f) && p == b->size(), ErrorKind::io, "load_checkpoint: parameter count mismatch in " + path);
  Vec theta(p);
  for (int j = 0; j < p; ++j) theta[j] = num();
  Checkpoint c;
  expect("lambda0");
  c.lambda0 = num();
  expect("lambda1");
  c.lambda1 = num();
  expect("config");
  f >> c.config_hash;
  require(bool(f), ErrorKind::io, "load_checkpoint: truncated " + path);
  c.model = std::make_shared<ParametricModel>(
      b, beta, kind == "exponential" ? Parameterization::exponential : Parameterization::linear, theta, energy,
      offset);
  return c;
}

}  // namespace eigensoc
