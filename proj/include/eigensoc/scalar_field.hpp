#pragma once

#include "core.hpp"

#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace eigensoc {

// A smooth scalar function on R^d with analytic gradient and Laplacian.
class ScalarField {
 public:
  struct Jet {
    double value = 0.0;
    Vec grad;
    double lap = 0.0;
  };

  virtual ~ScalarField() = default;
  virtual int dim() const = 0;
  virtual double value(const Vec& x) const = 0;
  virtual Vec gradient(const Vec& x) const = 0;
  virtual double laplacian(const Vec& x) const = 0;

  virtual Jet jet(const Vec& x) const { return {value(x), gradient(x), laplacian(x)}; }
  // Value, with the gradient written into g. Samplers call this in their inner loop.
  virtual double value_grad(const Vec& x, Vec& g) const {
    g = gradient(x);
    return value(x);
  }
};

using FieldPtr = std::shared_ptr<const ScalarField>;

class ConstantField final : public ScalarField {
 public:
  ConstantField(int d, double c) : d_(d), c_(c) {}
  int dim() const override { return d_; }
  double value(const Vec& x) const override {
    check_dim(x.size(), d_, "ConstantField");
    return c_;
  }
  Vec gradient(const Vec& x) const override {
    check_dim(x.size(), d_, "ConstantField");
    return Vec::Zero(d_);
  }
  double laplacian(const Vec&) const override { return 0.0; }

 private:
  int d_;
  double c_;
};

// w.x + b
class LinearField final : public ScalarField {
 public:
  LinearField(Vec w, double b = 0.0) : w_(std::move(w)), b_(b) {}
  int dim() const override { return int(w_.size()); }
  double value(const Vec& x) const override {
    check_dim(x.size(), w_.size(), "LinearField");
    return w_.dot(x) + b_;
  }
  Vec gradient(const Vec& x) const override {
    check_dim(x.size(), w_.size(), "LinearField");
    return w_;
  }
  double laplacian(const Vec&) const override { return 0.0; }

 private:
  Vec w_;
  double b_;
};

// (x-a)^T M (x-a) + c with M symmetric.
class QuadraticField final : public ScalarField {
 public:
  explicit QuadraticField(const Mat& M, Vec center = Vec(), double c = 0.0)
      : M_(0.5 * (M + M.transpose())), a_(center.size() ? std::move(center) : Vec::Zero(M.rows())), c_(c) {
    require(M.rows() == M.cols(), ErrorKind::dimension, "QuadraticField: matrix not square");
    check_dim(a_.size(), M.rows(), "QuadraticField center");
  }
  int dim() const override { return int(M_.rows()); }
  double value(const Vec& x) const override {
    check_dim(x.size(), M_.rows(), "QuadraticField");
    Vec y = x - a_;
    return y.dot(M_ * y) + c_;
  }
  Vec gradient(const Vec& x) const override {
    check_dim(x.size(), M_.rows(), "QuadraticField");
    return 2.0 * (M_ * (x - a_));
  }
  double laplacian(const Vec&) const override { return 2.0 * M_.trace(); }
  double value_grad(const Vec& x, Vec& g) const override {
    check_dim(x.size(), M_.rows(), "QuadraticField");
    g.resize(x.size());
    g.noalias() = M_ * (x - a_);
    const double v = (x - a_).dot(g) + c_;
    g *= 2.0;
    return v;
  }

  const Mat& matrix() const { return M_; }
  const Vec& center() const { return a_; }

 private:
  Mat M_;
  Vec a_;
  double c_;
};

// One-dimensional polynomial sum_k c_k x^k.
struct Poly1D {
  std::vector<double> c;

  double operator()(double x) const {
    double r = 0.0;
    for (auto it = c.rbegin(); it != c.rend(); ++it) r = r * x + *it;
    return r;
  }
  Poly1D derivative() const {
    Poly1D d;
    for (std::size_t k = 1; k < c.size(); ++k) d.c.push_back(double(k) * c[k]);
    return d;
  }
  Poly1D operator*(double s) const {
    Poly1D r = *this;
    for (auto& v : r.c) v *= s;
    return r;
  }
};

// kappa (x^2 - 1)^2
inline Poly1D double_well_poly(double kappa) { return Poly1D{{kappa, 0.0, -2.0 * kappa, 0.0, kappa}}; }
// a x^2 + b x + c
inline Poly1D quadratic_poly(double a, double b = 0.0, double c = 0.0) { return Poly1D{{c, b, a}}; }

// sum_i p_i(x_i). Separability is what the tensor-product grid solver needs.
class SeparableField final : public ScalarField {
 public:
  explicit SeparableField(std::vector<Poly1D> terms) : p_(std::move(terms)) {
    require(!p_.empty(), ErrorKind::invalid_argument, "SeparableField: no terms");
    for (const auto& p : p_) {
      dp_.push_back(p.derivative());
      ddp_.push_back(dp_.back().derivative());
    }
  }
  int dim() const override { return int(p_.size()); }
  double value(const Vec& x) const override {
    check_dim(x.size(), dim(), "SeparableField");
    double s = 0.0;
    for (int i = 0; i < dim(); ++i) s += p_[i](x[i]);
    return s;
  }
  Vec gradient(const Vec& x) const override {
    check_dim(x.size(), dim(), "SeparableField");
    Vec g(dim());
    for (int i = 0; i < dim(); ++i) g[i] = dp_[i](x[i]);
    return g;
  }
  double laplacian(const Vec& x) const override {
    check_dim(x.size(), dim(), "SeparableField");
    double s = 0.0;
    for (int i = 0; i < dim(); ++i) s += ddp_[i](x[i]);
    return s;
  }
  double value_grad(const Vec& x, Vec& g) const override {
    check_dim(x.size(), dim(), "SeparableField");
    g.resize(x.size());
    double s = 0.0;
    for (int i = 0; i < dim(); ++i) {
      s += p_[i](x[i]);
      g[i] = dp_[i](x[i]);
    }
    return s;
  }
  const Poly1D& term(int i) const { return p_[i]; }

 private:
  std::vector<Poly1D> p_, dp_, ddp_;
};

// alpha (|x|^2 - 2R^2) |x|^2
class RingField final : public ScalarField {
 public:
  RingField(int d, double alpha, double R) : d_(d), alpha_(alpha), R_(R) {}
  int dim() const override { return d_; }
  double value(const Vec& x) const override {
    check_dim(x.size(), d_, "RingField");
    const double s = x.squaredNorm();
    return alpha_ * (s - 2.0 * R_ * R_) * s;
  }
  Vec gradient(const Vec& x) const override {
    check_dim(x.size(), d_, "RingField");
    return (2.0 * hp(x.squaredNorm())) * x;
  }
  double laplacian(const Vec& x) const override {
    check_dim(x.size(), d_, "RingField");
    const double s = x.squaredNorm();
    return 4.0 * (2.0 * alpha_) * s + 2.0 * d_ * hp(s);
  }

 private:
  double hp(double s) const { return alpha_ * (2.0 * s - 2.0 * R_ * R_); }
  int d_;
  double alpha_, R_;
};

class SumField final : public ScalarField {
 public:
  SumField(FieldPtr a, FieldPtr b, double wa = 1.0, double wb = 1.0)
      : a_(std::move(a)), b_(std::move(b)), wa_(wa), wb_(wb) {
    check_dim(b_->dim(), a_->dim(), "SumField");
  }
  int dim() const override { return a_->dim(); }
  double value(const Vec& x) const override { return wa_ * a_->value(x) + wb_ * b_->value(x); }
  Vec gradient(const Vec& x) const override { return wa_ * a_->gradient(x) + wb_ * b_->gradient(x); }
  double laplacian(const Vec& x) const override { return wa_ * a_->laplacian(x) + wb_ * b_->laplacian(x); }
  double value_grad(const Vec& x, Vec& g) const override {
    thread_local Vec gb;
    const double v = wa_ * a_->value_grad(x, g) + wb_ * b_->value_grad(x, gb);
    g = wa_ * g + wb_ * gb;
    return v;
  }

 private:
  FieldPtr a_, b_;
  double wa_, wb_;
};

// Field from callables, mostly for tests.
class LambdaField final : public ScalarField {
 public:
  using F = std::function<double(const Vec&)>;
  using G = std::function<Vec(const Vec&)>;
  LambdaField(int d, F f, G g, F lap) : d_(d), f_(std::move(f)), g_(std::move(g)), l_(std::move(lap)) {}
  int dim() const override { return d_; }
  double value(const Vec& x) const override {
    check_dim(x.size(), d_, "LambdaField");
    return f_(x);
  }
  Vec gradient(const Vec& x) const override {
    check_dim(x.size(), d_, "LambdaField");
    return g_(x);
  }
  double laplacian(const Vec& x) const override {
    check_dim(x.size(), d_, "LambdaField");
    return l_(x);
  }

 private:
  int d_;
  F f_;
  G g_;
  F l_;
};

// exp(-beta V)
class ExpNegField final : public ScalarField {
 public:
  ExpNegField(FieldPtr V, double beta) : V_(std::move(V)), beta_(beta) {}
  int dim() const override { return V_->dim(); }
  double value(const Vec& x) const override { return std::exp(-beta_ * V_->value(x)); }
  Vec gradient(const Vec& x) const override { return jet(x).grad; }
  double laplacian(const Vec& x) const override { return jet(x).lap; }
  Jet jet(const Vec& x) const override {
    const auto v = V_->jet(x);
    const double p = std::exp(-beta_ * v.value);
    return {p, -beta_ * p * v.grad, p * (beta_ * beta_ * v.grad.squaredNorm() - beta_ * v.lap)};
  }

 private:
  FieldPtr V_;
  double beta_;
};

inline FieldPtr zero_field(int d) { return std::make_shared<ConstantField>(d, 0.0); }

}  // namespace eigensoc
