#pragma once

#include "core.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace eigensoc {

// Feedback control u(x, t).
class ControlField {
 public:
  virtual ~ControlField() = default;
  virtual int dim() const = 0;
  virtual Vec eval(const Vec& x, double t) const = 0;
  // U.row(n) = eval(X.row(n), t)
  virtual void eval_batch(const Mat& X, double t, Mat& U) const {
    U.resize(X.rows(), dim());
    Vec x(dim());
    for (Eigen::Index n = 0; n < X.rows(); ++n) {
      x = X.row(n).transpose();
      U.row(n) = eval(x, t).transpose();
    }
  }
};

using ControlPtr = std::shared_ptr<const ControlField>;

class ZeroControl final : public ControlField {
 public:
  explicit ZeroControl(int d) : d_(d) {}
  int dim() const override { return d_; }
  Vec eval(const Vec& x, double) const override {
    check_dim(x.size(), d_, "ZeroControl");
    return Vec::Zero(d_);
  }

 private:
  int d_;
};

class FunctionControl final : public ControlField {
 public:
  using F = std::function<Vec(const Vec&, double)>;
  FunctionControl(int d, F f) : d_(d), f_(std::move(f)) {}
  int dim() const override { return d_; }
  Vec eval(const Vec& x, double t) const override { return f_(x, t); }

 private:
  int d_;
  F f_;
};

// Coordinate i of u is a one-dimensional control evaluated at x_i, as for
// problems whose energy and costs are sums of one-dimensional terms.
class CoordinateControl final : public ControlField {
 public:
  explicit CoordinateControl(std::vector<ControlPtr> per_dim) : c_(std::move(per_dim)) {
    require(!c_.empty(), ErrorKind::invalid_argument, "CoordinateControl: no factors");
    for (const auto& c : c_) check_dim(c->dim(), 1, "CoordinateControl factor");
  }
  int dim() const override { return int(c_.size()); }
  Vec eval(const Vec& x, double t) const override {
    check_dim(x.size(), dim(), "CoordinateControl");
    Vec u(dim());
    for (int i = 0; i < dim(); ++i) u[i] = c_[std::size_t(i)]->eval(x.segment(i, 1), t)[0];
    return u;
  }

 private:
  std::vector<ControlPtr> c_;
};

}  // namespace eigensoc
