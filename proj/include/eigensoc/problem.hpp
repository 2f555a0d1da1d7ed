#pragma once

#include "core.hpp"
#include "random.hpp"
#include "scalar_field.hpp"

#include <algorithm>
#include <vector>

namespace eigensoc {

// Law of X_0: a point mass, or a Gaussian with diagonal covariance.
struct InitialLaw {
  Vec mean;
  Vec stddev;  // empty or all zero means point mass

  static InitialLaw point(Vec x0) { return {std::move(x0), Vec()}; }
  static InitialLaw gaussian(Vec mean, Vec sd) { return {std::move(mean), std::move(sd)}; }

  bool is_point() const { return stddev.size() == 0 || stddev.isZero(0.0); }

  Vec sample(SplitMix64& g) const {
    if (is_point()) return mean;
    Vec z = normal_vec(g, mean.size());
    return mean + stddev.cwiseProduct(z);
  }
};

// dX = (-grad E + u) dt + beta^{-1/2} dW on [0, T], cost int (|u|^2/2 + f) dt + g(X_T).
struct SocProblem {
  int dim = 0;
  FieldPtr energy;
  FieldPtr running_cost;
  FieldPtr terminal_cost;
  double beta = 1.0;
  double horizon = 1.0;
  InitialLaw initial_law;

  SocProblem() = default;
  SocProblem(int d, FieldPtr E, FieldPtr f, FieldPtr g, double beta_, double T, InitialLaw p0)
      : dim(d), energy(std::move(E)), running_cost(std::move(f)), terminal_cost(std::move(g)),
        beta(beta_), horizon(T), initial_law(std::move(p0)) {
    validate();
  }

  void validate() const {
    require(dim >= 1, ErrorKind::invalid_argument, "SocProblem: dim must be >= 1");
    require(beta > 0.0, ErrorKind::invalid_argument, "SocProblem: beta must be positive");
    require(horizon > 0.0, ErrorKind::invalid_argument, "SocProblem: horizon must be positive");
    require(energy && running_cost && terminal_cost, ErrorKind::invalid_argument,
            "SocProblem: missing field");
    check_dim(energy->dim(), dim, "SocProblem energy");
    check_dim(running_cost->dim(), dim, "SocProblem running cost");
    check_dim(terminal_cost->dim(), dim, "SocProblem terminal cost");
    check_dim(initial_law.mean.size(), dim, "SocProblem initial law");
  }
};

// beta^2 |grad E|^2 - beta Lap E + 2 beta^2 f
inline double effective_potential(const SocProblem& p, const Vec& x) {
  check_dim(x.size(), p.dim, "effective_potential");
  const auto e = p.energy->jet(x);
  const double b = p.beta;
  return b * b * e.grad.squaredNorm() - b * e.lap + 2.0 * b * b * p.running_cost->value(x);
}

// L psi = -Lap psi + 2 beta <grad E, grad psi> + 2 beta^2 f psi
inline double apply_L(const SocProblem& p, const ScalarField& psi, const Vec& x) {
  check_dim(x.size(), p.dim, "apply_L");
  check_dim(psi.dim(), p.dim, "apply_L psi");
  const auto s = psi.jet(x);
  const double b = p.beta;
  return -s.lap + 2.0 * b * p.energy->gradient(x).dot(s.grad) +
         2.0 * b * b * p.running_cost->value(x) * s.value;
}

// K v = Lap v / (2 beta) - <grad E, grad v> - |grad v|^2 / 2 + f
inline double apply_K(const SocProblem& p, const ScalarField& v, const Vec& x) {
  check_dim(x.size(), p.dim, "apply_K");
  check_dim(v.dim(), p.dim, "apply_K v");
  const auto s = v.jet(x);
  return s.lap / (2.0 * p.beta) - p.energy->gradient(x).dot(s.grad) - 0.5 * s.grad.squaredNorm() +
         p.running_cost->value(x);
}

struct AssumptionReport {
  double min_potential = 0.0;
  double interior_median = 0.0;
  double shell_median = 0.0;
  bool growth = false;
};

// Probe-based evidence for a lower-bounded, growing effective potential.
// Interior probes lie in the half-width box, shell probes on the sup-norm
// sphere of radius box_half_width. Advisory only.
inline AssumptionReport check_assumptions(const SocProblem& p, double box_half_width, int n_probe,
                                          std::uint64_t seed = 7) {
  require(n_probe >= 2, ErrorKind::invalid_argument, "check_assumptions: n_probe must be >= 2");
  SplitMix64 g(seed);
  std::vector<double> inner, shell;
  AssumptionReport r;
  r.min_potential = effective_potential(p, Vec::Zero(p.dim));
  for (int k = 0; k < n_probe; ++k) {
    Vec x(p.dim);
    for (int i = 0; i < p.dim; ++i) x[i] = (2.0 * uniform01(g) - 1.0) * 0.5 * box_half_width;
    const double vi = effective_potential(p, x);
    inner.push_back(vi);
    Vec y(p.dim);
    for (int i = 0; i < p.dim; ++i) y[i] = 2.0 * uniform01(g) - 1.0;
    const int face = int(uniform01(g) * p.dim) % p.dim;
    y[face] = y[face] < 0 ? -1.0 : 1.0;
    y *= box_half_width;
    const double vs = effective_potential(p, y);
    shell.push_back(vs);
    r.min_potential = std::min({r.min_potential, vi, vs});
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  r.interior_median = median(inner);
  r.shell_median = median(shell);
  r.growth = r.shell_median > r.interior_median;
  return r;
}

}  // namespace eigensoc
