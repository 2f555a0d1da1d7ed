#pragma once

#include "core.hpp"
#include "random.hpp"
#include "scalar_field.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace eigensoc {

// MALA chains targeting density proportional to exp(-2 beta E). One row per chain.
struct SamplerState {
  Mat chains;
  double step_dt = 0.01;
  double acceptance_rate = 0.0;  // over the most recent mala_step call
  std::uint64_t rng_seed = 0;
  std::vector<SplitMix64> rng;
  std::uint64_t proposals = 0, accepted = 0, resets = 0;
  // cached energy and gradient at the current points
  Vec energy;
  Mat grad;

  std::size_t n_chains() const { return std::size_t(chains.rows()); }
  int dim() const { return int(chains.cols()); }
};

// Chains start at init_mean + init_std * N(0, I).
inline SamplerState make_sampler(std::size_t n_chains, int d, std::uint64_t seed, double dt = 0.01,
                                 double init_std = 1.0, const Vec& init_mean = Vec()) {
  require(n_chains >= 1 && d >= 1, ErrorKind::invalid_argument, "make_sampler: need chains and d >= 1");
  require(dt > 0, ErrorKind::invalid_argument, "make_sampler: step_dt must be > 0");
  SamplerState s;
  s.chains.resize(Eigen::Index(n_chains), d);
  s.step_dt = dt;
  s.rng_seed = seed;
  s.rng.reserve(n_chains);
  for (std::size_t c = 0; c < n_chains; ++c) {
    s.rng.push_back(substream(seed, c, 0x3a1a));
    Vec z = init_std * normal_vec(s.rng.back(), d);
    if (init_mean.size()) z += init_mean;
    s.chains.row(Eigen::Index(c)) = z.transpose();
  }
  return s;
}

namespace detail {
inline void refresh_cache(SamplerState& s, const ScalarField& E) {
  s.energy.resize(s.chains.rows());
  s.grad.resize(s.chains.rows(), s.chains.cols());
  for (Eigen::Index c = 0; c < s.chains.rows(); ++c) {
    const Vec x = s.chains.row(c).transpose();
    s.energy[c] = E.value(x);
    s.grad.row(c) = E.gradient(x).transpose();
  }
}
}  // namespace detail

// n_steps MALA updates per chain: x' = x - 2 beta dt grad E(x) + sqrt(2 dt) xi,
// Metropolis-Hastings corrected. A proposal with non-finite energy or gradient
// is rejected and counted in resets.
inline void mala_step(SamplerState& s, const ScalarField& E, double beta, int n_steps) {
  require(s.step_dt > 0, ErrorKind::invalid_argument, "mala_step: step_dt must be > 0");
  require(beta > 0, ErrorKind::invalid_argument, "mala_step: beta must be > 0");
  check_dim(E.dim(), s.dim(), "mala_step");
  detail::refresh_cache(s, E);
  const double dt = s.step_dt, sq = std::sqrt(2 * dt), b2 = 2 * beta;
  const int d = s.dim();
  std::uint64_t acc = 0, prop = 0;
  Vec xi(d), y(d), gy(d), fwd(d), bwd(d);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (Eigen::Index c = 0; c < s.chains.rows(); ++c) {
    auto& g = s.rng[std::size_t(c)];
    Vec x = s.chains.row(c).transpose();
    Vec gx = s.grad.row(c).transpose();
    double ex = s.energy[c];
    for (int t = 0; t < n_steps; ++t) {
      for (int i = 0; i < d; ++i) xi[i] = n01(g);
      y = x - b2 * dt * gx + sq * xi;
      const double u = uniform01(g);
      ++prop;
      const double ey = E.value_grad(y, gy);
      if (!std::isfinite(ey) || !gy.allFinite()) {
        ++s.resets;
        continue;
      }
      // log q(x | y) - log q(y | x), with q(b | a) ~ exp(-|b - a + 2 beta dt grad E(a)|^2 / (4 dt))
      fwd = y - x + b2 * dt * gx;
      bwd = x - y + b2 * dt * gy;
      const double la = -b2 * (ey - ex) + (fwd.squaredNorm() - bwd.squaredNorm()) / (4 * dt);
      if (std::log(u) < la) {
        x = y;
        gx = gy;
        ex = ey;
        ++acc;
      }
    }
    s.chains.row(c) = x.transpose();
    s.grad.row(c) = gx.transpose();
    s.energy[c] = ex;
  }
  s.proposals += prop;
  s.accepted += acc;
  s.acceptance_rate = prop ? double(acc) / double(prop) : 0.0;
}

// Warm-up with step-size adaptation toward acceptance `target`; dt is frozen
// afterwards. The step starts 100x below the configured one and may grow by at
// most 20% per batch, so chains started in a steep tail descend before the step
// is large enough to freeze them there.
inline void mala_warmup(SamplerState& s, const ScalarField& E, double beta, int n_steps, double target = 0.574,
                        int batch = 10) {
  s.step_dt *= 1e-2;
  for (int done = 0; done < n_steps; done += batch) {
    mala_step(s, E, beta, std::min(batch, n_steps - done));
    s.step_dt *= std::exp(std::min(std::log(1.2), std::max(-1.0, 2.0 * (s.acceptance_rate - target))));
  }
}

inline std::vector<Vec> samples_of(const SamplerState& s) {
  std::vector<Vec> out;
  out.reserve(s.n_chains());
  for (Eigen::Index c = 0; c < s.chains.rows(); ++c) out.push_back(s.chains.row(c).transpose());
  return out;
}

// Sample-based inner products use the normalized empirical measure: the mean
// over the samples. Quadrature rules pass explicit weights and get the plain
// weighted sum, so with weights h e^{-2 beta E(x_j)} they integrate against the
// unnormalized mu.
struct WeightedSamples {
  std::vector<Vec> xs;
  std::vector<double> w;
};

inline WeightedSamples uniform_weights(std::vector<Vec> xs) {
  require(!xs.empty(), ErrorKind::invalid_argument, "uniform_weights: no samples");
  const double w = 1.0 / double(xs.size());
  WeightedSamples s{std::move(xs), {}};
  s.w.assign(s.xs.size(), w);
  return s;
}

inline double inner_product_samples(const ScalarField& phi, const ScalarField& psi, const WeightedSamples& s) {
  require(!s.xs.empty() && s.xs.size() == s.w.size(), ErrorKind::invalid_argument,
          "inner_product_samples: empty or mismatched sample set");
  CompensatedSum acc;
  for (std::size_t i = 0; i < s.xs.size(); ++i) acc.add(s.w[i] * phi.value(s.xs[i]) * psi.value(s.xs[i]));
  return acc.value();
}

inline double inner_product_samples(const ScalarField& phi, const ScalarField& psi, const std::vector<Vec>& xs) {
  require(!xs.empty(), ErrorKind::invalid_argument, "inner_product_samples: no samples");
  CompensatedSum acc;
  for (const auto& x : xs) acc.add(phi.value(x) * psi.value(x));
  return acc.value() / double(xs.size());
}

// First-derivative form of <phi, L psi>_mu: grad phi . grad psi + 2 beta^2 f phi psi.
inline double dirichlet_form(const ScalarField& phi, const ScalarField& psi, const ScalarField& f, double beta,
                             const WeightedSamples& s) {
  require(!s.xs.empty() && s.xs.size() == s.w.size(), ErrorKind::invalid_argument,
          "dirichlet_form: empty or mismatched sample set");
  CompensatedSum acc;
  for (std::size_t i = 0; i < s.xs.size(); ++i) {
    const auto& x = s.xs[i];
    const double pv = phi.value(x), qv = psi.value(x);
    acc.add(s.w[i] * (phi.gradient(x).dot(psi.gradient(x)) + 2 * beta * beta * f.value(x) * pv * qv));
  }
  return acc.value();
}

inline double dirichlet_form(const ScalarField& phi, const ScalarField& psi, const ScalarField& f, double beta,
                             const std::vector<Vec>& xs) {
  return dirichlet_form(phi, psi, f, beta, uniform_weights(xs));
}

struct ImportanceEstimate {
  double value = 0.0;
  double ess = 0.0;  // Kish effective sample size of the terms |phi_bar psi_bar|
  bool degenerate = false;
};

// <phi, psi>_mu from samples of mu_bar ~ e^{+2 beta E}: the mean of
// phi_bar psi_bar with phi_bar = e^{-2 beta E} phi, against the normalized
// empirical mu_bar. Terms are formed in log space. Overflow, or an ESS below a
// tenth of the samples, marks the estimate degenerate.
inline ImportanceEstimate inner_product_importance(const ScalarField& phi, const ScalarField& psi, const ScalarField& E,
                                                   double beta, const std::vector<Vec>& xs) {
  require(!xs.empty(), ErrorKind::invalid_argument, "inner_product_importance: no samples");
  const std::size_t m = xs.size();
  Vec lt(static_cast<Eigen::Index>(m)), sg(static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) {
    const double p = phi.value(xs[i]) * psi.value(xs[i]);
    lt[Eigen::Index(i)] = p == 0.0 ? -INFINITY : -4 * beta * E.value(xs[i]) + std::log(std::abs(p));
    sg[Eigen::Index(i)] = p < 0 ? -1.0 : 1.0;
  }
  ImportanceEstimate r;
  const double top = lt.maxCoeff();
  if (top == -INFINITY) {
    r.ess = double(m);
    return r;
  }
  if (!std::isfinite(top)) {
    r.degenerate = true;
    r.value = NAN;
    return r;
  }
  double sw = 0, sw2 = 0, s = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double w = std::exp(lt[Eigen::Index(i)] - top);
    sw += w;
    sw2 += w * w;
    s += sg[Eigen::Index(i)] * w;
  }
  r.value = std::exp(top) * s / double(m);
  r.ess = std::min(double(m), sw * sw / sw2);
  r.degenerate = !std::isfinite(r.value) || r.ess < 0.1 * double(m);
  return r;
}

}  // namespace eigensoc
