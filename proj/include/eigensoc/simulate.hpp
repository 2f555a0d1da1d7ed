#pragma once

#include "control.hpp"
#include "core.hpp"
#include "eigenlearn.hpp"
#include "eigensystem.hpp"
#include "problem.hpp"
#include "random.hpp"

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace eigensoc {

inline constexpr std::uint64_t kInitSalt = 0x1a17;
inline constexpr std::uint64_t kNoiseSalt = 0x2b05;

struct TrajectoryBatch {
  Vec time_grid;            // K+1 uniform times on [t_start, T]
  std::vector<Mat> states;  // K+1 entries, batch x d
  std::vector<Mat> noise;   // K entries, batch x d standard normals
  std::uint64_t seed = 0;

  int steps() const { return int(time_grid.size()) - 1; }
  std::size_t batch() const { return states.empty() ? 0 : std::size_t(states[0].rows()); }
  int dim() const { return states.empty() ? 0 : int(states[0].cols()); }
};

struct SimOptions {
  double noise_scale = 1.0;  // 0 gives the Euler scheme of the noiseless ODE
  bool store_states = true;
  bool store_noise = true;
};

// X_0 drawn from the initial law, one substream per path.
inline Mat initial_states(const SocProblem& p, std::size_t batch, std::uint64_t seed) {
  Mat X(Eigen::Index(batch), p.dim);
  for (std::size_t n = 0; n < batch; ++n) {
    auto g = substream(seed, n, kInitSalt);
    X.row(Eigen::Index(n)) = p.initial_law.sample(g).transpose();
  }
  return X;
}

namespace detail {
// X_{k+1} = X_k + (-grad E(X_k) + u(X_k, t_k)) dt + sqrt(dt / beta) xi_k over
// [t0, t1] in K steps. visit(k, t_k, X_k, U_k, Xi_k) runs before step k, and
// visit(K, t1, X_K, nullptr, nullptr) at the end.
template <class Visit>
Mat em_drive(const SocProblem& p, const ControlField& u, double t0, double t1, Mat X, int K, std::uint64_t seed,
             double noise_scale, Visit&& visit) {
  require(K >= 1, ErrorKind::invalid_argument, "euler_maruyama: K must be >= 1");
  require(t1 > t0, ErrorKind::invalid_argument, "euler_maruyama: empty time interval");
  check_dim(X.cols(), p.dim, "euler_maruyama initial states");
  check_dim(u.dim(), p.dim, "euler_maruyama control");
  const auto batch = X.rows();
  const int d = p.dim;
  const double dt = (t1 - t0) / K, sq = noise_scale * std::sqrt(dt / p.beta);
  std::vector<SplitMix64> rng;
  rng.reserve(std::size_t(batch));
  for (Eigen::Index n = 0; n < batch; ++n) rng.push_back(substream(seed, std::uint64_t(n), kNoiseSalt));
  Mat U(batch, d), Xi(batch, d);
  Vec x(d), xi(d);
  for (int k = 0; k < K; ++k) {
    const double t = t0 + k * dt;
    u.eval_batch(X, t, U);
    for (Eigen::Index n = 0; n < batch; ++n) {
      fill_normal(rng[std::size_t(n)], xi.data(), d);
      Xi.row(n) = xi.transpose();
    }
    visit(k, t, X, &U, &Xi);
    for (Eigen::Index n = 0; n < batch; ++n) {
      x = X.row(n).transpose();
      X.row(n) += ((U.row(n).transpose() - p.energy->gradient(x)) * dt + sq * Xi.row(n).transpose()).transpose();
    }
    require(X.allFinite(), ErrorKind::divergence,
            "euler_maruyama: non-finite state at step " + std::to_string(k + 1));
  }
  visit(K, t1, X, static_cast<const Mat*>(nullptr), static_cast<const Mat*>(nullptr));
  return X;
}
}  // namespace detail

// Paths of the controlled SDE on [t_start, T]. x0 (batch x d) overrides the
// initial law when given.
inline TrajectoryBatch euler_maruyama(const SocProblem& p, const ControlField& u, double t_start, std::size_t batch,
                                      int K, std::uint64_t seed, const Mat* x0 = nullptr,
                                      const SimOptions& opt = {}) {
  require(batch >= 1, ErrorKind::invalid_argument, "euler_maruyama: batch must be >= 1");
  Mat X = x0 ? *x0 : initial_states(p, batch, seed);
  require(std::size_t(X.rows()) == batch, ErrorKind::dimension, "euler_maruyama: initial states do not match batch");
  TrajectoryBatch tb;
  tb.seed = seed;
  tb.time_grid = Vec::LinSpaced(K + 1, t_start, p.horizon);
  detail::em_drive(p, u, t_start, p.horizon, std::move(X), K, seed, opt.noise_scale,
                   [&](int k, double, const Mat& Xk, const Mat*, const Mat* Xi) {
                     if (opt.store_states) tb.states.push_back(Xk);
                     else if (k == K) tb.states.assign(1, Xk);
                     if (Xi && opt.store_noise) tb.noise.push_back(*Xi);
                   });
  return tb;
}

struct ObjectiveEstimate {
  double mean = 0.0;
  double std_error = 0.0;  // sample standard deviation / sqrt(N)
};

inline ObjectiveEstimate mean_and_stderr(const Vec& c) {
  const double n = double(c.size());
  ObjectiveEstimate r;
  CompensatedSum s;
  for (Eigen::Index i = 0; i < c.size(); ++i) s.add(c[i]);
  r.mean = s.value() / n;
  CompensatedSum v;
  for (Eigen::Index i = 0; i < c.size(); ++i) v.add((c[i] - r.mean) * (c[i] - r.mean));
  r.std_error = std::sqrt(v.value() / (n - 1) / n);
  return r;
}

// Per-path cost sum_k (|u_k|^2 / 2 + f(X_k)) dt + g(X_K) on [t0, T] from x0.
inline Vec path_costs(const SocProblem& p, const ControlField& u, double t0, const Mat& x0, int K,
                      std::uint64_t seed) {
  const auto batch = x0.rows();
  const double dt = (p.horizon - t0) / K;
  Vec cost = Vec::Zero(batch);
  Vec x(p.dim);
  detail::em_drive(p, u, t0, p.horizon, x0, K, seed, 1.0, [&](int, double, const Mat& X, const Mat* U, const Mat*) {
    for (Eigen::Index n = 0; n < batch; ++n) {
      x = X.row(n).transpose();
      cost[n] += U ? (0.5 * U->row(n).squaredNorm() + p.running_cost->value(x)) * dt : p.terminal_cost->value(x);
    }
  });
  return cost;
}

// Monte Carlo estimate of the cost functional with left-endpoint quadrature.
inline ObjectiveEstimate control_objective(const SocProblem& p, const ControlField& u, std::size_t batch, int K,
                                           std::uint64_t seed) {
  require(batch >= 2, ErrorKind::invalid_argument, "control_objective: batch must be >= 2");
  return mean_and_stderr(path_costs(p, u, 0.0, initial_states(p, batch, seed), K, seed));
}

struct L2Curve {
  Vec time_grid;
  Vec curve;            // mean |u - u_ref|^2 at each grid time
  double average = 0.0; // trapezoid time average of the curve
};

namespace detail {
inline double time_average(const Vec& t, const Vec& c) {
  const auto K = t.size() - 1;
  if (K == 0) return c[0];
  CompensatedSum s;
  for (Eigen::Index k = 0; k < K; ++k) s.add(0.5 * (c[k] + c[k + 1]) * (t[k + 1] - t[k]));
  return s.value() / (t[K] - t[0]);
}

inline double mean_sq_diff(const ControlField& u, const ControlField& ref, const Mat& X, double t) {
  CompensatedSum s;
  Vec x(X.cols());
  for (Eigen::Index n = 0; n < X.rows(); ++n) {
    x = X.row(n).transpose();
    s.add((u.eval(x, t) - ref.eval(x, t)).squaredNorm());
  }
  return s.value() / double(X.rows());
}
}  // namespace detail

// E |u - u_ref|^2 at each time over paths simulated under the reference.
inline L2Curve l2_error(const ControlField& u, const ControlField& reference, const TrajectoryBatch& ref_paths) {
  require(!ref_paths.states.empty() && ref_paths.states.size() == std::size_t(ref_paths.time_grid.size()),
          ErrorKind::invalid_argument, "l2_error: trajectories must store every state");
  L2Curve r;
  r.time_grid = ref_paths.time_grid;
  r.curve.resize(r.time_grid.size());
  for (Eigen::Index k = 0; k < r.time_grid.size(); ++k)
    r.curve[k] = detail::mean_sq_diff(u, reference, ref_paths.states[std::size_t(k)], r.time_grid[k]);
  r.average = detail::time_average(r.time_grid, r.curve);
  return r;
}

// The same curves for several controls, computed while the reference paths
// are simulated so that no states are stored.
inline std::vector<L2Curve> l2_error_curves(const SocProblem& p, const ControlField& reference,
                                            const std::vector<const ControlField*>& controls, std::size_t batch,
                                            int K, std::uint64_t seed) {
  require(batch >= 1, ErrorKind::invalid_argument, "l2_error_curves: batch must be >= 1");
  std::vector<L2Curve> out(controls.size());
  for (auto& c : out) {
    c.time_grid = Vec::LinSpaced(K + 1, 0.0, p.horizon);
    c.curve.resize(K + 1);
  }
  detail::em_drive(p, reference, 0.0, p.horizon, initial_states(p, batch, seed), K, seed, 1.0,
                   [&](int k, double t, const Mat& X, const Mat*, const Mat*) {
                     for (std::size_t i = 0; i < controls.size(); ++i)
                       out[i].curve[k] = detail::mean_sq_diff(*controls[i], reference, X, t);
                   });
  for (auto& c : out) c.average = detail::time_average(c.time_grid, c.curve);
  return out;
}

// T_cut = max(0, T + 2 beta log(eps) / gap): beyond T - T_cut the excited
// modes are damped below eps.
inline double choose_tcut(double lambda0, double lambda1, double beta, double epsilon, double T) {
  const double gap = lambda1 - lambda0;
  require(gap > 0, ErrorKind::invalid_argument, "choose_tcut: lambda1 must exceed lambda0");
  require(epsilon > 0 && epsilon < 1, ErrorKind::invalid_argument, "choose_tcut: epsilon must lie in (0, 1)");
  require(beta > 0 && T > 0, ErrorKind::invalid_argument, "choose_tcut: beta and T must be positive");
  return std::max(0.0, T + 2 * beta * std::log(epsilon) / gap);
}

// The epsilon for which choose_tcut returns T - 1.
inline double default_tcut_epsilon(double lambda0, double lambda1, double beta) {
  return std::exp(-(lambda1 - lambda0) / (2 * beta));
}

// First mode i >= 1 whose expansion coefficient is not negligible against
// c_0. Symmetric terminal costs switch off whole families of modes, and the
// hybrid weight should decay with the first mode that is actually present.
inline std::size_t first_active_mode(const Vec& coeffs, double rel_tol = 1e-6) {
  require(coeffs.size() >= 2 && coeffs[0] != 0.0, ErrorKind::invalid_argument,
          "first_active_mode: need c_0 != 0 and at least two coefficients");
  for (Eigen::Index i = 1; i < coeffs.size(); ++i)
    if (std::abs(coeffs[i]) > rel_tol * std::abs(coeffs[0])) return std::size_t(i);
  throw Error(ErrorKind::numerical, "first_active_mode: every excited coefficient vanishes");
}

// v(x, t) = sum_q s^q (W_q rho(x) + a_q * b(x, t)) with s = (T - t) / (T - t_cut),
// b the base control at (x, t) and * the coordinatewise product. theta holds
// the W_q (d x p, row-major) for q < n_time followed by the a_q.
class CorrectionModel {
 public:
  CorrectionModel(BasisPtr basis, int n_time, double T, double t_cut)
      : basis_(std::move(basis)), n_time_(n_time), T_(T), t_cut_(t_cut) {
    require(basis_ != nullptr, ErrorKind::invalid_argument, "CorrectionModel: missing basis");
    basis_->validate();
    require(n_time_ >= 1, ErrorKind::invalid_argument, "CorrectionModel: need a time feature");
    require(t_cut_ >= 0 && t_cut_ < T_, ErrorKind::invalid_argument, "CorrectionModel: need 0 <= t_cut < T");
    theta_ = Vec::Zero(n_params());
  }

  int dim() const { return basis_->dim; }
  int n_time() const { return n_time_; }
  int n_params() const { return n_time_ * dim() * (basis_->size() + 1); }
  const FeatureBasis& basis() const { return *basis_; }
  Vec& theta() { return theta_; }
  const Vec& theta() const { return theta_; }

  double s_of(double t) const { return std::clamp((T_ - t) / (T_ - t_cut_), 0.0, 1.0); }

  Vec eval(const Vec& x, double t, const Vec& b) const {
    const int d = dim(), p = basis_->size();
    Vec rho;
    basis_->values(x, rho);
    const double s = s_of(t);
    Vec v = Vec::Zero(d);
    double tau = 1.0;
    for (int q = 0; q < n_time_; ++q, tau *= s) {
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
          theta_.data() + std::ptrdiff_t(q) * d * p, d, p);
      v.noalias() += tau * (W * rho);
      v += tau * theta_.segment(a_offset(q), d).cwiseProduct(b);
    }
    return v;
  }

  // g += scale (dv/dtheta)^T w
  void add_vjp(const Vec& x, double t, const Vec& b, const Vec& w, double scale, double* g) const {
    const int d = dim(), p = basis_->size();
    Vec rho;
    basis_->values(x, rho);
    const double s = s_of(t);
    double tau = 1.0;
    for (int q = 0; q < n_time_; ++q, tau *= s) {
      Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> G(
          g + std::ptrdiff_t(q) * d * p, d, p);
      G.noalias() += (scale * tau) * w * rho.transpose();
      Eigen::Map<Vec>(g + a_offset(q), d) += (scale * tau) * w.cwiseProduct(b);
    }
  }

 private:
  Eigen::Index a_offset(int q) const { return Eigen::Index(n_time_) * dim() * basis_->size() + Eigen::Index(q) * dim(); }

  BasisPtr basis_;
  int n_time_;
  double T_, t_cut_;
  Vec theta_;
};

using CorrectionPtr = std::shared_ptr<CorrectionModel>;

// u = b(x, t) + w(t) v(x, t) with w(t) = beta^{-1} exp(-gap (T - t) / (2 beta))
// for t > t_cut and 0 before.
class CorrectedControl final : public ControlField {
 public:
  CorrectedControl(ControlPtr base, CorrectionPtr v, double beta, double gap, double T, double t_cut)
      : base_(std::move(base)), v_(std::move(v)), beta_(beta), gap_(gap), T_(T), t_cut_(t_cut) {
    require(base_ != nullptr, ErrorKind::invalid_argument, "CorrectedControl: missing base control");
    require(beta_ > 0 && gap_ >= 0 && t_cut_ < T_, ErrorKind::invalid_argument, "CorrectedControl: bad parameters");
    if (v_) check_dim(v_->dim(), base_->dim(), "CorrectedControl correction");
  }

  int dim() const override { return base_->dim(); }
  double weight(double t) const { return t > t_cut_ ? std::exp(-gap_ * (T_ - t) / (2 * beta_)) / beta_ : 0.0; }
  const CorrectionPtr& correction() const { return v_; }
  const ControlPtr& base() const { return base_; }
  double t_cut() const { return t_cut_; }

  Vec eval(const Vec& x, double t) const override {
    Vec b = base_->eval(x, t);
    const double w = weight(t);
    if (v_ && w != 0.0) b += w * v_->eval(x, t, b);
    return b;
  }

 private:
  ControlPtr base_;
  CorrectionPtr v_;
  double beta_, gap_, T_, t_cut_;
};

// lambda1 is the eigenvalue of the first excited mode that the terminal cost
// excites (see first_active_mode).
struct HybridControl {
  GroundStatePtr phi0;
  double lambda0 = 0.0, lambda1 = 1.0;
  double beta = 1.0, horizon = 1.0;
  CorrectionPtr correction;  // may be null: pure ground-state control
  double t_cut = 0.0;

  void validate() const {
    require(phi0 != nullptr, ErrorKind::invalid_argument, "HybridControl: missing ground state");
    require(lambda1 > lambda0, ErrorKind::invalid_argument, "HybridControl: lambda1 must exceed lambda0");
    require(t_cut >= 0 && t_cut < horizon, ErrorKind::invalid_argument, "HybridControl: need 0 <= t_cut < T");
    require(beta > 0, ErrorKind::invalid_argument, "HybridControl: beta must be > 0");
  }
};

// u = beta^{-1} grad log phi_0, plus the damped correction after t_cut.
inline std::shared_ptr<CorrectedControl> hybrid_control(const HybridControl& h) {
  h.validate();
  return std::make_shared<CorrectedControl>(std::make_shared<GroundStateControl>(h.phi0, h.beta), h.correction, h.beta,
                                            h.lambda1 - h.lambda0, h.horizon, h.t_cut);
}

struct LogVarEstimate {
  double loss = 0.0;  // sample variance of Z = g(X_T) - Y_T - V_start(X_start)
  Vec grad;           // d loss / d theta of the correction
  ObjectiveEstimate objective;  // cost on [t_start, T] under the sampling control
};

// Log-variance loss of u on [t_start, T] with paths sampled under v = u
// (parameters detached):
//   Y_T = sum_k (-|u_k|^2 / 2 - f(X_k)) dt - sqrt(dt / beta) u_k . xi_k,
// left-endpoint sums with the stored noise. start_value, when given, is an
// estimate of the value function at t_start that is subtracted from Z; it does
// not change the minimizer when exact and removes the spread of the starting
// states otherwise.
inline LogVarEstimate logvar_loss(const SocProblem& p, const CorrectedControl& u, const Mat& x_start, double t_start,
                                  int K, std::uint64_t seed, const ScalarField* start_value = nullptr) {
  const auto batch = x_start.rows();
  require(batch >= 2, ErrorKind::invalid_argument, "logvar_loss: batch must be >= 2");
  const auto& v = u.correction();
  const int np = v ? v->n_params() : 0;
  const double dt = (p.horizon - t_start) / K, sq = std::sqrt(dt / p.beta);
  Vec Y = Vec::Zero(batch), cost = Vec::Zero(batch);
  Mat A = Mat::Zero(np, batch);
  Vec x(p.dim), b(p.dim), xi(p.dim), un(p.dim);
  const auto& base = *u.base();
  Vec gT(batch);
  detail::em_drive(p, u, t_start, p.horizon, x_start, K, seed, 1.0,
                   [&](int, double t, const Mat& X, const Mat* U, const Mat* Xi) {
                     for (Eigen::Index n = 0; n < batch; ++n) {
                       x = X.row(n).transpose();
                       if (!U) {
                         gT[n] = p.terminal_cost->value(x);
                         continue;
                       }
                       un = U->row(n).transpose();
                       xi = Xi->row(n).transpose();
                       const double f = p.running_cost->value(x), uu = un.squaredNorm();
                       Y[n] += (-0.5 * uu - f) * dt - sq * un.dot(xi);
                       cost[n] += (0.5 * uu + f) * dt;
                       const double w = u.weight(t);
                       if (np && w != 0.0) {
                         b = base.eval(x, t);
                         v->add_vjp(x, t, b, xi, sq * w, A.col(n).data());
                       }
                     }
                   });
  Vec Z = gT - Y;
  if (start_value)
    for (Eigen::Index n = 0; n < batch; ++n) Z[n] -= start_value->value(x_start.row(n).transpose());
  require(Z.allFinite(), ErrorKind::numerical,
          "logvar_loss: non-finite path functional (max |Y| = " + std::to_string(Y.cwiseAbs().maxCoeff()) + ")");
  LogVarEstimate r;
  const Vec zc = Z.array() - Z.mean();
  r.loss = zc.squaredNorm() / double(batch - 1);
  r.grad = np ? Vec((2.0 / double(batch - 1)) * (A * zc)) : Vec();
  r.objective = mean_and_stderr(cost);
  return r;
}

struct LogVarConfig {
  long iterations = 500;
  std::size_t batch = 512;
  double learning_rate = 1e-2;
  int refresh_every = 100;  // new starting states at t_cut every this many iterations
  int K = 400;              // steps over [0, T]; the segments use the matching step
  std::uint64_t seed = 0;

  void validate() const {
    require(iterations > 0 && batch >= 2 && learning_rate > 0 && refresh_every > 0 && K >= 1, ErrorKind::config,
            "LogVarConfig: every setting must be positive and batch >= 2");
  }
};

struct LogVarResult {
  std::vector<double> loss;       // per iteration
  std::vector<double> objective;  // cost on [t_cut, T] per iteration
  std::vector<double> grad_norm;
};

// -beta^{-1} log phi_0, the ground-state estimate of the value at t_cut up to a constant
class GroundValueField final : public ScalarField {
 public:
  GroundValueField(GroundStatePtr g, double beta) : g_(std::move(g)), beta_(beta) {}
  int dim() const override { return g_->dim(); }
  double value(const Vec& x) const override { return -g_->log_ground(x) / beta_; }
  Vec gradient(const Vec& x) const override { return -g_->grad_log_ground(x) / beta_; }
  double laplacian(const Vec&) const override {
    throw Error(ErrorKind::invalid_argument, "GroundValueField: Laplacian not available");
  }

 private:
  GroundStatePtr g_;
  double beta_;
};

// Trains h.correction in place. Starting states at t_cut come from rolling the
// ground-state control from the initial law and are refreshed every
// refresh_every iterations; each iteration simulates [t_cut, T] with fresh noise.
inline LogVarResult train_logvar_correction(const SocProblem& p, HybridControl& h, const LogVarConfig& cfg) {
  cfg.validate();
  h.validate();
  require(h.correction != nullptr, ErrorKind::invalid_argument, "train_logvar_correction: no correction model");
  const double T = p.horizon;
  const int k_seg = std::max(1, int(std::lround(cfg.K * (T - h.t_cut) / T)));
  const int k_pre = int(std::lround(cfg.K * h.t_cut / T));
  const auto u = hybrid_control(h);
  const GroundStateControl ground(h.phi0, h.beta);
  const GroundValueField v_start(h.phi0, h.beta);
  Adam opt{cfg.learning_rate};
  LogVarResult out;
  Mat xs;
  for (long it = 0; it < cfg.iterations; ++it) {
    if (it % cfg.refresh_every == 0) {
      const auto s = mix64(cfg.seed, std::uint64_t(it / cfg.refresh_every));
      xs = initial_states(p, cfg.batch, s);
      if (k_pre > 0) xs = detail::em_drive(p, ground, 0.0, h.t_cut, xs, k_pre, s, 1.0, [](auto&&...) {});
    }
    const auto e = logvar_loss(p, *u, xs, h.t_cut, k_seg, mix64(cfg.seed ^ 0x5eedULL, std::uint64_t(it)), &v_start);
    require(std::isfinite(e.loss) && e.grad.allFinite(), ErrorKind::numerical,
            "train_logvar_correction: non-finite loss at iteration " + std::to_string(it) +
                " (objective " + std::to_string(e.objective.mean) + ")");
    out.loss.push_back(e.loss);
    out.objective.push_back(e.objective.mean);
    out.grad_norm.push_back(e.grad.norm());
    opt.step(h.correction->theta(), e.grad);
  }
  return out;
}

}  // namespace eigensoc
