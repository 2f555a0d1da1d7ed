// Acceptance gate: one PASS/FAIL line per criterion. Optional arguments select
// criteria by number.

#include <eigensoc/bench.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>

using namespace eigensoc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmtf(const char* f, auto... v) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, v...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const double kS3 = std::sqrt(3.0);

QuadraticProblem isotropic(int d, double q = 0.5, double center = 0.0) {
  Vec a = center != 0.0 ? Vec(Vec::Constant(d, center)) : Vec();
  return QuadraticProblem{Mat::Identity(d, d), Mat::Identity(d, d), q * Mat::Identity(d, d), a, 1.0, 4.0};
}

std::function<double(double)> double_well_v(double kappa, double nu) {
  return effective_potential_1d(double_well_poly(kappa), double_well_poly(nu), 1.0);
}

FieldPtr well(double kappa) { return std::make_shared<SeparableField>(std::vector<Poly1D>{double_well_poly(kappa)}); }

double slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = double(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

Vec uniform_point(SplitMix64& g, int d, double half) {
  Vec x(d);
  for (int i = 0; i < d; ++i) x[i] = (2 * uniform01(g) - 1) * half;
  return x;
}

// 1. harmonic oscillator spectrum
Outcome harmonic_spectrum() {
  const auto t0 = std::chrono::steady_clock::now();
  auto s = schrodinger_fd_1d([](double x) { return x * x; }, Grid1D{-8, 8, 2000}, 6);
  const double secs = seconds_since(t0);
  double worst = 0;
  for (int n = 0; n <= 5; ++n) worst = std::max(worst, std::abs(s->eigenvalue(std::size_t(n)) - (2 * n + 1)));
  return {worst <= 1e-3 && secs < 1.0, fmtf("max |lambda_n - (2n+1)| = %.2e for n <= 5, %.3f s", worst, secs)};
}

// 2. closed-form LQR against Riccati at d = 20
Outcome lqr_vs_riccati() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto q = isotropic(20);
  const int d = q.dim();
  auto sys = lqr_eigensystem(q, 8);
  auto soc = q.to_soc(InitialLaw::point(Vec::Zero(d)));
  auto u = lqr_series_control(sys, *soc.terminal_cost, q.horizon, 8);
  auto sol = std::make_shared<RiccatiSolution>(riccati_solve(q, 400));
  RiccatiControl r(sol);
  GroundStateControl gs(lqr_eigensystem(q, 1), q.beta);
  SplitMix64 g(2024);
  double num = 0, den = 0, slope_err = 0;
  for (int k = 0; k < 4000; ++k) {
    const Vec x = std::sqrt(0.5) * normal_vec(g, d);
    const Vec a = u->eval(x, 0.0), b = r.eval(x, 0.0);
    num += (a - b).squaredNorm();
    den += b.squaredNorm();
    slope_err = std::max(slope_err, (gs.eval(x, 0.0) + (kS3 - 1) * x).cwiseAbs().maxCoeff());
  }
  const double rel = std::sqrt(num / den);
  const double ric = (sol->F[0] - (kS3 - 1) / 2 * Mat::Identity(d, d)).cwiseAbs().maxCoeff();
  const double secs = seconds_since(t0);
  return {rel <= 1e-2 && slope_err <= 1e-6 && ric <= 1e-6 && secs < 10,
          fmtf("rel L2(p0) %.2e, ground slope err %.1e, |F(0) - (sqrt3-1)/2 I| %.1e, %.2f s", rel, slope_err, ric,
               secs)};
}

// 3. pinn and relative losses against their algebraic forms
Outcome reweighting_identities() {
  SplitMix64 g(31);
  double worst = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int d = 1 + inst % 3;
    const double beta = 0.5 + uniform01(g);
    QuadraticProblem q{Mat::Identity(d, d), Mat::Identity(d, d), std::nullopt, Vec(), beta, 1.0};
    const auto p = q.to_soc(InitialLaw::point(Vec::Zero(d)));
    std::vector<Vec> xs;
    for (int i = 0; i < 16; ++i) xs.push_back(uniform_point(g, d, 1.5));
    const auto batch = make_batch(p, xs);
    auto b = std::make_shared<FeatureBasis>();
    b->dim = d;
    b->width = 0.8;
    b->centers.resize(4, d);
    for (int i = 0; i < 4; ++i) b->centers.row(i) = uniform_point(g, d, 1.5).transpose();
    Vec th(b->size());
    for (int j = 0; j < th.size(); ++j) th[j] = 0.5 * (2 * uniform01(g) - 1);
    auto m = std::make_shared<ParametricModel>(b, beta, Parameterization::exponential, th);
    const double lam = 3 * uniform01(g) - 1, alpha = uniform01(g);
    LambdaField V(
        d, [&](const Vec& x) { return m->v0(x); }, [&](const Vec& x) { return m->v0_gradient(x); },
        [&](const Vec& x) { return m->v0_laplacian(x); });
    double s_pinn = 0, s_rel = 0, s_n = 0;
    for (const auto& x : xs) {
      const double k = apply_K(p, V, x) - lam / (2 * beta * beta);
      const double ph = std::exp(-beta * m->v0(x));
      s_pinn += ph * ph * k * k;
      s_rel += k * k;
      s_n += ph * ph;
    }
    const double mm = double(xs.size()), b4 = 4 * std::pow(beta, 4);
    const double reg = alpha * std::pow(0.5 * std::log(s_n / mm), 2);
    const double want_pinn = b4 * s_pinn / mm + reg, want_rel = b4 * s_rel / mm + reg;
    worst = std::max(worst, std::abs(loss_pinn(*m, lam, batch, alpha).value - want_pinn) /
                                std::max(1.0, std::abs(want_pinn)));
    worst = std::max(worst, std::abs(loss_relative(*m, lam, batch, alpha).value - want_rel) /
                                std::max(1.0, std::abs(want_rel)));
  }
  return {worst <= 1e-9, fmtf("100 instances, max relative deviation %.2e", worst)};
}

// Smooth bump exp(-1/(1 - ((x - c)/r)^2)) supported on |x - c| < r.
std::shared_ptr<LambdaField> bump(double c, double r, double amp = 1.0) {
  auto parts = [=](double x, double& v, double& d1, double& d2) {
    const double y = (x - c) / r;
    if (std::abs(y) >= 1) {
      v = d1 = d2 = 0;
      return;
    }
    const double q = 1 - y * y, e = amp * std::exp(-1 / q);
    const double a = -2 * y / (q * q);
    const double da = -2 / (q * q) - 8 * y * y / (q * q * q);
    v = e;
    d1 = e * a / r;
    d2 = e * (a * a + da) / (r * r);
  };
  auto get = [parts](const Vec& x, int which) {
    double v[3];
    parts(x[0], v[0], v[1], v[2]);
    return v[which];
  };
  return std::make_shared<LambdaField>(
      1, [=](const Vec& x) { return get(x, 0); }, [=](const Vec& x) { return Vec(Vec::Constant(1, get(x, 1))); },
      [=](const Vec& x) { return get(x, 2); });
}

// 4. first-derivative Dirichlet form against <phi, L psi>_mu
Outcome dirichlet_symmetry() {
  auto E = well(5);
  auto f = well(3);
  SocProblem p(1, E, f, zero_field(1), 1.0, 1.0, InitialLaw::point(Vec::Zero(1)));
  WeightedSamples q;
  const int n = 8001;
  const double h = 4.0 / (n - 1);
  for (int j = 0; j < n; ++j) {
    Vec x = Vec::Constant(1, -2 + j * h);
    q.w.push_back(h * std::exp(-2 * E->value(x)));
    q.xs.push_back(x);
  }
  const std::vector<std::pair<std::shared_ptr<LambdaField>, std::shared_ptr<LambdaField>>> pairs = {
      {bump(0.0, 1.5), bump(0.5, 1.0, 2.0)}, {bump(1.0, 0.6), bump(0.8, 0.7)}, {bump(-0.9, 0.8, 3.0), bump(-1.2, 0.5)}};
  double worst = 0;
  for (const auto& [a, b] : pairs) {
    LambdaField Lb(
        1, [&](const Vec& x) { return apply_L(p, *b, x); }, [](const Vec&) { return Vec(Vec::Zero(1)); },
        [](const Vec&) { return 0.0; });
    const double direct = inner_product_samples(*a, Lb, q);
    const double form = dirichlet_form(*a, *b, *f, 1.0, q);
    worst = std::max(worst, std::abs(form - direct) / std::max(1.0, std::abs(direct)));
  }
  return {worst <= 1e-6, fmtf("3 bump pairs, max deviation %.2e", worst)};
}

// 5. semigroup PDE residual on the d = 1 double well
Outcome semigroup_residual() {
  auto E = well(5);
  auto f = well(3);
  auto l = to_L_eigenfunctions(schrodinger_fd_1d(double_well_v(5, 3), Grid1D{-2.2, 2.2, 16000}, 60), E, 1.0);
  Semigroup sg(l, ConstantField(1, 1.0));
  auto P = [&](double y, double t) { return sg(Vec::Constant(1, y), t); };
  const double dt = 1e-4, dx = 1e-3;
  double worst = 0;
  for (double tau : {0.25, 1.0, 2.0})
    for (double x : {-1.3, -1.0, -0.5, 0.0, 0.7, 1.2}) {
      const double v = P(x, tau), pt = (P(x, tau + dt) - P(x, tau - dt)) / (2 * dt);
      const double px = (P(x + dx, tau) - P(x - dx, tau)) / (2 * dx);
      const double pxx = (P(x + dx, tau) - 2 * v + P(x - dx, tau)) / (dx * dx);
      const Vec y = Vec::Constant(1, x);
      worst = std::max(worst, std::abs(pt - pxx + 2 * E->gradient(y)[0] * px + 2 * f->value(y) * v));
    }
  return {worst <= 1e-3, fmtf("18 interior points, max |d_tau psi + L psi| = %.2e", worst)};
}

// 6. decay of the ground-state control error at rate (lambda_1 - lambda_0) / (2 beta)
Outcome spectral_decay() {
  const auto q = isotropic(1, 0.5, 1.0);
  const auto p = q.to_soc(InitialLaw::gaussian(Vec::Zero(1), Vec::Constant(1, std::sqrt(0.5))));
  RiccatiControl ref(std::make_shared<RiccatiSolution>(riccati_solve(q, 4000)));
  GroundStateControl g(lqr_eigensystem(q, 1), 1.0);
  const int K = 400;
  const auto e = l2_error_curves(p, ref, {&g}, 16384, K, 6).front();
  std::vector<double> tau, y;
  for (int k = 0; k <= K * 3 / 4; ++k) {
    tau.push_back(q.horizon - e.time_grid[k]);
    y.push_back(0.5 * std::log(e.curve[k]));
  }
  const double s = slope(tau, y);
  return {std::abs(s + kS3) <= 0.05 * kS3, fmtf("slope %.4f, want %.4f (%.2f%%)", s, -kS3, 100 * std::abs(s / kS3 + 1))};
}

// 7. relative loss against PINN and deep Ritz on the d = 1 double well
Outcome loss_ordering() {
  auto E = well(5);
  auto f = well(3);
  SocProblem p(1, E, f, zero_field(1), 1.0, 4.0, InitialLaw::point(Vec::Zero(1)));
  const Grid1D grid{-3, 3, 4000};
  auto ref = to_L_eigenfunctions(schrodinger_fd_1d(double_well_v(5, 3), grid, 2), E, 1.0);
  // L2(mu) norm of the gradient error with mu normalized, and the same
  // divided by the norm of the reference gradient
  double ref_norm = 0;
  auto l2_mu = [&](const GroundState& m) {
    double num = 0, den = 0, z = 0;
    for (int j = 0; j < grid.n; ++j) {
      const Vec x = Vec::Constant(1, grid.x(j));
      const double w = std::exp(-2 * E->value(x));
      const Vec r = ref->grad_log_ground(x);
      num += w * (m.grad_log_ground(x) - r).squaredNorm();
      den += w * r.squaredNorm();
      z += w;
    }
    ref_norm = std::sqrt(den / z);
    return std::sqrt(num / z);
  };
  std::vector<double> err;
  for (auto loss : {GroundLoss::relative, GroundLoss::pinn, GroundLoss::deep_ritz}) {
    TrainConfig c;
    c.iterations = 20000;
    c.batch = 4096;
    c.learning_rate = 1e-3;
    c.seed = 1;
    c.phase2_loss = loss;
    c.train_excited = false;
    err.push_back(l2_mu(*train_two_phase(p, c).phi0));
  }
  return {err[0] < err[1] && err[0] < err[2] && err[0] <= 5e-2,
          fmtf("L2(mu) error of grad log phi0: relative loss %.3e, pinn %.3e, deep-ritz %.3e (|grad log phi0| = %.3e)",
               err[0], err[1], err[2], ref_norm)};
}

// log phi_0 = 0
class FlatGround final : public GroundState {
 public:
  explicit FlatGround(int d) : d_(d) {}
  int dim() const override { return d_; }
  double log_ground(const Vec&) const override { return 0.0; }
  Vec grad_log_ground(const Vec&) const override { return Vec::Zero(d_); }

 private:
  int d_;
};

// 8. hybrid against the ground-state control on the d = 10 double well
Outcome hybrid_improvement() {
  auto c = bench::lookup("double-well");
  const auto b = bench::build_problem(c);
  bench::RunResult rr;
  const auto hyb = bench::method_control(b, c, rr, false);
  std::string ref_name;
  const auto ref = bench::reference_control(b, c, ref_name, false);
  const auto s = bench::hybrid_spectrum(b, c, false);
  GroundStateControl gs(s.phi0, c.problem.beta);
  double t_cut = 0;
  for (const auto& [k, v] : rr.extra)
    if (k == "t_cut") t_cut = v;
  // ablation: the same correction trained on [t_cut, T] over a flat ground state
  HybridControl flat;
  flat.phi0 = std::make_shared<FlatGround>(c.problem.dim);
  flat.lambda0 = s.lambda0;
  flat.lambda1 = s.lambda1;
  flat.beta = c.problem.beta;
  flat.horizon = c.problem.horizon;
  flat.t_cut = t_cut;
  flat.correction = std::make_shared<CorrectionModel>(make_basis({Vec::Zero(c.problem.dim)}, 0, true),
                                                      c.hybrid.n_time, c.problem.horizon, t_cut);
  LogVarConfig lc;
  lc.iterations = c.hybrid.iterations;
  lc.batch = c.hybrid.batch;
  lc.learning_rate = c.hybrid.learning_rate;
  lc.refresh_every = c.hybrid.refresh_every;
  lc.K = c.problem.steps;
  lc.seed = mix64(c.seed, bench::kHybridSalt);
  train_logvar_correction(b.soc, flat, lc);
  const auto abl = hybrid_control(flat);
  const auto curves = l2_error_curves(b.soc, *ref, {hyb.get(), &gs, abl.get()}, c.sim.l2_batch, c.problem.steps,
                                      mix64(c.seed, bench::kL2Salt));
  const auto& h = curves[0];
  const auto& g = curves[1];
  const auto& a = curves[2];
  int above = 0, after = 0;
  for (Eigen::Index k = 0; k < h.curve.size(); ++k)
    if (h.time_grid[k] > t_cut) {
      ++after;
      if (!(h.curve[k] < g.curve[k])) ++above;
    }
  return {h.average <= g.average && h.average <= a.average && above == 0 && after > 0,
          fmtf("avg L2 hybrid %.4e, ground %.4e, correction only %.4e; t_cut %.3f, %d of %d grid times after t_cut "
               "not below ground",
               h.average, g.average, a.average, t_cut, above, after)};
}

// 9. MALA moments and small-step acceptance
Outcome mala() {
  const double beta = 1.0;
  auto E = std::make_shared<QuadraticField>(0.5 * Mat::Identity(2, 2));
  auto s = make_sampler(65536, 2, 11);
  mala_warmup(s, *E, beta, 1000);
  mala_step(s, *E, beta, 100);
  double worst = 0;
  for (int i = 0; i < 2; ++i) {
    const Eigen::ArrayXd c = s.chains.col(i).array() - s.chains.col(i).mean();
    worst = std::max(worst, std::abs((c * c).mean() * 2 * beta - 1));
  }
  auto s2 = make_sampler(1000, 1, 3, 1e-5);
  mala_step(s2, *well(1), beta, 100);
  return {worst <= 0.02 && s2.acceptance_rate >= 0.999,
          fmtf("max variance deviation %.2f%%, acceptance at dt=1e-5 %.5f", 100 * worst, s2.acceptance_rate)};
}

// 10. opinion benchmark: learned ground-state control beats u = 0
Outcome opinion_sanity() {
  auto c = bench::lookup("opinion");
  c.method = bench::Method::eigf_learned;
  const auto learned = bench::execute(c);
  c.method = bench::Method::zero_control;
  const auto zero = bench::execute(c);
  return {c.sim.batch == 65536 && learned.objective.mean < zero.objective.mean,
          fmtf("N=%zu: learned %.3f +- %.3f, zero %.3f +- %.3f", c.sim.batch, learned.objective.mean,
               learned.objective.std_error, zero.objective.mean, zero.objective.std_error)};
}

// 11. reruns reproduce metrics byte for byte
Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "eigensoc_acceptance";
  fs::remove_all(dir);
  std::vector<bench::BenchmarkConfig> cs;
  cs.push_back(bench::lookup("quadratic-anisotropic"));
  cs.back().method = bench::Method::eigf_exact;
  cs.push_back(bench::lookup("double-well"));
  cs.push_back(bench::lookup("ring"));
  cs.back().method = bench::Method::eigf_learned;
  cs.push_back(bench::lookup("opinion"));
  int same = 0;
  std::string names;
  for (auto& c : cs) {
    bench::apply_smoke(c);
    c.seed = 7;
    bench::run(c, dir / (c.name + "-a"));
    bench::run(c, dir / (c.name + "-b"));
    const auto a = bench::read_file(dir / (c.name + "-a") / "metrics.txt");
    const auto b = bench::read_file(dir / (c.name + "-b") / "metrics.txt");
    if (a == b && !a.empty()) ++same;
    names += (names.empty() ? "" : ", ") + c.name + "/" + bench::to_string(c.method);
  }
  fs::remove_all(dir);
  return {same == int(cs.size()), fmtf("%d of %zu smoke reruns byte-identical (%s)", same, cs.size(), names.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"harmonic oscillator spectrum", harmonic_spectrum},
      {"closed-form LQR vs Riccati", lqr_vs_riccati},
      {"reweighting identities", reweighting_identities},
      {"Dirichlet-form symmetry", dirichlet_symmetry},
      {"semigroup PDE residual", semigroup_residual},
      {"spectral decay law", spectral_decay},
      {"loss ordering", loss_ordering},
      {"hybrid improvement", hybrid_improvement},
      {"MALA correctness", mala},
      {"opinion benchmark sanity", opinion_sanity},
      {"determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
