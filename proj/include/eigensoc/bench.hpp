#pragma once

#include "eigenlearn.hpp"
#include "grid_ops.hpp"
#include "oscillator.hpp"
#include "riccati.hpp"
#include "simulate.hpp"

#include <json.hpp>

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace eigensoc::bench {

using json = nlohmann::ordered_json;

inline constexpr int kMetricsSchema = 1;
inline constexpr const char* kToolVersion = "1.0.0";

enum class Method { riccati, eigf_exact, eigf_grid, eigf_learned, hybrid, zero_control };

inline const std::vector<std::pair<Method, const char*>>& method_names() {
  static const std::vector<std::pair<Method, const char*>> m{
      {Method::riccati, "riccati"},           {Method::eigf_exact, "eigf-exact"}, {Method::eigf_grid, "eigf-grid"},
      {Method::eigf_learned, "eigf-learned"}, {Method::hybrid, "hybrid"},         {Method::zero_control, "zero-control"}};
  return m;
}

inline const char* to_string(Method m) {
  for (const auto& [k, v] : method_names())
    if (k == m) return v;
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  std::string all;
  for (const auto& [k, v] : method_names()) {
    if (s == v) return k;
    all += all.empty() ? v : std::string(", ") + v;
  }
  throw Error(ErrorKind::config, "unknown method '" + s + "' (available: " + all + ")");
}

// ---- configuration ----------------------------------------------------------

struct ProblemParams {
  std::string kind;     // quadratic | double-well | ring | opinion
  std::string variant;  // quadratic only: isotropic | anisotropic | repulsive
  int dim = 1;
  double beta = 1.0;
  double horizon = 1.0;
  int steps = 100;      // Euler steps over [0, T]
  double q_scale = 0.5;  // quadratic terminal matrix q I
  std::vector<double> kappa, nu;
  double alpha = 1.0, radius = 1.0;
  double gamma = 0.1, l_diag = 0.5, l_off = 0.25;
  std::vector<double> x0_mean, x0_sd;  // empty sd: point mass
};

// Box and resolution per grid axis.
struct GridParams {
  double lo = -3.0, hi = 3.0;
  int n = 2000;
  int ref_modes = 24;
};

struct SimParams {
  std::size_t batch = 65536;    // objective
  std::size_t l2_batch = 4096;  // L2 error paths
};

struct LearnParams {
  long iterations = 20000;
  std::size_t batch = 4096;
  double learning_rate = 1e-3;
  long min_phase1 = 5000;
  int n_centers = 24;
  int mcmc_steps = 5;
  int warmup_steps = 1000;
  double step_dt = 0.01;
  std::string loss = "relative";
};

struct HybridParams {
  long iterations = 300;
  std::size_t batch = 512;
  double learning_rate = 3e-3;
  int refresh_every = 100;
  int n_time = 1;
  int n_centers = 0;
  double epsilon = 0.0;  // 0: the default threshold, T_cut = T - 1
  double active_tol = 1e-6;
  int spectral_modes = 64;  // modes scanned for the first active one
};

struct BenchmarkConfig {
  std::string name;
  ProblemParams problem;
  Method method = Method::zero_control;
  int modes = 8;  // eigenfunction expansion length
  GridParams grid;
  SimParams sim;
  LearnParams learn;
  HybridParams hybrid;
  std::uint64_t seed = 0;
  bool smoke = false;
  std::vector<std::string> assumptions;
};

inline json to_json(const BenchmarkConfig& c) {
  const auto& p = c.problem;
  json j;
  j["name"] = c.name;
  j["method"] = to_string(c.method);
  j["seed"] = c.seed;
  j["smoke"] = c.smoke;
  j["modes"] = c.modes;
  j["problem"] = {{"kind", p.kind},       {"variant", p.variant}, {"dim", p.dim},       {"beta", p.beta},
                  {"horizon", p.horizon}, {"steps", p.steps},     {"q_scale", p.q_scale}, {"kappa", p.kappa},
                  {"nu", p.nu},           {"alpha", p.alpha},     {"radius", p.radius}, {"gamma", p.gamma},
                  {"l_diag", p.l_diag},   {"l_off", p.l_off},     {"x0_mean", p.x0_mean}, {"x0_sd", p.x0_sd}};
  j["grid"] = {{"lo", c.grid.lo}, {"hi", c.grid.hi}, {"n", c.grid.n}, {"ref_modes", c.grid.ref_modes}};
  j["simulation"] = {{"batch", c.sim.batch}, {"l2_batch", c.sim.l2_batch}};
  const auto& l = c.learn;
  j["training"] = {{"iterations", l.iterations}, {"batch", l.batch},           {"learning_rate", l.learning_rate},
                   {"min_phase1", l.min_phase1}, {"n_centers", l.n_centers},   {"mcmc_steps", l.mcmc_steps},
                   {"warmup_steps", l.warmup_steps}, {"step_dt", l.step_dt}, {"loss", l.loss}};
  const auto& h = c.hybrid;
  j["hybrid"] = {{"iterations", h.iterations},       {"batch", h.batch},         {"learning_rate", h.learning_rate},
                 {"refresh_every", h.refresh_every}, {"n_time", h.n_time},       {"n_centers", h.n_centers},
                 {"epsilon", h.epsilon},             {"active_tol", h.active_tol}, {"spectral_modes", h.spectral_modes}};
  j["assumptions"] = c.assumptions;
  return j;
}

namespace detail {
template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("config field '") + key + "': " + e.what());
  }
}
}  // namespace detail

inline BenchmarkConfig from_json(const json& j) {
  using detail::read;
  BenchmarkConfig c;
  read(j, "name", c.name);
  std::string m = "zero-control";
  read(j, "method", m);
  c.method = parse_method(m);
  read(j, "seed", c.seed);
  read(j, "smoke", c.smoke);
  read(j, "modes", c.modes);
  if (j.contains("problem")) {
    const auto& q = j["problem"];
    auto& p = c.problem;
    read(q, "kind", p.kind);
    read(q, "variant", p.variant);
    read(q, "dim", p.dim);
    read(q, "beta", p.beta);
    read(q, "horizon", p.horizon);
    read(q, "steps", p.steps);
    read(q, "q_scale", p.q_scale);
    read(q, "kappa", p.kappa);
    read(q, "nu", p.nu);
    read(q, "alpha", p.alpha);
    read(q, "radius", p.radius);
    read(q, "gamma", p.gamma);
    read(q, "l_diag", p.l_diag);
    read(q, "l_off", p.l_off);
    read(q, "x0_mean", p.x0_mean);
    read(q, "x0_sd", p.x0_sd);
  }
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    read(g, "lo", c.grid.lo);
    read(g, "hi", c.grid.hi);
    read(g, "n", c.grid.n);
    read(g, "ref_modes", c.grid.ref_modes);
  }
  if (j.contains("simulation")) {
    read(j["simulation"], "batch", c.sim.batch);
    read(j["simulation"], "l2_batch", c.sim.l2_batch);
  }
  if (j.contains("training")) {
    const auto& t = j["training"];
    auto& l = c.learn;
    read(t, "iterations", l.iterations);
    read(t, "batch", l.batch);
    read(t, "learning_rate", l.learning_rate);
    read(t, "min_phase1", l.min_phase1);
    read(t, "n_centers", l.n_centers);
    read(t, "mcmc_steps", l.mcmc_steps);
    read(t, "warmup_steps", l.warmup_steps);
    read(t, "step_dt", l.step_dt);
    read(t, "loss", l.loss);
  }
  if (j.contains("hybrid")) {
    const auto& t = j["hybrid"];
    auto& h = c.hybrid;
    read(t, "iterations", h.iterations);
    read(t, "batch", h.batch);
    read(t, "learning_rate", h.learning_rate);
    read(t, "refresh_every", h.refresh_every);
    read(t, "n_time", h.n_time);
    read(t, "n_centers", h.n_centers);
    read(t, "epsilon", h.epsilon);
    read(t, "active_tol", h.active_tol);
    read(t, "spectral_modes", h.spectral_modes);
  }
  read(j, "assumptions", c.assumptions);
  return c;
}

inline GroundLoss parse_loss(const std::string& s) {
  for (auto l : {GroundLoss::relative, GroundLoss::pinn, GroundLoss::deep_ritz, GroundLoss::variational})
    if (s == to_string(l)) return l;
  throw Error(ErrorKind::config, "unknown training loss '" + s + "'");
}

// ---- registry ---------------------------------------------------------------

namespace detail {
inline BenchmarkConfig quadratic(const std::string& variant) {
  BenchmarkConfig c;
  c.name = "quadratic-" + variant;
  auto& p = c.problem;
  p.kind = "quadratic";
  p.variant = variant;
  p.dim = 20;
  p.beta = 1.0;
  p.horizon = 4.0;
  p.steps = 200;
  p.q_scale = 0.5;
  p.x0_mean.assign(20, 0.0);
  p.x0_sd.assign(20, std::sqrt(0.5));
  c.method = Method::riccati;
  c.grid = {-6.0, 6.0, 1200, 24};
  c.learn.n_centers = 0;
  return c;
}
}  // namespace detail

inline std::vector<BenchmarkConfig> registry() {
  std::vector<BenchmarkConfig> r;
  r.push_back(detail::quadratic("isotropic"));
  r.push_back(detail::quadratic("anisotropic"));
  r.push_back(detail::quadratic("repulsive"));
  {
    BenchmarkConfig c;
    c.name = "double-well";
    auto& p = c.problem;
    p.kind = "double-well";
    p.dim = 10;
    p.horizon = 4.0;
    p.steps = 400;
    p.kappa = {5, 5, 5, 1, 1, 1, 1, 1, 1, 1};
    p.nu = {3, 3, 3, 1, 1, 1, 1, 1, 1, 1};
    p.x0_mean.assign(10, 0.0);
    c.method = Method::hybrid;
    c.grid = {-3.0, 3.0, 2000, 24};
    c.learn.n_centers = 0;
    c.assumptions = {"initial state x0 = 0 (not stated for this benchmark)"};
    r.push_back(c);
  }
  {
    BenchmarkConfig c;
    c.name = "ring";
    auto& p = c.problem;
    p.kind = "ring";
    p.dim = 2;
    p.horizon = 5.0;
    p.steps = 500;
    p.alpha = 1.0;
    p.radius = 5.0 / std::sqrt(2.0);
    p.x0_mean = {p.radius, 0.0};
    c.method = Method::eigf_grid;
    c.grid = {-6.0, 6.0, 151, 16};
    c.learn.iterations = 7500;
    c.learn.n_centers = 32;
    c.learn.step_dt = 1e-3;
    r.push_back(c);
  }
  {
    BenchmarkConfig c;
    c.name = "opinion";
    auto& p = c.problem;
    p.kind = "opinion";
    p.dim = 10;
    p.horizon = 10.0;
    p.steps = 200;
    p.gamma = 0.1;
    p.l_diag = 0.5;
    p.l_off = 0.25;
    p.x0_mean.assign(10, 0.0);
    c.method = Method::eigf_learned;
    c.learn.iterations = 6000;
    c.learn.batch = 1024;
    c.learn.n_centers = 0;
    c.assumptions = {"K = 200 Euler steps (not stated for this benchmark)",
                     "initial state x0 = 0 (not stated for this benchmark)"};
    r.push_back(c);
  }
  return r;
}

inline BenchmarkConfig lookup(const std::string& name) {
  std::string all;
  for (auto& c : registry()) {
    if (c.name == name) return c;
    all += all.empty() ? c.name : ", " + c.name;
  }
  throw Error(ErrorKind::config, "unknown benchmark '" + name + "' (available: " + all + ")");
}

// Reduced budgets for end-to-end checks.
inline void apply_smoke(BenchmarkConfig& c) {
  c.smoke = true;
  c.sim.batch = 256;
  c.sim.l2_batch = 256;
  c.learn.iterations = 300;
  c.learn.min_phase1 = 200;
  c.learn.batch = 256;
  c.learn.warmup_steps = 200;
  c.hybrid.iterations = 20;
  c.hybrid.batch = 128;
  c.grid.ref_modes = std::min(c.grid.ref_modes, 16);
}

inline void validate(const BenchmarkConfig& c) {
  lookup(c.name);
  const auto& p = c.problem;
  auto need = [](bool ok, const std::string& what) { require(ok, ErrorKind::config, "config: " + what); };
  need(p.kind == "quadratic" || p.kind == "double-well" || p.kind == "ring" || p.kind == "opinion",
       "unknown problem kind '" + p.kind + "'");
  if (p.kind == "quadratic")
    need(p.variant == "isotropic" || p.variant == "anisotropic" || p.variant == "repulsive",
         "unknown quadratic variant '" + p.variant + "'");
  need(p.dim >= 1 && p.beta > 0 && p.horizon > 0 && p.steps >= 1, "dim, beta, horizon and steps must be positive");
  need(int(p.x0_mean.size()) == p.dim, "x0_mean must have dim entries");
  need(p.x0_sd.empty() || int(p.x0_sd.size()) == p.dim, "x0_sd must be empty or have dim entries");
  if (p.kind == "double-well") need(int(p.kappa.size()) == p.dim && int(p.nu.size()) == p.dim, "kappa and nu need dim entries");
  if (p.kind == "ring") need(p.dim == 2 && p.radius > 0, "ring needs dim 2 and radius > 0");
  need(c.modes >= 1, "modes must be >= 1");
  need(c.grid.hi > c.grid.lo && c.grid.n >= 8 && c.grid.ref_modes >= 1, "grid box and resolution");
  need(c.sim.batch >= 2 && c.sim.l2_batch >= 1, "simulation batch sizes");
  need(c.learn.iterations > 0 && c.learn.batch >= 2 && c.learn.learning_rate > 0 && c.learn.min_phase1 >= 0 &&
           c.learn.n_centers >= 0 && c.learn.mcmc_steps > 0 && c.learn.warmup_steps >= 0 && c.learn.step_dt > 0,
       "training settings");
  parse_loss(c.learn.loss);
  const auto& h = c.hybrid;
  need(h.iterations > 0 && h.batch >= 2 && h.learning_rate > 0 && h.refresh_every > 0 && h.n_time >= 1 &&
           h.n_centers >= 0 && h.epsilon >= 0 && h.epsilon < 1 && h.active_tol > 0 && h.spectral_modes >= 2,
       "hybrid settings");
}

// A registry name, or a JSON file with "name" plus overrides of that entry.
inline BenchmarkConfig load_config(const std::string& name_or_path) {
  if (!std::filesystem::exists(name_or_path)) return lookup(name_or_path);
  std::ifstream in(name_or_path);
  require(bool(in), ErrorKind::io, "cannot read config " + name_or_path);
  json patch;
  try {
    patch = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, "config " + name_or_path + ": " + e.what());
  }
  require(patch.is_object() && patch.contains("name") && patch["name"].is_string(), ErrorKind::config,
          "config " + name_or_path + ": missing \"name\"");
  json base = to_json(lookup(patch["name"].get<std::string>()));
  base.merge_patch(patch);
  return from_json(base);
}

// ---- problem assembly -------------------------------------------------------

// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
// of R's diagonal moved into Q.
inline Mat random_orthogonal(SplitMix64& g, int d) {
  Mat G(d, d);
  for (int j = 0; j < d; ++j)
    for (int i = 0; i < d; ++i) fill_normal(g, &G(i, j), 1);
  Eigen::HouseholderQR<Mat> qr(G);
  Mat Q = qr.householderQ() * Mat::Identity(d, d);
  const Mat R = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j)
    if (R(j, j) < 0) Q.col(j) *= -1.0;
  return Q;
}

struct Built {
  SocProblem soc;
  std::optional<QuadraticProblem> quad;
  // separable problems: per-coordinate E_i, f_i, g_i
  std::vector<Poly1D> E1, f1, g1;
  bool separable() const { return !E1.empty(); }
};

inline constexpr std::uint64_t kMatrixSalt = 0xa150;
inline constexpr std::uint64_t kObjectiveSalt = 0x0b1e;
inline constexpr std::uint64_t kL2Salt = 0x12e7;
inline constexpr std::uint64_t kTrainSalt = 0x7a17;
inline constexpr std::uint64_t kHybridSalt = 0x4b1d;

inline Built build_problem(const BenchmarkConfig& c) {
  const auto& p = c.problem;
  const int d = p.dim;
  Built b;
  const Vec m = Eigen::Map<const Vec>(p.x0_mean.data(), d);
  InitialLaw p0 = p.x0_sd.empty() ? InitialLaw::point(m)
                                  : InitialLaw::gaussian(m, Eigen::Map<const Vec>(p.x0_sd.data(), d));
  if (p.kind == "quadratic") {
    QuadraticProblem q;
    q.beta = p.beta;
    q.horizon = p.horizon;
    q.Q = p.q_scale * Mat::Identity(d, d);
    if (p.variant == "anisotropic") {
      SplitMix64 g(mix64(c.seed, kMatrixSalt));
      const Vec a = normal_vec(g, d), pp = normal_vec(g, d);
      const Mat U = random_orthogonal(g, d);
      q.A = a.array().exp().matrix().asDiagonal();
      q.P = U * pp.array().exp().matrix().asDiagonal() * U.transpose();
      q.P = 0.5 * (q.P + q.P.transpose());
    } else {
      const double s = p.variant == "repulsive" ? -1.0 : 1.0;
      q.A = s * Mat::Identity(d, d);
      q.P = Mat::Identity(d, d);
      for (int i = 0; i < d; ++i) {
        b.E1.push_back(quadratic_poly(0.5 * s));
        b.f1.push_back(quadratic_poly(1.0));
        b.g1.push_back(quadratic_poly(p.q_scale));
      }
    }
    b.soc = q.to_soc(std::move(p0));
    b.quad = q;
  } else if (p.kind == "double-well") {
    for (int i = 0; i < d; ++i) {
      b.E1.push_back(double_well_poly(p.kappa[std::size_t(i)]));
      b.f1.push_back(double_well_poly(p.nu[std::size_t(i)]));
      b.g1.push_back(Poly1D{{0.0}});
    }
    b.soc = SocProblem(d, std::make_shared<SeparableField>(b.E1), std::make_shared<SeparableField>(b.f1),
                       zero_field(d), p.beta, p.horizon, std::move(p0));
  } else if (p.kind == "ring") {
    b.soc = SocProblem(2, std::make_shared<RingField>(2, p.alpha, p.radius),
                       std::make_shared<LinearField>(Vec::Unit(2, 0) * 2.0), zero_field(2), p.beta, p.horizon,
                       std::move(p0));
  } else {
    // drift (L - I - gamma I) x = -grad E with E = x^T M x / 2, M = (1 + gamma) I - L
    Mat M = (1.0 + p.gamma - p.l_diag) * Mat::Identity(d, d);
    for (int i = 0; i + 1 < d; ++i) M(i, i + 1) = M(i + 1, i) = -p.l_off;
    std::vector<Poly1D> f(std::size_t(d), double_well_poly(1.0));
    b.soc = SocProblem(d, std::make_shared<QuadraticField>(0.5 * M), std::make_shared<SeparableField>(f), zero_field(d),
                       p.beta, p.horizon, std::move(p0));
  }
  return b;
}

// ---- spectra ----------------------------------------------------------------

inline bool use_cache() {
  const char* e = std::getenv("EIGENSOC_CACHE_DIR");
  return e && *e;
}

inline std::string cache_key(const std::string& what) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : what) h = (h ^ ch) * 0x100000001b3ULL;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

// Schroedinger-space 1-D system for coordinate i, cached when enabled.
inline GridPtr coordinate_system(const Built& b, const BenchmarkConfig& c, int i, int modes, bool cache) {
  const auto& E = b.E1[std::size_t(i)];
  const auto& f = b.f1[std::size_t(i)];
  std::ostringstream key;
  key.precision(17);
  key << "1d E";
  for (double v : E.c) key << ' ' << v;
  key << " f";
  for (double v : f.c) key << ' ' << v;
  key << " beta " << c.problem.beta << " box " << c.grid.lo << ' ' << c.grid.hi << ' ' << c.grid.n << " k " << modes;
  auto compute = [&] {
    return GridPtr(schrodinger_fd_1d(effective_potential_1d(E, f, c.problem.beta), Grid1D{c.grid.lo, c.grid.hi, c.grid.n},
                                     modes));
  };
  return cache ? cached_grid_system("grid1d-" + cache_key(key.str()), compute) : compute();
}

inline GridPtr ring_system(const Built& b, const BenchmarkConfig& c, int modes, bool cache) {
  std::ostringstream key;
  key.precision(17);
  key << "ring alpha " << c.problem.alpha << " R " << c.problem.radius << " beta " << c.problem.beta << " box "
      << c.grid.lo << ' ' << c.grid.hi << ' ' << c.grid.n << " k " << modes;
  const SocProblem& p = b.soc;
  auto compute = [&] {
    auto v = [&p](double x, double y) {
      Vec z(2);
      z << x, y;
      return effective_potential(p, z);
    };
    Lanczos2DOptions opt;
    opt.gauge = [&p](double x, double y) {
      Vec z(2);
      z << x, y;
      return p.beta * p.energy->value(z);
    };
    const Grid1D g{c.grid.lo, c.grid.hi, c.grid.n};
    return GridPtr(schrodinger_fd_2d(v, g, g, modes, opt));
  };
  return cache ? cached_grid_system("grid2d-" + cache_key(key.str()), compute) : compute();
}

// One mode count per system, so every consumer shares a cache entry.
inline int system_modes(const BenchmarkConfig& c) {
  const int m = std::max({c.modes, c.grid.ref_modes, std::min(c.hybrid.spectral_modes, c.grid.ref_modes)});
  return c.problem.kind == "ring" ? std::min(m, 16) : m;
}

inline GridPtr coordinate_L(const Built& b, const BenchmarkConfig& c, int i, bool cache) {
  return to_L_eigenfunctions(coordinate_system(b, c, i, system_modes(c), cache),
                             std::make_shared<SeparableField>(std::vector<Poly1D>{b.E1[std::size_t(i)]}), c.problem.beta);
}

// Separable problem: the value function splits over coordinates, so the
// expansion is a product of 1-D expansions with `modes` terms each.
inline ControlPtr separable_eigf_control(const Built& b, const BenchmarkConfig& c, int modes, bool cache) {
  std::vector<ControlPtr> per;
  for (int i = 0; i < b.soc.dim; ++i) {
    auto L = coordinate_L(b, c, i, cache);
    SeparableField gi(std::vector<Poly1D>{b.g1[std::size_t(i)]});
    per.push_back(eigf_control<GridEigenSystem>(L, gi, c.problem.beta, c.problem.horizon, std::size_t(modes)));
  }
  return std::make_shared<CoordinateControl>(std::move(per));
}

inline ControlPtr ring_eigf_control(const Built& b, const BenchmarkConfig& c, int modes, bool cache) {
  auto L = to_L_eigenfunctions(ring_system(b, c, system_modes(c), cache), b.soc.energy, c.problem.beta);
  return eigf_control<GridEigenSystem>(L, *b.soc.terminal_cost, c.problem.beta, c.problem.horizon, std::size_t(modes));
}

// ---- pipeline ---------------------------------------------------------------

struct RunResult {
  ObjectiveEstimate objective;
  std::string reference = "none";
  std::optional<L2Curve> l2;
  std::vector<std::pair<std::string, double>> extra;  // method diagnostics
};

inline ControlPtr reference_control(const Built& b, const BenchmarkConfig& c, std::string& name, bool cache) {
  if (b.quad) {
    name = "riccati";
    return std::make_shared<RiccatiControl>(
        std::make_shared<RiccatiSolution>(riccati_solve(*b.quad, 20 * c.problem.steps)));
  }
  if (c.problem.kind == "double-well") {
    name = "grid-eigf";
    return separable_eigf_control(b, c, c.grid.ref_modes, cache);
  }
  // the ring grid system cannot resolve phi_0 far from its peak, so the ring
  // has no reference
  name = "none";
  return nullptr;
}

inline TrainConfig train_config(const BenchmarkConfig& c) {
  TrainConfig t;
  const auto& l = c.learn;
  t.learning_rate = l.learning_rate;
  t.iterations = l.iterations;
  t.batch = l.batch;
  t.seed = mix64(c.seed, kTrainSalt);
  t.min_phase1 = std::min(l.min_phase1, l.iterations);
  t.n_centers = l.n_centers;
  t.mcmc_steps = l.mcmc_steps;
  t.warmup_steps = l.warmup_steps;
  t.step_dt = l.step_dt;
  t.phase2_loss = parse_loss(l.loss);
  t.train_excited = false;
  t.importance = c.problem.kind == "quadratic" && c.problem.variant == "repulsive";
  if (c.smoke) {
    t.max_phase1 = t.iterations / 2;
    t.force_switch = true;
  }
  return t;
}

// Ground state, lambda_0 and the first active excited eigenvalue for the hybrid.
struct Spectrum {
  GroundStatePtr phi0;
  double lambda0 = 0.0, lambda1 = 0.0;
};

inline Spectrum hybrid_spectrum(const Built& b, const BenchmarkConfig& c, bool cache) {
  const double beta = c.problem.beta, tol = c.hybrid.active_tol;
  const auto k = std::size_t(c.hybrid.spectral_modes);
  Spectrum s;
  if (b.quad) {
    auto sys = lqr_eigensystem(*b.quad, k);
    const Vec coef = lqr_series_coefficients(*sys, *b.soc.terminal_cost, k);
    s.phi0 = sys;
    s.lambda0 = sys->eigenvalue(0);
    s.lambda1 = sys->eigenvalue(first_active_mode(coef, tol));
    return s;
  }
  if (b.separable()) {
    // the first active tensor mode excites one coordinate to its first active mode
    std::vector<GridPtr> per;
    double gap = INFINITY;
    const int m = std::min(c.hybrid.spectral_modes, system_modes(c));
    for (int i = 0; i < b.soc.dim; ++i) {
      auto L = coordinate_L(b, c, i, cache);
      SeparableField gi(std::vector<Poly1D>{b.g1[std::size_t(i)]});
      const Vec coef = eigf_coefficients(*L, gi, beta, std::size_t(m));
      gap = std::min(gap, L->eigenvalue(first_active_mode(coef, tol)) - L->eigenvalue(0));
      per.push_back(L);
    }
    auto T = tensor_eigensystem(std::move(per), 2);
    s.phi0 = T;
    s.lambda0 = T->eigenvalue(0);
    s.lambda1 = s.lambda0 + gap;
    return s;
  }
  if (c.problem.kind == "ring") {
    const int m = std::min(c.hybrid.spectral_modes, system_modes(c));
    auto L = to_L_eigenfunctions(ring_system(b, c, system_modes(c), cache), b.soc.energy, beta);
    const Vec coef = eigf_coefficients(*L, *b.soc.terminal_cost, beta, std::size_t(m));
    s.phi0 = L;
    s.lambda0 = L->eigenvalue(0);
    s.lambda1 = L->eigenvalue(first_active_mode(coef, tol));
    return s;
  }
  throw Error(ErrorKind::config, "hybrid: no grid or closed-form spectrum for '" + c.name + "'");
}

inline ControlPtr method_control(const Built& b, const BenchmarkConfig& c, RunResult& out, bool cache) {
  const auto& p = c.problem;
  switch (c.method) {
    case Method::zero_control:
      return std::make_shared<ZeroControl>(p.dim);
    case Method::riccati:
      require(b.quad.has_value(), ErrorKind::config, "riccati: '" + c.name + "' is not a quadratic problem");
      return std::make_shared<RiccatiControl>(std::make_shared<RiccatiSolution>(riccati_solve(*b.quad, 20 * p.steps)));
    case Method::eigf_exact: {
      require(b.quad.has_value(), ErrorKind::config, "eigf-exact: '" + c.name + "' has no closed-form eigensystem");
      auto sys = lqr_eigensystem(*b.quad, std::size_t(c.modes));
      out.extra.push_back({"lambda0", sys->eigenvalue(0)});
      return lqr_series_control(sys, *b.soc.terminal_cost, p.horizon, std::size_t(c.modes));
    }
    case Method::eigf_grid:
      if (b.separable()) return separable_eigf_control(b, c, c.modes, cache);
      if (p.kind == "ring") return ring_eigf_control(b, c, c.modes, cache);
      throw Error(ErrorKind::config, "eigf-grid: '" + c.name + "' is neither separable nor two-dimensional");
    case Method::eigf_learned: {
      const auto r = train_two_phase(b.soc, train_config(c));
      out.extra.push_back({"lambda0", r.lambda0});
      out.extra.push_back({"phase1_iterations", double(r.diag.phase1_iterations)});
      out.extra.push_back({"forced_switch", r.diag.forced_switch ? 1.0 : 0.0});
      return std::make_shared<GroundStateControl>(r.phi0, p.beta);
    }
    case Method::hybrid: {
      const auto s = hybrid_spectrum(b, c, cache);
      HybridControl h;
      h.phi0 = s.phi0;
      h.lambda0 = s.lambda0;
      h.lambda1 = s.lambda1;
      h.beta = p.beta;
      h.horizon = p.horizon;
      const double eps =
          c.hybrid.epsilon > 0 ? c.hybrid.epsilon : default_tcut_epsilon(s.lambda0, s.lambda1, p.beta);
      h.t_cut = choose_tcut(s.lambda0, s.lambda1, p.beta, eps, p.horizon);
      std::vector<Vec> pts;
      if (c.hybrid.n_centers > 0) {
        // radial centres from ground-state paths at t_cut
        GroundStateControl g(s.phi0, p.beta);
        SimOptions o;
        o.store_noise = false;
        o.store_states = false;
        const auto k_pre = std::max(1, int(std::lround(p.steps * h.t_cut / p.horizon)));
        const Mat X = h.t_cut > 0 ? eigensoc::detail::em_drive(b.soc, g, 0.0, h.t_cut, initial_states(b.soc, 1024, c.seed), k_pre,
                                                     mix64(c.seed, kHybridSalt), 1.0,
                                                     [](int, double, const Mat&, const Mat*, const Mat*) {})
                                  : initial_states(b.soc, 1024, c.seed);
        for (Eigen::Index n = 0; n < X.rows(); ++n) pts.push_back(X.row(n).transpose());
      } else {
        pts.push_back(Vec::Zero(p.dim));
      }
      h.correction =
          std::make_shared<CorrectionModel>(make_basis(pts, c.hybrid.n_centers, true), c.hybrid.n_time, p.horizon, h.t_cut);
      LogVarConfig lc;
      lc.iterations = c.hybrid.iterations;
      lc.batch = c.hybrid.batch;
      lc.learning_rate = c.hybrid.learning_rate;
      lc.refresh_every = c.hybrid.refresh_every;
      lc.K = p.steps;
      lc.seed = mix64(c.seed, kHybridSalt);
      const auto tr = train_logvar_correction(b.soc, h, lc);
      out.extra.push_back({"lambda0", s.lambda0});
      out.extra.push_back({"lambda_active", s.lambda1});
      out.extra.push_back({"t_cut", h.t_cut});
      out.extra.push_back({"logvar_loss_final", tr.loss.back()});
      return hybrid_control(h);
    }
  }
  throw Error(ErrorKind::config, "unknown method");
}

// Objective and L2 curve; the simulation seeds depend on the run seed only,
// so methods on the same (config, seed) see the same noise.
inline RunResult execute(const BenchmarkConfig& c) {
  validate(c);
  const bool cache = use_cache();
  const Built b = build_problem(c);
  RunResult out;
  const ControlPtr u = method_control(b, c, out, cache);
  const int K = c.problem.steps;
  out.objective = control_objective(b.soc, *u, c.sim.batch, K, mix64(c.seed, kObjectiveSalt));
  const ControlPtr ref = reference_control(b, c, out.reference, cache);
  if (ref) out.l2 = l2_error_curves(b.soc, *ref, {u.get()}, c.sim.l2_batch, K, mix64(c.seed, kL2Salt)).front();
  return out;
}

// ---- metrics file -----------------------------------------------------------
// schema=1
// [scalars]
// key=value            one per line, fixed order, doubles as %.17g
// [curve]
// t,l2_error
// <t>,<value>          K + 1 rows, empty when there is no reference

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Metrics {
  int schema = kMetricsSchema;
  std::vector<std::pair<std::string, std::string>> scalars;
  std::vector<double> t, l2;

  const std::string* find(const std::string& k) const {
    for (const auto& [a, b] : scalars)
      if (a == k) return &b;
    return nullptr;
  }
  std::string get(const std::string& k) const {
    const auto* v = find(k);
    require(v != nullptr, ErrorKind::io, "metrics: missing scalar '" + k + "'");
    return *v;
  }
  double number(const std::string& k) const { return std::strtod(get(k).c_str(), nullptr); }
};

inline Metrics make_metrics(const BenchmarkConfig& c, const RunResult& r) {
  Metrics m;
  auto& s = m.scalars;
  s.push_back({"benchmark", c.name});
  s.push_back({"method", to_string(c.method)});
  s.push_back({"seed", std::to_string(c.seed)});
  s.push_back({"smoke", c.smoke ? "1" : "0"});
  s.push_back({"dim", std::to_string(c.problem.dim)});
  s.push_back({"horizon", fmt(c.problem.horizon)});
  s.push_back({"steps", std::to_string(c.problem.steps)});
  s.push_back({"batch", std::to_string(c.sim.batch)});
  s.push_back({"objective_mean", fmt(r.objective.mean)});
  s.push_back({"objective_stderr", fmt(r.objective.std_error)});
  s.push_back({"reference", r.reference});
  s.push_back({"l2_average", fmt(r.l2 ? r.l2->average : NAN)});
  for (const auto& [k, v] : r.extra) s.push_back({k, fmt(v)});
  if (r.l2) {
    m.t.assign(r.l2->time_grid.data(), r.l2->time_grid.data() + r.l2->time_grid.size());
    m.l2.assign(r.l2->curve.data(), r.l2->curve.data() + r.l2->curve.size());
  }
  return m;
}

inline std::string render(const Metrics& m) {
  std::string o = "schema=" + std::to_string(m.schema) + "\n[scalars]\n";
  for (const auto& [k, v] : m.scalars) o += k + "=" + v + "\n";
  o += "[curve]\nt,l2_error\n";
  for (std::size_t i = 0; i < m.t.size(); ++i) o += fmt(m.t[i]) + "," + fmt(m.l2[i]) + "\n";
  return o;
}

inline Metrics parse_metrics(const std::string& text, const std::string& where) {
  std::istringstream in(text);
  std::string line;
  auto bad = [&](const std::string& what) { return Error(ErrorKind::io, where + ": " + what); };
  if (!std::getline(in, line) || line.rfind("schema=", 0) != 0) throw bad("missing schema header");
  Metrics m;
  m.schema = std::atoi(line.c_str() + 7);
  if (m.schema != kMetricsSchema)
    throw bad("schema version " + std::to_string(m.schema) + " does not match supported version " +
              std::to_string(kMetricsSchema));
  if (!std::getline(in, line) || line != "[scalars]") throw bad("missing [scalars] block");
  while (std::getline(in, line) && line != "[curve]") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw bad("malformed scalar line '" + line + "'");
    m.scalars.push_back({line.substr(0, eq), line.substr(eq + 1)});
  }
  if (line != "[curve]") throw bad("missing [curve] block");
  if (!std::getline(in, line) || line != "t,l2_error") throw bad("missing curve header");
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw bad("malformed curve row '" + line + "'");
    m.t.push_back(std::strtod(line.c_str(), nullptr));
    m.l2.push_back(std::strtod(line.c_str() + comma + 1, nullptr));
  }
  return m;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(bool(in), ErrorKind::io, "cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream o(p, std::ios::binary | std::ios::trunc);
  require(bool(o), ErrorKind::io, "cannot write " + p.string());
  o << text;
  require(bool(o), ErrorKind::io, "write failed for " + p.string());
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline json manifest(const BenchmarkConfig& c) {
  json j;
  j["tool"] = "eigensoc-bench";
  j["version"] = kToolVersion;
  j["metrics_schema"] = kMetricsSchema;
  j["config"] = to_json(c);
  j["seeds"] = {{"run", c.seed},
                {"objective", mix64(c.seed, kObjectiveSalt)},
                {"l2", mix64(c.seed, kL2Salt)},
                {"training", mix64(c.seed, kTrainSalt)},
                {"hybrid", mix64(c.seed, kHybridSalt)},
                {"matrices", mix64(c.seed, kMatrixSalt)}};
  j["assumptions"] = c.assumptions;
  j["eigen_cache"] = use_cache() ? json(cache_dir().string()) : json(nullptr);
  j["started_at"] = utc_timestamp();
  return j;
}

// Writes manifest.json and metrics.txt (error.json on failure, then rethrows).
inline Metrics run(const BenchmarkConfig& c, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  write_file(out_dir / "manifest.json", manifest(c).dump(2) + "\n");
  try {
    const Metrics m = make_metrics(c, execute(c));
    write_file(out_dir / "metrics.txt", render(m));
    return m;
  } catch (const Error& e) {
    write_file(out_dir / "error.json",
               json{{"status", "error"}, {"kind", to_string(e.kind())}, {"message", e.what()}}.dump(2) + "\n");
    throw;
  }
}

// Loads or computes every grid eigensystem the configuration uses.
inline std::vector<std::string> cache_eigensystems(const BenchmarkConfig& c) {
  validate(c);
  const Built b = build_problem(c);
  std::vector<std::string> done;
  if (b.separable()) {
    for (int i = 0; i < b.soc.dim; ++i) {
      coordinate_system(b, c, i, system_modes(c), true);
      done.push_back("coordinate " + std::to_string(i));
    }
  } else if (c.problem.kind == "ring") {
    ring_system(b, c, system_modes(c), true);
    done.push_back("ring 2-D");
  } else {
    throw Error(ErrorKind::config, "cache-eigsys: '" + c.name + "' has no grid eigensystem");
  }
  return done;
}

// ---- report -----------------------------------------------------------------

struct ReportRow {
  std::string benchmark, method;
  std::size_t runs = 0;
  double objective = 0, objective_spread = 0, stderr_mean = 0, l2 = 0, l2_spread = 0;
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

inline double spread_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

// Rows grouped by (benchmark, method) in first-seen order: mean over runs and
// the sample standard deviation across runs (seeds).
inline std::vector<ReportRow> summarize(const std::vector<Metrics>& files) {
  require(!files.empty(), ErrorKind::invalid_argument, "report: no result files");
  std::vector<ReportRow> rows;
  std::vector<std::vector<double>> obj, se, l2;
  for (const auto& m : files) {
    const auto b = m.get("benchmark"), me = m.get("method");
    std::size_t i = 0;
    while (i < rows.size() && !(rows[i].benchmark == b && rows[i].method == me)) ++i;
    if (i == rows.size()) {
      rows.push_back({b, me});
      obj.emplace_back();
      se.emplace_back();
      l2.emplace_back();
    }
    rows[i].runs++;
    obj[i].push_back(m.number("objective_mean"));
    se[i].push_back(m.number("objective_stderr"));
    l2[i].push_back(m.number("l2_average"));
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].objective = mean_of(obj[i]);
    rows[i].objective_spread = spread_of(obj[i]);
    rows[i].stderr_mean = mean_of(se[i]);
    rows[i].l2 = mean_of(l2[i]);
    rows[i].l2_spread = spread_of(l2[i]);
  }
  return rows;
}

inline std::string report_text(const std::vector<ReportRow>& rows) {
  std::vector<std::vector<std::string>> cells{
      {"benchmark", "method", "runs", "objective", "+-stderr", "spread", "l2_average", "l2_spread"}};
  auto g = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  for (const auto& r : rows)
    cells.push_back({r.benchmark, r.method, std::to_string(r.runs), g(r.objective), g(r.stderr_mean),
                     g(r.objective_spread), g(r.l2), g(r.l2_spread)});
  std::vector<std::size_t> w(cells[0].size(), 0);
  for (const auto& row : cells)
    for (std::size_t j = 0; j < row.size(); ++j) w[j] = std::max(w[j], row[j].size());
  std::string o;
  for (const auto& row : cells) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      o += row[j];
      if (j + 1 < row.size()) o += std::string(w[j] - row[j].size() + 2, ' ');
    }
    o += "\n";
  }
  return o;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string o = "benchmark,method,runs,objective,objective_stderr,objective_spread,l2_average,l2_spread\n";
  for (const auto& r : rows)
    o += r.benchmark + "," + r.method + "," + std::to_string(r.runs) + "," + fmt(r.objective) + "," +
         fmt(r.stderr_mean) + "," + fmt(r.objective_spread) + "," + fmt(r.l2) + "," + fmt(r.l2_spread) + "\n";
  return o;
}

// Per-time curves side by side: t, then one column per file that has a curve.
inline std::string curves_csv(const std::vector<Metrics>& files) {
  const Metrics* first = nullptr;
  std::string o = "t";
  for (const auto& m : files) {
    if (m.t.empty()) continue;
    if (!first) first = &m;
    require(m.t == first->t, ErrorKind::invalid_argument, "report: curves use different time grids");
    o += "," + m.get("benchmark") + "/" + m.get("method") + "/seed" + m.get("seed");
  }
  o += "\n";
  if (!first) return o;
  for (std::size_t k = 0; k < first->t.size(); ++k) {
    o += fmt(first->t[k]);
    for (const auto& m : files)
      if (!m.t.empty()) o += "," + fmt(m.l2[k]);
    o += "\n";
  }
  return o;
}

}  // namespace eigensoc::bench
