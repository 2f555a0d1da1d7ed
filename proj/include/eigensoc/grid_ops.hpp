#pragma once

#include "grid_spectral.hpp"
#include "grid_spectral_2d.hpp"

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace eigensoc {

inline GridPtr to_L_eigenfunctions(const GridPtr& sys, FieldPtr E, double beta) {
  require(sys->space() == Space::schrodinger, ErrorKind::invalid_argument,
          "to_L_eigenfunctions: system already in L-space");
  require(beta > 0, ErrorKind::invalid_argument, "to_L_eigenfunctions: beta must be > 0");
  return sys->in_L_space(std::move(E), beta);
}

// Per-coordinate transform for a separable energy sum_i E_i(x_i).
inline TensorPtr to_L_eigenfunctions(const TensorPtr& sys, const SeparableField& E, double beta, std::size_t k = 0) {
  check_dim(E.dim(), sys->dim(), "to_L_eigenfunctions");
  std::vector<GridPtr> f;
  for (int i = 0; i < sys->dim(); ++i)
    f.push_back(to_L_eigenfunctions(sys->factor(std::size_t(i)),
                                    std::make_shared<SeparableField>(std::vector<Poly1D>{E.term(i)}), beta));
  return tensor_eigensystem(std::move(f), k ? k : sys->size());
}

// Quadrature inner products <psi, phi_i> in the system's own space (L^2(dx) or
// L^2(mu)), i < k, returned as e^{shift} * scaled to survive underflow of phi_0.
struct Projection {
  double shift = 0.0;
  Vec scaled;
  Vec values() const { return std::exp(shift) * scaled; }
};

// log_psi / sign_psi give psi at node j as sign * e^{log}.
template <class LogPsi, class SignPsi>
Projection project_nodes(const GridEigenSystem& sys, std::size_t k, LogPsi log_psi, SignPsi sign_psi) {
  require(k >= 1 && k <= sys.size(), ErrorKind::invalid_argument, "project: mode count out of range");
  const std::size_t N = sys.n_nodes();
  // mu-weight e^{-2 beta E} times phi_L = e^{beta E} phi_S leaves e^{-beta E} phi_S
  Vec lw(static_cast<Eigen::Index>(N));
  for (std::size_t j = 0; j < N; ++j) lw[Eigen::Index(j)] = log_psi(j) + sys.node_log_ground_s(j) - sys.node_beta_energy(j);
  Projection p;
  p.shift = lw.maxCoeff();
  require(std::isfinite(p.shift), ErrorKind::numerical, "project: quadrature weights not finite");
  p.scaled.setZero(Eigen::Index(k));
  const auto K = Eigen::Index(k);
  for (std::size_t j = 0; j < N; ++j) {
    const double w = sign_psi(j) * sys.cell() * std::exp(lw[Eigen::Index(j)] - p.shift);
    if (w != 0.0) p.scaled += w * sys.node_ratios().row(Eigen::Index(j)).head(K).transpose();
  }
  return p;
}

inline Projection project(const GridEigenSystem& sys, const ScalarField& psi, std::size_t k) {
  check_dim(psi.dim(), sys.dim(), "project");
  std::vector<double> v(sys.n_nodes());
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = psi.value(sys.node(j));
  return project_nodes(
      sys, k, [&](std::size_t j) { return v[j] == 0.0 ? -INFINITY : std::log(std::abs(v[j])); },
      [&](std::size_t j) { return v[j] < 0 ? -1.0 : 1.0; });
}

// <e^{-beta g}, phi_i>, computed from log values so large g cannot underflow.
inline Projection project_exp_neg(const GridEigenSystem& sys, const ScalarField& g, double beta, std::size_t k) {
  check_dim(g.dim(), sys.dim(), "project_exp_neg");
  return project_nodes(
      sys, k, [&](std::size_t j) { return -beta * g.value(sys.node(j)); }, [](std::size_t) { return 1.0; });
}

// Normalized series coefficients c_i = <e^{-beta g}, phi_i> / <e^{-beta g}, phi_0>.
inline Vec normalized_coefficients(const Projection& p) {
  require(p.scaled[0] > 0 && std::isfinite(p.scaled[0]), ErrorKind::numerical,
          "eigf_control: coefficient quadrature failed (<e^{-beta g}, phi_0> not positive)");
  return p.scaled / p.scaled[0];
}

inline Vec eigf_coefficients(const GridEigenSystem& sys, const ScalarField& g, double beta, std::size_t k) {
  return normalized_coefficients(project_exp_neg(sys, g, beta, k));
}

// Separable terminal cost: coefficients factorize over coordinates.
inline Vec eigf_coefficients(const TensorEigenSystem& sys, const ScalarField& g, double beta, std::size_t k) {
  require(k >= 1 && k <= sys.size(), ErrorKind::invalid_argument, "eigf_coefficients: mode count out of range");
  const int d = sys.dim();
  check_dim(g.dim(), d, "eigf_coefficients");
  const auto* sep = dynamic_cast<const SeparableField*>(&g);
  const auto* con = dynamic_cast<const ConstantField*>(&g);
  require(sep || con, ErrorKind::invalid_argument,
          "eigf_coefficients: tensor systems need a separable or constant terminal cost");
  std::vector<Vec> per(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) {
    int deg = 0;
    for (std::size_t m = 0; m < k; ++m) deg = std::max(deg, sys.index(m)[std::size_t(i)]);
    const auto& f = *sys.factor(std::size_t(i));
    std::shared_ptr<ScalarField> gi;
    if (sep)
      gi = std::make_shared<SeparableField>(std::vector<Poly1D>{sep->term(i)});
    else
      gi = std::make_shared<ConstantField>(1, 0.0);
    per[std::size_t(i)] = normalized_coefficients(project_exp_neg(f, *gi, beta, std::size_t(deg) + 1));
  }
  Vec c(static_cast<Eigen::Index>(k));
  for (std::size_t m = 0; m < k; ++m) {
    double p = 1.0;
    for (int i = 0; i < d; ++i) p *= per[std::size_t(i)][sys.index(m)[std::size_t(i)]];
    c[Eigen::Index(m)] = p;
  }
  return c;
}

template <class Sys>
std::shared_ptr<EigenSeriesControl> eigf_control(const std::shared_ptr<const Sys>& sys, const ScalarField& g, double beta,
                                                 double T, std::size_t k) {
  require(beta > 0 && T > 0, ErrorKind::invalid_argument, "eigf_control: beta and T must be > 0");
  Vec c = eigf_coefficients(*sys, g, beta, k);
  return std::make_shared<EigenSeriesControl>(sys, std::move(c), beta, T, k);
}

// psi(x, tau) = sum_i e^{-lambda_i tau} <phi_i, psi_0>_mu phi_i(x) with all modes.
class Semigroup {
 public:
  Semigroup(GridPtr sys, const ScalarField& psi0) : sys_(std::move(sys)) {
    require(sys_->space() == Space::L, ErrorKind::invalid_argument, "semigroup_solve: system must be in L-space");
    p_ = project(*sys_, psi0, sys_->size());
  }
  double operator()(const Vec& x, double tau) const {
    require(tau >= 0, ErrorKind::invalid_argument, "semigroup_solve: tau must be >= 0");
    Vec r;
    Mat dr;
    sys_->ratios(x, sys_->size(), r, dr);
    const double l0 = sys_->eigenvalue(0);
    double s = 0.0;
    for (Eigen::Index i = 0; i < r.size(); ++i) s += std::exp(-(sys_->eigenvalue(std::size_t(i)) - l0) * tau) * p_.scaled[i] * r[i];
    return std::exp(p_.shift + sys_->log_ground(x) - l0 * tau) * s;
  }
  const Projection& projection() const { return p_; }

 private:
  GridPtr sys_;
  Projection p_;
};

inline double semigroup_solve(const GridPtr& sys, const ScalarField& psi0, double tau, const Vec& x) {
  return Semigroup(sys, psi0)(x, tau);
}

// Heuristic tail proxy for the first dropped mode k: |c_k| e^{-(l_k - l_0)(T-t)/(2 beta)} max_grid |phi_k/phi_0|.
inline double truncation_bound(const GridEigenSystem& sys, const Vec& coeffs, double t, double T, std::size_t k) {
  require(k >= 2, ErrorKind::invalid_argument, "truncation_bound: k must be >= 2");
  require(k < sys.size() && Eigen::Index(k) < coeffs.size(), ErrorKind::invalid_argument,
          "truncation_bound: system has no mode k");
  const double rmax = sys.node_ratios().col(Eigen::Index(k)).cwiseAbs().maxCoeff();
  const double gap = sys.eigenvalue(k) - sys.eigenvalue(0);
  return std::abs(coeffs[Eigen::Index(k)]) * std::exp(-gap * (T - t) / (2.0 * sys.beta())) * rmax;
}

// ---- binary cache ------------------------------------------------------------
// Layout (host byte order, little-endian on supported targets):
//   char[4] "EGSC", u32 version, u32 dims, dims x {f64 lo, f64 hi, u32 n},
//   u32 k, f64 eigenvalues[k], f64 log_phi0[N], f64 ratios[N*k] (column-major).
// Only Schroedinger-space systems are stored; the L-space view is rebuilt.

inline constexpr std::uint32_t kCacheVersion = 1;

inline std::filesystem::path cache_dir() {
  const char* env = std::getenv("EIGENSOC_CACHE_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path(".eigensoc_cache");
}

namespace detail {
template <class T>
void put(std::ofstream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& i) {
  T v{};
  i.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!i) throw Error(ErrorKind::io, "eigensystem cache: truncated file");
  return v;
}
}  // namespace detail

inline void save_grid_system(const std::filesystem::path& path, const GridEigenSystem& sys) {
  require(sys.space() == Space::schrodinger, ErrorKind::invalid_argument,
          "eigensystem cache: only Schroedinger-space systems can be stored");
  std::vector<Grid1D> grids;
  if (auto* a = dynamic_cast<const GridEigenSystem1D*>(&sys))
    grids = {a->grid()};
  else if (auto* b = dynamic_cast<const GridEigenSystem2D*>(&sys))
    grids = {b->grid_x(), b->grid_y()};
  else
    throw Error(ErrorKind::invalid_argument, "eigensystem cache: unsupported system type");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream o(tmp, std::ios::binary | std::ios::trunc);
    if (!o) throw Error(ErrorKind::io, "eigensystem cache: cannot write " + tmp);
    o.write("EGSC", 4);
    detail::put(o, kCacheVersion);
    detail::put(o, std::uint32_t(grids.size()));
    for (const auto& g : grids) {
      detail::put(o, g.lo);
      detail::put(o, g.hi);
      detail::put(o, std::uint32_t(g.n));
    }
    detail::put(o, std::uint32_t(sys.size()));
    o.write(reinterpret_cast<const char*>(sys.eigenvalue_vector().data()), std::streamsize(sizeof(double) * sys.size()));
    o.write(reinterpret_cast<const char*>(sys.node_log_ground_s().data()),
            std::streamsize(sizeof(double) * sys.n_nodes()));
    o.write(reinterpret_cast<const char*>(sys.node_ratios().data()),
            std::streamsize(sizeof(double) * sys.n_nodes() * sys.size()));
    if (!o) throw Error(ErrorKind::io, "eigensystem cache: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline GridPtr load_grid_system(const std::filesystem::path& path) {
  std::ifstream i(path, std::ios::binary);
  if (!i) throw Error(ErrorKind::io, "eigensystem cache: cannot open " + path.string());
  char magic[4];
  i.read(magic, 4);
  if (!i || std::string(magic, 4) != "EGSC") throw Error(ErrorKind::io, "eigensystem cache: bad magic");
  const auto ver = detail::get<std::uint32_t>(i);
  if (ver != kCacheVersion)
    throw Error(ErrorKind::io, "eigensystem cache: version " + std::to_string(ver) + " unsupported");
  const auto dims = detail::get<std::uint32_t>(i);
  if (dims < 1 || dims > 2) throw Error(ErrorKind::io, "eigensystem cache: bad dimension");
  std::vector<Grid1D> grids(dims);
  std::size_t N = 1;
  for (auto& g : grids) {
    g.lo = detail::get<double>(i);
    g.hi = detail::get<double>(i);
    g.n = int(detail::get<std::uint32_t>(i));
    g.validate();
    N *= std::size_t(g.n);
  }
  const auto k = detail::get<std::uint32_t>(i);
  Vec eig(k), log0(static_cast<Eigen::Index>(N));
  Mat R(static_cast<Eigen::Index>(N), k);
  i.read(reinterpret_cast<char*>(eig.data()), std::streamsize(sizeof(double) * k));
  i.read(reinterpret_cast<char*>(log0.data()), std::streamsize(sizeof(double) * N));
  i.read(reinterpret_cast<char*>(R.data()), std::streamsize(sizeof(double) * N * k));
  if (!i) throw Error(ErrorKind::io, "eigensystem cache: truncated file");
  if (dims == 1) return std::make_shared<GridEigenSystem1D>(grids[0], eig, log0, R);
  return std::make_shared<GridEigenSystem2D>(grids[0], grids[1], eig, log0, R);
}

// Load key from the cache directory or compute and store it.
template <class Compute>
GridPtr cached_grid_system(const std::string& key, Compute compute) {
  const auto path = cache_dir() / (key + ".egsc");
  if (std::filesystem::exists(path)) {
    try {
      return load_grid_system(path);
    } catch (const Error&) {
    }
  }
  GridPtr sys = compute();
  save_grid_system(path, *sys);
  return sys;
}

}  // namespace eigensoc
