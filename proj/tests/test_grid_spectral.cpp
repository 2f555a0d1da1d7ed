#include <gtest/gtest.h>

#include <eigensoc/grid_ops.hpp>
#include <eigensoc/oscillator.hpp>
#include <eigensoc/problem.hpp>

#include "test_util.hpp"

#include <filesystem>
#include <fstream>

using namespace eigensoc;

namespace {

auto square = [](double x) { return x * x; };

std::function<double(double)> double_well_v(double kappa, double nu, double beta = 1.0) {
  return effective_potential_1d(double_well_poly(kappa), double_well_poly(nu), beta);
}

// Node values phi_i(x_j) of a Schroedinger-space 1-D system.
Mat node_values(const GridEigenSystem& s) {
  Mat P(s.n_nodes(), s.size());
  for (std::size_t j = 0; j < s.n_nodes(); ++j)
    for (std::size_t i = 0; i < s.size(); ++i)
      P(Eigen::Index(j), Eigen::Index(i)) = std::exp(s.node_log_ground_s(j)) * s.node_ratio(i, j);
  return P;
}

double max_offdiag_identity(const Mat& G) { return (G - Mat::Identity(G.rows(), G.cols())).cwiseAbs().maxCoeff(); }

// Isotropic LQR coordinate: E = x^2/2, f = x^2, beta = 1.
Grid1DPtr lqr_coordinate(const Grid1D& g, int k) {
  return schrodinger_fd_1d([](double x) { return 3 * x * x - 1; }, g, k);
}

FieldPtr half_square_1d() { return std::make_shared<SeparableField>(std::vector<Poly1D>{quadratic_poly(0.5)}); }

}  // namespace

TEST(SchrodingerFd1d, HarmonicSpectrum) {
  auto s = schrodinger_fd_1d(square, Grid1D{-8, 8, 2000}, 6);
  for (int n = 0; n < 6; ++n) EXPECT_NEAR(s->eigenvalue(std::size_t(n)), 2 * n + 1, 1e-3) << n;
}

TEST(SchrodingerFd1d, IsotropicLqrCoordinate) {
  auto s = lqr_coordinate(Grid1D{-8, 8, 2000}, 2);
  EXPECT_NEAR(s->eigenvalue(0), std::sqrt(3.0) - 1, 1e-3);
}

TEST(SchrodingerFd1d, DoubleWellReproducibleAcrossResolutions) {
  auto a = schrodinger_fd_1d(double_well_v(5, 3), Grid1D{-8, 8, 2000}, 1);
  auto b = schrodinger_fd_1d(double_well_v(5, 3), Grid1D{-8, 8, 4000}, 1);
  EXPECT_NEAR(a->eigenvalue(0), b->eigenvalue(0), 1e-4);
}

TEST(SchrodingerFd1d, RejectsBadInput) {
  EXPECT_THROW(schrodinger_fd_1d(square, Grid1D{-8, 8, 100}, 26), Error);
  EXPECT_THROW(schrodinger_fd_1d([](double x) { return x > 1 ? NAN : 0.0; }, Grid1D{-8, 8, 100}, 2), Error);
  EXPECT_THROW(schrodinger_fd_1d(square, Grid1D{1, -1, 100}, 2), Error);
  EXPECT_THROW(schrodinger_fd_1d(square, Grid1D{-1, 1, 8}, 1), Error);
}

TEST(SchrodingerFd1d, OrthonormalAndResidual) {
  const Grid1D g{-8, 8, 1000};
  auto v = double_well_v(1, 1);
  auto s = schrodinger_fd_1d(v, g, 8);
  const Mat P = node_values(*s);
  EXPECT_LE(max_offdiag_identity(g.h() * P.transpose() * P), 1e-6);
  const double ih2 = 1 / (g.h() * g.h());
  for (int i = 0; i < 8; ++i) {
    Vec r(g.n);
    for (int j = 0; j < g.n; ++j) {
      const double l = j > 0 ? P(j - 1, i) : 0.0, rr = j + 1 < g.n ? P(j + 1, i) : 0.0;
      r[j] = (2 * P(j, i) - l - rr) * ih2 + v(g.x(j)) * P(j, i) - s->eigenvalue(std::size_t(i)) * P(j, i);
    }
    EXPECT_LE(r.norm() / P.col(i).norm(), 1e-6) << i;
  }
}

TEST(SchrodingerFd1d, SignConvention) {
  auto s = schrodinger_fd_1d(double_well_v(5, 3), Grid1D{-3, 3, 1500}, 6);
  for (std::size_t j = 0; j < s->n_nodes(); ++j) EXPECT_TRUE(std::isfinite(s->node_log_ground_s(j)));
  const Mat P = node_values(*s);
  for (int i = 1; i < 6; ++i) {
    int first = 0;
    while (std::abs(P(first, i)) <= 1e-8) ++first;
    EXPECT_GT(P(first, i), 0.0) << i;
  }
}

// The ratio recurrence reproduces the Gaussian tail where phi_0 underflows.
TEST(SchrodingerFd1d, LogGroundAccurateInDeepTail) {
  auto s = schrodinger_fd_1d(square, Grid1D{-12, 12, 3000}, 2);
  const double lg0 = -0.25 * std::log(M_PI);
  for (double x : {0.0, 3.0, 6.0, -9.0}) {
    Vec p = Vec::Constant(1, x);
    EXPECT_NEAR(s->log_ground(p), lg0 - x * x / 2, 2e-3 * (1 + x * x)) << x;
    EXPECT_NEAR(s->grad_log_ground(p)[0], -x, 2e-3 * (1 + std::abs(x))) << x;
  }
  EXPECT_LT(s->log_ground(Vec::Constant(1, 11.0)), -55.0);
}

// Dirichlet truncation: eigenvalues decrease as the box grows at fixed spacing
// (the smaller matrix is a principal submatrix, so interlacing applies).
TEST(GridRefinement, EnlargingBoxDecreasesEigenvalues) {
  const double h = 2.4 / 241;
  std::vector<double> prev(4, INFINITY);
  for (int m : {0, 1, 2}) {
    const int extra = 40 * m;
    Grid1D g{-1.2 - extra * h, 1.2 + extra * h, 240 + 2 * extra};
    auto s = schrodinger_fd_1d(double_well_v(1, 1), g, 4);
    for (std::size_t i = 0; i < 4; ++i) {
      // interlacing is exact; the slack covers rounding of the tridiagonal solve
      EXPECT_LE(s->eigenvalue(i), prev[i] + 1e-9) << i;
      if (m == 1) {
        EXPECT_LT(s->eigenvalue(i), prev[i] - 1e-3) << i;
      }
      prev[i] = s->eigenvalue(i);
    }
  }
}

// Mesh refinement: monotone convergence with shrinking increments (second
// differences under-estimate the kinetic term, so the approach is from below).
TEST(GridRefinement, MeshRefinementConvergesMonotonically) {
  std::vector<double> l;
  for (int n : {500, 1000, 2000}) l.push_back(schrodinger_fd_1d(double_well_v(1, 1), Grid1D{-4, 4, n}, 1)->eigenvalue(0));
  EXPECT_LT(l[0], l[1]);
  EXPECT_LT(l[1], l[2]);
  const double ratio = (l[2] - l[1]) / (l[1] - l[0]);
  EXPECT_NEAR(ratio, 0.25, 0.05);
}

TEST(TensorEigensystem, TwoHarmonicCopies) {
  auto s = schrodinger_fd_1d(square, Grid1D{-8, 8, 2000}, 3);
  auto t = tensor_eigensystem({s, s}, 4);
  const double want[] = {2, 4, 4, 6};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(t->eigenvalue(i), want[i], 2e-3);
  EXPECT_EQ(t->index(1), (MultiIndex{0, 1}));
  EXPECT_EQ(t->index(2), (MultiIndex{1, 0}));
}

TEST(TensorEigensystem, InsufficientModesThrows) {
  auto s = schrodinger_fd_1d(square, Grid1D{-8, 8, 200}, 2);
  EXPECT_THROW(tensor_eigensystem({s, s}, 5), Error);
}

TEST(TensorEigensystem, DoubleWellTenDimensionalGround) {
  const Grid1D g{-3, 3, 2000};
  auto stiff = schrodinger_fd_1d(double_well_v(5, 3), g, 3);
  auto soft = schrodinger_fd_1d(double_well_v(1, 1), g, 3);
  std::vector<GridPtr> f;
  for (int i = 0; i < 10; ++i) f.push_back(i < 3 ? GridPtr(stiff) : GridPtr(soft));
  auto t = tensor_eigensystem(f, 12);
  EXPECT_NEAR(t->eigenvalue(0), 3 * stiff->eigenvalue(0) + 7 * soft->eigenvalue(0), 1e-12);
  for (std::size_t i = 1; i < 12; ++i) EXPECT_LE(t->eigenvalue(i - 1), t->eigenvalue(i));
}

TEST(TensorEigensystem, ProductsOrthonormal) {
  const Grid1D g{-6, 6, 600};
  auto a = schrodinger_fd_1d(square, g, 4);
  auto b = schrodinger_fd_1d(double_well_v(1, 1), g, 4);
  auto t = tensor_eigensystem({a, b}, 5);
  const Mat Pa = node_values(*a), Pb = node_values(*b);
  const Mat Ga = g.h() * Pa.transpose() * Pa, Gb = g.h() * Pb.transpose() * Pb;
  Mat G(5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      G(i, j) = Ga(t->index(std::size_t(i))[0], t->index(std::size_t(j))[0]) *
                Gb(t->index(std::size_t(i))[1], t->index(std::size_t(j))[1]);
  EXPECT_LE(max_offdiag_identity(G), 1e-6);
  // pointwise evaluation matches the product of factors
  Vec x(2);
  x << 0.3, -0.8;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& m = t->index(i);
    const double want = a->value(std::size_t(m[0]), x.head(1)) * b->value(std::size_t(m[1]), x.tail(1));
    EXPECT_NEAR(t->value(i, x), want, 1e-10);
  }
}

TEST(SchrodingerFd2d, IsotropicOscillator) {
  const Grid1D g{-8, 8, 151};
  auto s = schrodinger_fd_2d([](double x, double y) { return x * x + y * y; }, g, g, 4);
  const double want[] = {2, 4, 4, 6};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s->eigenvalue(i), want[i], 5e-3) << i;
}

TEST(SchrodingerFd2d, AgreesWithOscillatorClosedForm) {
  const Grid1D g{-5, 5, 199};
  auto s = schrodinger_fd_2d([](double x, double y) { return x * x + y * y; }, g, g, 3);
  auto ref = oscillator_eigensystem_dd(Mat::Identity(2, 2), 3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(s->eigenvalue(i), ref->eigenvalue(i), 1e-3) << i;
  // ground state function itself
  for (double x : {0.0, 0.7, -1.3}) {
    Vec p(2);
    p << x, 0.5;
    EXPECT_NEAR(s->log_ground(p), ref->log_ground(p), 2e-3);
  }
}

TEST(SchrodingerFd2d, OrthonormalAndResidual) {
  const Grid1D g{-5, 5, 80};
  auto v = [](double x, double y) { return x * x + 2 * y * y + 0.5 * x * y; };
  auto s = schrodinger_fd_2d(v, g, g, 6);
  const Mat P = node_values(*s);
  EXPECT_LE(max_offdiag_identity(s->cell() * P.transpose() * P), 1e-6);
  const int n = g.n;
  const double ih2 = 1 / (g.h() * g.h());
  for (int i = 0; i < 6; ++i) {
    Vec r(n * n);
    for (int iy = 0; iy < n; ++iy)
      for (int ix = 0; ix < n; ++ix) {
        const int j = ix + n * iy;
        double lap = 4 * P(j, i);
        if (ix > 0) lap -= P(j - 1, i);
        if (ix + 1 < n) lap -= P(j + 1, i);
        if (iy > 0) lap -= P(j - n, i);
        if (iy + 1 < n) lap -= P(j + n, i);
        r[j] = lap * ih2 + (v(g.x(ix), g.x(iy)) - s->eigenvalue(std::size_t(i))) * P(j, i);
      }
    EXPECT_LE(r.norm() / P.col(i).norm(), 1e-6) << i;
  }
}

TEST(SchrodingerFd2d, RingGroundPositiveAndRefinementStable) {
  const double a = 1.0, R = 5 / std::sqrt(2.0);
  auto E = std::make_shared<RingField>(2, a, R);
  auto f = std::make_shared<LinearField>(Vec::Unit(2, 0) * 2.0);
  SocProblem p(2, E, f, zero_field(2), 1.0, 5.0, InitialLaw::point(Vec::Unit(2, 0) * R));
  auto v = [&](double x, double y) {
    Vec z(2);
    z << x, y;
    return effective_potential(p, z);
  };
  Lanczos2DOptions opt;
  opt.gauge = [&](double x, double y) {
    Vec z(2);
    z << x, y;
    return E->value(z);
  };
  auto coarse = schrodinger_fd_2d(v, Grid1D{-6, 6, 151}, Grid1D{-6, 6, 151}, 1, opt);
  for (std::size_t j = 0; j < coarse->n_nodes(); ++j) ASSERT_TRUE(std::isfinite(coarse->node_log_ground_s(j)));
  auto fine = schrodinger_fd_2d(v, Grid1D{-6, 6, 200}, Grid1D{-6, 6, 200}, 1, opt);
  EXPECT_NEAR(coarse->eigenvalue(0), fine->eigenvalue(0), 1e-3);
}

TEST(SchrodingerFd2d, RejectsBadInput) {
  const Grid1D big{-1, 1, 201};
  EXPECT_THROW(schrodinger_fd_2d([](double, double) { return 0.0; }, big, big, 1), Error);
  const Grid1D g{-1, 1, 20};
  EXPECT_THROW(schrodinger_fd_2d([](double, double) { return 0.0; }, g, g, 17), Error);
}

TEST(SchrodingerFd2d, IterationCapReportsResidual) {
  const Grid1D g{-5, 5, 60};
  Lanczos2DOptions opt;
  opt.max_len = 12;
  opt.max_restarts = 1;
  opt.tol = 1e-15;
  try {
    schrodinger_fd_2d([](double x, double y) { return x * x + y * y; }, g, g, 8, opt);
    FAIL() << "expected a convergence error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::convergence);
    EXPECT_NE(std::string(e.what()).find("residual"), std::string::npos);
  }
}

TEST(ToL, ZeroEnergyIsIdentity) {
  auto s = schrodinger_fd_1d(double_well_v(1, 1), Grid1D{-4, 4, 400}, 4);
  auto l = to_L_eigenfunctions(s, zero_field(1), 1.0);
  for (double x : {-1.3, 0.2, 2.0}) {
    Vec p = Vec::Constant(1, x);
    EXPECT_EQ(l->log_ground(p), s->log_ground(p));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(l->value(i, p), s->value(i, p));
  }
}

TEST(ToL, IsotropicGroundGradient) {
  auto s = lqr_coordinate(Grid1D{-8, 8, 2000}, 4);
  auto l = to_L_eigenfunctions(s, half_square_1d(), 1.0);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(l->eigenvalue(std::size_t(i)), s->eigenvalue(std::size_t(i)));
  for (double x = -3; x <= 3; x += 0.25)
    EXPECT_NEAR(l->grad_log_ground(Vec::Constant(1, x))[0], -(std::sqrt(3.0) - 1) * x, 1e-3) << x;
}

TEST(ToL, OrthonormalInWeightedSpace) {
  const Grid1D g{-4, 4, 1200};
  auto E = std::make_shared<SeparableField>(std::vector<Poly1D>{double_well_poly(1)});
  auto s = schrodinger_fd_1d(double_well_v(1, 1), g, 6);
  auto l = to_L_eigenfunctions(s, E, 1.0);
  Mat G = Mat::Zero(6, 6);
  for (int j = 0; j < g.n; ++j) {
    Vec x = Vec::Constant(1, g.x(j));
    Vec phi(6);
    for (int i = 0; i < 6; ++i) phi[i] = l->value(std::size_t(i), x);
    G += g.h() * std::exp(-2 * E->value(x)) * phi * phi.transpose();
  }
  EXPECT_LE(max_offdiag_identity(G), 1e-6);
}

TEST(ToL, GridModesSatisfyLEigenRelation) {
  const Grid1D g{-3, 3, 4000};
  auto E = std::make_shared<SeparableField>(std::vector<Poly1D>{double_well_poly(1)});
  auto f = std::make_shared<SeparableField>(std::vector<Poly1D>{double_well_poly(1)});
  auto s = schrodinger_fd_1d(double_well_v(1, 1), g, 3);
  auto l = to_L_eigenfunctions(s, E, 1.0);
  SocProblem p(1, E, f, zero_field(1), 1.0, 1.0, InitialLaw::point(Vec::Zero(1)));
  for (std::size_t i = 0; i < 3; ++i) {
    EigenfunctionField phi(l, i);
    for (double x : {-1.5, -0.6, 0.1, 0.9, 1.4}) {
      Vec v = Vec::Constant(1, x);
      const double lam = l->eigenvalue(i), want = lam * phi.value(v);
      EXPECT_NEAR(apply_L(p, phi, v), want, 1e-3 * std::max(1.0, std::abs(want))) << i << " " << x;
    }
  }
}

TEST(Semigroup, CompletenessAtTimeZero) {
  const Grid1D g{-5, 5, 400};
  auto E = half_square_1d();
  auto l = to_L_eigenfunctions(lqr_coordinate(g, 100), E, 1.0);
  auto g_cost = std::make_shared<SeparableField>(std::vector<Poly1D>{quadratic_poly(0.5, -0.5)});
  ExpNegField psi0(g_cost, 1.0);
  Semigroup sg(l, psi0);
  for (double x : {-2.0, -0.5, 0.0, 1.0, 2.5}) {
    Vec p = Vec::Constant(1, x);
    EXPECT_NEAR(sg(p, 0.0), psi0.value(p), 1e-3) << x;
  }
}

TEST(Semigroup, EigenfunctionInputDecaysExactly) {
  auto l = to_L_eigenfunctions(schrodinger_fd_1d(double_well_v(1, 1), Grid1D{-4, 4, 800}, 12),
                               std::make_shared<SeparableField>(std::vector<Poly1D>{double_well_poly(1)}), 1.0);
  EigenfunctionField phi0(l, 0);
  for (double tau : {0.0, 0.5, 2.0})
    for (double x : {-1.0, 0.3}) {
      Vec p = Vec::Constant(1, x);
      const double want = std::exp(-l->eigenvalue(0) * tau) * phi0.value(p);
      EXPECT_NEAR(semigroup_solve(l, phi0, tau, p), want, 1e-8 * std::abs(want));
    }
  EXPECT_THROW(semigroup_solve(l, phi0, -1.0, Vec::Zero(1)), Error);
}

TEST(Semigroup, RequiresLSpace) {
  auto s = schrodinger_fd_1d(square, Grid1D{-4, 4, 100}, 4);
  EXPECT_THROW(Semigroup(s, ConstantField(1, 1.0)), Error);
}

TEST(EigfControl, ApproachesGroundStateControlFarFromHorizon) {
  auto E = half_square_1d();
  auto l = to_L_eigenfunctions(lqr_coordinate(Grid1D{-8, 8, 2000}, 8), E, 1.0);
  auto gc = std::make_shared<SeparableField>(std::vector<Poly1D>{quadratic_poly(0.5, -1.0)});
  const double T = 8;
  auto u = eigf_control(l, *gc, 1.0, T, 8);
  const double gap = l->eigenvalue(1) - l->eigenvalue(0);
  double C = 0;
  for (double t : {0.0, 2.0, 4.0, 6.0})
    for (double x : {-1.0, 0.0, 1.5}) {
      Vec p = Vec::Constant(1, x);
      const double dev = std::abs(u->eval(p, t)[0] - l->grad_log_ground(p)[0]);
      const double scaled = dev / std::exp(-gap * (T - t) / 2);
      if (t == 0.0) C = std::max(C, scaled);
      EXPECT_LE(scaled, 3.0 * std::max(C, 1e-12) + 1.0) << t << " " << x;
    }
  EXPECT_LT(std::abs(u->eval(Vec::Zero(1), 0.0)[0] - l->grad_log_ground(Vec::Zero(1))[0]), 1e-4);
}

TEST(EigfControl, MatchesClosedFormSeries) {
  QuadraticProblem q{Mat::Identity(1, 1), Mat::Identity(1, 1), Mat::Constant(1, 1, 0.5), Vec::Constant(1, 0.5), 1.0,
                     4.0};
  auto gc = std::make_shared<QuadraticField>(Mat::Constant(1, 1, 0.5), Vec::Constant(1, 0.5));
  auto ref = lqr_series_control(lqr_eigensystem(q, 8), *gc, q.horizon, 8);
  auto l = to_L_eigenfunctions(lqr_coordinate(Grid1D{-8, 8, 2000}, 8), half_square_1d(), 1.0);
  auto u = eigf_control(l, *gc, 1.0, q.horizon, 8);
  for (double t : {0.0, 2.0, 3.5})
    for (double x : {-1.5, -0.2, 0.0, 0.8, 2.0}) {
      Vec p = Vec::Constant(1, x);
      EXPECT_NEAR(u->eval(p, t)[0], ref->eval(p, t)[0], 1e-3) << t << " " << x;
    }
}

TEST(EigfControl, TensorCoefficientsFactorize) {
  const Grid1D g{-4, 4, 600};
  auto a = schrodinger_fd_1d(double_well_v(1, 1), g, 4);
  std::vector<Poly1D> terms = {double_well_poly(1), double_well_poly(1)};
  auto E = SeparableField(terms);
  auto t = to_L_eigenfunctions(tensor_eigensystem({a, a}, 6), E, 1.0);
  auto gc = SeparableField({quadratic_poly(0.3, 0.2), quadratic_poly(0.1, -0.4)});
  const Vec c = eigf_coefficients(*t, gc, 1.0, 6);
  auto a_l = to_L_eigenfunctions(GridPtr(a), std::make_shared<SeparableField>(std::vector<Poly1D>{terms[0]}), 1.0);
  const Vec c0 = eigf_coefficients(*a_l, SeparableField({gc.term(0)}), 1.0, 4);
  const Vec c1 = eigf_coefficients(*a_l, SeparableField({gc.term(1)}), 1.0, 4);
  for (std::size_t m = 0; m < 6; ++m)
    EXPECT_NEAR(c[Eigen::Index(m)], c0[t->index(m)[0]] * c1[t->index(m)[1]], 1e-12);
  EXPECT_EQ(c[0], 1.0);
  EXPECT_THROW(eigf_coefficients(*t, RingField(2, 1.0, 1.0), 1.0, 6), Error);
}

TEST(TruncationBound, AtHorizonIsCoefficientTimesRatioMax) {
  auto l = to_L_eigenfunctions(lqr_coordinate(Grid1D{-8, 8, 2000}, 4), half_square_1d(), 1.0);
  auto gc = QuadraticField(Mat::Constant(1, 1, 0.5), Vec::Constant(1, 0.5));
  const Vec c = eigf_coefficients(*l, gc, 1.0, 4);
  const double rmax = l->node_ratios().col(2).cwiseAbs().maxCoeff();
  EXPECT_DOUBLE_EQ(truncation_bound(*l, c, 4.0, 4.0, 2), std::abs(c[2]) * rmax);
  double prev = INFINITY;
  for (double t = 4.0; t >= 0.0; t -= 0.5) {
    const double b = truncation_bound(*l, c, t, 4.0, 2);
    EXPECT_LT(b, prev);
    prev = b;
  }
  EXPECT_THROW(truncation_bound(*l, c, 0.0, 4.0, 1), Error);
}

TEST(TruncationBound, IsotropicSmallAtLongHorizon) {
  auto l = to_L_eigenfunctions(lqr_coordinate(Grid1D{-8, 8, 2000}, 4), half_square_1d(), 1.0);
  auto gc = QuadraticField(Mat::Constant(1, 1, 0.5));
  const Vec c = eigf_coefficients(*l, gc, 1.0, 4);
  EXPECT_LT(truncation_bound(*l, c, 0.0, 4.0, 2), 1e-5);
}

TEST(Cache, RoundTripPreservesSystem) {
  const auto dir = std::filesystem::temp_directory_path() / "eigensoc_cache_test";
  std::filesystem::remove_all(dir);
  auto s1 = schrodinger_fd_1d(double_well_v(5, 3), Grid1D{-3, 3, 500}, 4);
  save_grid_system(dir / "a.egsc", *s1);
  auto r1 = load_grid_system(dir / "a.egsc");
  for (double x : {-1.1, 0.0, 0.77}) {
    Vec p = Vec::Constant(1, x);
    EXPECT_EQ(r1->log_ground(p), s1->log_ground(p));
    EXPECT_EQ(r1->value(3, p), s1->value(3, p));
  }
  const Grid1D g{-4, 4, 40};
  auto s2 = schrodinger_fd_2d([](double x, double y) { return x * x + y * y; }, g, g, 3);
  save_grid_system(dir / "b.egsc", *s2);
  auto r2 = load_grid_system(dir / "b.egsc");
  EXPECT_EQ(r2->dim(), 2);
  EXPECT_EQ(r2->eigenvalue(2), s2->eigenvalue(2));
  Vec p(2);
  p << 0.3, -0.4;
  EXPECT_EQ(r2->grad_log_ground(p), s2->grad_log_ground(p));
  EXPECT_THROW(save_grid_system(dir / "c.egsc", *to_L_eigenfunctions(s1, half_square_1d(), 1.0)), Error);
  {
    std::ofstream o(dir / "bad.egsc", std::ios::binary);
    o << "NOPE";
  }
  EXPECT_THROW(load_grid_system(dir / "bad.egsc"), Error);
  std::filesystem::remove_all(dir);
}

TEST(Semigroup, PdeResidualDoubleWell) {
  auto E = std::make_shared<SeparableField>(std::vector<Poly1D>{double_well_poly(5)});
  auto f = std::make_shared<SeparableField>(std::vector<Poly1D>{double_well_poly(3)});
  auto l = to_L_eigenfunctions(schrodinger_fd_1d(double_well_v(5, 3), Grid1D{-2.2, 2.2, 16000}, 60), E, 1.0);
  Semigroup sg(l, ConstantField(1, 1.0));
  auto P = [&](double y, double t) { return sg(Vec::Constant(1, y), t); };
  const double dt = 1e-4, dx = 1e-3;
  for (double tau : {0.25, 1.0, 2.0})
    for (double x : {-1.3, -1.0, -0.5, 0.0, 0.7, 1.2}) {
      const double p = P(x, tau), pt = (P(x, tau + dt) - P(x, tau - dt)) / (2 * dt);
      const double px = (P(x + dx, tau) - P(x - dx, tau)) / (2 * dx);
      const double pxx = (P(x + dx, tau) - 2 * p + P(x - dx, tau)) / (dx * dx);
      Vec v = Vec::Constant(1, x);
      EXPECT_LE(std::abs(pt - pxx + 2 * E->gradient(v)[0] * px + 2 * f->value(v) * p), 1e-3) << tau << " " << x;
    }
}
