#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "stiffnode/integrators.hpp"

using namespace stiffnode;
using namespace stiffnode::integrators;

namespace {

const Tensor kBump = Tensor::from_rows({{-2, 10}, {0, -2}});
const Tensor kSmoothA = Tensor::from_rows({{-1.0, 0.5}, {-0.5, -2.0}});

// g(u) = 0.5 * tanh(u) elementwise plus a coupling term; smooth and nonlinear.
Tensor smooth_g(const Tensor& u) {
  Tensor out(u.rows(), u.cols());
  for (std::size_t j = 0; j < u.cols(); ++j) {
    out(0, j) = 0.5 * std::tanh(u(1, j));
    out(1, j) = -0.3 * u(0, j) * u(0, j);
  }
  return out;
}

Tensor smooth_f(double, const Tensor& u) { return matmul(kSmoothA, u) + smooth_g(u); }

const Tensor kU0 = Tensor::from_rows({{1.0}, {-0.5}});

Tensor reference_at(double t1) {
  AdaptiveOptions opts;
  opts.rel_tol = 1e-13;
  opts.abs_tol = 1e-15;
  return rkf45_solve(smooth_f, kU0, 0.0, t1, opts).states.back();
}

double observed_order(const std::function<Tensor(std::size_t)>& solve_with_steps, const Tensor& exact) {
  const double e1 = frobenius_norm(solve_with_steps(40) - exact);
  const double e2 = frobenius_norm(solve_with_steps(80) - exact);
  const double e3 = frobenius_norm(solve_with_steps(160) - exact);
  // Least-squares slope of log error vs log h over three halvings.
  return 0.5 * (std::log2(e1 / e2) + std::log2(e2 / e3));
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
  return m;
}

}  // namespace

TEST(TimeGrid, RejectsNonIncreasingAndNonFinite) {
  EXPECT_THROW(TimeGrid({0.0, 1.0, 1.0}), std::invalid_argument);
  EXPECT_THROW(TimeGrid({0.0, std::nan("")}), std::invalid_argument);
  EXPECT_THROW(TimeGrid(std::vector<double>{}), std::invalid_argument);
}

TEST(TimeGrid, ParseSpecs) {
  const TimeGrid u = TimeGrid::parse("uniform:0:10:51");
  EXPECT_EQ(u.size(), 51u);
  EXPECT_NEAR(u.step(0), 0.2, 1e-15);
  EXPECT_EQ(u.back(), 10.0);
  const TimeGrid l = TimeGrid::parse("log:4e-6:4e6:50");
  EXPECT_EQ(l.size(), 50u);
  EXPECT_EQ(l.front(), 4e-6);
  EXPECT_EQ(l.back(), 4e6);
  EXPECT_NEAR(l.max_step() / 1.72e6, 1.0, 0.01);
  const TimeGrid s = TimeGrid::parse("list:0,0.5,2");
  EXPECT_EQ(s.times(), (std::vector<double>{0, 0.5, 2}));
  EXPECT_THROW(TimeGrid::parse("uniform:0:1"), std::invalid_argument);
  EXPECT_THROW(TimeGrid::parse("cheb:0:1:5"), std::invalid_argument);
  EXPECT_THROW(TimeGrid::parse("log:0:1:5"), std::invalid_argument);
}

TEST(Etd1Rollout, ScalarLinearDecay) {
  const TimeGrid grid = TimeGrid::uniform(0.0, 3.0, 16);
  const auto traj = etd1_rollout(Tensor(1, 1, -1.0), [](const Tensor& u) { return Tensor(u.rows(), u.cols()); },
                                 Tensor(1, 1, 1.0), grid, {});
  for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_NEAR(traj.states[k][0], std::exp(-grid[k]), 1e-13);
}

TEST(Etd1Rollout, ConstantForcingWithZeroOperator) {
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 9);
  const Tensor c = Tensor::from_rows({{0.3}, {-1.1}});
  const Tensor u0 = Tensor::from_rows({{1.0}, {2.0}});
  const auto traj = etd1_rollout(Tensor(2, 2), [&](const Tensor&) { return c; }, u0, grid, {});
  for (std::size_t k = 0; k < grid.size(); ++k) {
    EXPECT_NEAR(traj.states[k][0], 1.0 + 0.3 * grid[k], 1e-14);
    EXPECT_NEAR(traj.states[k][1], 2.0 - 1.1 * grid[k], 1e-14);
  }
}

TEST(Etd1Rollout, ExactForAffineSystems) {
  // u' = A u + c: e^{hA}u + h phi_1(hA) c is the exact flow.
  const Tensor c = Tensor::from_rows({{0.4}, {-0.2}});
  const TimeGrid grid = TimeGrid::uniform(0.0, 5.0, 6);
  const auto traj = etd1_rollout(kBump, [&](const Tensor&) { return c; }, kU0, grid, {});
  // Exact: u(t) = e^{tA} u0 + A^{-1}(e^{tA} - I) c.
  const Eigen::MatrixXd a = to_eigen(kBump);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const Eigen::MatrixXd e = (grid[k] * a).exp();
    const Eigen::VectorXd exact =
        e * to_eigen(kU0) + a.partialPivLu().solve((e - Eigen::MatrixXd::Identity(2, 2)) * to_eigen(c));
    EXPECT_NEAR(traj.states[k][0], exact(0), 1e-10);
    EXPECT_NEAR(traj.states[k][1], exact(1), 1e-10);
  }
}

TEST(Etd1Rollout, FirstOrderConvergence) {
  const Tensor exact = reference_at(1.0);
  const double p = observed_order(
      [](std::size_t n) {
        return etd1_rollout(kSmoothA, smooth_g, kU0, TimeGrid::uniform(0.0, 1.0, n + 1), {}).states.back();
      },
      exact);
  EXPECT_NEAR(p, 1.0, 0.2);
}

TEST(Etd1Rollout, HurwitzOperatorStaysFiniteForAnyStep) {
  models::ModelSpec spec;
  spec.physical_dim = spec.latent_dim = 4;
  spec.nonlinear = models::NonlinearKind::None;
  std::mt19937_64 rng(5);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    models::NodeModel m(spec, seed);
    std::normal_distribution<double> d(0.0, 2.0);
    for (auto& e : m.params())
      for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] = d(rng);
    for (double h : {1e-3, 1.0, 1e3, 1e6}) {
      const auto traj = etd1_rollout(m, Tensor(4, 1, 1.0), TimeGrid({0.0, h, 2 * h}), {});
      for (const auto& s : traj.states) EXPECT_TRUE(s.all_finite()) << "h=" << h;
    }
  }
}

TEST(Etd1Rollout, BitwiseReproducible) {
  models::ModelSpec spec;
  spec.physical_dim = spec.latent_dim = 3;
  spec.hidden = 16;
  models::NodeModel m(spec, 9);
  const TimeGrid grid = TimeGrid::logspace(1e-3, 1e3, 20);
  const Tensor u0 = Tensor::from_rows({{0.2}, {-0.4}, {1.0}});
  const auto a = etd1_rollout(m, u0, grid, {});
  const auto b = etd1_rollout(m, u0, grid, {});
  for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_EQ(a.states[k].values(), b.states[k].values());
}

TEST(Etd1Rollout, TapedMatchesValueRollout) {
  models::ModelSpec spec;
  spec.physical_dim = spec.latent_dim = 3;
  spec.hidden = 8;
  models::NodeModel m(spec, 10);
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 11);
  const Tensor u0 = Tensor::from_rows({{0.2}, {-0.4}, {1.0}});
  const auto value = etd1_rollout(m, u0, grid, {});
  ad::Tape tape;
  const auto bound = m.bind(tape);
  const auto taped = etd1_rollout(bound, tape.constant(u0), grid, {});
  for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_EQ(taped[k].value().values(), value.states[k].values());
}

TEST(Imex, TableauGamma) { EXPECT_DOUBLE_EQ(ImexSsp2::gamma(), 1.0 - 1.0 / std::sqrt(2.0)); }

TEST(Imex, ZeroOperatorZeroForcingIsStationary) {
  const auto traj = imex_ssp2_rollout(Tensor(2, 2), [](const Tensor& u) { return Tensor(u.rows(), u.cols()); },
                                      kU0, TimeGrid::uniform(0, 1, 5));
  for (const auto& s : traj.states) EXPECT_EQ(s.values(), kU0.values());
}

TEST(Imex, StiffScalarAmplificationBounded) {
  const auto traj = imex_ssp2_rollout(Tensor(1, 1, -1e6), [](const Tensor& u) { return Tensor(u.rows(), u.cols()); },
                                      Tensor(1, 1, 1.0), TimeGrid({0.0, 1.0}));
  EXPECT_LE(std::abs(traj.states[1][0]), 1.0);
}

TEST(Imex, ImplicitPartIsLStable) {
  // Amplification factor of the implicit tableau as z -> -inf tends to 0.
  const double z = -1e12;
  const auto traj = imex_ssp2_rollout(Tensor(1, 1, z), [](const Tensor& u) { return Tensor(u.rows(), u.cols()); },
                                      Tensor(1, 1, 1.0), TimeGrid({0.0, 1.0}));
  EXPECT_LT(std::abs(traj.states[1][0]), 1e-10);
}

TEST(Imex, SecondOrderConvergence) {
  const Tensor exact = reference_at(1.0);
  const double p = observed_order(
      [](std::size_t n) {
        return imex_ssp2_rollout(kSmoothA, smooth_g, kU0, TimeGrid::uniform(0.0, 1.0, n + 1)).states.back();
      },
      exact);
  EXPECT_NEAR(p, 2.0, 0.2);
}

TEST(Imex, SingularSystemFails) {
  // I - h*gamma*A singular when h*gamma*a = 1.
  const double h = 1.0 / ImexSsp2::gamma();
  EXPECT_THROW(imex_ssp2_rollout(Tensor(1, 1, 1.0), [](const Tensor& u) { return u; }, Tensor(1, 1, 1.0),
                                 TimeGrid({0.0, h})),
               IntegrationError);
}

TEST(Imex, TapedMatchesValueAndIsDifferentiable) {
  models::ModelSpec spec;
  spec.physical_dim = spec.latent_dim = 2;
  spec.hidden = 6;
  models::NodeModel m(spec, 12);
  const TimeGrid grid = TimeGrid::uniform(0.0, 1.0, 5);
  const Tensor a = m.linear_matrix();
  const auto value = imex_ssp2_rollout(a, [&](const Tensor& u) { return m.nonlinear_value(u); }, kU0, grid);
  ad::Tape tape;
  const auto taped = imex_ssp2_rollout(m.bind(tape), tape.constant(kU0), grid);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    EXPECT_LT(frobenius_norm(taped[k].value() - value.states[k]), 1e-13);
  }
  auto f = [&](ad::Tape& t, ad::ParamStore&) {
    return ad::squared_norm(imex_ssp2_rollout(m.bind(t), t.constant(kU0), grid).back());
  };
  EXPECT_TRUE(ad::finite_diff_check(f, m.params(), 1e-6, 1e-5).ok());
}

TEST(Rkf45, ExponentialDecay) {
  const auto traj = rkf45_solve([](double, const Tensor& u) { return -1.0 * u; }, Tensor(1, 1, 1.0), 0.0, 1.0);
  EXPECT_NEAR(traj.states.back()[0], std::exp(-1.0), 1e-7);
  EXPECT_EQ(traj.grid.back(), 1.0);
  traj.validate();
}

TEST(Rkf45, HarmonicOscillatorEnergyDrift) {
  const auto f = [](double, const Tensor& u) { return Tensor::from_rows({{u[1]}, {-u[0]}}); };
  const double period = 2 * std::numbers::pi;
  const auto traj = rkf45_solve(f, Tensor::from_rows({{1.0}, {0.0}}), 0.0, 10 * period);
  for (const auto& s : traj.states) EXPECT_LT(std::abs(0.5 * (s[0] * s[0] + s[1] * s[1]) - 0.5), 1e-6);
}

TEST(Rkf45, BumpSystemShowsTransientGrowth) {
  const auto f = [](double, const Tensor& u) { return matmul(kBump, u); };
  const Tensor u0 = Tensor::from_rows({{0.0}, {1.0}});
  const auto traj = rkf45_solve(f, u0, TimeGrid({0.0, 0.5, 10.0}));
  EXPECT_GT(frobenius_norm(traj.states[1]), frobenius_norm(u0));
  EXPECT_LT(frobenius_norm(traj.states[2]), frobenius_norm(u0));
}

TEST(Rkf45, GridLandsOnRequestedTimes) {
  const auto f = [](double, const Tensor& u) { return -1.0 * u; };
  const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 11);
  const auto traj = rkf45_solve(f, Tensor(1, 1, 1.0), grid);
  for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_NEAR(traj.states[k][0], std::exp(-grid[k]), 1e-7);
}

TEST(Rkf45, FourthOrderConvergence) {
  const Tensor exact = reference_at(1.0);
  const double p = observed_order(
      [](std::size_t n) { return rkf4_fixed(smooth_f, kU0, TimeGrid::uniform(0.0, 1.0, n / 4 + 1)).states.back(); },
      exact);
  EXPECT_GE(p, 3.8);
}

TEST(Rkf45, StiffProblemUnderflowsStep) {
  AdaptiveOptions opts;
  opts.max_steps = 2000;
  EXPECT_THROW(rkf45_solve([](double, const Tensor& u) { return -1e9 * u; }, Tensor(1, 1, 1.0), 0.0, 1e3, opts),
               IntegrationError);
}

namespace {

Tensor robertson_f(double, const Tensor& y) {
  return Tensor::from_rows({{-0.04 * y[0] + 1e4 * y[1] * y[2]},
                            {0.04 * y[0] - 1e4 * y[1] * y[2] - 3e7 * y[1] * y[1]},
                            {3e7 * y[1] * y[1]}});
}

Tensor robertson_j(double, const Tensor& y) {
  return Tensor::from_rows({{-0.04, 1e4 * y[2], 1e4 * y[1]},
                            {0.04, -1e4 * y[2] - 6e7 * y[1], -1e4 * y[1]},
                            {0.0, 6e7 * y[1], 0.0}});
}

}  // namespace

TEST(StiffSolve, ExponentialDecay) {
  StiffOptions opts;
  opts.rel_tol = 1e-8;
  const TimeGrid grid = TimeGrid::uniform(0.0, 5.0, 21);
  const auto traj = stiff_solve([](double, const Tensor& u) { return -1.0 * u; },
                                [](double, const Tensor&) { return Tensor(1, 1, -1.0); }, Tensor(1, 1, 1.0), grid,
                                opts);
  for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_NEAR(traj.states[k][0], std::exp(-grid[k]), 1e-7);
}

TEST(StiffSolve, RobertsonConservesMassAndReachesEquilibrium) {
  const TimeGrid grid = TimeGrid::logspace(4e-6, 4e6, 50);
  StiffOptions opts;
  opts.rel_tol = 1e-6;
  opts.abs_tol = 1e-10;
  const auto traj = stiff_solve(robertson_f, robertson_j, Tensor::from_rows({{1.0}, {0.0}, {0.0}}), grid, opts);
  for (const auto& y : traj.states) EXPECT_NEAR(y[0] + y[1] + y[2], 1.0, 1e-9);
  const Tensor& end = traj.states.back();
  EXPECT_NEAR(end[2], 1.0, 1e-3);
  EXPECT_LT(end[0], 1e-3);
  EXPECT_LT(end[1], 1e-3);
}

TEST(StiffSolve, RobertsonAgreesWithTightRkf45EarlyOn) {
  // On [0, 40] explicit RKF45 at tight tolerance is still affordable.
  const TimeGrid grid = TimeGrid::uniform(0.0, 40.0, 5);
  const Tensor y0 = Tensor::from_rows({{1.0}, {0.0}, {0.0}});
  StiffOptions so;
  so.rel_tol = 1e-9;
  so.abs_tol = 1e-14;
  const auto stiff = stiff_solve(robertson_f, robertson_j, y0, grid, so);
  AdaptiveOptions ao;
  ao.rel_tol = 1e-10;
  ao.abs_tol = 1e-16;
  const auto ref = rkf45_solve(robertson_f, y0, grid, ao);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(stiff.states[k][i], ref.states[k][i], 1e-6 * std::abs(ref.states[k][i]) + 1e-12) << k << "," << i;
    }
  }
}
