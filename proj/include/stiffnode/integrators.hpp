#pragma once

// Time steppers: ETD1 (training and deployment), IMEX SSP2(2,2,2) as the
// implicit-explicit baseline, and two reference solvers for ground truth
// (Runge-Kutta-Fehlberg 4(5) and an adaptive TR-BDF2).

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "stiffnode/autodiff.hpp"
#include "stiffnode/expmv.hpp"
#include "stiffnode/models.hpp"
#include "stiffnode/tensor.hpp"

namespace stiffnode::integrators {

class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(const std::string& what, std::int64_t step)
      : std::runtime_error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

/// Strictly increasing, finite sample times.
class TimeGrid {
 public:
  TimeGrid() = default;
  explicit TimeGrid(std::vector<double> t);

  static TimeGrid uniform(double t0, double t1, std::size_t count);
  /// `count` points log-spaced between t0 > 0 and t1.
  static TimeGrid logspace(double t0, double t1, std::size_t count);
  /// "uniform:t0:t1:N", "log:t0:t1:N" or "list:a,b,c".
  static TimeGrid parse(const std::string& spec);

  std::size_t size() const { return t_.size(); }
  double operator[](std::size_t i) const { return t_[i]; }
  double front() const { return t_.front(); }
  double back() const { return t_.back(); }
  double step(std::size_t i) const { return t_[i + 1] - t_[i]; }
  double max_step() const;
  const std::vector<double>& times() const { return t_; }

 private:
  std::vector<double> t_;
};

/// States aligned with a grid; each state is a column (dim x 1).
struct Trajectory {
  TimeGrid grid;
  std::vector<Tensor> states;

  std::size_t dim() const { return states.empty() ? 0 : states.front().rows(); }
  /// Throws unless states match the grid and share one dimension.
  void validate() const;
};

using VectorField = std::function<Tensor(double t, const Tensor& u)>;
using JacobianField = std::function<Tensor(double t, const Tensor& u)>;
using BlockMap = std::function<Tensor(const Tensor&)>;

// ------------------------------------------------------------------ ETD1

/// u_{k+1} = e^{hA} u_k + h phi_1(hA) g(u_k) with h = t_{k+1} - t_k.
Trajectory etd1_rollout(const Tensor& a, const BlockMap& g, const Tensor& u0, const TimeGrid& grid,
                        const expm::ExpmvConfig& cfg);
Trajectory etd1_rollout(models::NodeModel& model, const Tensor& u0, const TimeGrid& grid,
                        const expm::ExpmvConfig& cfg);
/// Recorded rollout of a latent batch (n x B); element k is the state at t_k.
std::vector<ad::Var> etd1_rollout(const models::BoundModel& model, ad::Var u0, const TimeGrid& grid,
                                  const expm::ExpmvConfig& cfg);

// ------------------------------------------------------------- IMEX SSP2

/// Two-stage IMEX step, implicit in A u and explicit in g(u):
///   (I - h gamma A) U1 = u
///   (I - h gamma A) U2 = u + h g(U1) + h (1 - 2 gamma) A U1
///   u+ = u + h/2 (g(U1) + g(U2) + A U1 + A U2),   gamma = 1 - 1/sqrt(2).
struct ImexSsp2 {
  static double gamma();
};

Trajectory imex_ssp2_rollout(const Tensor& a, const BlockMap& g, const Tensor& u0, const TimeGrid& grid);
std::vector<ad::Var> imex_ssp2_rollout(const models::BoundModel& model, ad::Var u0, const TimeGrid& grid);

// --------------------------------------------------------------- RKF45

struct AdaptiveOptions {
  double rel_tol = 1e-8;
  double abs_tol = 1e-12;
  /// 0 picks an initial step from the first derivative.
  double h_init = 0.0;
  /// Steps below h_min * max(1, |t|) fail.
  double h_min = 1e-14;
  std::int64_t max_steps = 10'000'000;
};

/// Adaptive Fehlberg 4(5); the accepted steps form the returned grid.
Trajectory rkf45_solve(const VectorField& f, const Tensor& u0, double t0, double t1,
                       const AdaptiveOptions& opts = {});
/// Same method, forced to land on every grid time.
Trajectory rkf45_solve(const VectorField& f, const Tensor& u0, const TimeGrid& grid,
                       const AdaptiveOptions& opts = {});
/// Fixed steps along the grid with the fourth-order Fehlberg solution.
Trajectory rkf4_fixed(const VectorField& f, const Tensor& u0, const TimeGrid& grid);

// ------------------------------------------------------------- TR-BDF2

struct StiffOptions {
  double rel_tol = 1e-8;
  double abs_tol = 1e-12;
  double newton_tol = 1e-10;
  int newton_max_iter = 20;
  double h_init = 0.0;
  double h_min = 1e-14;
  std::int64_t max_steps = 10'000'000;
};

/// Adaptive TR-BDF2 with Newton iterations and step-doubling error control
/// (the accepted value is the Richardson-extrapolated pair of half steps);
/// states at the grid times come from cubic Hermite interpolation between
/// accepted steps.
Trajectory stiff_solve(const VectorField& f, const JacobianField& jac, const Tensor& u0, const TimeGrid& grid,
                       const StiffOptions& opts = {});

}  // namespace stiffnode::integrators
