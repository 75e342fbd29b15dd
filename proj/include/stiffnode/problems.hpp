#pragma once

// Benchmark systems, ground-truth generation and the dataset file format.

#include <complex>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stiffnode/integrators.hpp"
#include "stiffnode/tensor.hpp"

namespace stiffnode::problems {

// -------------------------------------------------- weakly nonlinear system

/// [[-2, 1], [0, -2]]: norm of e^{tA} decays monotonically.
Tensor a_decay();
/// [[-2, 10], [0, -2]]: same spectrum, transient growth before decay.
Tensor a_bump();
/// "bump" or "decay".
Tensor named_matrix(const std::string& name);

/// A x + eps sin(x) applied column-wise to a batch (2 x B).
Tensor weakly_nonlinear_rhs(const Tensor& x, double eps, const Tensor& a);

struct TransientDiagnostics {
  double alpha;  ///< max Re lambda(A), long-time rate
  double gamma;  ///< max lambda((A + A^T)/2), initial slope of log |e^{tA}|
};
TransientDiagnostics transient_diagnostics(const Tensor& a);

// ----------------------------------------------------------------- Robertson

inline constexpr double kRobertsonScale = 1e4;

Tensor robertson_rhs(const Tensor& y);
Tensor robertson_jacobian(const Tensor& y);
/// y2 -> 1e4 y2, column-wise.
Tensor robertson_scale(Tensor y);
Tensor robertson_unscale(Tensor y);

// ----------------------------------------------------- Kuramoto-Sivashinsky

struct KsOptions {
  std::size_t grid_points = 64;
  double domain_length = 22.0;
  double inner_dt = 0.25;
  double sample_dt = 1.0;
  double burn_in = 100.0;
  int contour_points = 32;
};

/// u_t = -u u_x - u_xx - u_xxxx on a periodic domain, Fourier pseudo-spectral
/// with 2/3-rule dealiasing and ETDRK4 time stepping. Not thread-safe; use
/// one solver per thread.
class KsSolver {
 public:
  explicit KsSolver(const KsOptions& opts);
  ~KsSolver();
  KsSolver(const KsSolver&) = delete;
  KsSolver& operator=(const KsSolver&) = delete;

  const KsOptions& options() const { return opts_; }
  /// Physical grid x_j = j L / N.
  std::vector<double> grid() const;

  /// Integrates for `duration` (a multiple of inner_dt). u is N x 1.
  Tensor advance(const Tensor& u, double duration);
  /// States at 0, dt, ..., count * dt.
  std::vector<Tensor> sample(const Tensor& u0, std::size_t count, double dt);

  /// Largest |Im u| seen by the inverse transform since construction.
  double imag_residue() const { return imag_residue_; }

 private:
  void nonlinear(const std::complex<double>* v, std::complex<double>* out);
  void to_physical(const std::complex<double>* v, std::complex<double>* u);
  void project_real(std::complex<double>* v) const;

  KsOptions opts_;
  std::size_t n_;
  std::vector<std::complex<double>> e_, e2_, q_, f1_, f2_, f3_, g_;
  std::complex<double>* work_ = nullptr;
  std::complex<double>* spec_ = nullptr;
  void* plan_fwd_ = nullptr;
  void* plan_bwd_ = nullptr;
  double imag_residue_ = 0.0;
};

/// Random combination of the first four Fourier modes, amplitudes in [-1, 1].
Tensor ks_initial_condition(const KsOptions& opts, std::mt19937_64& rng);

// ------------------------------------------------------------------ datasets

/// Trajectories on a shared grid, values ordered (trajectory, time, component).
struct Dataset {
  std::string problem;
  std::size_t dim = 0;
  std::size_t n_traj = 0;
  integrators::TimeGrid grid;
  std::string grid_recipe;
  double noise_scale = 0.0;
  std::uint64_t seed = 0;
  /// Scaling, tolerances and problem parameters.
  nlohmann::json meta = nlohmann::json::object();
  std::vector<double> values;

  std::size_t n_times() const { return grid.size(); }
  double at(std::size_t traj, std::size_t time, std::size_t comp) const {
    return values[(traj * n_times() + time) * dim + comp];
  }
  double& at(std::size_t traj, std::size_t time, std::size_t comp) {
    return values[(traj * n_times() + time) * dim + comp];
  }
  Tensor state(std::size_t traj, std::size_t time) const;
  /// Snapshot at one time of several trajectories (dim x B).
  Tensor block(std::size_t time, const std::vector<std::size_t>& trajs) const;
  integrators::Trajectory trajectory(std::size_t traj) const;

  /// Keeps the listed time indices (strictly increasing).
  Dataset subsample_times(const std::vector<std::size_t>& indices) const;
  Dataset select(const std::vector<std::size_t>& trajs) const;

  void save(const std::filesystem::path& path) const;
  static Dataset load(const std::filesystem::path& path);
};

struct GenOptions {
  /// "weakly-nonlinear", "robertson" or "ks".
  std::string problem = "weakly-nonlinear";
  std::size_t n_traj = 1000;
  /// Empty selects the problem default.
  std::string grid;
  double noise_scale = 0.0;
  std::uint64_t seed = 0;
  double rel_tol = 1e-8;
  double abs_tol = 1e-12;
  // weakly nonlinear
  double eps = 0.0;
  std::string matrix = "bump";
  /// Time indices kept after generation; empty keeps all.
  std::vector<std::size_t> keep_times;
  // Kuramoto-Sivashinsky
  KsOptions ks;
  std::size_t ks_window_steps = 8;
  /// Sampled units after burn-in; 0 means n_traj + 100.
  double ks_total_time = 0.0;
};

/// Everything needed to produce ground truth for an ODE benchmark.
struct ProblemSpec {
  std::string name;
  std::size_t dim = 0;
  integrators::VectorField rhs;
  std::optional<integrators::JacobianField> jacobian;
  std::string default_grid;
  std::function<Tensor(std::mt19937_64&)> sample_ic;
  /// Map between raw and stored (scaled) coordinates; identity when unset.
  std::function<Tensor(Tensor)> scale;
  std::function<Tensor(Tensor)> unscale;
};

/// Weakly nonlinear and Robertson specs; "ks" is handled by KsSolver.
ProblemSpec problem_spec(const GenOptions& opts);

/// Ground truth in raw coordinates: TR-BDF2 when a Jacobian is available,
/// RKF45 otherwise.
integrators::Trajectory reference_solution(const ProblemSpec& spec, const Tensor& u0,
                                           const integrators::TimeGrid& grid, double rel_tol,
                                           double abs_tol);

/// Independent stream for trajectory `index` (stream selects IC vs noise).
std::mt19937_64 trajectory_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t stream = 0);

Dataset gen_dataset(const GenOptions& opts);

}  // namespace stiffnode::problems
