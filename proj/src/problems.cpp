#include "stiffnode/problems.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <fftw3.h>

namespace stiffnode::problems {

using integrators::IntegrationError;
using integrators::TimeGrid;
using integrators::Trajectory;
using json = nlohmann::json;
using cplx = std::complex<double>;

static_assert(std::endian::native == std::endian::little, "dataset blocks are little-endian");

Tensor a_decay() { return Tensor::from_rows({{-2.0, 1.0}, {0.0, -2.0}}); }
Tensor a_bump() { return Tensor::from_rows({{-2.0, 10.0}, {0.0, -2.0}}); }

Tensor named_matrix(const std::string& name) {
  if (name == "bump") return a_bump();
  if (name == "decay") return a_decay();
  throw std::invalid_argument("unknown matrix '" + name + "' (expected bump or decay)");
}

Tensor weakly_nonlinear_rhs(const Tensor& x, double eps, const Tensor& a) {
  if (a.rows() != a.cols() || a.cols() != x.rows()) {
    throw ShapeError("weakly_nonlinear_rhs: A " + a.shape_str() + " vs x " + x.shape_str());
  }
  Tensor out = matmul(a, x);
  if (eps != 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += eps * std::sin(x[i]);
  }
  return out;
}

TransientDiagnostics transient_diagnostics(const Tensor& a) {
  if (a.rows() != a.cols() || a.empty()) throw ShapeError("transient_diagnostics: A must be square");
  const auto n = static_cast<Eigen::Index>(a.rows());
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = a(i, j);
  Eigen::EigenSolver<Eigen::MatrixXd> eig(m, false);
  const double alpha = eig.eigenvalues().real().maxCoeff();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> sym(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return {alpha, sym.eigenvalues().maxCoeff()};
}

// ----------------------------------------------------------------- Robertson

Tensor robertson_rhs(const Tensor& y) {
  if (y.rows() != 3) throw ShapeError("robertson_rhs: expected 3 rows, got " + y.shape_str());
  Tensor out(3, y.cols());
  for (std::size_t c = 0; c < y.cols(); ++c) {
    const double y1 = y(0, c), y2 = y(1, c), y3 = y(2, c);
    const double r1 = 0.04 * y1, r2 = 1e4 * y2 * y3, r3 = 3e7 * y2 * y2;
    out(0, c) = -r1 + r2;
    out(1, c) = r1 - r2 - r3;
    out(2, c) = r3;
  }
  return out;
}

Tensor robertson_jacobian(const Tensor& y) {
  if (y.rows() != 3 || y.cols() != 1) throw ShapeError("robertson_jacobian: expected 3 x 1");
  const double y2 = y[1], y3 = y[2];
  return Tensor::from_rows({{-0.04, 1e4 * y3, 1e4 * y2},
                            {0.04, -1e4 * y3 - 6e7 * y2, -1e4 * y2},
                            {0.0, 6e7 * y2, 0.0}});
}

Tensor robertson_scale(Tensor y) {
  if (y.rows() != 3) throw ShapeError("robertson_scale: expected 3 rows");
  for (std::size_t c = 0; c < y.cols(); ++c) y(1, c) *= kRobertsonScale;
  return y;
}

Tensor robertson_unscale(Tensor y) {
  if (y.rows() != 3) throw ShapeError("robertson_unscale: expected 3 rows");
  for (std::size_t c = 0; c < y.cols(); ++c) y(1, c) /= kRobertsonScale;
  return y;
}

// ----------------------------------------------------- Kuramoto-Sivashinsky

namespace {

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

long signed_mode(std::size_t j, std::size_t n) {
  const auto sj = static_cast<long>(j), sn = static_cast<long>(n);
  if (2 * sj < sn) return sj;
  if (2 * sj == sn) return 0;  // Nyquist carries no derivative
  return sj - sn;
}

}  // namespace

KsSolver::KsSolver(const KsOptions& opts) : opts_(opts), n_(opts.grid_points) {
  if (n_ < 4 || !std::has_single_bit(n_)) throw std::invalid_argument("KS grid_points must be a power of two >= 4");
  if (!(opts.domain_length > 0.0) || !(opts.inner_dt > 0.0) || opts.contour_points < 1) {
    throw std::invalid_argument("KS domain_length, inner_dt and contour_points must be positive");
  }
  const double h = opts.inner_dt;
  const int m = opts.contour_points;
  e_.resize(n_);
  e2_.resize(n_);
  q_.resize(n_);
  f1_.resize(n_);
  f2_.resize(n_);
  f3_.resize(n_);
  g_.resize(n_);
  for (std::size_t j = 0; j < n_; ++j) {
    const long mode = signed_mode(j, n_);
    const double k = 2.0 * std::numbers::pi * static_cast<double>(mode) / opts.domain_length;
    const double lin = k * k - k * k * k * k;
    e_[j] = std::exp(h * lin);
    e2_[j] = std::exp(0.5 * h * lin);
    // 2/3 rule: modes above N/3 are dropped from the quadratic term.
    const bool keep = 3 * std::labs(mode) <= static_cast<long>(n_);
    g_[j] = keep ? cplx(0.0, -0.5 * k) : cplx(0.0, 0.0);
    cplx q = 0.0, a = 0.0, b = 0.0, c = 0.0;
    for (int p = 1; p <= m; ++p) {
      const cplx r = std::exp(cplx(0.0, std::numbers::pi * (p - 0.5) / m));
      const cplx lr = h * lin + r;
      const cplx elr = std::exp(lr);
      const cplx lr3 = lr * lr * lr;
      q += (std::exp(0.5 * lr) - 1.0) / lr;
      a += (-4.0 - lr + elr * (4.0 - 3.0 * lr + lr * lr)) / lr3;
      b += (2.0 + lr + elr * (-2.0 + lr)) / lr3;
      c += (-4.0 - 3.0 * lr - lr * lr + elr * (4.0 - lr)) / lr3;
    }
    q_[j] = h * (q / static_cast<double>(m)).real();
    f1_[j] = h * (a / static_cast<double>(m)).real();
    f2_[j] = h * (b / static_cast<double>(m)).real();
    f3_[j] = h * (c / static_cast<double>(m)).real();
  }
  work_ = static_cast<cplx*>(fftw_malloc(sizeof(cplx) * n_));
  spec_ = static_cast<cplx*>(fftw_malloc(sizeof(cplx) * n_));
  std::lock_guard lock(fftw_planner_mutex());
  auto* w = reinterpret_cast<fftw_complex*>(work_);
  auto* s = reinterpret_cast<fftw_complex*>(spec_);
  const int len = static_cast<int>(n_);
  plan_fwd_ = fftw_plan_dft_1d(len, w, s, FFTW_FORWARD, FFTW_ESTIMATE);
  plan_bwd_ = fftw_plan_dft_1d(len, s, w, FFTW_BACKWARD, FFTW_ESTIMATE);
}

KsSolver::~KsSolver() {
  std::lock_guard lock(fftw_planner_mutex());
  fftw_destroy_plan(static_cast<fftw_plan>(plan_fwd_));
  fftw_destroy_plan(static_cast<fftw_plan>(plan_bwd_));
  fftw_free(work_);
  fftw_free(spec_);
}

std::vector<double> KsSolver::grid() const {
  std::vector<double> x(n_);
  for (std::size_t j = 0; j < n_; ++j) x[j] = opts_.domain_length * static_cast<double>(j) / static_cast<double>(n_);
  return x;
}

void KsSolver::to_physical(const cplx* v, cplx* u) {
  std::memcpy(spec_, v, sizeof(cplx) * n_);
  fftw_execute(static_cast<fftw_plan>(plan_bwd_));
  const double inv = 1.0 / static_cast<double>(n_);
  for (std::size_t j = 0; j < n_; ++j) {
    u[j] = work_[j] * inv;
    imag_residue_ = std::max(imag_residue_, std::abs(u[j].imag()));
  }
}

// Roundoff breaks conjugate symmetry, and the linearly unstable low modes
// amplify the antisymmetric part without bound, so it is removed each step.
void KsSolver::project_real(cplx* v) const {
  v[0] = v[0].real();
  v[n_ / 2] = 0.0;
  for (std::size_t j = 1; j < n_ / 2; ++j) {
    const cplx avg = 0.5 * (v[j] + std::conj(v[n_ - j]));
    v[j] = avg;
    v[n_ - j] = std::conj(avg);
  }
}

void KsSolver::nonlinear(const cplx* v, cplx* out) {
  std::vector<cplx> u(n_);
  to_physical(v, u.data());
  for (std::size_t j = 0; j < n_; ++j) {
    const double re = u[j].real();
    work_[j] = re * re;
  }
  fftw_execute(static_cast<fftw_plan>(plan_fwd_));
  for (std::size_t j = 0; j < n_; ++j) out[j] = g_[j] * spec_[j];
}

Tensor KsSolver::advance(const Tensor& u, double duration) {
  return sample(u, 1, duration).back();
}

std::vector<Tensor> KsSolver::sample(const Tensor& u0, std::size_t count, double dt) {
  if (u0.rows() != n_ || u0.cols() != 1) {
    throw ShapeError("KsSolver: expected " + std::to_string(n_) + " x 1 state, got " + u0.shape_str());
  }
  const double ratio = dt / opts_.inner_dt;
  const auto inner = static_cast<long long>(std::llround(ratio));
  if (inner < 1 || std::abs(ratio - static_cast<double>(inner)) > 1e-9 * std::max(1.0, ratio)) {
    throw std::invalid_argument("KS sample interval must be a positive multiple of inner_dt");
  }
  std::vector<cplx> v(n_), nv(n_), a(n_), na(n_), b(n_), nb(n_), c(n_), nc(n_), phys(n_);
  for (std::size_t j = 0; j < n_; ++j) work_[j] = u0[j];
  fftw_execute(static_cast<fftw_plan>(plan_fwd_));
  std::memcpy(v.data(), spec_, sizeof(cplx) * n_);
  project_real(v.data());

  std::vector<Tensor> out;
  out.reserve(count + 1);
  out.push_back(u0);
  std::int64_t step = 0;
  for (std::size_t s = 0; s < count; ++s) {
    for (long long i = 0; i < inner; ++i, ++step) {
      nonlinear(v.data(), nv.data());
      for (std::size_t j = 0; j < n_; ++j) a[j] = e2_[j] * v[j] + q_[j] * nv[j];
      nonlinear(a.data(), na.data());
      for (std::size_t j = 0; j < n_; ++j) b[j] = e2_[j] * v[j] + q_[j] * na[j];
      nonlinear(b.data(), nb.data());
      for (std::size_t j = 0; j < n_; ++j) c[j] = e2_[j] * a[j] + q_[j] * (2.0 * nb[j] - nv[j]);
      nonlinear(c.data(), nc.data());
      bool finite = true;
      for (std::size_t j = 0; j < n_; ++j) {
        v[j] = e_[j] * v[j] + nv[j] * f1_[j] + 2.0 * (na[j] + nb[j]) * f2_[j] + nc[j] * f3_[j];
        finite = finite && std::isfinite(v[j].real()) && std::isfinite(v[j].imag());
      }
      project_real(v.data());
      if (!finite) throw IntegrationError("KS spectral state is not finite (inner dt too large?)", step);
    }
    to_physical(v.data(), phys.data());
    Tensor u(n_, 1);
    for (std::size_t j = 0; j < n_; ++j) u[j] = phys[j].real();
    out.push_back(std::move(u));
  }
  return out;
}

Tensor ks_initial_condition(const KsOptions& opts, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> amp(-1.0, 1.0);
  double coef[4][2];
  for (auto& c : coef) {
    c[0] = amp(rng);
    c[1] = amp(rng);
  }
  Tensor u(opts.grid_points, 1);
  for (std::size_t j = 0; j < opts.grid_points; ++j) {
    const double x = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(opts.grid_points);
    double s = 0.0;
    for (int m = 0; m < 4; ++m) s += coef[m][0] * std::cos((m + 1) * x) + coef[m][1] * std::sin((m + 1) * x);
    u[j] = s;
  }
  return u;
}

// ------------------------------------------------------------------ datasets

Tensor Dataset::state(std::size_t traj, std::size_t time) const {
  if (traj >= n_traj || time >= n_times()) throw std::out_of_range("Dataset::state index out of range");
  Tensor out(dim, 1);
  for (std::size_t c = 0; c < dim; ++c) out[c] = at(traj, time, c);
  return out;
}

Tensor Dataset::block(std::size_t time, const std::vector<std::size_t>& trajs) const {
  if (time >= n_times()) throw std::out_of_range("Dataset::block time out of range");
  Tensor out(dim, trajs.size());
  for (std::size_t b = 0; b < trajs.size(); ++b) {
    if (trajs[b] >= n_traj) throw std::out_of_range("Dataset::block trajectory out of range");
    for (std::size_t c = 0; c < dim; ++c) out(c, b) = at(trajs[b], time, c);
  }
  return out;
}

Trajectory Dataset::trajectory(std::size_t traj) const {
  Trajectory t{grid, {}};
  t.states.reserve(n_times());
  for (std::size_t k = 0; k < n_times(); ++k) t.states.push_back(state(traj, k));
  return t;
}

namespace {

std::string list_recipe(const std::vector<double>& t) {
  std::ostringstream os;
  os.precision(17);
  os << "list:";
  for (std::size_t i = 0; i < t.size(); ++i) os << (i ? "," : "") << t[i];
  return os.str();
}

}  // namespace

Dataset Dataset::subsample_times(const std::vector<std::size_t>& indices) const {
  if (indices.empty()) throw std::invalid_argument("subsample_times: no indices");
  std::vector<double> t;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n_times()) throw std::out_of_range("subsample_times: index out of range");
    if (i > 0 && indices[i] <= indices[i - 1]) throw std::invalid_argument("subsample_times: indices must increase");
    t.push_back(grid[indices[i]]);
  }
  Dataset out = *this;
  out.grid = TimeGrid(t);
  out.grid_recipe = list_recipe(t);
  out.values.assign(n_traj * t.size() * dim, 0.0);
  for (std::size_t r = 0; r < n_traj; ++r)
    for (std::size_t k = 0; k < t.size(); ++k)
      for (std::size_t c = 0; c < dim; ++c) out.at(r, k, c) = at(r, indices[k], c);
  out.meta["subsampled_from"] = grid_recipe;
  return out;
}

Dataset Dataset::select(const std::vector<std::size_t>& trajs) const {
  Dataset out = *this;
  out.n_traj = trajs.size();
  out.values.clear();
  out.values.reserve(trajs.size() * n_times() * dim);
  const std::size_t stride = n_times() * dim;
  for (std::size_t r : trajs) {
    if (r >= n_traj) throw std::out_of_range("Dataset::select index out of range");
    out.values.insert(out.values.end(), values.begin() + static_cast<std::ptrdiff_t>(r * stride),
                      values.begin() + static_cast<std::ptrdiff_t>((r + 1) * stride));
  }
  return out;
}

void Dataset::save(const std::filesystem::path& path) const {
  if (values.size() != n_traj * n_times() * dim) throw std::logic_error("Dataset::save: inconsistent sizes");
  json header = meta;
  header["format"] = "stiffnode-dataset";
  header["version"] = 1;
  header["problem"] = problem;
  header["m"] = dim;
  header["n_traj"] = n_traj;
  header["grid"] = grid_recipe;
  header["times"] = grid.times();
  header["noise"] = noise_scale;
  header["seed"] = seed;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Dataset Dataset::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::string line;
  std::getline(in, line);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw std::runtime_error("bad dataset header in " + path.string() + ": " + e.what());
  }
  if (header.value("format", "") != "stiffnode-dataset") throw std::runtime_error(path.string() + " is not a dataset");
  Dataset d;
  d.problem = header.at("problem").get<std::string>();
  d.dim = header.at("m").get<std::size_t>();
  d.n_traj = header.at("n_traj").get<std::size_t>();
  d.grid_recipe = header.at("grid").get<std::string>();
  d.grid = TimeGrid(header.at("times").get<std::vector<double>>());
  d.noise_scale = header.at("noise").get<double>();
  d.seed = header.at("seed").get<std::uint64_t>();
  for (const char* key : {"format", "version", "problem", "m", "n_traj", "grid", "times", "noise", "seed"}) {
    header.erase(key);
  }
  d.meta = std::move(header);
  const std::size_t count = d.n_traj * d.n_times() * d.dim;
  d.values.resize(count);
  in.read(reinterpret_cast<char*>(d.values.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double)) {
    throw std::runtime_error("truncated dataset " + path.string());
  }
  return d;
}

// ---------------------------------------------------------------- generation

std::mt19937_64 trajectory_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

namespace {

// Shared weakly nonlinear grid: the first 50 accepted RKF45 steps of one reference trajectory.
std::string accepted_step_recipe(const integrators::VectorField& f, double rel_tol, double abs_tol) {
  constexpr std::size_t kSteps = 50;
  Tensor x0(2, 1);
  x0[0] = 1.0;
  x0[1] = 1.0;
  integrators::AdaptiveOptions o;
  o.rel_tol = rel_tol;
  o.abs_tol = abs_tol;
  const Trajectory ref = integrators::rkf45_solve(f, x0, 0.0, 1e3, o);
  if (ref.grid.size() < kSteps + 1) throw std::runtime_error("reference trajectory took too few steps");
  std::string recipe = "list:";
  char buf[32];
  for (std::size_t k = 0; k <= kSteps; ++k) {
    std::snprintf(buf, sizeof buf, "%.17g", ref.grid[k]);
    recipe += (k ? "," : "") + std::string(buf);
  }
  return recipe;
}

}  // namespace

ProblemSpec problem_spec(const GenOptions& opts) {
  ProblemSpec spec;
  spec.name = opts.problem;
  if (opts.problem == "weakly-nonlinear") {
    const Tensor a = named_matrix(opts.matrix);
    const double eps = opts.eps;
    spec.dim = 2;
    spec.rhs = [a, eps](double, const Tensor& u) { return weakly_nonlinear_rhs(u, eps, a); };
    spec.default_grid = accepted_step_recipe(spec.rhs, opts.rel_tol, opts.abs_tol);
    spec.sample_ic = [](std::mt19937_64& rng) {
      std::uniform_real_distribution<double> d(-1.0, 1.0);
      Tensor u(2, 1);
      u[0] = d(rng);
      u[1] = d(rng);
      return u;
    };
  } else if (opts.problem == "robertson") {
    spec.dim = 3;
    spec.rhs = [](double, const Tensor& y) { return robertson_rhs(y); };
    spec.jacobian = [](double, const Tensor& y) { return robertson_jacobian(y); };
    spec.default_grid = "log:4e-6:4e6:50";
    spec.sample_ic = [](std::mt19937_64& rng) {
      std::uniform_real_distribution<double> d(-1e-2, 1e-2);
      Tensor y(3, 1);
      y[0] = 1.0 + d(rng);
      y[2] = std::abs(d(rng));
      const double total = y[0] + y[2];
      y[0] /= total;
      y[2] /= total;
      return y;
    };
    spec.scale = robertson_scale;
    spec.unscale = robertson_unscale;
  } else {
    throw std::invalid_argument("no ODE spec for problem '" + opts.problem + "'");
  }
  return spec;
}

Trajectory reference_solution(const ProblemSpec& spec, const Tensor& u0, const TimeGrid& grid, double rel_tol,
                              double abs_tol) {
  if (spec.jacobian) {
    integrators::StiffOptions o;
    o.rel_tol = rel_tol;
    o.abs_tol = abs_tol;
    return integrators::stiff_solve(spec.rhs, *spec.jacobian, u0, grid, o);
  }
  integrators::AdaptiveOptions o;
  o.rel_tol = rel_tol;
  o.abs_tol = abs_tol;
  return integrators::rkf45_solve(spec.rhs, u0, grid, o);
}

namespace {

void add_noise(Dataset& d) {
  if (d.noise_scale == 0.0) return;
  const std::size_t count = d.n_traj * d.n_times();
  std::vector<double> sd(d.dim, 0.0);
  for (std::size_t c = 0; c < d.dim; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < count; ++i) mean += d.values[i * d.dim + c];
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      const double e = d.values[i * d.dim + c] - mean;
      var += e * e;
    }
    sd[c] = std::sqrt(var / static_cast<double>(count));
  }
  for (std::size_t r = 0; r < d.n_traj; ++r) {
    auto rng = trajectory_rng(d.seed, r, 1);
    std::normal_distribution<double> z(0.0, 1.0);
    for (std::size_t k = 0; k < d.n_times(); ++k)
      for (std::size_t c = 0; c < d.dim; ++c) d.at(r, k, c) += d.noise_scale * sd[c] * z(rng);
  }
  d.meta["noise_std"] = sd;
}

Dataset gen_ks(const GenOptions& opts) {
  const KsOptions& ks = opts.ks;
  const std::size_t window = opts.ks_window_steps;
  if (window < 1) throw std::invalid_argument("ks_window_steps must be positive");
  const double total = opts.ks_total_time > 0.0 ? opts.ks_total_time : static_cast<double>(opts.n_traj) + 100.0;
  const auto count = static_cast<std::size_t>(std::llround(total / ks.sample_dt));
  if (count + 1 < opts.n_traj + window) {
    throw std::invalid_argument("KS total_time too short for " + std::to_string(opts.n_traj) + " windows");
  }
  KsSolver solver(ks);
  auto rng = trajectory_rng(opts.seed, 0);
  Tensor u = solver.advance(ks_initial_condition(ks, rng), ks.burn_in);
  const auto samples = solver.sample(u, count, ks.sample_dt);

  Dataset d;
  d.problem = "ks";
  d.dim = ks.grid_points;
  d.n_traj = opts.n_traj;
  const double span = static_cast<double>(window) * ks.sample_dt;
  d.grid = TimeGrid::uniform(0.0, span, window + 1);
  std::ostringstream recipe;
  recipe.precision(17);
  recipe << "uniform:0:" << span << ":" << window + 1;
  d.grid_recipe = recipe.str();
  d.noise_scale = opts.noise_scale;
  d.seed = opts.seed;
  d.meta["scaling"] = nullptr;
  d.meta["ks"] = {{"grid_points", ks.grid_points}, {"domain_length", ks.domain_length},
                  {"inner_dt", ks.inner_dt},       {"sample_dt", ks.sample_dt},
                  {"burn_in", ks.burn_in},         {"contour_points", ks.contour_points},
                  {"total_time", total},           {"window_steps", window},
                  {"window_stride", 1}};
  d.values.resize(d.n_traj * d.n_times() * d.dim);
  for (std::size_t r = 0; r < d.n_traj; ++r)
    for (std::size_t k = 0; k < d.n_times(); ++k)
      for (std::size_t c = 0; c < d.dim; ++c) d.at(r, k, c) = samples[r + k][c];
  add_noise(d);
  return d;
}

}  // namespace

Dataset gen_dataset(const GenOptions& opts) {
  if (!(opts.noise_scale >= 0.0)) throw std::invalid_argument("noise_scale must be >= 0");
  if (opts.n_traj == 0) throw std::invalid_argument("n_traj must be positive");
  if (opts.problem == "ks") {
    Dataset d = gen_ks(opts);
    return opts.keep_times.empty() ? d : d.subsample_times(opts.keep_times);
  }
  const ProblemSpec spec = problem_spec(opts);
  const std::string recipe = opts.grid.empty() ? spec.default_grid : opts.grid;
  Dataset d;
  d.problem = opts.problem;
  d.dim = spec.dim;
  d.n_traj = opts.n_traj;
  d.grid = TimeGrid::parse(recipe);
  d.grid_recipe = recipe;
  d.noise_scale = opts.noise_scale;
  d.seed = opts.seed;
  if (spec.scale) {
    d.meta["scaling"] = {{"component", 1}, {"factor", kRobertsonScale}};
  } else {
    d.meta["scaling"] = nullptr;
  }
  d.meta["tolerances"] = {{"rel", opts.rel_tol}, {"abs", opts.abs_tol}};
  d.meta["solver"] = spec.jacobian ? "trbdf2" : "rkf45";
  if (opts.problem == "weakly-nonlinear") {
    d.meta["eps"] = opts.eps;
    d.meta["matrix"] = opts.matrix;
  }
  d.values.assign(d.n_traj * d.n_times() * d.dim, 0.0);

  std::exception_ptr failure;
  const auto n = static_cast<std::ptrdiff_t>(d.n_traj);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    try {
      auto rng = trajectory_rng(opts.seed, static_cast<std::uint64_t>(r));
      const Tensor u0 = spec.sample_ic(rng);
      const Trajectory traj = reference_solution(spec, u0, d.grid, opts.rel_tol, opts.abs_tol);
      for (std::size_t k = 0; k < d.n_times(); ++k) {
        const Tensor s = spec.scale ? spec.scale(traj.states[k]) : traj.states[k];
        for (std::size_t c = 0; c < d.dim; ++c) d.at(static_cast<std::size_t>(r), k, c) = s[c];
      }
    } catch (...) {
#pragma omp critical(stiffnode_gen_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  add_noise(d);
  return opts.keep_times.empty() ? d : d.subsample_times(opts.keep_times);
}

}  // namespace stiffnode::problems
