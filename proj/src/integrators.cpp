#include "stiffnode/integrators.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

#include <Eigen/Dense>

namespace stiffnode::integrators {

// ------------------------------------------------------------------ grids

TimeGrid::TimeGrid(std::vector<double> t) : t_(std::move(t)) {
  if (t_.empty()) throw std::invalid_argument("TimeGrid: empty");
  for (std::size_t i = 0; i < t_.size(); ++i) {
    if (!std::isfinite(t_[i])) throw std::invalid_argument("TimeGrid: non-finite time at index " + std::to_string(i));
    if (i > 0 && !(t_[i] > t_[i - 1])) {
      throw std::invalid_argument("TimeGrid: times must be strictly increasing (index " + std::to_string(i) + ")");
    }
  }
}

TimeGrid TimeGrid::uniform(double t0, double t1, std::size_t count) {
  if (count < 2) throw std::invalid_argument("TimeGrid::uniform needs at least 2 points");
  std::vector<double> t(count);
  const double h = (t1 - t0) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) t[i] = t0 + h * static_cast<double>(i);
  t.back() = t1;
  return TimeGrid(std::move(t));
}

TimeGrid TimeGrid::logspace(double t0, double t1, std::size_t count) {
  if (count < 2) throw std::invalid_argument("TimeGrid::logspace needs at least 2 points");
  if (!(t0 > 0.0) || !(t1 > t0)) throw std::invalid_argument("TimeGrid::logspace needs 0 < t0 < t1");
  std::vector<double> t(count);
  const double l0 = std::log10(t0);
  const double l1 = std::log10(t1);
  for (std::size_t i = 0; i < count; ++i) {
    t[i] = std::pow(10.0, l0 + (l1 - l0) * static_cast<double>(i) / static_cast<double>(count - 1));
  }
  t.front() = t0;
  t.back() = t1;
  return TimeGrid(std::move(t));
}

TimeGrid TimeGrid::parse(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("grid spec '" + spec + "' has no kind prefix");
  const std::string kind = spec.substr(0, colon);
  const std::string rest = spec.substr(colon + 1);
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(item);
    return out;
  };
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) throw std::invalid_argument("grid spec '" + spec + "': bad number '" + s + "'");
    return v;
  };
  if (kind == "list") {
    std::vector<double> t;
    for (const auto& item : split(rest, ',')) t.push_back(number(item));
    return TimeGrid(std::move(t));
  }
  const auto parts = split(rest, ':');
  if (parts.size() != 3) throw std::invalid_argument("grid spec '" + spec + "' must be kind:t0:t1:N");
  const double n = number(parts[2]);
  if (n < 2 || n != std::floor(n)) throw std::invalid_argument("grid spec '" + spec + "': N must be an integer >= 2");
  const auto count = static_cast<std::size_t>(n);
  if (kind == "uniform") return uniform(number(parts[0]), number(parts[1]), count);
  if (kind == "log") return logspace(number(parts[0]), number(parts[1]), count);
  throw std::invalid_argument("grid spec '" + spec + "': unknown kind '" + kind + "'");
}

double TimeGrid::max_step() const {
  double m = 0.0;
  for (std::size_t i = 0; i + 1 < t_.size(); ++i) m = std::max(m, step(i));
  return m;
}

void Trajectory::validate() const {
  if (states.size() != grid.size()) {
    throw std::invalid_argument("Trajectory: " + std::to_string(states.size()) + " states for " +
                                std::to_string(grid.size()) + " times");
  }
  for (const auto& s : states) {
    if (s.rows() != dim() || s.cols() != 1) throw std::invalid_argument("Trajectory: inconsistent state shape");
  }
}

// ------------------------------------------------------------------ ETD1

namespace {

Tensor column_or_throw(const Tensor& u0, const char* who) {
  if (u0.cols() != 1) throw ShapeError(std::string(who) + ": initial state must be a column, got " + u0.shape_str());
  return u0;
}

}  // namespace

Trajectory etd1_rollout(const Tensor& a, const BlockMap& g, const Tensor& u0, const TimeGrid& grid,
                        const expm::ExpmvConfig& cfg) {
  Trajectory out{grid, {column_or_throw(u0, "etd1_rollout")}};
  const auto act = expm::dense_action(a);
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const Tensor& u = out.states.back();
    try {
      out.states.push_back(expm::etd1_augmented_step(act, g(u), u, grid.step(k), cfg));
    } catch (const expm::ExpmvError& e) {
      throw IntegrationError("etd1_rollout step " + std::to_string(k) + ": " + e.what(), static_cast<std::int64_t>(k));
    }
  }
  return out;
}

std::vector<ad::Var> etd1_rollout(const models::BoundModel& model, ad::Var u0, const TimeGrid& grid,
                                  const expm::ExpmvConfig& cfg) {
  std::vector<ad::Var> states{u0};
  states.reserve(grid.size());
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    ad::Var u = states.back();
    try {
      states.push_back(expm::etd1_step(model.a, model.nonlinear(u), u, grid.step(k), cfg));
    } catch (const expm::ExpmvError& e) {
      throw IntegrationError("etd1_rollout step " + std::to_string(k) + ": " + e.what(), static_cast<std::int64_t>(k));
    }
  }
  return states;
}

Trajectory etd1_rollout(models::NodeModel& model, const Tensor& u0, const TimeGrid& grid,
                        const expm::ExpmvConfig& cfg) {
  Trajectory out{grid, {column_or_throw(u0, "etd1_rollout")}};
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    ad::Tape tape;
    const models::BoundModel bound = model.bind(tape);
    ad::Var u = tape.constant(out.states.back());
    try {
      out.states.push_back(expm::etd1_step(bound.a, bound.nonlinear(u), u, grid.step(k), cfg).value());
    } catch (const expm::ExpmvError& e) {
      throw IntegrationError("etd1_rollout step " + std::to_string(k) + ": " + e.what(), static_cast<std::int64_t>(k));
    }
  }
  return out;
}

// ------------------------------------------------------------- IMEX SSP2

double ImexSsp2::gamma() { return 1.0 - 1.0 / std::sqrt(2.0); }

namespace {

Tensor lu_solve(const Eigen::PartialPivLU<Eigen::MatrixXd>& lu, const Tensor& b) {
  Eigen::VectorXd rhs(b.rows());
  for (std::size_t i = 0; i < b.rows(); ++i) rhs(static_cast<Eigen::Index>(i)) = b[i];
  const Eigen::VectorXd x = lu.solve(rhs);
  Tensor out(b.rows(), 1);
  for (std::size_t i = 0; i < b.rows(); ++i) out[i] = x(static_cast<Eigen::Index>(i));
  return out;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t(i, j);
  return m;
}

void check_lu(const Eigen::PartialPivLU<Eigen::MatrixXd>& lu, const Eigen::MatrixXd& m, std::size_t step) {
  const double scale = m.cwiseAbs().maxCoeff();
  const double pivot = lu.matrixLU().diagonal().cwiseAbs().minCoeff();
  if (!(pivot > 1e-14 * scale)) {
    throw IntegrationError("imex_ssp2_rollout step " + std::to_string(step) + ": I - h*gamma*A is singular",
                           static_cast<std::int64_t>(step));
  }
}

}  // namespace

Trajectory imex_ssp2_rollout(const Tensor& a, const BlockMap& g, const Tensor& u0, const TimeGrid& grid) {
  Trajectory out{grid, {column_or_throw(u0, "imex_ssp2_rollout")}};
  const double gm = ImexSsp2::gamma();
  const std::size_t n = a.rows();
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const double h = grid.step(k);
    const Tensor& u = out.states.back();
    const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n, n) - h * gm * to_eigen(a);
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
    check_lu(lu, m, k);
    const Tensor u1 = lu_solve(lu, u);
    const Tensor g1 = g(u1);
    const Tensor au1 = matmul(a, u1);
    const Tensor u2 = lu_solve(lu, u + h * g1 + (h * (1.0 - 2.0 * gm)) * au1);
    const Tensor g2 = g(u2);
    out.states.push_back(u + (0.5 * h) * (g1 + g2 + au1 + matmul(a, u2)));
  }
  return out;
}

std::vector<ad::Var> imex_ssp2_rollout(const models::BoundModel& model, ad::Var u0, const TimeGrid& grid) {
  const double gm = ImexSsp2::gamma();
  std::vector<ad::Var> states{u0};
  states.reserve(grid.size());
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const double h = grid.step(k);
    ad::Var u = states.back();
    ad::Var m = ad::add_identity(ad::scale(model.a, -h * gm), 1.0);
    try {
      ad::Var u1 = ad::solve(m, u);
      ad::Var g1 = model.nonlinear(u1);
      ad::Var au1 = ad::matmul(model.a, u1);
      ad::Var u2 = ad::solve(m, u + h * g1 + (h * (1.0 - 2.0 * gm)) * au1);
      ad::Var g2 = model.nonlinear(u2);
      states.push_back(u + (0.5 * h) * (g1 + g2 + au1 + ad::matmul(model.a, u2)));
    } catch (const std::runtime_error& e) {
      throw IntegrationError("imex_ssp2_rollout step " + std::to_string(k) + ": " + e.what(),
                             static_cast<std::int64_t>(k));
    }
  }
  return states;
}

// --------------------------------------------------------------- RKF45

namespace {

struct FehlbergResult {
  Tensor y4;
  Tensor y5;
};

FehlbergResult fehlberg_step(const VectorField& f, double t, const Tensor& u, const Tensor& k1, double h) {
  const Tensor k2 = h * f(t + h / 4, u + (1.0 / 4) * k1);
  const Tensor k3 = h * f(t + 3 * h / 8, u + (3.0 / 32) * k1 + (9.0 / 32) * k2);
  const Tensor k4 =
      h * f(t + 12 * h / 13, u + (1932.0 / 2197) * k1 + (-7200.0 / 2197) * k2 + (7296.0 / 2197) * k3);
  const Tensor k5 = h * f(t + h, u + (439.0 / 216) * k1 + (-8.0) * k2 + (3680.0 / 513) * k3 +
                                     (-845.0 / 4104) * k4);
  const Tensor k6 = h * f(t + h / 2, u + (-8.0 / 27) * k1 + 2.0 * k2 + (-3544.0 / 2565) * k3 +
                                         (1859.0 / 4104) * k4 + (-11.0 / 40) * k5);
  FehlbergResult r;
  r.y4 = u + (25.0 / 216) * k1 + (1408.0 / 2565) * k3 + (2197.0 / 4104) * k4 + (-1.0 / 5) * k5;
  r.y5 = u + (16.0 / 135) * k1 + (6656.0 / 12825) * k3 + (28561.0 / 56430) * k4 + (-9.0 / 50) * k5 +
         (2.0 / 55) * k6;
  return r;
}

double scaled_error(const Tensor& diff, const Tensor& u, const Tensor& v, double rel, double abs) {
  double e = 0.0;
  for (std::size_t i = 0; i < diff.size(); ++i) {
    const double sc = abs + rel * std::max(std::abs(u[i]), std::abs(v[i]));
    e = std::max(e, std::abs(diff[i]) / sc);
  }
  return e;
}

double initial_step(const VectorField& f, double t, const Tensor& u, double span, double rel, double abs) {
  const Tensor du = f(t, u);
  double d0 = 0.0;
  double d1 = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double sc = abs + rel * std::abs(u[i]);
    d0 = std::max(d0, std::abs(u[i]) / sc);
    d1 = std::max(d1, std::abs(du[i]) / sc);
  }
  double h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
  return std::min(h, std::abs(span));
}

// Advances (t, u) to `target` with adaptive Fehlberg steps. Accepted states
// are appended to `out` when it is non-null.
void rkf45_advance(const VectorField& f, double& t, Tensor& u, double target, double& h, const AdaptiveOptions& opts,
                   std::int64_t& steps, std::vector<double>* times, std::vector<Tensor>* out) {
  while (t < target) {
    const bool last = t + h >= target;
    const double step = last ? target - t : h;
    const Tensor k1 = step * f(t, u);
    const FehlbergResult r = fehlberg_step(f, t, u, k1, step);
    const double err = scaled_error(r.y5 - r.y4, u, r.y4, opts.rel_tol, opts.abs_tol);
    if (!std::isfinite(err)) {
      h = step / 4;
    } else if (err <= 1.0) {
      t = last ? target : t + step;
      u = r.y4;
      if (out != nullptr) {
        times->push_back(t);
        out->push_back(u);
      }
      const double grow = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
      if (!last || grow < 1.0) h = step * grow;
    } else {
      h = step * std::clamp(0.9 * std::pow(err, -0.25), 0.1, 0.5);
    }
    if (h < opts.h_min * std::max(1.0, std::abs(t))) {
      throw IntegrationError("rkf45: step size underflow at t = " + std::to_string(t) + " (problem may be stiff)",
                             steps);
    }
    if (++steps > opts.max_steps) throw IntegrationError("rkf45: step limit exceeded", steps);
  }
}

}  // namespace

Trajectory rkf45_solve(const VectorField& f, const Tensor& u0, double t0, double t1, const AdaptiveOptions& opts) {
  if (!(t1 > t0)) throw std::invalid_argument("rkf45_solve: t1 must exceed t0");
  Tensor u = column_or_throw(u0, "rkf45_solve");
  double t = t0;
  double h = opts.h_init > 0 ? opts.h_init : initial_step(f, t0, u, t1 - t0, opts.rel_tol, opts.abs_tol);
  std::vector<double> times{t0};
  std::vector<Tensor> states{u};
  std::int64_t steps = 0;
  rkf45_advance(f, t, u, t1, h, opts, steps, &times, &states);
  return Trajectory{TimeGrid(std::move(times)), std::move(states)};
}

Trajectory rkf45_solve(const VectorField& f, const Tensor& u0, const TimeGrid& grid, const AdaptiveOptions& opts) {
  Tensor u = column_or_throw(u0, "rkf45_solve");
  Trajectory out{grid, {u}};
  if (grid.size() < 2) return out;
  double t = grid.front();
  double h = opts.h_init > 0 ? opts.h_init
                             : initial_step(f, t, u, grid.back() - t, opts.rel_tol, opts.abs_tol);
  std::int64_t steps = 0;
  for (std::size_t k = 1; k < grid.size(); ++k) {
    rkf45_advance(f, t, u, grid[k], h, opts, steps, nullptr, nullptr);
    out.states.push_back(u);
  }
  return out;
}

Trajectory rkf4_fixed(const VectorField& f, const Tensor& u0, const TimeGrid& grid) {
  Trajectory out{grid, {column_or_throw(u0, "rkf4_fixed")}};
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const double h = grid.step(k);
    const Tensor& u = out.states.back();
    out.states.push_back(fehlberg_step(f, grid[k], u, h * f(grid[k], u), h).y4);
  }
  return out;
}

// ------------------------------------------------------------- TR-BDF2

namespace {

// Solves X - c*h*f(t, X) = rhs by Newton's method from the guess x0.
std::optional<Tensor> newton_solve(const VectorField& f, const JacobianField& jac, double t, double ch,
                                   const Tensor& rhs, Tensor x, const StiffOptions& opts) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  for (int it = 0; it < opts.newton_max_iter; ++it) {
    const Tensor r = x - ch * f(t, x) - rhs;
    if (!r.all_finite()) return std::nullopt;
    const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n, n) - ch * to_eigen(jac(t, x));
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
    if (!(lu.matrixLU().diagonal().cwiseAbs().minCoeff() > 1e-14 * m.cwiseAbs().maxCoeff())) return std::nullopt;
    const Tensor delta = lu_solve(lu, r);
    x -= delta;
    double size = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) size = std::max(size, std::abs(delta[i]) / (opts.abs_tol + std::abs(x[i])));
    if (!std::isfinite(size)) return std::nullopt;
    if (size <= opts.newton_tol) return x;
  }
  return std::nullopt;
}

std::optional<Tensor> trbdf2_step(const VectorField& f, const JacobianField& jac, double t, const Tensor& u,
                                  const Tensor& fu, double h, const StiffOptions& opts) {
  const double g = 2.0 - std::sqrt(2.0);
  // Trapezoidal stage to t + g h.
  auto mid = newton_solve(f, jac, t + g * h, 0.5 * g * h, u + (0.5 * g * h) * fu, u, opts);
  if (!mid) return std::nullopt;
  // BDF2 stage to t + h.
  const double w = 1.0 / (g * (2.0 - g));
  const Tensor rhs = w * (*mid) + (-(1.0 - g) * (1.0 - g) * w) * u;
  return newton_solve(f, jac, t + h, (1.0 - g) / (2.0 - g) * h, rhs, *mid, opts);
}

Tensor hermite(double ta, const Tensor& ua, const Tensor& fa, double tb, const Tensor& ub, const Tensor& fb,
               double t) {
  const double h = tb - ta;
  const double s = (t - ta) / h;
  const double s2 = s * s;
  const double s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * ua + ((s3 - 2 * s2 + s) * h) * fa + (-2 * s3 + 3 * s2) * ub +
         ((s3 - s2) * h) * fb;
}

}  // namespace

Trajectory stiff_solve(const VectorField& f, const JacobianField& jac, const Tensor& u0, const TimeGrid& grid,
                       const StiffOptions& opts) {
  Tensor u = column_or_throw(u0, "stiff_solve");
  Trajectory out{grid, {u}};
  if (grid.size() < 2) return out;
  double t = grid.front();
  const double t_end = grid.back();
  Tensor fu = f(t, u);
  double h = opts.h_init > 0 ? opts.h_init : initial_step(f, t, u, t_end - t, opts.rel_tol, opts.abs_tol);
  std::size_t next = 1;
  std::int64_t steps = 0;
  while (next < grid.size()) {
    const bool last = t + h >= t_end;
    const double step = last ? t_end - t : h;
    std::optional<Tensor> full = trbdf2_step(f, jac, t, u, fu, step, opts);
    std::optional<Tensor> half;
    std::optional<Tensor> two_halves;
    if (full) half = trbdf2_step(f, jac, t, u, fu, step / 2, opts);
    if (half) two_halves = trbdf2_step(f, jac, t + step / 2, *half, f(t + step / 2, *half), step / 2, opts);
    if (!two_halves) {
      h = step / 4;
    } else {
      // Local error of the two half steps by Richardson (order 2 method).
      const double err = scaled_error((1.0 / 3.0) * (*two_halves - *full), u, *two_halves, opts.rel_tol, opts.abs_tol);
      if (err <= 1.0) {
        const double t_new = last ? t_end : t + step;
        // Local extrapolation; weights sum to one, so linear invariants are kept.
        const Tensor u_new = (4.0 / 3.0) * (*two_halves) + (-1.0 / 3.0) * (*full);
        const Tensor f_new = f(t_new, u_new);
        while (next < grid.size() && grid[next] <= t_new) {
          out.states.push_back(grid[next] == t_new ? u_new : hermite(t, u, fu, t_new, u_new, f_new, grid[next]));
          ++next;
        }
        t = t_new;
        u = u_new;
        fu = f_new;
        const double grow = err == 0.0 ? 4.0 : std::clamp(0.9 * std::pow(err, -1.0 / 3.0), 0.2, 4.0);
        if (!last || grow < 1.0) h = step * grow;
      } else {
        h = step * std::clamp(0.9 * std::pow(err, -1.0 / 3.0), 0.1, 0.5);
      }
    }
    if (h < opts.h_min * std::max(1.0, std::abs(t))) {
      throw IntegrationError("stiff_solve: Newton failed to converge or step size underflow at t = " +
                                 std::to_string(t),
                             steps);
    }
    if (++steps > opts.max_steps) throw IntegrationError("stiff_solve: step limit exceeded", steps);
  }
  return out;
}

}  // namespace stiffnode::integrators
