#include "stiffnode/expmv.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Dense>

namespace stiffnode::expm {

void ExpmvConfig::validate() const {
  if (s < 0) throw std::invalid_argument("ExpmvConfig: s must be >= 1 (or 0 for automatic)");
  if (m < 0) throw std::invalid_argument("ExpmvConfig: m must be >= 1 (or 0 for adaptive)");
  if (!(tol > 0.0)) throw std::invalid_argument("ExpmvConfig: tolerance must be positive");
  if (m_cap < 1) throw std::invalid_argument("ExpmvConfig: m_cap must be >= 1");
  if (!(s_rule_constant > 0.0)) throw std::invalid_argument("ExpmvConfig: s-rule constant must be positive");
  if (segment_cap < 1) throw std::invalid_argument("ExpmvConfig: segment_cap must be >= 1");
}

LinearAction dense_action(const Tensor& a) {
  return [a](const Tensor& x) { return matmul(a, x); };
}

// ------------------------------------------------------------- phi functions

namespace {

Tensor taylor_phi(int k, const Tensor& z) {
  const std::size_t n = z.rows();
  double inv_fact = 1.0;  // 1/k!
  for (int i = 2; i <= k; ++i) inv_fact /= i;
  Tensor sum = inv_fact * Tensor::identity(n);
  Tensor term = sum;
  // Sum until adding the next term no longer changes any entry.
  for (int j = 1; j < 1000; ++j) {
    term = (1.0 / static_cast<double>(j + k)) * matmul(z, term);
    Tensor next = sum + term;
    if (next.values() == sum.values()) break;
    sum = std::move(next);
  }
  return sum;
}

}  // namespace

Tensor phi_dense(int k, const Tensor& z) {
  if (z.rows() != z.cols()) throw ShapeError("phi_dense: non-square argument " + z.shape_str());
  if (k < 0) throw std::invalid_argument("phi_dense: order must be non-negative");
  if (k > 0) return taylor_phi(k, z);
  // e^Z by scaling and squaring of the Taylor series.
  const double norm = norm_1(z);
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  Tensor scaled = std::ldexp(1.0, -squarings) * z;
  Tensor e = taylor_phi(0, scaled);
  for (int i = 0; i < squarings; ++i) e = matmul(e, e);
  return e;
}

Tensor phi_next_by_recurrence(int k, const Tensor& phi_k, const Tensor& z) {
  using EMat = Eigen::MatrixXd;
  const auto n = static_cast<Eigen::Index>(z.rows());
  EMat zm(n, n), rhs(n, n);
  double inv_fact = 1.0;
  for (int i = 2; i <= k; ++i) inv_fact /= i;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      zm(i, j) = z(i, j);
      rhs(i, j) = phi_k(i, j) - (i == j ? inv_fact : 0.0);
    }
  const EMat x = zm.partialPivLu().solve(rhs);
  Tensor out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out(i, j) = x(i, j);
  return out;
}

double phi_scalar(int k, double z) { return phi_dense(k, Tensor(1, 1, z))[0]; }

// ------------------------------------------------------------------- expmv

double action_norm_estimate(const LinearAction& a, std::size_t n, int iterations) {
  if (n == 0) return 0.0;
  const Tensor dense = a(Tensor::identity(n));
  return norm_2_estimate(dense, iterations);
}

ExpmvConfig select_s_m(double dt_max, double a_norm_estimate, const ExpmvConfig& defaults) {
  ExpmvConfig cfg = defaults;
  const double raw = std::ceil(cfg.s_rule_constant * std::abs(dt_max) * a_norm_estimate);
  cfg.s = std::max<std::int64_t>(1, std::isfinite(raw) ? static_cast<std::int64_t>(std::min(raw, 4.0e18)) : 1);
  cfg.m = 0;
  return cfg;
}

namespace {

int ceil_log2(std::int64_t s) {
  int j = 0;
  while ((std::int64_t{1} << j) < s) ++j;
  return j;
}

bool prefer_squaring(const ExpmvConfig& cfg, std::int64_t s, std::size_t n, std::size_t cols) {
  switch (cfg.evaluation) {
    case PowerEvaluation::Recurrence:
      return false;
    case PowerEvaluation::Squaring:
      return true;
    case PowerEvaluation::Auto:
      break;
  }
  if (s > cfg.segment_cap) return true;
  constexpr double kTermsEstimate = 16.0;
  const double nn = static_cast<double>(n);
  const double recurrence = static_cast<double>(s) * kTermsEstimate * nn * nn * static_cast<double>(cols);
  const double squaring = (kTermsEstimate + ceil_log2(s)) * nn * nn * nn + nn * nn * static_cast<double>(cols);
  return squaring < recurrence;
}

// One truncated Taylor segment: sum_k (dt A)^k x / k!.
Tensor taylor_segment(const LinearAction& a, const Tensor& x, double dt, const ExpmvConfig& cfg,
                      std::int64_t segment, int* terms_used) {
  Tensor sum = x;
  Tensor term = x;
  const int max_terms = cfg.m > 0 ? cfg.m : cfg.m_cap;
  int k = 1;
  for (; k <= max_terms; ++k) {
    term = a(term);
    term *= dt / static_cast<double>(k);
    sum += term;
    if (!sum.all_finite()) {
      throw ExpmvError("expmv: non-finite value in segment " + std::to_string(segment) +
                           " (s too small for ||tA||)",
                       segment);
    }
    if (cfg.m == 0 && frobenius_norm(term) <= cfg.tol * frobenius_norm(sum)) break;
  }
  if (terms_used != nullptr) *terms_used = std::min(k, max_terms);
  return sum;
}

Tensor expmv_once(const LinearAction& a, const Tensor& b, double t, std::int64_t s,
                  const ExpmvConfig& cfg, ExpmvStats* stats) {
  const std::size_t n = b.rows();
  if (stats != nullptr) {
    stats->s = s;
    stats->terms.clear();
    stats->squared = false;
  }
  if (prefer_squaring(cfg, s, n, b.cols())) {
    const int j = ceil_log2(s);
    const double dt = std::ldexp(t, -j);
    int terms = 0;
    Tensor p = taylor_segment(a, Tensor::identity(n), dt, cfg, 1, &terms);
    for (int i = 0; i < j; ++i) {
      p = matmul(p, p);
      if (!p.all_finite()) throw ExpmvError("expmv: non-finite value while squaring", i + 1);
    }
    if (stats != nullptr) {
      stats->s = std::int64_t{1} << j;
      stats->terms.push_back(terms);
      stats->squared = true;
    }
    return matmul(p, b);
  }
  const double dt = t / static_cast<double>(s);
  Tensor f = b;
  for (std::int64_t i = 1; i <= s; ++i) {
    int terms = 0;
    f = taylor_segment(a, f, dt, cfg, i, &terms);
    if (stats != nullptr) stats->terms.push_back(terms);
  }
  return f;
}

}  // namespace

Tensor expmv(const LinearAction& a, const Tensor& b, double t, const ExpmvConfig& cfg,
             ExpmvStats* stats, double a_norm) {
  cfg.validate();
  if (t == 0.0) {
    if (stats != nullptr) *stats = ExpmvStats{1, {0}, 0, false};
    return b;
  }
  std::int64_t s = cfg.s;
  if (s == 0) {
    const double norm = a_norm >= 0.0 ? a_norm : action_norm_estimate(a, b.rows());
    s = select_s_m(t, norm, cfg).s;
  }
  for (int retry = 0;; ++retry) {
    try {
      Tensor out = expmv_once(a, b, t, s, cfg, stats);
      if (stats != nullptr) stats->retries = retry;
      return out;
    } catch (const ExpmvError&) {
      if (retry >= cfg.max_retries) throw;
      s *= 2;
    }
  }
}

// ------------------------------------------------------------ augmented ETD

AugmentedOperator::AugmentedOperator(LinearAction a, std::size_t n, Tensor w)
    : a_(std::move(a)), n_(n), p_(w.cols()), w_(std::move(w)) {
  if (w_.rows() != n_) throw ShapeError("AugmentedOperator: W " + w_.shape_str() + " for n = " + std::to_string(n_));
  if (p_ == 0) throw std::invalid_argument("AugmentedOperator: order p must be >= 1");
}

Tensor AugmentedOperator::apply(const Tensor& x) const {
  if (x.rows() != n_ + p_) throw ShapeError("AugmentedOperator::apply: " + x.shape_str());
  const std::size_t cols = x.cols();
  Tensor top(n_, cols), tail(p_, cols);
  std::copy(x.data(), x.data() + n_ * cols, top.data());
  std::copy(x.data() + n_ * cols, x.data() + x.size(), tail.data());
  Tensor new_top = a_(top);
  new_top += matmul(w_, tail);
  Tensor out(n_ + p_, cols);
  std::copy(new_top.data(), new_top.data() + new_top.size(), out.data());
  // J shifts the tail up by one row.
  for (std::size_t i = 0; i + 1 < p_; ++i)
    for (std::size_t c = 0; c < cols; ++c) out(n_ + i, c) = tail(i + 1, c);
  return out;
}

LinearAction AugmentedOperator::action() const {
  return [this](const Tensor& x) { return apply(x); };
}

namespace {

Tensor augmented_step(const LinearAction& a, const Tensor& w, const Tensor& u0, double h,
                      const ExpmvConfig& cfg, ExpmvStats* stats) {
  const std::size_t n = u0.rows();
  const std::size_t p = w.cols();
  if (u0.cols() != 1) throw ShapeError("etd step: u0 must be a column, got " + u0.shape_str());
  if (h < 0.0) throw std::invalid_argument("etd step: step size must be non-negative");
  if (h == 0.0) return u0;
  AugmentedOperator op(a, n, w);
  Tensor x(n + p, 1);
  for (std::size_t i = 0; i < n; ++i) x[i] = u0[i];
  x[n + p - 1] = 1.0;
  double norm = -1.0;
  if (cfg.s == 0) {
    const double a_norm = action_norm_estimate(a, n);
    const double forcing = frobenius_norm(w) / frobenius_norm(x);
    norm = std::max({a_norm, forcing, p > 1 ? 1.0 : 0.0});
  }
  const Tensor y = expmv(op.action(), x, h, cfg, stats, norm);
  Tensor out(n, 1);
  for (std::size_t i = 0; i < n; ++i) out[i] = y[i];
  return out;
}

}  // namespace

Tensor etd1_augmented_step(const LinearAction& a, const Tensor& g0, const Tensor& u0, double h,
                           const ExpmvConfig& cfg, ExpmvStats* stats) {
  if (!g0.same_shape(u0)) throw ShapeError("etd1 step: g0 " + g0.shape_str() + " vs u0 " + u0.shape_str());
  return augmented_step(a, g0, u0, h, cfg, stats);
}

Tensor etd_p_augmented_step(const LinearAction& a, std::span<const Tensor> g_list,
                            const Tensor& u0, double h, const ExpmvConfig& cfg, ExpmvStats* stats) {
  const std::size_t p = g_list.size();
  if (p == 0) throw std::invalid_argument("etd_p step: need at least one forcing term");
  const std::size_t n = u0.rows();
  Tensor w(n, p);
  for (std::size_t k = 1; k <= p; ++k) {
    const Tensor& g = g_list[k - 1];
    if (!g.same_shape(u0)) throw ShapeError("etd_p step: g_" + std::to_string(k) + " " + g.shape_str());
    // g_k sits in column p - k (zero-based).
    for (std::size_t i = 0; i < n; ++i) w(i, p - k) = g[i];
  }
  return augmented_step(a, w, u0, h, cfg, stats);
}

// ------------------------------------------------------- differentiable ETD1

namespace {

ad::Var taped_recurrence(ad::Var a, ad::Var g, ad::Var u, double h, std::int64_t s,
                         const ExpmvConfig& cfg, ExpmvStats* stats) {
  const double dt = h / static_cast<double>(s);
  const double tail_norm2 = static_cast<double>(u.cols());
  const int max_terms = cfg.m > 0 ? cfg.m : cfg.m_cap;
  ad::Var f = u;
  for (std::int64_t i = 1; i <= s; ++i) {
    // The augmented tail is 1 at the start of every segment and 0 in every
    // later Taylor term, so only the first term sees the forcing column.
    ad::Var term = ad::scale(ad::add(ad::matmul(a, f), g), dt);
    ad::Var sum = ad::add(f, term);
    int k = 1;
    auto converged = [&]() {
      const double tn = frobenius_norm(term.value());
      const double sn = frobenius_norm(sum.value());
      return tn <= cfg.tol * std::sqrt(sn * sn + tail_norm2);
    };
    auto check = [&]() {
      if (!sum.value().all_finite()) {
        throw ExpmvError("etd1 step: non-finite value in segment " + std::to_string(i) +
                             " (s too small for ||hA||)",
                         i);
      }
    };
    check();
    bool done = cfg.m == 0 && converged();
    while (!done && k < max_terms) {
      ++k;
      term = ad::scale(ad::matmul(a, term), dt / static_cast<double>(k));
      sum = ad::add(sum, term);
      check();
      done = cfg.m == 0 && converged();
    }
    if (stats != nullptr) stats->terms.push_back(k);
    f = sum;
  }
  return f;
}

ad::Var taped_squaring(ad::Var a, ad::Var g, ad::Var u, double h, std::int64_t s,
                       const ExpmvConfig& cfg, ExpmvStats* stats) {
  ad::Tape& tape = *a.tape();
  const std::size_t n = a.rows();
  const int j = ceil_log2(s);
  const double dt = std::ldexp(h, -j);
  // Polynomial of the augmented operator [[A, g], [0, 0]]: the top-left block
  // is T = I + A Q and the top-right block is Q g with
  // Q = sum_{k>=1} dt^k A^{k-1} / k!.
  ad::Var y = tape.constant(dt * Tensor::identity(n));
  ad::Var q = y;
  const double a_norm = frobenius_norm(a.value());
  const double n_norm2 = static_cast<double>(n);
  const int max_terms = cfg.m > 0 ? cfg.m : cfg.m_cap;
  int k = 1;
  auto converged = [&]() {
    const double yn = frobenius_norm(y.value());
    const double qn = frobenius_norm(q.value());
    return yn * std::sqrt(a_norm * a_norm + 1.0) <= cfg.tol * std::sqrt(qn * qn + n_norm2);
  };
  bool done = cfg.m == 0 && converged();
  while (!done && k < max_terms) {
    ++k;
    y = ad::scale(ad::matmul(a, y), dt / static_cast<double>(k));
    q = ad::add(q, y);
    done = cfg.m == 0 && converged();
  }
  ad::Var t = ad::add_identity(ad::matmul(a, q), 1.0);
  for (int i = 0; i < j; ++i) {
    q = ad::add(ad::matmul(t, q), q);
    t = ad::matmul(t, t);
    if (!t.value().all_finite() || !q.value().all_finite()) {
      throw ExpmvError("etd1 step: non-finite value while squaring", i + 1);
    }
  }
  if (stats != nullptr) {
    stats->terms.push_back(k);
    stats->s = std::int64_t{1} << j;
    stats->squared = true;
  }
  return ad::add(ad::matmul(t, u), ad::matmul(q, g));
}

}  // namespace

ad::Var etd1_step(ad::Var a, ad::Var g, ad::Var u, double h, const ExpmvConfig& cfg,
                  ExpmvStats* stats) {
  cfg.validate();
  const Tensor& av = a.value();
  const Tensor& uv = u.value();
  const Tensor& gv = g.value();
  if (av.rows() != av.cols() || av.cols() != uv.rows() || !gv.same_shape(uv)) {
    throw ShapeError("etd1_step: A " + av.shape_str() + ", g " + gv.shape_str() + ", u " +
                     uv.shape_str());
  }
  if (h < 0.0) throw std::invalid_argument("etd1_step: step size must be non-negative");
  if (h == 0.0) return u;

  std::int64_t s = cfg.s;
  if (s == 0) {
    double forcing = 0.0;
    for (std::size_t c = 0; c < uv.cols(); ++c) {
      double gn = 0.0, un = 1.0;
      for (std::size_t r = 0; r < uv.rows(); ++r) {
        gn += gv(r, c) * gv(r, c);
        un += uv(r, c) * uv(r, c);
      }
      forcing = std::max(forcing, std::sqrt(gn / un));
    }
    const double norm = std::max(norm_2_estimate(av), forcing);
    s = select_s_m(h, norm, cfg).s;
  }
  for (int retry = 0;; ++retry) {
    try {
      if (stats != nullptr) {
        stats->s = s;
        stats->terms.clear();
        stats->squared = false;
        stats->retries = retry;
      }
      if (prefer_squaring(cfg, s, av.rows(), uv.cols())) {
        return taped_squaring(a, g, u, h, s, cfg, stats);
      }
      return taped_recurrence(a, g, u, h, s, cfg, stats);
    } catch (const ExpmvError&) {
      if (retry >= cfg.max_retries) throw;
      s *= 2;
    }
  }
}

}  // namespace stiffnode::expm
