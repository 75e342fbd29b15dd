#pragma once

// phi-functions and the matrix-free action of the matrix exponential.
//
// e^{tA} b is approximated by (T_m(tA/s))^s b, where T_m is the degree-m
// Taylor polynomial, evaluated through the segment recurrence
//
//   b_{i,0} = f_{i-1},  b_{i,k} = t/(s k) A b_{i,k-1},  f_i = sum_k b_{i,k}
//
// using only applications of A. Exponential time differencing steps are
// built on top of it by embedding the phi-weighted forcing terms into an
// augmented operator [[A, W], [0, J]] so that no phi-function is evaluated.

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "stiffnode/autodiff.hpp"
#include "stiffnode/tensor.hpp"

namespace stiffnode::expm {

/// How the s-th power of the Taylor polynomial is applied.
enum class PowerEvaluation {
  /// s sequential segments of the recurrence (matrix-free).
  Recurrence,
  /// The one-segment polynomial is formed on the identity block and squared
  /// log2(s) times; s is rounded up to a power of two.
  Squaring,
  /// Recurrence unless s exceeds `segment_cap` or squaring is cheaper.
  Auto,
};

struct ExpmvConfig {
  /// Segment count; 0 selects s per call from t and an operator-norm estimate.
  std::int64_t s = 0;
  /// Taylor terms per segment; 0 means adaptive (stop on tolerance).
  int m = 0;
  double tol = 1e-12;
  /// Multiplier c in s = ceil(c * t * ||A||).
  double s_rule_constant = 1.0;
  int m_cap = 128;
  /// Doublings of s allowed after a non-finite segment.
  int max_retries = 10;
  std::int64_t segment_cap = 64;
  PowerEvaluation evaluation = PowerEvaluation::Auto;

  void validate() const;
};

class ExpmvError : public std::runtime_error {
 public:
  ExpmvError(const std::string& what, std::int64_t segment)
      : std::runtime_error(what), segment_(segment) {}
  /// 1-based segment (or squaring) index at which the failure occurred.
  std::int64_t segment() const { return segment_; }

 private:
  std::int64_t segment_;
};

struct ExpmvStats {
  std::int64_t s = 0;
  std::vector<int> terms;  // Taylor terms used per segment
  int retries = 0;
  bool squared = false;
};

/// Matrix-free linear operator acting on column blocks (n x cols).
using LinearAction = std::function<Tensor(const Tensor&)>;

LinearAction dense_action(const Tensor& a);

/// phi_k(Z) = sum_j Z^j / (j+k)!. For k = 0 the exponential is computed with
/// scaling and squaring of the Taylor series; for k >= 1 the series is summed
/// directly until it stagnates, so Z should have moderate norm.
Tensor phi_dense(int k, const Tensor& z);
/// phi_{k+1}(Z) = Z^{-1} (phi_k(Z) - I/k!) for invertible Z.
Tensor phi_next_by_recurrence(int k, const Tensor& phi_k, const Tensor& z);
double phi_scalar(int k, double z);

/// Largest singular value of a matrix-free operator: power iteration on
/// A^T A is not available matrix-free, so the operator is probed on its
/// identity block when n is small and otherwise on A alone.
double action_norm_estimate(const LinearAction& a, std::size_t n, int iterations = 20);

/// s = max(1, ceil(c * dt_max * norm)); m adaptive with the default tolerance.
ExpmvConfig select_s_m(double dt_max, double a_norm_estimate, const ExpmvConfig& defaults = {});

/// e^{tA} b for a block b (n x cols). With cfg.s == 0 the segment count is
/// chosen from `a_norm` (estimated when negative).
Tensor expmv(const LinearAction& a, const Tensor& b, double t, const ExpmvConfig& cfg,
             ExpmvStats* stats = nullptr, double a_norm = -1.0);

/// Augmented operator [[A, W], [0, J]] on R^{n+p} with J the nilpotent shift.
class AugmentedOperator {
 public:
  /// `w` holds p columns; for p = 1 it is the forcing g0 and J = 0.
  AugmentedOperator(LinearAction a, std::size_t n, Tensor w);
  Tensor apply(const Tensor& x) const;
  LinearAction action() const;
  std::size_t dim() const { return n_ + p_; }
  std::size_t order() const { return p_; }

 private:
  LinearAction a_;
  std::size_t n_;
  std::size_t p_;
  Tensor w_;
};

/// First n entries of exp(h [[A, g0], [0, 0]]) [u0; 1], i.e.
/// e^{hA} u0 + h phi_1(hA) g0.
Tensor etd1_augmented_step(const LinearAction& a, const Tensor& g0, const Tensor& u0, double h,
                           const ExpmvConfig& cfg, ExpmvStats* stats = nullptr);

/// e^{hA} u0 + sum_k h^k phi_k(hA) g_k via one exponential of the
/// (n+p)-dimensional augmented operator; g_list = [g_1, ..., g_p].
Tensor etd_p_augmented_step(const LinearAction& a, std::span<const Tensor> g_list,
                            const Tensor& u0, double h, const ExpmvConfig& cfg,
                            ExpmvStats* stats = nullptr);

/// Differentiable batched ETD1 step: columns of `u` (n x B) advance with
/// forcings `g` (n x B) under the shared operator `a` (n x n). The whole
/// Taylor recurrence is recorded; s and m are frozen from values.
ad::Var etd1_step(ad::Var a, ad::Var g, ad::Var u, double h, const ExpmvConfig& cfg,
                  ExpmvStats* stats = nullptr);

}  // namespace stiffnode::expm
