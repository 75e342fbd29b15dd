#pragma once

// Reverse-mode automatic differentiation over dense real tensors.
//
// A Tape records primitives in evaluation order; backward() replays them in
// strict reverse order. Trainable values live in a ParamStore, which is the
// single owner of parameters, their gradients and optimizer moments. A tape
// is single-owner; batch parallelism uses one private tape per work item and
// merges gradients through GradBuffer in a fixed order.

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "stiffnode/tensor.hpp"

namespace stiffnode::ad {

class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
    // Adam moments, same shape as value.
    Tensor moment1;
    Tensor moment2;
  };

  /// Registers a new parameter; names must be unique.
  std::size_t add(std::string name, Tensor init);
  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;

  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& at(std::string_view name) { return entries_[index(name)]; }
  const Entry& at(std::string_view name) const { return entries_[index(name)]; }

  std::size_t size() const { return entries_.size(); }
  /// Total number of scalar parameters.
  std::size_t scalar_count() const;

  void zero_grads();
  double grad_norm() const;
  /// Optimizer step counter (persisted with the moments).
  long long step = 0;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
};

/// Per-parameter gradient accumulator aligned with a ParamStore's order.
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(const ParamStore& store);
  Tensor& operator[](std::size_t i) { return grads_[i]; }
  const Tensor& operator[](std::size_t i) const { return grads_[i]; }
  std::size_t size() const { return grads_.size(); }
  GradBuffer& operator+=(const GradBuffer& other);
  void add_to(ParamStore& store) const;

 private:
  std::vector<Tensor> grads_;
};

class Tape;

/// Handle to a recorded tape node.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var constant(double value);
  /// Leaf bound to a store entry. Repeated requests for the same entry return
  /// the same node.
  Var param(ParamStore& store, std::size_t index);
  Var param(ParamStore& store, std::string_view name);

  /// Records a node. `inputs` is informational (used by tests); the backward
  /// rule addresses its inputs through grad_ref.
  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  /// Reverse sweep from a scalar output. Throws if the output is not 1x1.
  void backward(Var output);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  /// Gradient of node `id`; empty when the node received no adjoint.
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  const Tensor& grad(Var v) const { return grad(v.id()); }
  /// Zero-initialized gradient slot for node `id`.
  Tensor& grad_ref(std::size_t id);
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  /// False for constants and nodes that depend only on constants.
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Adds leaf gradients into the store (parameters untouched by the tape get
  /// nothing added).
  void accumulate_grads(ParamStore& store) const;
  void accumulate_grads(GradBuffer& buffer) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    long param_index = -1;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<long> param_nodes_;
  const ParamStore* bound_store_ = nullptr;
};

// Primitives. Shape errors throw ShapeError naming the primitive and shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var matmul(Var a, Var b);
Var scale(Var a, double s);
/// a * s for a 1x1 node s.
Var mul_scalar(Var a, Var s);
/// a / s for a 1x1 node s.
Var div_scalar(Var a, Var s);
Var neg(Var a);
Var transpose(Var a);
Var tanh(Var a);
Var softplus(Var a);
Var sqrt(Var a);
/// Elementwise max(1, x); at x == 1 the adjoint follows the constant branch.
Var clamp_min1(Var a);
/// Sum of all entries (1x1).
Var sum(Var a);
/// Sum of squares of all entries (1x1).
Var squared_norm(Var a);
/// Maximum absolute column sum (1x1); ties resolve to the lowest column.
Var norm1(Var a);
/// Maximum absolute row sum (1x1); ties resolve to the lowest row.
Var norm_inf(Var a);
/// Stacks a over b (equal column counts).
Var concat_rows(Var a, Var b);
/// Rows [begin, begin + count).
Var slice_rows(Var a, std::size_t begin, std::size_t count);
/// Columns [begin, begin + count).
Var slice_cols(Var a, std::size_t begin, std::size_t count);
/// Adds the column vector `bias` (rows x 1) to every column of x.
Var add_bias(Var x, Var bias);
/// A + mu * I.
Var add_identity(Var a, double mu);
/// X = M^{-1} B by LU with partial pivoting. Throws on a singular M.
Var solve(Var m, Var b);
/// n x n lower-triangular factor from n(n+1)/2 packed row-major entries;
/// the diagonal is mapped through softplus(x) + floor.
Var lower_factor(Var packed, std::size_t n, double floor);
/// n x n strictly lower-triangular matrix from n(n-1)/2 packed entries.
Var strict_lower(Var packed, std::size_t n);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }

/// Outcome of comparing backward() against central differences.
struct FiniteDiffReport {
  struct ParamResult {
    std::string name;
    double max_discrepancy = 0.0;
    bool flagged = false;
  };
  std::vector<ParamResult> params;
  double max_discrepancy = 0.0;
  bool ok() const;
};

using ScalarFn = std::function<Var(Tape&, ParamStore&)>;

/// Compares reverse-mode gradients with central differences of `f` for every
/// scalar in the store. Discrepancy per scalar is |g_ad - g_fd| /
/// max(|g_ad|, |g_fd|, abs_floor).
FiniteDiffReport finite_diff_check(const ScalarFn& f, ParamStore& store, double step,
                                   double rel_tol, double abs_floor = 1e-6);

/// Gradients of f with respect to every store entry (store grads are left
/// untouched); returns the value of f.
double value_and_grad(const ScalarFn& f, ParamStore& store, GradBuffer& out);

}  // namespace stiffnode::ad
