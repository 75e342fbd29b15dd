#include "stiffnode/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "stiffnode/kernels.hpp"

namespace stiffnode::ad {

// ---------------------------------------------------------------- ParamStore

std::size_t ParamStore::add(std::string name, Tensor init) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  Entry e;
  e.grad = Tensor(init.rows(), init.cols());
  e.moment1 = Tensor(init.rows(), init.cols());
  e.moment2 = Tensor(init.rows(), init.cols());
  e.value = std::move(init);
  e.name = std::move(name);
  entries_.push_back(std::move(e));
  return entries_.size() - 1;
}

std::size_t ParamStore::index(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw std::out_of_range("ParamStore: no parameter named '" + std::string(name) + "'");
}

bool ParamStore::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& e : entries_)
    for (double g : e.grad.values()) s += g * g;
  return std::sqrt(s);
}

GradBuffer::GradBuffer(const ParamStore& store) {
  grads_.reserve(store.size());
  for (const auto& e : store) grads_.emplace_back(e.value.rows(), e.value.cols());
}

GradBuffer& GradBuffer::operator+=(const GradBuffer& other) {
  if (other.size() != size()) throw ShapeError("GradBuffer +=: parameter count mismatch");
  for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += other.grads_[i];
  return *this;
}

void GradBuffer::add_to(ParamStore& store) const {
  if (store.size() != size()) throw ShapeError("GradBuffer: parameter count mismatch");
  for (std::size_t i = 0; i < grads_.size(); ++i) store[i].grad += grads_[i];
}

// ---------------------------------------------------------------------- Tape

const Tensor& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ShapeError("Var::scalar on " + v.shape_str());
  return v[0];
}

Var Tape::constant(Tensor value) { return push(std::move(value), {}, nullptr); }

Var Tape::constant(double value) { return constant(Tensor(1, 1, value)); }

Var Tape::param(ParamStore& store, std::size_t index) {
  if (bound_store_ != nullptr && bound_store_ != &store) {
    throw std::logic_error("Tape: parameters from two different stores");
  }
  bound_store_ = &store;
  if (param_nodes_.size() < store.size()) param_nodes_.resize(store.size(), -1);
  if (param_nodes_[index] >= 0) return Var(this, static_cast<std::size_t>(param_nodes_[index]));
  Var v = push(store[index].value, {}, nullptr);
  nodes_[v.id()].param_index = static_cast<long>(index);
  nodes_[v.id()].needs_grad = true;
  param_nodes_[index] = static_cast<long>(v.id());
  return v;
}

Var Tape::param(ParamStore& store, std::string_view name) {
  return param(store, store.index(name));
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool needs = false;
  if (backward) {
    for (std::size_t in : inputs) needs = needs || nodes_[in].needs_grad;
  }
  if (!needs) backward = nullptr;
  nodes_.push_back(
      Node{std::move(value), Tensor(), std::move(inputs), std::move(backward), -1, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var output) {
  if (output.tape() != this) throw std::logic_error("Tape::backward: foreign node");
  const Tensor& out = nodes_[output.id()].value;
  if (out.size() != 1) {
    throw ShapeError("backward: output must be a scalar, got " + out.shape_str());
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad_ref(output.id())[0] = 1.0;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

void Tape::accumulate_grads(ParamStore& store) const {
  for (const Node& n : nodes_) {
    if (n.param_index < 0 || n.grad.empty()) continue;
    store[static_cast<std::size_t>(n.param_index)].grad += n.grad;
  }
}

void Tape::accumulate_grads(GradBuffer& buffer) const {
  for (const Node& n : nodes_) {
    if (n.param_index < 0 || n.grad.empty()) continue;
    buffer[static_cast<std::size_t>(n.param_index)] += n.grad;
  }
}

// ---------------------------------------------------------------- primitives

namespace {

Tape& tape_of(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::logic_error(std::string(op) + ": operands recorded on different tapes");
  }
  return *a.tape();
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

void require_scalar(const char* op, const Tensor& s) {
  if (s.size() != 1) throw ShapeError(std::string(op) + ": expected 1x1 scalar, got " + s.shape_str());
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b, "add");
  require_same("add", a.value(), b.value());
  Tensor v = a.value() + b.value();
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(v), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad_ref(ia) += g;
    if (tp.needs_grad(ib)) tp.grad_ref(ib) += g;
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b, "sub");
  require_same("sub", a.value(), b.value());
  Tensor v = a.value() - b.value();
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(v), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad_ref(ia) += g;
    if (tp.needs_grad(ib)) tp.grad_ref(ib) -= g;
  });
}

Var hadamard(Var a, Var b) {
  Tape& t = tape_of(a, b, "hadamard");
  require_same("hadamard", a.value(), b.value());
  Tensor v = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(v), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& av = tp.value(ia);
    const Tensor& bv2 = tp.value(ib);
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad_ref(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + av.shape_str() + " * " + bv.shape_str());
  }
  Tensor v(av.rows(), bv.cols());
  kernels::matmul_nn(av.rows(), bv.cols(), av.cols(), av.data(), bv.data(), v.data(), false);
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(v), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& A = tp.value(ia);
    const Tensor& B = tp.value(ib);
    // dA += g B^T ; dB += A^T g
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad_ref(ia);
      kernels::matmul_nt(A.rows(), A.cols(), g.cols(), g.data(), B.data(), ga.data(), true);
    }
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad_ref(ib);
      kernels::matmul_tn(B.rows(), B.cols(), A.rows(), A.data(), g.data(), gb.data(), true);
    }
  });
}

Var scale(Var a, double s) {
  Tensor v = a.value();
  v *= s;
  const auto ia = a.id();
  return a.tape()->push(std::move(v), {ia}, [ia, s](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var mul_scalar(Var a, Var s) {
  Tape& t = tape_of(a, s, "mul_scalar");
  require_scalar("mul_scalar", s.value());
  const double sv = s.value()[0];
  Tensor v = a.value();
  v *= sv;
  const auto ia = a.id(), is = s.id();
  return t.push(std::move(v), {ia, is}, [ia, is](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const double sv2 = tp.value(is)[0];
    const Tensor& av = tp.value(ia);
    double gs = 0.0;
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += sv2 * g[i];
      gs += av[i] * g[i];
    }
    tp.grad_ref(is)[0] += gs;
  });
}

Var div_scalar(Var a, Var s) {
  Tape& t = tape_of(a, s, "div_scalar");
  require_scalar("div_scalar", s.value());
  const double sv = s.value()[0];
  Tensor v = a.value();
  v *= 1.0 / sv;
  const auto ia = a.id(), is = s.id();
  return t.push(std::move(v), {ia, is}, [ia, is](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const double sv2 = tp.value(is)[0];
    const Tensor& av = tp.value(ia);
    double gs = 0.0;
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] / sv2;
      gs -= av[i] * g[i];
    }
    tp.grad_ref(is)[0] += gs / (sv2 * sv2);
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var transpose(Var a) {
  const auto ia = a.id();
  return a.tape()->push(a.value().transposed(), {ia}, [ia](Tape& tp, std::size_t self) {
    tp.grad_ref(ia) += tp.grad(self).transposed();
  });
}

Var tanh(Var a) {
  const Tensor& x = a.value();
  Tensor v(x.rows(), x.cols());
  kernels::tanh_forward(x.size(), x.data(), v.data());
  const auto ia = a.id();
  return a.tape()->push(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    const Tensor& y = tp.value(self);
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad_ref(ia);
    kernels::tanh_backward(y.size(), y.data(), g.data(), ga.data());
  });
}

namespace {
double softplus_value(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var softplus(Var a) {
  Tensor v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = softplus_value(v[i]);
  const auto ia = a.id();
  return a.tape()->push(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& x = tp.value(ia);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sigmoid(x[i]);
  });
}

Var sqrt(Var a) {
  Tensor v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 0.0) throw std::domain_error("sqrt: negative operand");
    v[i] = std::sqrt(v[i]);
  }
  const auto ia = a.id();
  return a.tape()->push(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / y[i];
  });
}

Var clamp_min1(Var a) {
  Tensor v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(1.0, v[i]);
  const auto ia = a.id();
  return a.tape()->push(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& x = tp.value(ia);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 1.0) ga[i] += g[i];
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  const auto ia = a.id();
  return a.tape()->push(Tensor(1, 1, s), {ia}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var squared_norm(Var a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x * x;
  const auto ia = a.id();
  return a.tape()->push(Tensor(1, 1, s), {ia}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    const Tensor& x = tp.value(ia);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * x[i];
  });
}

namespace {
double sign(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }
}  // namespace

Var norm1(Var a) {
  const Tensor& x = a.value();
  std::size_t best_col = 0;
  double best = -1.0;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) s += std::abs(x(i, j));
    if (s > best) {
      best = s;
      best_col = j;
    }
  }
  const auto ia = a.id();
  return a.tape()->push(Tensor(1, 1, std::max(best, 0.0)), {ia},
                        [ia, best_col](Tape& tp, std::size_t self) {
                          const double g = tp.grad(self)[0];
                          const Tensor& xv = tp.value(ia);
                          Tensor& ga = tp.grad_ref(ia);
                          for (std::size_t i = 0; i < xv.rows(); ++i)
                            ga(i, best_col) += g * sign(xv(i, best_col));
                        });
}

Var norm_inf(Var a) {
  const Tensor& x = a.value();
  std::size_t best_row = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += std::abs(x(i, j));
    if (s > best) {
      best = s;
      best_row = i;
    }
  }
  const auto ia = a.id();
  return a.tape()->push(Tensor(1, 1, std::max(best, 0.0)), {ia},
                        [ia, best_row](Tape& tp, std::size_t self) {
                          const double g = tp.grad(self)[0];
                          const Tensor& xv = tp.value(ia);
                          Tensor& ga = tp.grad_ref(ia);
                          for (std::size_t j = 0; j < xv.cols(); ++j)
                            ga(best_row, j) += g * sign(xv(best_row, j));
                        });
}

Var concat_rows(Var a, Var b) {
  Tape& t = tape_of(a, b, "concat_rows");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw ShapeError("concat_rows: column counts differ " + av.shape_str() + " vs " + bv.shape_str());
  }
  Tensor v(av.rows() + bv.rows(), av.cols());
  std::copy(av.data(), av.data() + av.size(), v.data());
  std::copy(bv.data(), bv.data() + bv.size(), v.data() + av.size());
  const auto ia = a.id(), ib = b.id();
  const std::size_t split = av.size();
  return t.push(std::move(v), {ia, ib}, [ia, ib, split](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
    Tensor& gb = tp.grad_ref(ib);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& x = a.value();
  if (begin + count > x.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " + x.shape_str());
  }
  Tensor v(count, x.cols());
  std::copy(x.data() + begin * x.cols(), x.data() + (begin + count) * x.cols(), v.data());
  const auto ia = a.id();
  const std::size_t offset = begin * x.cols();
  return a.tape()->push(std::move(v), {ia}, [ia, offset](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& x = a.value();
  if (begin + count > x.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " + x.shape_str());
  }
  Tensor v(x.rows(), count);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) v(i, j) = x(i, begin + j);
  const auto ia = a.id();
  return a.tape()->push(std::move(v), {ia}, [ia, begin](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, begin + j) += g(i, j);
  });
}

Var add_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias, "add_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.cols() != 1 || bv.rows() != xv.rows()) {
    throw ShapeError("add_bias: bias " + bv.shape_str() + " does not match " + xv.shape_str());
  }
  Tensor v(xv.rows(), xv.cols());
  kernels::add_column_broadcast(xv.rows(), xv.cols(), xv.data(), bv.data(), v.data());
  const auto ix = x.id(), ib = bias.id();
  return t.push(std::move(v), {ix, ib}, [ix, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.needs_grad(ix)) tp.grad_ref(ix) += g;
    if (!tp.needs_grad(ib)) return;
    Tensor& gb = tp.grad_ref(ib);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) s += g(i, j);
      gb[i] += s;
    }
  });
}

Var add_identity(Var a, double mu) {
  const Tensor& x = a.value();
  if (x.rows() != x.cols()) throw ShapeError("add_identity: non-square " + x.shape_str());
  Tensor v = x;
  for (std::size_t i = 0; i < v.rows(); ++i) v(i, i) += mu;
  const auto ia = a.id();
  return a.tape()->push(std::move(v), {ia}, [ia](Tape& tp, std::size_t self) {
    tp.grad_ref(ia) += tp.grad(self);
  });
}

namespace {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
Eigen::Map<const EMat> emap(const Tensor& t) {
  return Eigen::Map<const EMat>(t.data(), static_cast<Eigen::Index>(t.rows()),
                                static_cast<Eigen::Index>(t.cols()));
}
Eigen::Map<EMat> emap(Tensor& t) {
  return Eigen::Map<EMat>(t.data(), static_cast<Eigen::Index>(t.rows()),
                          static_cast<Eigen::Index>(t.cols()));
}
}  // namespace

Var solve(Var m, Var b) {
  Tape& t = tape_of(m, b, "solve");
  const Tensor& mv = m.value();
  const Tensor& bv = b.value();
  if (mv.rows() != mv.cols() || mv.cols() != bv.rows()) {
    throw ShapeError("solve: " + mv.shape_str() + " \\ " + bv.shape_str());
  }
  auto lu = std::make_shared<Eigen::PartialPivLU<EMat>>(EMat(emap(mv)));
  const auto diag = lu->matrixLU().diagonal().cwiseAbs();
  const double scale = std::max(mv.max_abs(), 1e-300);
  if (diag.size() > 0 && !(diag.minCoeff() > 1e-14 * scale)) {
    throw std::runtime_error("solve: matrix is singular to working precision");
  }
  Tensor x(bv.rows(), bv.cols());
  emap(x) = lu->solve(emap(bv));
  const auto im = m.id(), ib = b.id();
  return t.push(std::move(x), {im, ib}, [im, ib, lu](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& xv = tp.value(self);
    // gB = M^{-T} g ; gM = -gB X^T
    Tensor gb(g.rows(), g.cols());
    emap(gb) = lu->transpose().solve(emap(g));
    if (tp.needs_grad(ib)) tp.grad_ref(ib) += gb;
    if (!tp.needs_grad(im)) return;
    Tensor& gm = tp.grad_ref(im);
    emap(gm).noalias() -= emap(gb) * emap(xv).transpose();
  });
}

Var lower_factor(Var packed, std::size_t n, double floor) {
  const Tensor& p = packed.value();
  if (p.size() != n * (n + 1) / 2) {
    throw ShapeError("lower_factor: " + p.shape_str() + " cannot pack a " + std::to_string(n) +
                     "x" + std::to_string(n) + " lower triangle");
  }
  Tensor v(n, n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j, ++k) v(i, j) = (i == j) ? softplus_value(p[k]) + floor : p[k];
  }
  const auto ip = packed.id();
  return packed.tape()->push(std::move(v), {ip}, [ip, n](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& pv = tp.value(ip);
    Tensor& gp = tp.grad_ref(ip);
    std::size_t k2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j <= i; ++j, ++k2) {
        gp[k2] += (i == j) ? g(i, j) * sigmoid(pv[k2]) : g(i, j);
      }
    }
  });
}

Var strict_lower(Var packed, std::size_t n) {
  const Tensor& p = packed.value();
  if (p.size() != n * (n - (n > 0 ? 1 : 0)) / 2 && !(n == 0 && p.size() == 0)) {
    throw ShapeError("strict_lower: " + p.shape_str() + " cannot pack a strict " +
                     std::to_string(n) + "x" + std::to_string(n) + " lower triangle");
  }
  Tensor v(n, n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j, ++k) v(i, j) = p[k];
  const auto ip = packed.id();
  return packed.tape()->push(std::move(v), {ip}, [ip, n](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& gp = tp.grad_ref(ip);
    std::size_t k2 = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j, ++k2) gp[k2] += g(i, j);
  });
}

// ------------------------------------------------------- gradient utilities

bool FiniteDiffReport::ok() const {
  return std::none_of(params.begin(), params.end(), [](const ParamResult& p) { return p.flagged; });
}

double value_and_grad(const ScalarFn& f, ParamStore& store, GradBuffer& out) {
  Tape tape;
  Var y = f(tape, store);
  tape.backward(y);
  out = GradBuffer(store);
  tape.accumulate_grads(out);
  return y.scalar();
}

FiniteDiffReport finite_diff_check(const ScalarFn& f, ParamStore& store, double step,
                                   double rel_tol, double abs_floor) {
  GradBuffer analytic;
  value_and_grad(f, store, analytic);

  auto eval = [&]() {
    Tape tape;
    return f(tape, store).scalar();
  };

  FiniteDiffReport report;
  for (std::size_t p = 0; p < store.size(); ++p) {
    FiniteDiffReport::ParamResult r;
    r.name = store[p].name;
    Tensor& values = store[p].value;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double fp = eval();
      values[i] = saved - step;
      const double fm = eval();
      values[i] = saved;
      const double fd = (fp - fm) / (2.0 * step);
      const double ad_g = analytic[p][i];
      const double denom = std::max({std::abs(ad_g), std::abs(fd), abs_floor});
      r.max_discrepancy = std::max(r.max_discrepancy, std::abs(ad_g - fd) / denom);
    }
    r.flagged = r.max_discrepancy > rel_tol;
    report.max_discrepancy = std::max(report.max_discrepancy, r.max_discrepancy);
    report.params.push_back(std::move(r));
  }
  return report;
}

}  // namespace stiffnode::ad
