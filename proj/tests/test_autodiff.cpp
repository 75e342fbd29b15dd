#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "stiffnode/autodiff.hpp"
#include "stiffnode/expmv.hpp"

using namespace stiffnode;
using namespace stiffnode::ad;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor t(r, c);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

const Tensor kDecay = Tensor::from_rows({{-2, 1}, {0, -2}});

}  // namespace

TEST(Record, ScalarSquare) {
  ParamStore store;
  store.add("x", Tensor(1, 1, 3.0));
  Tape tape;
  Var x = tape.param(store, "x");
  Var y = hadamard(x, x);
  EXPECT_DOUBLE_EQ(y.scalar(), 9.0);
  tape.backward(y);
  tape.accumulate_grads(store);
  EXPECT_DOUBLE_EQ(store.at("x").grad[0], 6.0);
}

TEST(Record, TanhAtOrigin) {
  ParamStore store;
  store.add("x", Tensor(1, 1, 0.0));
  Tape tape;
  Var y = ad::tanh(tape.param(store, "x"));
  EXPECT_DOUBLE_EQ(y.scalar(), 0.0);
  tape.backward(y);
  tape.accumulate_grads(store);
  EXPECT_DOUBLE_EQ(store.at("x").grad[0], 1.0);
}

TEST(Record, DecayMatrixTimesOnes) {
  Tape tape;
  Var y = matmul(tape.constant(kDecay), tape.constant(Tensor(2, 1, 1.0)));
  EXPECT_DOUBLE_EQ(y.value()[0], -1.0);
  EXPECT_DOUBLE_EQ(y.value()[1], -2.0);
}

TEST(Record, ShapeMismatchNamesPrimitiveAndShapes) {
  Tape tape;
  try {
    add(tape.constant(Tensor(2, 1)), tape.constant(Tensor(3, 1)));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2x1]"), std::string::npos);
    EXPECT_NE(msg.find("[3x1]"), std::string::npos);
  }
}

TEST(Backward, NonScalarOutputThrows) {
  ParamStore store;
  store.add("x", Tensor(2, 1, 1.0));
  Tape tape;
  Var x = tape.param(store, "x");
  EXPECT_THROW(tape.backward(x), std::invalid_argument);
}

TEST(Backward, UntouchedParamGetsZero) {
  ParamStore store;
  store.add("x", Tensor(1, 1, 2.0));
  store.add("unused", Tensor(2, 2, 1.0));
  GradBuffer g(store);
  value_and_grad([](Tape& t, ParamStore& s) { return squared_norm(t.param(s, "x")); }, store, g);
  EXPECT_DOUBLE_EQ(g[0][0], 4.0);
  EXPECT_EQ(g[1].max_abs(), 0.0);
}

TEST(FiniteDiff, SquaredNormOfWu) {
  std::mt19937_64 rng(11);
  ParamStore store;
  store.add("W", random_tensor(4, 4, rng));
  const Tensor u = random_tensor(4, 1, rng);
  auto f = [&](Tape& t, ParamStore& s) { return squared_norm(matmul(t.param(s, "W"), t.constant(u))); };
  auto report = finite_diff_check(f, store, 1e-6, 1e-5);
  EXPECT_TRUE(report.ok()) << report.max_discrepancy;
}

TEST(FiniteDiff, QuadraticFormIsExactUpToRoundoff) {
  std::mt19937_64 rng(12);
  ParamStore store;
  store.add("x", random_tensor(5, 1, rng));
  const Tensor q = random_tensor(5, 5, rng);
  auto f = [&](Tape& t, ParamStore& s) {
    Var x = t.param(s, "x");
    return sum(hadamard(x, matmul(t.constant(q), x)));
  };
  auto report = finite_diff_check(f, store, 1e-6, 1e-7);
  EXPECT_LT(report.max_discrepancy, 1e-7);
}

TEST(FiniteDiff, ConstantFunctionHasZeroDiscrepancy) {
  ParamStore store;
  store.add("x", Tensor(3, 1, 1.0));
  auto f = [](Tape& t, ParamStore&) { return t.constant(4.0); };
  auto report = finite_diff_check(f, store, 1e-6, 1e-5);
  EXPECT_EQ(report.max_discrepancy, 0.0);
}

TEST(FiniteDiff, OneEtd1StepLoss) {
  std::mt19937_64 rng(13);
  ParamStore store;
  store.add("A", random_tensor(2, 2, rng, 0.5));
  store.add("W", random_tensor(2, 2, rng, 0.5));
  const Tensor u0 = random_tensor(2, 3, rng);
  const Tensor target = random_tensor(2, 3, rng);
  auto f = [&](Tape& t, ParamStore& s) {
    Var u = t.constant(u0);
    Var g = ad::tanh(matmul(t.param(s, "W"), u));
    Var u1 = expm::etd1_step(t.param(s, "A"), g, u, 0.7, {});
    return squared_norm(u1 - t.constant(target));
  };
  auto report = finite_diff_check(f, store, 1e-6, 1e-5);
  EXPECT_TRUE(report.ok()) << report.max_discrepancy;
}

// Every primitive against central differences over many random points. Each
// primitive's output is contracted with a fixed random weight block so that
// the scalar's gradient is well scaled for the difference quotient.
namespace {

using Primitive = std::function<Var(Tape&, ParamStore&)>;

struct NamedPrimitive {
  const char* name;
  Primitive f;
};

std::vector<NamedPrimitive> primitives() {
  auto P = [](Tape& t, ParamStore& s, const char* n) { return t.param(s, n); };
  return {
      {"add", [=](Tape& t, ParamStore& s) { return add(P(t, s, "a"), P(t, s, "b")); }},
      {"sub", [=](Tape& t, ParamStore& s) { return sub(P(t, s, "a"), P(t, s, "b")); }},
      {"hadamard", [=](Tape& t, ParamStore& s) { return hadamard(P(t, s, "a"), P(t, s, "b")); }},
      {"matmul", [=](Tape& t, ParamStore& s) { return matmul(P(t, s, "a"), P(t, s, "v")); }},
      {"matvec", [=](Tape& t, ParamStore& s) { return matmul(P(t, s, "a"), P(t, s, "q")); }},
      {"scale", [=](Tape& t, ParamStore& s) { return scale(P(t, s, "a"), -1.7); }},
      {"mul_scalar", [=](Tape& t, ParamStore& s) { return mul_scalar(P(t, s, "a"), P(t, s, "s")); }},
      {"div_scalar", [=](Tape& t, ParamStore& s) { return div_scalar(P(t, s, "a"), P(t, s, "s")); }},
      {"neg", [=](Tape& t, ParamStore& s) { return neg(P(t, s, "a")); }},
      {"transpose", [=](Tape& t, ParamStore& s) { return transpose(P(t, s, "v")); }},
      {"tanh", [=](Tape& t, ParamStore& s) { return ad::tanh(P(t, s, "a")); }},
      {"softplus", [=](Tape& t, ParamStore& s) { return softplus(P(t, s, "a")); }},
      {"sqrt", [=](Tape& t, ParamStore& s) { return ad::sqrt(P(t, s, "s")); }},
      {"clamp_min1", [=](Tape& t, ParamStore& s) { return clamp_min1(scale(P(t, s, "a"), 2.0)); }},
      {"sum", [=](Tape& t, ParamStore& s) { return sum(P(t, s, "a")); }},
      {"squared_norm", [=](Tape& t, ParamStore& s) { return squared_norm(P(t, s, "a")); }},
      {"norm1", [=](Tape& t, ParamStore& s) { return norm1(P(t, s, "a")); }},
      {"norm_inf", [=](Tape& t, ParamStore& s) { return norm_inf(P(t, s, "a")); }},
      {"concat_rows", [=](Tape& t, ParamStore& s) { return concat_rows(P(t, s, "a"), transpose(P(t, s, "v"))); }},
      {"slice_rows", [=](Tape& t, ParamStore& s) { return slice_rows(P(t, s, "a"), 1, 2); }},
      {"slice_cols", [=](Tape& t, ParamStore& s) { return slice_cols(P(t, s, "a"), 0, 2); }},
      {"add_bias", [=](Tape& t, ParamStore& s) { return add_bias(P(t, s, "v"), P(t, s, "q")); }},
      {"add_identity", [=](Tape& t, ParamStore& s) { return add_identity(P(t, s, "a"), 0.3); }},
      {"solve", [=](Tape& t, ParamStore& s) { return solve(add_identity(P(t, s, "a"), 4.0), P(t, s, "v")); }},
      {"lower_factor", [=](Tape& t, ParamStore& s) { return lower_factor(P(t, s, "p"), 3, 1e-6); }},
      {"strict_lower", [=](Tape& t, ParamStore& s) { return strict_lower(slice_rows(P(t, s, "p"), 0, 3), 3); }},
  };
}

}  // namespace

class PrimitiveFd : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveFd, EachPrimitiveMatchesFiniteDifferences) {
  const int seed = GetParam();
  std::mt19937_64 rng(1000 + seed);
  ParamStore store;
  store.add("a", random_tensor(3, 3, rng));
  store.add("b", random_tensor(3, 3, rng));
  store.add("v", random_tensor(3, 2, rng));
  store.add("p", random_tensor(6, 1, rng));
  store.add("q", random_tensor(3, 1, rng));
  store.add("s", Tensor(1, 1, 0.5 + std::uniform_real_distribution<double>(0, 2)(rng)));
  for (const auto& prim : primitives()) {
    Tensor weights;
    {
      Tape probe;
      const Tensor out = prim.f(probe, store).value();
      weights = random_tensor(out.rows(), out.cols(), rng);
    }
    auto f = [&](Tape& t, ParamStore& s) { return sum(hadamard(prim.f(t, s), t.constant(weights))); };
    const auto report = finite_diff_check(f, store, 1e-6, 1e-5);
    for (const auto& p : report.params) {
      EXPECT_FALSE(p.flagged) << prim.name << " d/d" << p.name << " " << p.max_discrepancy;
    }
  }
}

TEST(FiniteDiff, ComposedChainOfPrimitives) {
  std::mt19937_64 rng(77);
  ParamStore store;
  store.add("a", random_tensor(3, 3, rng));
  store.add("b", random_tensor(3, 3, rng));
  store.add("v", random_tensor(3, 2, rng));
  store.add("s", Tensor(1, 1, 1.3));
  auto f = [](Tape& t, ParamStore& s) {
    Var a = t.param(s, "a");
    Var b = t.param(s, "b");
    Var v = t.param(s, "v");
    Var x = solve(add_identity(a, 4.0), v);
    Var y = hadamard(ad::tanh(matmul(b, x)), softplus(v));
    Var c = clamp_min1(ad::sqrt(hadamard(norm1(a), norm_inf(b))));
    return div_scalar(mul_scalar(sum(y), t.param(s, "s")), c);
  };
  const auto report = finite_diff_check(f, store, 1e-6, 1e-5);
  EXPECT_TRUE(report.ok()) << report.max_discrepancy;
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveFd, ::testing::Range(0, 100));

TEST(Subgradient, NormTiesResolveToLowestIndex) {
  ParamStore store;
  store.add("w", Tensor::from_rows({{1, -1}, {1, 1}}));
  GradBuffer g(store);
  value_and_grad([](Tape& t, ParamStore& s) { return norm1(t.param(s, "w")); }, store, g);
  // Both columns sum to 2; column 0 wins.
  EXPECT_DOUBLE_EQ(g[0](0, 0), 1.0);
  EXPECT_DOUBLE_EQ(g[0](1, 0), 1.0);
  EXPECT_DOUBLE_EQ(g[0](0, 1), 0.0);
  value_and_grad([](Tape& t, ParamStore& s) { return norm_inf(t.param(s, "w")); }, store, g);
  EXPECT_DOUBLE_EQ(g[0](0, 0), 1.0);
  EXPECT_DOUBLE_EQ(g[0](0, 1), -1.0);
  EXPECT_DOUBLE_EQ(g[0](1, 0), 0.0);
}

TEST(Subgradient, ClampAtOneTakesConstantBranch) {
  ParamStore store;
  store.add("x", Tensor(1, 1, 1.0));
  GradBuffer g(store);
  value_and_grad([](Tape& t, ParamStore& s) { return clamp_min1(t.param(s, "x")); }, store, g);
  EXPECT_EQ(g[0][0], 0.0);
}

TEST(Solve, SingularMatrixThrows) {
  Tape tape;
  EXPECT_THROW(solve(tape.constant(Tensor(2, 2)), tape.constant(Tensor(2, 1, 1.0))), std::runtime_error);
}

TEST(Determinism, RecordedEqualsEager) {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor(5, 4, rng);
  const Tensor u = random_tensor(4, 3, rng);
  Tape tape;
  Var y = ad::tanh(matmul(tape.constant(a), tape.constant(u)));
  Tensor eager = matmul(a, u);
  for (std::size_t i = 0; i < eager.size(); ++i) eager[i] = std::tanh(eager[i]);
  EXPECT_EQ(y.value().values(), eager.values());
}

TEST(Determinism, FixedOrderPartitionedGradientsAreBitwiseEqual) {
  std::mt19937_64 rng(4);
  ParamStore store;
  store.add("W", random_tensor(3, 3, rng));
  std::vector<Tensor> items;
  for (int i = 0; i < 8; ++i) items.push_back(random_tensor(3, 1, rng));
  auto item_loss = [&](std::size_t i) {
    return [&, i](Tape& t, ParamStore& s) {
      return squared_norm(ad::tanh(matmul(t.param(s, "W"), t.constant(items[i]))));
    };
  };
  // Per-item gradients reduced in index order, twice, must agree bitwise.
  auto reduce = [&]() {
    GradBuffer total(store);
    for (std::size_t i = 0; i < items.size(); ++i) {
      GradBuffer g(store);
      value_and_grad(item_loss(i), store, g);
      total += g;
    }
    return total;
  };
  const GradBuffer g1 = reduce();
  const GradBuffer g2 = reduce();
  EXPECT_EQ(g1[0].values(), g2[0].values());

  GradBuffer whole(store);
  value_and_grad(
      [&](Tape& t, ParamStore& s) {
        Var total = t.constant(0.0);
        for (std::size_t i = 0; i < items.size(); ++i) total = total + item_loss(i)(t, s);
        return total;
      },
      store, whole);
  for (std::size_t i = 0; i < whole[0].size(); ++i) EXPECT_NEAR(whole[0][i], g1[0][i], 1e-13);
}

TEST(ParamStore, DuplicateNamesRejected) {
  ParamStore store;
  store.add("x", Tensor(1, 1));
  EXPECT_THROW(store.add("x", Tensor(1, 1)), std::invalid_argument);
  EXPECT_EQ(store.at("x").grad.rows(), 1u);
}
