#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <nlohmann/json.hpp>

#include "stiffnode/training.hpp"

using namespace stiffnode;
using namespace stiffnode::training;

namespace {

models::ModelSpec small_spec(models::NonlinearKind kind = models::NonlinearKind::Lipschitz) {
  models::ModelSpec s;
  s.physical_dim = 2;
  s.latent_dim = 2;
  s.nonlinear = kind;
  s.hidden = 8;
  s.autoencoder = models::AutoencoderKind::Linear;
  return s;
}

// Truth generated by the model itself (identity autoencoder).
integrators::Trajectory self_rollout(models::NodeModel& model, const Tensor& u0, const integrators::TimeGrid& grid) {
  return integrators::etd1_rollout(model, u0, grid, {});
}

problems::Dataset small_dataset(std::size_t n_traj, std::uint64_t seed) {
  problems::GenOptions o;
  o.n_traj = n_traj;
  o.eps = 1.0;
  o.seed = seed;
  o.keep_times = {0, 10, 20, 30, 40, 50};
  return problems::gen_dataset(o);
}

std::vector<double> flat_params(const models::NodeModel& m) {
  std::vector<double> out;
  for (const auto& e : m.params()) out.insert(out.end(), e.value.values().begin(), e.value.values().end());
  return out;
}

}  // namespace

TEST(Loss, TrapezoidWeights) {
  const auto w = trapezoid_weights(integrators::TimeGrid({0.0, 1.0, 3.0}));
  ASSERT_EQ(w.size(), 3u);
  EXPECT_DOUBLE_EQ(w[0], 0.5);
  EXPECT_DOUBLE_EQ(w[1], 1.5);
  EXPECT_DOUBLE_EQ(w[2], 1.0);
}

TEST(Loss, ExactModelGivesZero) {
  models::NodeModel model(small_spec(), 3);
  model.set_identity_autoencoder();
  const auto grid = integrators::TimeGrid::uniform(0.0, 2.0, 5);
  const auto truth = self_rollout(model, Tensor::from_rows({{0.5}, {-0.2}}), grid);
  EXPECT_LE(trajectory_loss(truth, model, {}), 1e-28);
}

TEST(Loss, ConstantErrorIntegratesToSpan) {
  models::NodeModel model(small_spec(), 4);
  model.set_identity_autoencoder();
  const auto grid = integrators::TimeGrid({0.0, 0.3, 1.0, 2.5});
  const auto truth = self_rollout(model, Tensor::from_rows({{0.4}, {0.1}}), grid);
  auto& bias = model.params().at("decoder.b0").value;
  bias[0] = 0.3;
  bias[1] = -0.4;  // |c|^2 = 0.25 at every snapshot
  EXPECT_NEAR(trajectory_loss(truth, model, {}), 0.25 * 2.5, 1e-14);
}

TEST(Loss, SingleIntervalFormula) {
  models::NodeModel model(small_spec(), 5);
  model.set_identity_autoencoder();
  const auto grid = integrators::TimeGrid({0.0, 0.7});
  auto truth = self_rollout(model, Tensor::from_rows({{-0.3}, {0.8}}), grid);
  auto& bias = model.params().at("decoder.b0").value;
  bias[0] = 0.1;
  bias[1] = 0.2;
  truth.states[1][0] -= 0.5;  // error at t1 = c + (0.5, 0)
  const double e0 = 0.1 * 0.1 + 0.2 * 0.2;
  const double e1 = 0.6 * 0.6 + 0.2 * 0.2;
  EXPECT_NEAR(trajectory_loss(truth, model, {}), 0.5 * (e0 + e1) * 0.7, 1e-14);
}

TEST(Loss, RejectsMismatchedDimension) {
  models::NodeModel model(small_spec(), 5);
  integrators::Trajectory t{integrators::TimeGrid({0.0, 1.0}), {Tensor(3, 1), Tensor(3, 1)}};
  EXPECT_THROW(trajectory_loss(t, model, {}), ShapeError);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  models::NodeModel model(small_spec(), 8);
  model.set_identity_autoencoder();
  const auto grid = integrators::TimeGrid({0.0, 0.4, 0.9, 1.5});
  integrators::Trajectory truth{grid, {}};
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (int k = 0; k < 4; ++k) truth.states.push_back(Tensor::from_rows({{d(rng)}, {d(rng)}}));
  auto f = [&](ad::Tape& tape, ad::ParamStore&) {
    const models::BoundModel bound = model.bind(tape);
    return rollout_loss(bound, truth.states, grid, Integrator::Etd1, {});
  };
  const auto report = ad::finite_diff_check(f, model.params(), 1e-6, 1e-5);
  for (const auto& p : report.params) EXPECT_FALSE(p.flagged) << p.name << " " << p.max_discrepancy;
  EXPECT_TRUE(report.ok());
}

TEST(Loss, BatchIsMeanOfTrajectoryLosses) {
  const auto data = small_dataset(6, 2);
  models::NodeModel model(small_spec(), 9);
  TrainConfig cfg;
  cfg.batch_size = 6;
  const double batch = batch_loss_and_grad(model, data, {0, 1, 2, 3, 4, 5}, cfg, nullptr);
  double mean = 0.0;
  for (std::size_t r = 0; r < 6; ++r) mean += trajectory_loss(data.trajectory(r), model, cfg.expmv) / 6.0;
  EXPECT_NEAR(batch, mean, 1e-12 * mean);
}

TEST(Loss, BatchOrderDoesNotMatter) {
  const auto data = small_dataset(12, 3);
  models::NodeModel model(small_spec(), 10);
  TrainConfig cfg;
  cfg.chunks = 3;
  ad::GradBuffer ga(model.params()), gb(model.params());
  const double a = batch_loss_and_grad(model, data, {0, 3, 5, 7, 8, 11}, cfg, &ga);
  const double b = batch_loss_and_grad(model, data, {11, 7, 0, 8, 5, 3}, cfg, &gb);
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_EQ(ga[i].values(), gb[i].values());
}

TEST(Loss, ChunkingChangesOnlyRoundoff) {
  const auto data = small_dataset(9, 4);
  models::NodeModel model(small_spec(), 11);
  TrainConfig one, many;
  one.chunks = 1;
  many.chunks = 4;
  std::vector<std::size_t> idx(9);
  std::iota(idx.begin(), idx.end(), 0);
  const double a = batch_loss_and_grad(model, data, idx, one, nullptr);
  const double b = batch_loss_and_grad(model, data, idx, many, nullptr);
  EXPECT_NEAR(a, b, 1e-12 * a);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ad::ParamStore store;
  store.add("w", Tensor::from_rows({{1.0, -2.0}}));
  store.zero_grads();
  adam_step(store, 0.1);
  EXPECT_EQ(store.at("w").value[0], 1.0);
  EXPECT_EQ(store.at("w").value[1], -2.0);
  EXPECT_EQ(store.step, 1);
}

TEST(Adam, FirstStepHasMagnitudeLr) {
  ad::ParamStore store;
  store.add("w", Tensor::from_rows({{0.0, 0.0, 0.0}}));
  auto& e = store.at("w");
  e.grad = Tensor::from_rows({{3.0, -1e-3, 250.0}});
  adam_step(store, 0.01);
  EXPECT_NEAR(e.value[0], -0.01, 1e-10);
  EXPECT_NEAR(e.value[1], 0.01 * 1e-3 / (1e-3 + 1e-8), 1e-15);
  EXPECT_NEAR(e.value[2], -0.01, 1e-12);
}

TEST(Adam, ConstantGradientShrinksMonotonically) {
  ad::ParamStore store;
  store.add("w", Tensor::from_rows({{1.0}}));
  auto& e = store.at("w");
  e.grad = Tensor::from_rows({{0.5}});
  adam_step(store, 0.1);
  const double first = e.value[0];
  adam_step(store, 0.1);
  const double second = e.value[0];
  EXPECT_LT(first, 1.0);
  EXPECT_LT(second, first);
  // With a constant gradient both bias-corrected moments equal g exactly.
  EXPECT_NEAR(second, 1.0 - 2 * 0.1 * 0.5 / (0.5 + 1e-8), 1e-14);
}

TEST(Train, ZeroLearningRateLeavesModel) {
  const auto data = small_dataset(8, 5);
  models::NodeModel model(small_spec(), 12);
  const auto before = flat_params(model);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.batch_size = 4;
  cfg.epochs = 3;
  const auto report = train(data, model, cfg);
  EXPECT_EQ(flat_params(model), before);
  EXPECT_EQ(report.initial_loss, report.final_loss);
  for (const auto& r : report.epochs) EXPECT_NEAR(r.loss, report.initial_loss, 1e-12 * report.initial_loss);
}

TEST(Train, DeterministicAndLogged) {
  const auto data = small_dataset(10, 6);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.decay = 0.9;
  cfg.batch_size = 4;
  cfg.epochs = 3;
  cfg.seed = 21;
  models::NodeModel a(small_spec(), 13), b(small_spec(), 13);
  std::ostringstream la, lb;
  const auto ra = train(data, a, cfg, &la);
  const auto rb = train(data, b, cfg, &lb);
  EXPECT_EQ(flat_params(a), flat_params(b));
  EXPECT_EQ(ra.final_loss, rb.final_loss);
  std::istringstream sa(la.str()), sb(lb.str());
  std::string xa, xb;
  std::size_t lines = 0;
  while (std::getline(sa, xa) && std::getline(sb, xb)) {
    auto ja = nlohmann::json::parse(xa), jb = nlohmann::json::parse(xb);
    EXPECT_EQ(ja.at("epoch").get<std::size_t>(), lines);
    EXPECT_DOUBLE_EQ(ja.at("lr").get<double>(), 0.01 * std::pow(0.9, static_cast<double>(lines)));
    ja.erase("wall_ms");
    jb.erase("wall_ms");
    EXPECT_EQ(ja, jb);
    ++lines;
  }
  EXPECT_EQ(lines, 3u);
  EXPECT_EQ(ra.steps, 9u);  // ceil(10 / 4) batches per epoch
}

TEST(Train, IterationBudget) {
  const auto data = small_dataset(8, 7);
  models::NodeModel model(small_spec(), 14);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.iterations = 7;
  const auto report = train(data, model, cfg);
  EXPECT_EQ(report.steps, 7u);
  EXPECT_EQ(report.epochs.size(), 4u);
  EXPECT_EQ(model.params().step, 7);
}

TEST(Train, NonFiniteDataAborts) {
  auto data = small_dataset(4, 8);
  data.at(2, 3, 1) = std::nan("");
  models::NodeModel model(small_spec(), 15);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  try {
    train(data, model, cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.epoch(), 0u);
    EXPECT_EQ(e.batch(), 0u);
  }
}

TEST(Train, RejectsInvalidConfig) {
  const auto data = small_dataset(4, 9);
  models::NodeModel model(small_spec(), 16);
  TrainConfig cfg;
  cfg.batch_size = 5;
  EXPECT_THROW(train(data, model, cfg), std::invalid_argument);
  cfg.batch_size = 2;
  cfg.decay = 0.0;
  EXPECT_THROW(train(data, model, cfg), std::invalid_argument);
  cfg.decay = 1.0;
  cfg.lr = -1.0;
  EXPECT_THROW(train(data, model, cfg), std::invalid_argument);
}

TEST(Train, WeaklyNonlinearBilinearConverges) {
  problems::GenOptions o;
  o.n_traj = 1000;
  o.eps = 0.0;
  o.seed = 1;
  o.keep_times = {0, 50};
  const auto data = problems::gen_dataset(o);
  models::ModelSpec spec;
  spec.nonlinear = models::NonlinearKind::Bilinear;
  spec.rank = 2;
  models::NodeModel model(spec, 1);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.batch_size = 1000;
  cfg.iterations = 1000;
  const auto report = train(data, model, cfg);
  EXPECT_LT(report.final_loss, 1e-3 * report.initial_loss);
}

TEST(Train, LipschitzBoundSurvivesTraining) {
  const auto data = small_dataset(32, 10);
  auto spec = small_spec();
  spec.lipschitz = 0.5;
  spec.init_scale = 1.0;
  models::NodeModel model(spec, 17);
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.batch_size = 16;
  cfg.epochs = 20;
  train(data, model, cfg);
  const double est = models::empirical_lipschitz([&](const Tensor& u) { return model.nonlinear_value(u); }, 2,
                                                 10000, 3.0, 2);
  EXPECT_LE(est, 0.5 * (1 + 1e-9));
}

TEST(Gronwall, EqualsRhoAtStart) { EXPECT_DOUBLE_EQ(gronwall_bound(0.3, 2.0, 0.1, 0.2, 1.0, 5.0, 1.5, 1.5), 0.3); }

TEST(Gronwall, ZeroPerturbationIsZero) {
  for (double t : {0.0, 0.5, 3.0}) EXPECT_EQ(gronwall_bound(0.0, 2.0, 0.0, 0.0, 1.0, 5.0, t, 0.0), 0.0);
}

TEST(Gronwall, MonotoneInEachArgument) {
  const double base = gronwall_bound(0.1, 1.0, 0.2, 0.3, 0.5, 2.0, 1.0, 0.0);
  EXPECT_GE(gronwall_bound(0.2, 1.0, 0.2, 0.3, 0.5, 2.0, 1.0, 0.0), base);
  EXPECT_GE(gronwall_bound(0.1, 1.0, 0.4, 0.3, 0.5, 2.0, 1.0, 0.0), base);
  EXPECT_GE(gronwall_bound(0.1, 1.0, 0.2, 0.6, 0.5, 2.0, 1.0, 0.0), base);
  EXPECT_GE(gronwall_bound(0.1, 1.0, 0.2, 0.3, 0.5, 2.0, 1.5, 0.0), base);
  EXPECT_THROW(gronwall_bound(0.1, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0), std::invalid_argument);
}

TEST(Gronwall, BoundsSyntheticLinearPairs) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> z(0.0, 1.0);
  for (int pair = 0; pair < 50; ++pair) {
    const int n = 2 + pair % 4;
    Eigen::MatrixXd a(n, n), da(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        a(i, j) = z(rng) / std::sqrt(n) - (i == j ? 1.5 : 0.0);
        da(i, j) = 0.05 * z(rng);
      }
    Eigen::VectorXd u0(n), v0(n);
    for (int i = 0; i < n; ++i) {
      u0(i) = z(rng);
      v0(i) = u0(i) + 0.01 * z(rng);
    }
    const double rho = (u0 - v0).norm();
    const double a_norm = a.operatorNorm();
    const double da_norm = da.operatorNorm();
    std::vector<double> errs, vnorm;
    for (int k = 0; k <= 40; ++k) {
      const double t = 0.05 * k;
      const Eigen::VectorXd u = (t * a).exp() * u0;
      const Eigen::VectorXd v = (t * (a + da)).exp() * v0;
      errs.push_back((u - v).norm());
      vnorm.push_back(v.norm());
    }
    const double v_bound = *std::max_element(vnorm.begin(), vnorm.end());
    for (int k = 0; k <= 40; ++k) {
      const double bound = gronwall_bound(rho, a_norm, da_norm, 0.0, 0.0, v_bound, 0.05 * k, 0.0);
      EXPECT_LE(errs[k], bound * (1 + 1e-12)) << "pair " << pair << " t=" << 0.05 * k;
    }
  }
}

TEST(JointPdf, ConstantFieldIsOneBin) {
  const auto pdf = joint_pdf_stats({Tensor(64, 3, 1.7)}, 22.0);
  const std::size_t c = pdf.bin_of(0.0, pdf.opts.ux_max);
  EXPECT_EQ(c, 25u);
  EXPECT_DOUBLE_EQ(pdf.at(c, pdf.bin_of(0.0, pdf.opts.uxx_max)), 1.0);
}

TEST(JointPdf, IdenticalInputsOverlapFully) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Tensor> states;
  for (int s = 0; s < 5; ++s) {
    Tensor u(64, 1);
    for (std::size_t j = 0; j < 64; ++j) u[j] = z(rng);
    states.push_back(u);
  }
  const auto p = joint_pdf_stats(states, 22.0), q = joint_pdf_stats(states, 22.0);
  EXPECT_NEAR(p.overlap(q), 1.0, 1e-12);
  double total = 0.0;
  for (double m : p.mass) total += m;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(JointPdf, SineWaveDerivatives) {
  // u = sin(kx): (u_x, u_xx) = (k cos, -k^2 sin); at x = 0 that is (k, 0).
  const double len = 22.0, k = 2 * 3.141592653589793 / len;
  Tensor u(64, 1);
  for (std::size_t j = 0; j < 64; ++j) u[j] = std::sin(k * len * j / 64.0);
  PdfOptions o;
  o.bins = 201;
  o.ux_max = 1.0;
  o.uxx_max = 1.0;
  const auto pdf = joint_pdf_stats({u}, len, o);
  EXPECT_GT(pdf.at(pdf.bin_of(k, 1.0), pdf.bin_of(0.0, 1.0)), 0.0);
  const auto shifted = joint_pdf_stats({2.0 * u}, len, o);
  EXPECT_LT(pdf.overlap(shifted), 0.5);
}
