#pragma once

// Trajectory loss, Adam, the mini-batch training loop and evaluation
// diagnostics (Gronwall error bound, joint PDF of spatial derivatives).

#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stiffnode/autodiff.hpp"
#include "stiffnode/expmv.hpp"
#include "stiffnode/integrators.hpp"
#include "stiffnode/models.hpp"
#include "stiffnode/problems.hpp"

namespace stiffnode::training {

enum class Integrator { Etd1, ImexSsp2 };
std::string to_string(Integrator integrator);
Integrator integrator_from_string(const std::string& s);

struct TrainConfig {
  double lr = 0.01;
  /// Learning rate multiplier applied after every epoch.
  double decay = 1.0;
  std::size_t batch_size = 1000;
  /// Training length: full passes, or batch steps when `iterations` > 0.
  std::size_t epochs = 1;
  std::size_t iterations = 0;
  Integrator integrator = Integrator::Etd1;
  expm::ExpmvConfig expmv;
  std::uint64_t seed = 0;
  /// A batch is split into this many private-tape chunks whose gradients are
  /// summed in chunk order; results depend on this number, never on threads.
  std::size_t chunks = 4;

  void validate(std::size_t dataset_size) const;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  /// Mean batch loss over the epoch, each taken before its update.
  double loss = 0.0;
  double lr = 0.0;
  /// Mean gradient norm over the epoch's batches.
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct LossReport {
  std::vector<EpochRecord> epochs;
  /// dataset_loss before the first and after the last update.
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double wall_ms = 0.0;
  std::size_t steps = 0;
};

/// Trapezoid weights w_k with sum_k w_k e_k = sum_n (e_n + e_{n+1}) / 2 * dt_n.
std::vector<double> trapezoid_weights(const integrators::TimeGrid& grid);

/// Sum over trajectories of the trapezoid loss for a block of truth states
/// (truth[k] is dim x B at grid time k), recorded on the model's tape.
ad::Var rollout_loss(const models::BoundModel& model, const std::vector<Tensor>& truth,
                     const integrators::TimeGrid& grid, Integrator integrator,
                     const expm::ExpmvConfig& cfg);

/// Single-trajectory loss in physical coordinates: encode U_0, roll out on
/// the truth grid, decode and integrate the squared error.
double trajectory_loss(const integrators::Trajectory& truth, models::NodeModel& model,
                       const expm::ExpmvConfig& cfg, Integrator integrator = Integrator::Etd1);

/// Mean loss over `trajs` (processed in ascending index order) and its
/// gradient, accumulated into `grads` when non-null.
double batch_loss_and_grad(models::NodeModel& model, const problems::Dataset& data,
                           std::vector<std::size_t> trajs, const TrainConfig& cfg,
                           ad::GradBuffer* grads);

/// Mean trajectory loss over the whole dataset, evaluated in consecutive
/// blocks of cfg.batch_size.
double dataset_loss(models::NodeModel& model, const problems::Dataset& data, const TrainConfig& cfg);

struct Prediction {
  integrators::Trajectory latent;
  integrators::Trajectory physical;
};

/// Encodes u0 (stored coordinates), rolls out on `grid` with the chosen
/// integrator and decodes every state.
Prediction predict(models::NodeModel& model, const Tensor& u0, const integrators::TimeGrid& grid,
                   Integrator integrator, const expm::ExpmvConfig& cfg);

/// Bias-corrected Adam update from store grads; advances store.step.
void adam_step(ad::ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

/// Mini-batch Adam. Writes one JSON line per epoch to `log` when non-null.
LossReport train(const problems::Dataset& data, models::NodeModel& model, const TrainConfig& cfg,
                 std::ostream* log = nullptr);

/// rho e^{(a + L)(t - t0)} + (dA + dg) V / (a + L) (e^{(a + L)(t - t0)} - 1).
double gronwall_bound(double rho, double a_norm, double da_norm, double dg_norm, double lipschitz,
                      double v_bound, double t, double t0);

struct PdfOptions {
  /// Odd, so that zero sits in the middle of a bin.
  std::size_t bins = 51;
  double ux_max = 5.0;
  double uxx_max = 10.0;
};

/// Normalized histogram over (u_x, u_xx) on fixed edges [-max, max];
/// samples beyond the edges land in the outermost bins.
struct JointPdf {
  PdfOptions opts;
  std::vector<double> mass;  // bins x bins, row = u_x bin

  std::size_t bin_of(double value, double max) const;
  double at(std::size_t i, std::size_t j) const { return mass[i * opts.bins + j]; }
  /// sum_ij min(p_ij, q_ij).
  double overlap(const JointPdf& other) const;
};

/// Derivatives by fourth-order periodic central differences; each state is
/// one column sampled at x_j = j * domain_length / N.
JointPdf joint_pdf_stats(const std::vector<Tensor>& states, double domain_length, const PdfOptions& opts = {});

}  // namespace stiffnode::training
