#include "stiffnode/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

namespace stiffnode::training {

using integrators::TimeGrid;

std::string to_string(Integrator integrator) {
  return integrator == Integrator::Etd1 ? "etd1" : "imex";
}

Integrator integrator_from_string(const std::string& s) {
  if (s == "etd1") return Integrator::Etd1;
  if (s == "imex") return Integrator::ImexSsp2;
  throw std::invalid_argument("unknown integrator '" + s + "' (expected etd1 or imex)");
}

void TrainConfig::validate(std::size_t dataset_size) const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be finite and >= 0");
  if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("decay must lie in (0, 1]");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (batch_size > dataset_size) {
    throw std::invalid_argument("batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                                std::to_string(dataset_size));
  }
  if (epochs == 0 && iterations == 0) throw std::invalid_argument("one of epochs or iterations must be positive");
  if (chunks == 0) throw std::invalid_argument("chunks must be positive");
  expmv.validate();
}

std::vector<double> trapezoid_weights(const TimeGrid& grid) {
  std::vector<double> w(grid.size(), 0.0);
  for (std::size_t n = 0; n + 1 < grid.size(); ++n) {
    const double half = 0.5 * grid.step(n);
    w[n] += half;
    w[n + 1] += half;
  }
  return w;
}

ad::Var rollout_loss(const models::BoundModel& model, const std::vector<Tensor>& truth, const TimeGrid& grid,
                     Integrator integrator, const expm::ExpmvConfig& cfg) {
  if (truth.size() != grid.size()) throw ShapeError("rollout_loss: truth snapshots do not match the grid");
  ad::Tape& tape = *model.tape;
  const ad::Var z0 = model.encode(tape.constant(truth.front()));
  const std::vector<ad::Var> states = integrator == Integrator::Etd1
                                          ? integrators::etd1_rollout(model, z0, grid, cfg)
                                          : integrators::imex_ssp2_rollout(model, z0, grid);
  const std::vector<double> w = trapezoid_weights(grid);
  ad::Var total = tape.constant(0.0);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (w[k] == 0.0) continue;
    const ad::Var err = ad::sub(model.decode(states[k]), tape.constant(truth[k]));
    total = ad::add(total, ad::scale(ad::squared_norm(err), w[k]));
  }
  return total;
}

double trajectory_loss(const integrators::Trajectory& truth, models::NodeModel& model,
                       const expm::ExpmvConfig& cfg, Integrator integrator) {
  truth.validate();
  if (truth.dim() != model.spec().physical_dim) {
    throw ShapeError("trajectory_loss: truth has dimension " + std::to_string(truth.dim()) + ", model expects " +
                     std::to_string(model.spec().physical_dim));
  }
  ad::Tape tape;
  const models::BoundModel bound = model.bind(tape);
  return rollout_loss(bound, truth.states, truth.grid, integrator, cfg).scalar();
}

double batch_loss_and_grad(models::NodeModel& model, const problems::Dataset& data, std::vector<std::size_t> trajs,
                           const TrainConfig& cfg, ad::GradBuffer* grads) {
  if (trajs.empty()) throw std::invalid_argument("batch_loss_and_grad: empty batch");
  if (data.dim != model.spec().physical_dim) {
    throw ShapeError("dataset dimension " + std::to_string(data.dim) + " does not match model physical dimension " +
                     std::to_string(model.spec().physical_dim));
  }
  // Membership, not order, determines the result.
  std::sort(trajs.begin(), trajs.end());
  const std::size_t batch = trajs.size();
  const std::size_t chunks = std::min(cfg.chunks, batch);
  std::vector<std::size_t> begin(chunks + 1, 0);
  for (std::size_t c = 0; c < chunks; ++c) begin[c + 1] = begin[c] + batch / chunks + (c < batch % chunks ? 1 : 0);

  std::vector<double> values(chunks, 0.0);
  std::vector<ad::GradBuffer> buffers;
  if (grads) buffers.assign(chunks, ad::GradBuffer(model.params()));
  std::exception_ptr failure;
  const double inv_batch = 1.0 / static_cast<double>(batch);
  const auto n_chunks = static_cast<std::ptrdiff_t>(chunks);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < n_chunks; ++c) {
    try {
      const std::vector<std::size_t> members(trajs.begin() + static_cast<std::ptrdiff_t>(begin[c]),
                                             trajs.begin() + static_cast<std::ptrdiff_t>(begin[c + 1]));
      std::vector<Tensor> truth;
      truth.reserve(data.n_times());
      for (std::size_t k = 0; k < data.n_times(); ++k) truth.push_back(data.block(k, members));
      ad::Tape tape;
      const models::BoundModel bound = model.bind(tape);
      const ad::Var loss = ad::scale(rollout_loss(bound, truth, data.grid, cfg.integrator, cfg.expmv), inv_batch);
      values[c] = loss.scalar();
      if (grads) {
        tape.backward(loss);
        tape.accumulate_grads(buffers[c]);
      }
    } catch (...) {
#pragma omp critical(stiffnode_batch_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    total += values[c];
    if (grads) *grads += buffers[c];
  }
  return total;
}

double dataset_loss(models::NodeModel& model, const problems::Dataset& data, const TrainConfig& cfg) {
  const std::size_t n = data.n_traj;
  const std::size_t b = std::min(cfg.batch_size, n);
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += b) {
    const std::size_t stop = std::min(n, start + b);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    total += batch_loss_and_grad(model, data, idx, cfg, nullptr) * static_cast<double>(stop - start);
  }
  return total / static_cast<double>(n);
}

void adam_step(ad::ParamStore& store, double lr, double beta1, double beta2, double eps) {
  ++store.step;
  const double t = static_cast<double>(store.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (auto& e : store) {
    if (e.moment1.size() != e.value.size()) e.moment1 = Tensor(e.value.rows(), e.value.cols());
    if (e.moment2.size() != e.value.size()) e.moment2 = Tensor(e.value.rows(), e.value.cols());
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      e.moment1[i] = beta1 * e.moment1[i] + (1.0 - beta1) * g;
      e.moment2[i] = beta2 * e.moment2[i] + (1.0 - beta2) * g * g;
      const double mhat = e.moment1[i] / c1;
      const double vhat = e.moment2[i] / c2;
      e.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

Prediction predict(models::NodeModel& model, const Tensor& u0, const TimeGrid& grid, Integrator integrator,
                   const expm::ExpmvConfig& cfg) {
  if (u0.rows() != model.spec().physical_dim || u0.cols() != 1) {
    throw ShapeError("predict: initial condition must be " + std::to_string(model.spec().physical_dim) + " x 1");
  }
  Prediction out;
  const Tensor z0 = model.encode_value(u0);
  if (integrator == Integrator::Etd1) {
    out.latent = integrators::etd1_rollout(model, z0, grid, cfg);
  } else {
    out.latent = integrators::imex_ssp2_rollout(
        model.linear_matrix(), [&](const Tensor& z) { return model.nonlinear_value(z); }, z0, grid);
  }
  out.physical.grid = grid;
  out.physical.states.reserve(out.latent.states.size());
  for (const Tensor& z : out.latent.states) out.physical.states.push_back(model.decode_value(z));
  return out;
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

double ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

LossReport train(const problems::Dataset& data, models::NodeModel& model, const TrainConfig& cfg, std::ostream* log) {
  const std::size_t n = data.n_traj;
  cfg.validate(n);
  const auto t_start = std::chrono::steady_clock::now();
  ad::ParamStore& store = model.params();
  LossReport report;
  report.initial_loss = dataset_loss(model, data, cfg);

  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.iterations > 0 ? cfg.iterations : cfg.epochs * per_epoch;
  double lr = cfg.lr;
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < total_steps; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    const std::vector<std::size_t> perm = epoch_order(n, cfg.seed, epoch);
    double loss_sum = 0.0, grad_sum = 0.0;
    std::size_t seen = 0, batches = 0;
    for (std::size_t b = 0; b < per_epoch && step < total_steps; ++b, ++step) {
      const std::size_t start = b * cfg.batch_size;
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(start),
                                         perm.begin() + static_cast<std::ptrdiff_t>(stop));
      ad::GradBuffer grads(store);
      double loss = 0.0;
      try {
        loss = batch_loss_and_grad(model, data, idx, cfg, &grads);
      } catch (const integrators::IntegrationError& e) {
        throw TrainingError("rollout failed at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                                ": " + e.what(),
                            epoch, b);
      } catch (const expm::ExpmvError& e) {
        throw TrainingError("expmv failed at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                                ": " + e.what(),
                            epoch, b);
      }
      store.zero_grads();
      grads.add_to(store);
      const double gn = store.grad_norm();
      if (!std::isfinite(loss) || !std::isfinite(gn)) {
        throw TrainingError("non-finite loss or gradient at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(b),
                            epoch, b);
      }
      adam_step(store, lr);
      loss_sum += loss * static_cast<double>(stop - start);
      grad_sum += gn;
      seen += stop - start;
      ++batches;
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(seen), lr, grad_sum / static_cast<double>(batches),
                    ms_since(t_epoch)};
    report.epochs.push_back(rec);
    if (log) {
      nlohmann::json line = {{"epoch", rec.epoch},
                             {"loss", rec.loss},
                             {"lr", rec.lr},
                             {"grad_norm", rec.grad_norm},
                             {"wall_ms", rec.wall_ms}};
      *log << line.dump() << '\n';
    }
    lr *= cfg.decay;
  }
  report.steps = step;
  report.final_loss = dataset_loss(model, data, cfg);
  if (!std::isfinite(report.final_loss)) {
    throw TrainingError("non-finite final loss", report.epochs.size(), 0);
  }
  report.wall_ms = ms_since(t_start);
  return report;
}

double gronwall_bound(double rho, double a_norm, double da_norm, double dg_norm, double lipschitz, double v_bound,
                      double t, double t0) {
  const double rate = a_norm + lipschitz;
  if (!(rate > 0.0)) throw std::invalid_argument("gronwall_bound: ||A|| + L must be positive");
  const double growth = std::exp(rate * (t - t0));
  return rho * growth + (da_norm + dg_norm) * v_bound / rate * std::expm1(rate * (t - t0));
}

std::size_t JointPdf::bin_of(double value, double max) const {
  const double pos = std::floor((value + max) / (2.0 * max) * static_cast<double>(opts.bins));
  if (!(pos > 0.0)) return 0;
  return std::min(static_cast<std::size_t>(pos), opts.bins - 1);
}

double JointPdf::overlap(const JointPdf& other) const {
  if (other.opts.bins != opts.bins || other.opts.ux_max != opts.ux_max || other.opts.uxx_max != opts.uxx_max) {
    throw std::invalid_argument("JointPdf::overlap: histograms use different bin edges");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < mass.size(); ++i) s += std::min(mass[i], other.mass[i]);
  return s;
}

JointPdf joint_pdf_stats(const std::vector<Tensor>& states, double domain_length, const PdfOptions& opts) {
  if (opts.bins == 0 || !(opts.ux_max > 0.0) || !(opts.uxx_max > 0.0)) {
    throw std::invalid_argument("joint_pdf_stats: bins and ranges must be positive");
  }
  JointPdf pdf{opts, std::vector<double>(opts.bins * opts.bins, 0.0)};
  std::size_t count = 0;
  for (const Tensor& u : states) {
    const std::size_t n = u.rows();
    if (n < 5) throw ShapeError("joint_pdf_stats: need at least 5 grid points");
    const double dx = domain_length / static_cast<double>(n);
    for (std::size_t c = 0; c < u.cols(); ++c) {
      for (std::size_t j = 0; j < n; ++j) {
        const double m2 = u((j + n - 2) % n, c), m1 = u((j + n - 1) % n, c);
        const double p1 = u((j + 1) % n, c), p2 = u((j + 2) % n, c), u0 = u(j, c);
        const double ux = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * dx);
        const double uxx = (-p2 + 16.0 * p1 - 30.0 * u0 + 16.0 * m1 - m2) / (12.0 * dx * dx);
        pdf.mass[pdf.bin_of(ux, opts.ux_max) * opts.bins + pdf.bin_of(uxx, opts.uxx_max)] += 1.0;
        ++count;
      }
    }
  }
  if (count == 0) throw std::invalid_argument("joint_pdf_stats: no samples");
  for (double& m : pdf.mass) m /= static_cast<double>(count);
  return pdf;
}

}  // namespace stiffnode::training
