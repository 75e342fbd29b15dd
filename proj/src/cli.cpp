#include "stiffnode/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stiffnode/config.hpp"
#include "stiffnode/integrators.hpp"
#include "stiffnode/models.hpp"
#include "stiffnode/problems.hpp"
#include "stiffnode/training.hpp"

namespace stiffnode::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Maps between raw and stored coordinates of a problem.
struct Coordinates {
  std::function<Tensor(Tensor)> scale;
  std::function<Tensor(Tensor)> unscale;
  std::vector<std::string> names;
};

Coordinates coordinates_for(const std::string& problem, std::size_t dim) {
  Coordinates c;
  if (problem == "robertson") {
    c.scale = problems::robertson_scale;
    c.unscale = problems::robertson_unscale;
    c.names = {"y1", "y2", "y3"};
    return c;
  }
  c.scale = [](Tensor t) { return t; };
  c.unscale = [](Tensor t) { return t; };
  for (std::size_t i = 0; i < dim; ++i) c.names.push_back("u" + std::to_string(i));
  return c;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::ofstream open_out(const fs::path& p) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::binary);
  if (!out) throw UsageError("cannot write " + p.string());
  return out;
}

config::ExperimentConfig resolve_config(const std::string& path, const std::string& preset) {
  if (!path.empty() && !preset.empty()) throw UsageError("give either --config or --preset, not both");
  config::ExperimentConfig cfg;
  if (!path.empty()) {
    cfg = config::load(path);
  } else if (!preset.empty()) {
    cfg = config::preset(preset);
  } else {
    throw UsageError("a --config file or --preset is required");
  }
  config::apply_env_overrides(cfg);
  return cfg;
}

problems::Dataset obtain_dataset(const config::ExperimentConfig& cfg, const std::string& data_path,
                                 const fs::path& out_dir, std::ostream& out) {
  if (!data_path.empty()) return problems::Dataset::load(data_path);
  problems::Dataset data = problems::gen_dataset(cfg.data);
  const fs::path p = out_dir / "dataset.bin";
  ensure_parent(p);
  data.save(p);
  out << "dataset " << p.string() << "\n";
  return data;
}

void check_compatible(const problems::Dataset& data, const models::ModelSpec& spec, const std::string& problem) {
  if (data.dim != spec.physical_dim) {
    throw UsageError("dataset dimension " + std::to_string(data.dim) + " does not match model physical_dim " +
                     std::to_string(spec.physical_dim));
  }
  if (data.problem != problem) {
    throw UsageError("dataset problem '" + data.problem + "' does not match '" + problem + "'");
  }
}

std::vector<double> parse_numbers(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw UsageError("bad number '" + item + "' in '" + s + "'");
    v.push_back(x);
  }
  return v;
}

// ------------------------------------------------------------------ gen-data

std::string dataset_summary(const problems::Dataset& d) {
  std::ostringstream os;
  os << "problem " << d.problem << "\n"
     << "trajectories " << d.n_traj << "\n"
     << "components " << d.dim << "\n"
     << "times " << d.n_times() << " from " << num(d.grid.front()) << " to " << num(d.grid.back()) << "\n"
     << "grid " << d.grid_recipe << "\n"
     << "seed " << d.seed << "\n"
     << "noise " << num(d.noise_scale) << "\n"
     << "component min max mean std\n";
  const std::size_t count = d.n_traj * d.n_times();
  for (std::size_t c = 0; c < d.dim; ++c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      const double v = d.values[i * d.dim + c];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      sum += v;
    }
    const double mean = sum / static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) {
      const double v = d.values[i * d.dim + c] - mean;
      sq += v * v;
    }
    os << c << " " << num(lo) << " " << num(hi) << " " << num(mean) << " "
       << num(std::sqrt(sq / static_cast<double>(count))) << "\n";
  }
  return os.str();
}

struct GenArgs {
  std::string config, preset, problem, grid, out;
  std::optional<std::size_t> n_traj;
  std::optional<std::uint64_t> seed;
  std::optional<double> noise, eps;
};

int cmd_gen_data(const GenArgs& a, std::ostream& out) {
  config::ExperimentConfig cfg;
  if (!a.config.empty() || !a.preset.empty()) {
    cfg = resolve_config(a.config, a.preset);
  } else {
    if (a.problem.empty()) throw UsageError("--problem is required without --config");
    config::apply_env_overrides(cfg);
  }
  problems::GenOptions opts = cfg.data;
  if (!a.problem.empty()) {
    if (a.problem != opts.problem) opts = problems::GenOptions{};
    opts.problem = a.problem;
  }
  opts.seed = cfg.seed;
  if (a.n_traj) opts.n_traj = *a.n_traj;
  if (a.seed) opts.seed = *a.seed;
  if (a.noise) opts.noise_scale = *a.noise;
  if (a.eps) opts.eps = *a.eps;
  if (!a.grid.empty()) opts.grid = a.grid;
  if (opts.problem != "weakly-nonlinear" && opts.problem != "robertson" && opts.problem != "ks") {
    throw UsageError("unknown problem '" + opts.problem + "' (expected weakly-nonlinear, robertson or ks)");
  }
  const problems::Dataset d = problems::gen_dataset(opts);
  const fs::path path(a.out);
  ensure_parent(path);
  d.save(path);
  const std::string summary = dataset_summary(d);
  open_out(fs::path(a.out + ".summary.txt")) << summary;
  out << summary;
  return kOk;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string config, preset, data, out;
  std::optional<double> lr;
  std::optional<std::size_t> epochs, iterations;
  std::optional<std::uint64_t> seed;
  std::string integrator;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  config::ExperimentConfig cfg = resolve_config(a.config, a.preset);
  if (a.seed) cfg.seed = *a.seed;
  if (a.lr) cfg.train.lr = *a.lr;
  if (a.epochs) {
    cfg.train.epochs = *a.epochs;
    cfg.train.iterations = 0;
  }
  if (a.iterations) cfg.train.iterations = *a.iterations;
  if (!a.integrator.empty()) cfg.train.integrator = training::integrator_from_string(a.integrator);
  cfg.finalize();

  const fs::path dir(a.out.empty() ? cfg.output_dir : a.out);
  if (dir.empty()) throw UsageError("no output directory");
  fs::create_directories(dir);
  config::save(cfg, (dir / "config.json").string());

  const problems::Dataset data = obtain_dataset(cfg, a.data, dir, out);
  check_compatible(data, cfg.model, cfg.data.problem);
  try {
    cfg.train.validate(data.n_traj);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  models::NodeModel model(cfg.model, cfg.seed);
  std::ofstream log = open_out(dir / "train_log.jsonl");
  const training::LossReport report = training::train(data, model, cfg.train, &log);

  const json meta = {{"config", config::to_json(cfg)},
                     {"initial_loss", report.initial_loss},
                     {"final_loss", report.final_loss},
                     {"steps", report.steps},
                     {"epochs", report.epochs.size()}};
  models::save_checkpoint(model, dir / "checkpoint.bin", meta.dump());
  out << "checkpoint " << (dir / "checkpoint.bin").string() << "\n";
  out << "initial_loss " << num(report.initial_loss) << "\n";
  out << "final_loss " << num(report.final_loss) << "\n";
  return kOk;
}

// ------------------------------------------------------------------- predict

struct LoadedRun {
  models::NodeModel model;
  config::ExperimentConfig cfg;
  json meta;
};

LoadedRun load_run(const std::string& path) {
  models::LoadedCheckpoint ck = models::load_checkpoint(path);
  LoadedRun r{std::move(ck.model), {}, json::parse(ck.metadata_json)};
  if (!r.meta.contains("config")) throw UsageError(path + ": checkpoint has no experiment config");
  r.cfg = config::from_json(r.meta.at("config"));
  return r;
}

void write_csv(const fs::path& path, const std::vector<std::string>& names, const integrators::TimeGrid* grid,
               const std::vector<Tensor>& states) {
  std::ofstream f = open_out(path);
  f << "t";
  for (const auto& n : names) f << "," << n;
  f << "\n";
  for (std::size_t k = 0; k < states.size(); ++k) {
    f << num((*grid)[k]);
    for (std::size_t i = 0; i < states[k].rows(); ++i) f << "," << num(states[k][i]);
    f << "\n";
  }
}

struct PredictArgs {
  std::string checkpoint, ic, ic_dataset, grid, out, latent_out;
  std::size_t traj = 0;
  std::size_t time = 0;
  bool scaled = false;
};

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  LoadedRun run = load_run(a.checkpoint);
  const models::ModelSpec& spec = run.model.spec();
  const Coordinates coords = coordinates_for(run.cfg.data.problem, spec.physical_dim);

  Tensor u0;
  if (!a.ic.empty() && !a.ic_dataset.empty()) throw UsageError("give either --ic or --ic-dataset");
  if (!a.ic.empty()) {
    const std::vector<double> v = parse_numbers(a.ic);
    if (v.size() != spec.physical_dim) {
      throw UsageError("initial condition has " + std::to_string(v.size()) + " components, model expects " +
                       std::to_string(spec.physical_dim));
    }
    u0 = coords.scale(Tensor::column(v));
  } else if (!a.ic_dataset.empty()) {
    const problems::Dataset d = problems::Dataset::load(a.ic_dataset);
    if (d.dim != spec.physical_dim) throw UsageError("dataset dimension does not match the model");
    if (a.traj >= d.n_traj || a.time >= d.n_times()) throw UsageError("--traj/--time out of range");
    u0 = d.state(a.traj, a.time);
  } else {
    throw UsageError("an initial condition is required (--ic or --ic-dataset)");
  }

  std::vector<std::string> latent_names;
  for (std::size_t i = 0; i < spec.latent_dim; ++i) latent_names.push_back("z" + std::to_string(i));
  const bool has_ae = spec.autoencoder != models::AutoencoderKind::None;
  fs::path latent_path = a.latent_out;
  if (latent_path.empty() && has_ae) latent_path = fs::path(a.out).replace_extension(".latent.csv");

  if (a.grid == "list:" || a.grid == "none") {
    write_csv(a.out, coords.names, nullptr, {});
    if (!latent_path.empty()) write_csv(latent_path, latent_names, nullptr, {});
    out << "rows 0\n";
    return kOk;
  }
  const integrators::TimeGrid grid = integrators::TimeGrid::parse(a.grid);
  const training::Prediction p =
      training::predict(run.model, u0, grid, run.cfg.train.integrator, run.cfg.train.expmv);
  std::vector<Tensor> states = p.physical.states;
  if (!a.scaled) {
    for (Tensor& s : states) s = coords.unscale(s);
  }
  write_csv(a.out, coords.names, &grid, states);
  out << "rows " << states.size() << "\n" << "csv " << a.out << "\n";
  if (!latent_path.empty()) {
    write_csv(latent_path, latent_names, &grid, p.latent.states);
    out << "latent " << latent_path.string() << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, dataset, out, stats;
  std::size_t lipschitz_samples = 10000;
};

json evaluate(LoadedRun& run, const problems::Dataset& data, const EvalArgs& a) {
  models::NodeModel& model = run.model;
  const models::ModelSpec& spec = model.spec();
  const training::TrainConfig& tc = run.cfg.train;
  json r;
  r["problem"] = data.problem;
  r["n_traj"] = data.n_traj;
  r["mean_loss"] = training::dataset_loss(model, data, tc);

  std::vector<double> max_err(data.dim, 0.0);
  double latent_radius = 1.0;
  for (std::size_t i = 0; i < data.n_traj; ++i) {
    const training::Prediction p = training::predict(model, data.state(i, 0), data.grid, tc.integrator, tc.expmv);
    for (std::size_t k = 0; k < data.n_times(); ++k) {
      for (std::size_t c = 0; c < data.dim; ++c) {
        const double e = std::abs(p.physical.states[k][c] - data.at(i, k, c));
        max_err[c] = std::isnan(e) ? e : std::max(max_err[c], e);
      }
    }
    for (double z : p.latent.states.front().values()) latent_radius = std::max(latent_radius, std::abs(z));
  }
  r["max_error"] = max_err;

  json lip;
  lip["configured"] = spec.nonlinear == models::NonlinearKind::Lipschitz ? json(spec.lipschitz) : json(nullptr);
  lip["radius"] = latent_radius;
  lip["samples"] = a.lipschitz_samples;
  lip["empirical"] = models::empirical_lipschitz([&](const Tensor& u) { return model.nonlinear_value(u); },
                                                 spec.latent_dim, a.lipschitz_samples, latent_radius,
                                                 run.cfg.seed);
  r["lipschitz"] = lip;

  const double alpha = problems::transient_diagnostics(model.linear_matrix()).alpha;
  r["spectral"] = {{"max_re_lambda", alpha}, {"mu", spec.mu}, {"ok", alpha <= spec.mu + 1e-8}};

  if (a.stats == "pdf") {
    if (data.problem != "ks") throw UsageError("--stats pdf needs a ks dataset");
    const problems::KsOptions& ks = run.cfg.data.ks;
    // Truth: the first snapshot of every window traces the sampled trajectory.
    std::vector<Tensor> truth;
    for (std::size_t i = 0; i < data.n_traj; ++i) truth.push_back(data.state(i, 0));
    const double horizon = static_cast<double>(data.n_traj - 1) * ks.sample_dt;
    const auto grid = integrators::TimeGrid::uniform(0.0, std::max(horizon, ks.sample_dt), std::max<std::size_t>(data.n_traj, 2));
    const training::Prediction p = training::predict(model, data.state(0, 0), grid, tc.integrator, tc.expmv);
    const training::JointPdf pt = training::joint_pdf_stats(truth, ks.domain_length);
    const training::JointPdf pm = training::joint_pdf_stats(p.physical.states, ks.domain_length);
    r["pdf_overlap"] = pt.overlap(pm);
  } else if (!a.stats.empty()) {
    throw UsageError("unknown --stats '" + a.stats + "'");
  }
  return r;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  LoadedRun run = load_run(a.checkpoint);
  const problems::Dataset data = problems::Dataset::load(a.dataset);
  check_compatible(data, run.model.spec(), run.cfg.data.problem);
  const json r = evaluate(run, data, a);
  open_out(a.out) << r.dump(2) << "\n";
  out << r.dump(2) << "\n";
  return kOk;
}

// -------------------------------------------------------------------- ablate

struct AblateArgs {
  std::string config, preset, data, out;
  std::optional<std::size_t> iterations;
};

std::string lipschitz_label(const std::optional<double>& l) { return l ? num(*l) : std::string("none"); }

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  config::ExperimentConfig cfg = resolve_config(a.config, a.preset);
  if (a.iterations) {
    cfg.train.iterations = *a.iterations;
    cfg.finalize();
  }
  if (cfg.ablation.lipschitz.empty()) throw UsageError("config has no ablation grid");
  const fs::path dir(a.out.empty() ? cfg.output_dir : a.out);
  fs::create_directories(dir);
  config::save(cfg, (dir / "config.json").string());
  const problems::Dataset data = obtain_dataset(cfg, a.data, dir, out);
  check_compatible(data, cfg.model, cfg.data.problem);
  try {
    cfg.train.validate(data.n_traj);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  std::ofstream csv = open_out(dir / "ablation.csv");
  csv << "lipschitz,init_scale,initial_loss,final_loss,status\n";
  std::size_t cell = 0;
  for (const auto& lip : cfg.ablation.lipschitz) {
    for (double scale : cfg.ablation.init_scales) {
      models::ModelSpec spec = cfg.model;
      spec.nonlinear = lip ? models::NonlinearKind::Lipschitz : models::NonlinearKind::Unconstrained;
      if (lip) spec.lipschitz = *lip;
      spec.init_scale = scale;
      models::NodeModel model(spec, cfg.seed);
      std::ofstream log = open_out(dir / ("cell_" + std::to_string(cell) + ".jsonl"));
      std::string status = "ok";
      double initial = std::numeric_limits<double>::quiet_NaN(), final_loss = initial;
      try {
        const training::LossReport rep = training::train(data, model, cfg.train, &log);
        initial = rep.initial_loss;
        final_loss = rep.final_loss;
      } catch (const training::TrainingError& e) {
        status = "failed at epoch " + std::to_string(e.epoch()) + " batch " + std::to_string(e.batch());
      }
      csv << lipschitz_label(lip) << "," << num(scale) << "," << num(initial) << "," << num(final_loss) << ","
          << status << "\n";
      csv.flush();
      out << "L=" << lipschitz_label(lip) << " init=" << num(scale) << " final_loss=" << num(final_loss) << " "
          << status << "\n";
      ++cell;
    }
  }
  out << "table " << (dir / "ablation.csv").string() << "\n";
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Stiff neural ODEs with exponential integrators"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP threads (default: all cores)")->check(CLI::NonNegativeNumber);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a trajectory dataset");
  g->add_option("--problem", gen.problem, "weakly-nonlinear, robertson or ks");
  g->add_option("--n-traj", gen.n_traj, "Number of trajectories");
  g->add_option("--seed", gen.seed, "Random seed");
  g->add_option("--noise", gen.noise, "Gaussian noise scale relative to component std");
  g->add_option("--eps", gen.eps, "Weakly nonlinear coupling");
  g->add_option("--grid", gen.grid, "Time grid recipe (uniform:a:b:N, log:a:b:N, list:...)");
  g->add_option("--config", gen.config, "Experiment config (data section)");
  g->add_option("--preset", gen.preset, "Named preset (data section)");
  g->add_option("--out", gen.out, "Dataset path")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config, "Experiment config file");
  t->add_option("--preset", tr.preset, "Named preset");
  t->add_option("--data", tr.data, "Existing dataset (default: generate from the config)");
  t->add_option("--out", tr.out, "Output directory (default: config output_dir)");
  t->add_option("--lr", tr.lr, "Initial learning rate");
  t->add_option("--epochs", tr.epochs, "Training epochs");
  t->add_option("--iterations", tr.iterations, "Training batch steps");
  t->add_option("--seed", tr.seed, "Random seed");
  t->add_option("--integrator", tr.integrator, "etd1 or imex");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Roll a trained model out from an initial condition");
  p->add_option("--checkpoint", pr.checkpoint, "Checkpoint path")->required();
  p->add_option("--ic", pr.ic, "Comma-separated initial condition in raw coordinates");
  p->add_option("--ic-dataset", pr.ic_dataset, "Take the initial condition from a dataset");
  p->add_option("--traj", pr.traj, "Trajectory index for --ic-dataset");
  p->add_option("--time", pr.time, "Time index for --ic-dataset");
  p->add_option("--grid", pr.grid, "Output time grid recipe ('list:' for none)")->required();
  p->add_option("--out", pr.out, "CSV path")->required();
  p->add_option("--latent-out", pr.latent_out, "Latent CSV path (default beside --out)");
  p->add_flag("--scaled", pr.scaled, "Write stored (scaled) coordinates");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint path")->required();
  e->add_option("--dataset", ev.dataset, "Dataset path")->required();
  e->add_option("--out", ev.out, "JSON report path")->required();
  e->add_option("--stats", ev.stats, "Extra statistics: pdf");
  e->add_option("--lipschitz-samples", ev.lipschitz_samples, "Sample pairs for the Lipschitz estimate");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "Lipschitz constant x init scale table");
  b->add_option("--config", ab.config, "Experiment config file");
  b->add_option("--preset", ab.preset, "Named preset");
  b->add_option("--data", ab.data, "Existing dataset");
  b->add_option("--out", ab.out, "Output directory");
  b->add_option("--iterations", ab.iterations, "Batch steps per cell");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    return app.exit(ex, out, err) == 0 ? kOk : kUsage;
  }

  if (threads > 0) omp_set_num_threads(threads);
  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (p->parsed()) return cmd_predict(pr, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (b->parsed()) return cmd_ablate(ab, out);
  } catch (const training::TrainingError& ex) {
    err << "error: " << ex.what() << " (epoch " << ex.epoch() << ", batch " << ex.batch() << ")\n";
    return kNumerical;
  } catch (const integrators::IntegrationError& ex) {
    err << "error: " << ex.what() << "\n";
    return kNumerical;
  } catch (const expm::ExpmvError& ex) {
    err << "error: " << ex.what() << "\n";
    return kNumerical;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace stiffnode::cli
