#include "stiffnode/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace stiffnode::config {

using nlohmann::json;

namespace {

std::string to_string(expm::PowerEvaluation e) {
  switch (e) {
    case expm::PowerEvaluation::Recurrence: return "recurrence";
    case expm::PowerEvaluation::Squaring: return "squaring";
    case expm::PowerEvaluation::Auto: return "auto";
  }
  return "auto";
}

expm::PowerEvaluation evaluation_from_string(const std::string& s) {
  if (s == "recurrence") return expm::PowerEvaluation::Recurrence;
  if (s == "squaring") return expm::PowerEvaluation::Squaring;
  if (s == "auto") return expm::PowerEvaluation::Auto;
  throw ConfigError("unknown expmv evaluation '" + s + "'");
}

// Reads keys out of one JSON object and complains about whatever is left.
class Section {
 public:
  Section(const json& j, std::string path) : path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_ + " must be an object");
    rest_ = j;
  }

  template <class T>
  void get(const char* key, T& out) {
    auto it = rest_.find(key);
    if (it == rest_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
    rest_.erase(it);
  }

  /// Returns the sub-object (or null) and consumes it.
  json take(const char* key) {
    auto it = rest_.find(key);
    if (it == rest_.end()) return nullptr;
    json v = *it;
    rest_.erase(it);
    return v;
  }

  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    if (!rest_.empty()) throw ConfigError("unknown key " + path_ + "." + rest_.begin().key());
  }

 private:
  std::string path_;
  json rest_;
};

json ks_to_json(const problems::KsOptions& k) {
  return {{"grid_points", k.grid_points}, {"domain_length", k.domain_length},
          {"inner_dt", k.inner_dt},       {"sample_dt", k.sample_dt},
          {"burn_in", k.burn_in},         {"contour_points", k.contour_points}};
}

void ks_from_json(const json& j, problems::KsOptions& k, const std::string& path) {
  Section s(j, path);
  s.get("grid_points", k.grid_points);
  s.get("domain_length", k.domain_length);
  s.get("inner_dt", k.inner_dt);
  s.get("sample_dt", k.sample_dt);
  s.get("burn_in", k.burn_in);
  s.get("contour_points", k.contour_points);
  s.finish();
}

json data_to_json(const problems::GenOptions& d) {
  return {{"problem", d.problem},
          {"n_traj", d.n_traj},
          {"grid", d.grid},
          {"noise", d.noise_scale},
          {"rel_tol", d.rel_tol},
          {"abs_tol", d.abs_tol},
          {"eps", d.eps},
          {"matrix", d.matrix},
          {"keep_times", d.keep_times},
          {"ks", ks_to_json(d.ks)},
          {"ks_window_steps", d.ks_window_steps},
          {"ks_total_time", d.ks_total_time}};
}

void data_from_json(const json& j, problems::GenOptions& d) {
  Section s(j, "data");
  s.get("problem", d.problem);
  s.get("n_traj", d.n_traj);
  s.get("grid", d.grid);
  s.get("noise", d.noise_scale);
  s.get("rel_tol", d.rel_tol);
  s.get("abs_tol", d.abs_tol);
  s.get("eps", d.eps);
  s.get("matrix", d.matrix);
  s.get("keep_times", d.keep_times);
  if (json k = s.take("ks"); !k.is_null()) ks_from_json(k, d.ks, "data.ks");
  s.get("ks_window_steps", d.ks_window_steps);
  s.get("ks_total_time", d.ks_total_time);
  s.finish();
}

json model_to_json(const models::ModelSpec& m) {
  return {{"physical_dim", m.physical_dim},
          {"latent_dim", m.latent_dim},
          {"mu", m.mu},
          {"nonlinear", models::to_string(m.nonlinear)},
          {"lipschitz", m.lipschitz},
          {"hidden", m.hidden},
          {"layers", m.layers},
          {"rank", m.rank},
          {"autoencoder", models::to_string(m.autoencoder)},
          {"ae_hidden", m.ae_hidden},
          {"init_scale", m.init_scale}};
}

void model_from_json(const json& j, models::ModelSpec& m) {
  Section s(j, "model");
  s.get("physical_dim", m.physical_dim);
  s.get("latent_dim", m.latent_dim);
  s.get("mu", m.mu);
  std::string kind = models::to_string(m.nonlinear);
  s.get("nonlinear", kind);
  std::string ae = models::to_string(m.autoencoder);
  s.get("autoencoder", ae);
  try {
    m.nonlinear = models::nonlinear_kind_from_string(kind);
    m.autoencoder = models::autoencoder_kind_from_string(ae);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  s.get("lipschitz", m.lipschitz);
  s.get("hidden", m.hidden);
  s.get("layers", m.layers);
  s.get("rank", m.rank);
  s.get("ae_hidden", m.ae_hidden);
  s.get("init_scale", m.init_scale);
  s.finish();
}

json expmv_to_json(const expm::ExpmvConfig& e) {
  return {{"s", e.s},
          {"m", e.m},
          {"tol", e.tol},
          {"s_rule_constant", e.s_rule_constant},
          {"m_cap", e.m_cap},
          {"max_retries", e.max_retries},
          {"segment_cap", e.segment_cap},
          {"evaluation", to_string(e.evaluation)}};
}

void expmv_from_json(const json& j, expm::ExpmvConfig& e) {
  Section s(j, "train.expmv");
  s.get("s", e.s);
  s.get("m", e.m);
  s.get("tol", e.tol);
  s.get("s_rule_constant", e.s_rule_constant);
  s.get("m_cap", e.m_cap);
  s.get("max_retries", e.max_retries);
  s.get("segment_cap", e.segment_cap);
  std::string ev = to_string(e.evaluation);
  s.get("evaluation", ev);
  e.evaluation = evaluation_from_string(ev);
  s.finish();
}

json train_to_json(const training::TrainConfig& t) {
  return {{"lr", t.lr},
          {"decay", t.decay},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"iterations", t.iterations},
          {"integrator", training::to_string(t.integrator)},
          {"chunks", t.chunks},
          {"expmv", expmv_to_json(t.expmv)}};
}

void train_from_json(const json& j, training::TrainConfig& t) {
  Section s(j, "train");
  s.get("lr", t.lr);
  s.get("decay", t.decay);
  s.get("batch_size", t.batch_size);
  s.get("epochs", t.epochs);
  s.get("iterations", t.iterations);
  std::string integ = training::to_string(t.integrator);
  s.get("integrator", integ);
  try {
    t.integrator = training::integrator_from_string(integ);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  s.get("chunks", t.chunks);
  if (json e = s.take("expmv"); !e.is_null()) expmv_from_json(e, t.expmv);
  s.finish();
}

json ablation_to_json(const AblationGrid& a) {
  json lip = json::array();
  for (const auto& l : a.lipschitz) lip.push_back(l ? json(*l) : json(nullptr));
  return {{"lipschitz", lip}, {"init_scales", a.init_scales}};
}

void ablation_from_json(const json& j, AblationGrid& a) {
  Section s(j, "ablation");
  if (json lip = s.take("lipschitz"); !lip.is_null()) {
    if (!lip.is_array()) throw ConfigError("ablation.lipschitz must be an array");
    a.lipschitz.clear();
    for (const auto& v : lip) {
      if (v.is_null()) {
        a.lipschitz.emplace_back(std::nullopt);
      } else if (v.is_number()) {
        a.lipschitz.emplace_back(v.get<double>());
      } else {
        throw ConfigError("ablation.lipschitz entries must be numbers or null");
      }
    }
  }
  s.get("init_scales", a.init_scales);
  s.finish();
}

ExperimentConfig weakly_nonlinear(double eps) {
  ExperimentConfig c;
  c.data.problem = "weakly-nonlinear";
  c.data.n_traj = 1000;
  c.data.eps = eps;
  c.data.matrix = "bump";
  c.model.physical_dim = 2;
  c.model.latent_dim = 2;
  c.model.mu = 0.0;
  c.train.lr = 0.01;
  c.train.decay = 1.0;
  c.train.batch_size = 1000;
  c.train.iterations = 1000;
  return c;
}

ExperimentConfig robertson(bool autoencoder) {
  ExperimentConfig c;
  c.data.problem = "robertson";
  c.data.n_traj = 1000;
  c.model.physical_dim = 3;
  c.model.latent_dim = 3;
  c.model.nonlinear = models::NonlinearKind::Lipschitz;
  c.model.lipschitz = 1.0;
  c.model.hidden = 100;
  c.model.layers = 2;
  if (autoencoder) {
    c.model.autoencoder = models::AutoencoderKind::Mlp;
    c.model.ae_hidden = 100;
  }
  c.train.lr = 0.01;
  c.train.decay = 0.99;
  c.train.batch_size = 100;
  c.train.epochs = 10000;
  return c;
}

ExperimentConfig ks(std::size_t latent) {
  ExperimentConfig c;
  c.data.problem = "ks";
  c.data.n_traj = 2000;
  c.data.ks_window_steps = 8;
  c.model.physical_dim = 64;
  c.model.latent_dim = latent;
  c.model.mu = 0.3;
  c.model.nonlinear = models::NonlinearKind::Lipschitz;
  c.model.lipschitz = 1.0;
  c.model.hidden = 200;
  c.model.layers = 2;
  c.model.autoencoder = models::AutoencoderKind::Mlp;
  c.model.ae_hidden = 200;
  c.train.lr = 0.001;
  c.train.decay = 0.99;
  c.train.batch_size = 2000;
  c.train.epochs = 1000;
  return c;
}

}  // namespace

void ExperimentConfig::finalize() {
  data.seed = seed;
  train.seed = seed;
  try {
    model.validate();
    train.expmv.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (data.problem != "weakly-nonlinear" && data.problem != "robertson" && data.problem != "ks") {
    throw ConfigError("unknown problem '" + data.problem + "'");
  }
  if (data.n_traj == 0) throw ConfigError("data.n_traj must be positive");
  if (!(data.noise_scale >= 0.0)) throw ConfigError("data.noise must be non-negative");
  if (ablation.lipschitz.empty() != ablation.init_scales.empty()) {
    throw ConfigError("ablation needs both lipschitz and init_scales");
  }
  for (double s : ablation.init_scales) {
    if (!(s > 0.0)) throw ConfigError("ablation init scales must be positive");
  }
}

std::vector<std::string> preset_names() {
  return {"weakly-nonlinear-eps0", "weakly-nonlinear-eps1", "robertson", "robertson-ae",
          "ks-20",                 "ks-7",                  "ablation"};
}

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  if (name == "weakly-nonlinear-eps0") {
    c = weakly_nonlinear(0.0);
    c.data.keep_times = {0, 50};
    c.model.nonlinear = models::NonlinearKind::Bilinear;
    c.model.rank = 2;
  } else if (name == "weakly-nonlinear-eps1") {
    c = weakly_nonlinear(1.0);
    c.data.keep_times = {0, 10, 20, 30, 40, 50};
    c.model.nonlinear = models::NonlinearKind::Lipschitz;
    c.model.lipschitz = 1.0;
    c.model.hidden = 100;
    c.model.layers = 2;
  } else if (name == "robertson") {
    c = robertson(false);
  } else if (name == "robertson-ae") {
    c = robertson(true);
  } else if (name == "ks-20") {
    c = ks(20);
  } else if (name == "ks-7") {
    c = ks(7);
  } else if (name == "ablation") {
    c = robertson(false);
    c.train.epochs = 0;
    c.train.iterations = 20000;
    c.train.decay = 0.9;
    c.ablation.lipschitz = {std::nullopt, 1.0, 2.0};
    c.ablation.init_scales = {1e-3, 1e-2, 1e-1, 1.0};
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  c.name = name;
  c.output_dir = "runs/" + name;
  c.finalize();
  return c;
}

json to_json(const ExperimentConfig& cfg) {
  return {{"name", cfg.name},
          {"seed", cfg.seed},
          {"output_dir", cfg.output_dir},
          {"data", data_to_json(cfg.data)},
          {"model", model_to_json(cfg.model)},
          {"train", train_to_json(cfg.train)},
          {"ablation", ablation_to_json(cfg.ablation)}};
}

ExperimentConfig from_json(const json& j) {
  Section s(j, "config");
  ExperimentConfig c;
  std::string base;
  s.get("preset", base);
  if (!base.empty()) c = preset(base);
  s.get("name", c.name);
  s.get("seed", c.seed);
  s.get("output_dir", c.output_dir);
  if (json d = s.take("data"); !d.is_null()) data_from_json(d, c.data);
  if (json m = s.take("model"); !m.is_null()) model_from_json(m, c.model);
  if (json t = s.take("train"); !t.is_null()) train_from_json(t, c.train);
  if (json a = s.take("ablation"); !a.is_null()) ablation_from_json(a, c.ablation);
  s.finish();
  c.finalize();
  return c;
}

ExperimentConfig load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j);
}

void save(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json(cfg).dump(2) << "\n";
}

void apply_env_overrides(ExperimentConfig& cfg) {
  const char* env = std::getenv("STIFFNODE_SEED");
  if (env == nullptr || *env == '\0') return;
  std::istringstream is(env);
  std::uint64_t seed = 0;
  if (!(is >> seed) || !is.eof()) throw ConfigError(std::string("STIFFNODE_SEED is not an integer: ") + env);
  cfg.seed = seed;
  cfg.finalize();
}

}  // namespace stiffnode::config
