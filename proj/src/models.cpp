#include "stiffnode/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace stiffnode::models {

using ad::Tape;
using ad::Var;
using nlohmann::json;

namespace {

// softplus^{-1}(1): raw diagonal value whose mapped factor entry is ~1.
const double kUnitDiagonalRaw = std::log(std::exp(1.0) - 1.0);

Tensor uniform(std::size_t rows, std::size_t cols, double half_width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-half_width, half_width);
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

Tensor packed_lower_init(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-0.1, 0.1);
  Tensor p(n * (n + 1) / 2, 1);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) p[k++] = (i == j) ? kUnitDiagonalRaw : dist(rng);
  }
  return p;
}

}  // namespace

std::string to_string(NonlinearKind kind) {
  switch (kind) {
    case NonlinearKind::None: return "none";
    case NonlinearKind::Lipschitz: return "lipschitz";
    case NonlinearKind::Unconstrained: return "unconstrained";
    case NonlinearKind::Bilinear: return "bilinear";
  }
  return "none";
}

std::string to_string(AutoencoderKind kind) {
  switch (kind) {
    case AutoencoderKind::None: return "none";
    case AutoencoderKind::Linear: return "linear";
    case AutoencoderKind::Mlp: return "mlp";
  }
  return "none";
}

NonlinearKind nonlinear_kind_from_string(const std::string& s) {
  if (s == "none") return NonlinearKind::None;
  if (s == "lipschitz") return NonlinearKind::Lipschitz;
  if (s == "unconstrained") return NonlinearKind::Unconstrained;
  if (s == "bilinear") return NonlinearKind::Bilinear;
  throw std::invalid_argument("unknown nonlinearity '" + s + "'");
}

AutoencoderKind autoencoder_kind_from_string(const std::string& s) {
  if (s == "none") return AutoencoderKind::None;
  if (s == "linear") return AutoencoderKind::Linear;
  if (s == "mlp") return AutoencoderKind::Mlp;
  throw std::invalid_argument("unknown autoencoder '" + s + "'");
}

void ModelSpec::validate() const {
  if (latent_dim == 0 || physical_dim == 0) throw std::invalid_argument("model dims must be positive");
  if (autoencoder == AutoencoderKind::None && physical_dim != latent_dim) {
    throw std::invalid_argument("physical_dim != latent_dim requires an autoencoder");
  }
  if (latent_dim > physical_dim) throw std::invalid_argument("latent_dim must not exceed physical_dim");
  if (!std::isfinite(mu)) throw std::invalid_argument("mu must be finite");
  if (nonlinear == NonlinearKind::Lipschitz && !(lipschitz > 0.0)) {
    throw std::invalid_argument("lipschitz constant must be positive");
  }
  if ((nonlinear == NonlinearKind::Lipschitz || nonlinear == NonlinearKind::Unconstrained) &&
      (layers == 0 || hidden == 0)) {
    throw std::invalid_argument("network needs at least one layer and a positive width");
  }
  if (nonlinear == NonlinearKind::Bilinear && rank == 0) throw std::invalid_argument("rank must be positive");
  if (autoencoder == AutoencoderKind::Mlp && ae_hidden == 0) {
    throw std::invalid_argument("ae_hidden must be positive");
  }
  if (!(init_scale > 0.0)) throw std::invalid_argument("init_scale must be positive");
}

// ---------------------------------------------------------------- linear

void HurwitzLinear::register_params(ad::ParamStore& store, std::mt19937_64& rng) const {
  store.add("linear.LS", packed_lower_init(n_, rng));
  store.add("linear.LG", packed_lower_init(n_, rng));
  store.add("linear.Ls", uniform(n_ * (n_ - 1) / 2, 1, 0.1, rng));
}

Var HurwitzLinear::assemble(Tape& tape, ad::ParamStore& store) const {
  Var ls = ad::lower_factor(tape.param(store, "linear.LS"), n_, kDiagonalFloor);
  Var lg = ad::lower_factor(tape.param(store, "linear.LG"), n_, kDiagonalFloor);
  Var lu = ad::strict_lower(tape.param(store, "linear.Ls"), n_);
  Var s = ad::matmul(ls, ad::transpose(ls));
  Var g = ad::sub(ad::sub(lu, ad::transpose(lu)), ad::matmul(lg, ad::transpose(lg)));
  return ad::add_identity(ad::matmul(g, s), mu_);
}

Tensor HurwitzLinear::assemble_value(ad::ParamStore& store) const {
  Tape tape;
  return assemble(tape, store).value();
}

// ---------------------------------------------------------------- networks

Var BoundNet::apply(Var x) const {
  for (const auto& layer : layers) {
    x = ad::add_bias(ad::matmul(layer.weight, x), layer.bias);
    if (layer.activation) x = ad::tanh(x);
  }
  return x;
}

FeedForward::FeedForward(std::string prefix, std::vector<std::size_t> widths,
                         std::optional<double> lipschitz, bool activate_output)
    : prefix_(std::move(prefix)),
      widths_(std::move(widths)),
      lipschitz_(lipschitz),
      activate_output_(activate_output) {
  if (widths_.size() < 2) throw std::invalid_argument(prefix_ + ": need at least one layer");
}

std::string FeedForward::weight_name(std::size_t i) const { return prefix_ + ".W" + std::to_string(i); }
std::string FeedForward::bias_name(std::size_t i) const { return prefix_ + ".b" + std::to_string(i); }

void FeedForward::register_params(ad::ParamStore& store, std::mt19937_64& rng, double init_scale) const {
  for (std::size_t i = 0; i + 1 < widths_.size(); ++i) {
    const double fan_in = static_cast<double>(widths_[i]);
    store.add(weight_name(i), uniform(widths_[i + 1], widths_[i], init_scale / std::sqrt(fan_in), rng));
    store.add(bias_name(i), Tensor(widths_[i + 1], 1));
  }
}

void FeedForward::register_identity(ad::ParamStore& store) const {
  if (widths_.size() != 2 || widths_[0] != widths_[1]) {
    throw std::invalid_argument(prefix_ + ": identity init needs one square layer");
  }
  store.add(weight_name(0), Tensor::identity(widths_[0]));
  store.add(bias_name(0), Tensor(widths_[0], 1));
}

BoundNet FeedForward::bind(Tape& tape, ad::ParamStore& store) const {
  BoundNet net;
  const std::size_t p = layers();
  for (std::size_t i = 0; i < p; ++i) {
    BoundLayer layer;
    Var w = tape.param(store, weight_name(i));
    if (lipschitz_) {
      Var denom = ad::clamp_min1(ad::sqrt(ad::hadamard(ad::norm_inf(w), ad::norm1(w))));
      const double factor = std::pow(*lipschitz_, 1.0 / static_cast<double>(p));
      w = ad::scale(ad::div_scalar(w, denom), factor);
    }
    layer.weight = w;
    layer.bias = tape.param(store, bias_name(i));
    layer.activation = (i + 1 < p) || activate_output_;
    net.layers.push_back(layer);
  }
  return net;
}

Var BoundBilinear::apply(Var u) const {
  Var out;
  for (std::size_t r = 0; r < c.size(); ++r) {
    Var term = ad::hadamard(ad::matmul(c[r], u), ad::matmul(d[r], u));
    out = out.valid() ? ad::add(out, term) : term;
  }
  return ad::add_bias(out, b);
}

void BilinearForm::register_params(ad::ParamStore& store, std::mt19937_64& rng, double init_scale) const {
  const double w = init_scale / std::sqrt(static_cast<double>(n_));
  for (std::size_t r = 0; r < rank_; ++r) {
    store.add("bilinear.C" + std::to_string(r), uniform(n_, n_, w, rng));
    store.add("bilinear.D" + std::to_string(r), uniform(n_, n_, w, rng));
  }
  store.add("bilinear.b", Tensor(n_, 1));
}

BoundBilinear BilinearForm::bind(Tape& tape, ad::ParamStore& store) const {
  BoundBilinear out;
  for (std::size_t r = 0; r < rank_; ++r) {
    out.c.push_back(tape.param(store, "bilinear.C" + std::to_string(r)));
    out.d.push_back(tape.param(store, "bilinear.D" + std::to_string(r)));
  }
  out.b = tape.param(store, "bilinear.b");
  return out;
}

// ---------------------------------------------------------------- model

Var BoundModel::nonlinear(Var u) const {
  switch (kind) {
    case NonlinearKind::Lipschitz:
    case NonlinearKind::Unconstrained: return net.apply(u);
    case NonlinearKind::Bilinear: return bilinear.apply(u);
    case NonlinearKind::None: break;
  }
  return tape->constant(Tensor(u.rows(), u.cols()));
}

Var BoundModel::rhs(Var u) const {
  Var lin = ad::matmul(a, u);
  if (kind == NonlinearKind::None) return lin;
  return ad::add(lin, nonlinear(u));
}

Var BoundModel::encode(Var physical) const { return encoder ? encoder->apply(physical) : physical; }
Var BoundModel::decode(Var latent) const { return decoder ? decoder->apply(latent) : latent; }

NodeModel::NodeModel(ModelSpec spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t n = spec_.latent_dim;
  const std::size_t m = spec_.physical_dim;

  linear_ = HurwitzLinear(n, spec_.mu);
  linear_.register_params(store_, rng);

  if (spec_.nonlinear == NonlinearKind::Lipschitz || spec_.nonlinear == NonlinearKind::Unconstrained) {
    std::vector<std::size_t> widths{n};
    for (std::size_t i = 0; i + 1 < spec_.layers; ++i) widths.push_back(spec_.hidden);
    widths.push_back(n);
    std::optional<double> lip;
    if (spec_.nonlinear == NonlinearKind::Lipschitz) lip = spec_.lipschitz;
    net_ = FeedForward("net", widths, lip);
    net_.register_params(store_, rng, spec_.init_scale);
  } else if (spec_.nonlinear == NonlinearKind::Bilinear) {
    bilinear_ = BilinearForm(n, spec_.rank);
    bilinear_.register_params(store_, rng, spec_.init_scale);
  }

  if (spec_.autoencoder == AutoencoderKind::Linear) {
    encoder_ = FeedForward("encoder", {m, n}, std::nullopt);
    decoder_ = FeedForward("decoder", {n, m}, std::nullopt);
    if (m == n) {
      encoder_.register_identity(store_);
      decoder_.register_identity(store_);
    } else {
      encoder_.register_params(store_, rng, 1.0);
      decoder_.register_params(store_, rng, 1.0);
    }
  } else if (spec_.autoencoder == AutoencoderKind::Mlp) {
    encoder_ = FeedForward("encoder", {m, spec_.ae_hidden, n}, std::nullopt);
    decoder_ = FeedForward("decoder", {n, spec_.ae_hidden, m}, std::nullopt);
    encoder_.register_params(store_, rng, 1.0);
    decoder_.register_params(store_, rng, 1.0);
  }
}

BoundModel NodeModel::bind(Tape& tape) {
  BoundModel b;
  b.tape = &tape;
  b.kind = spec_.nonlinear;
  b.a = linear_.assemble(tape, store_);
  if (spec_.nonlinear == NonlinearKind::Lipschitz || spec_.nonlinear == NonlinearKind::Unconstrained) {
    b.net = net_.bind(tape, store_);
  } else if (spec_.nonlinear == NonlinearKind::Bilinear) {
    b.bilinear = bilinear_.bind(tape, store_);
  }
  if (spec_.autoencoder != AutoencoderKind::None) {
    b.encoder = encoder_.bind(tape, store_);
    b.decoder = decoder_.bind(tape, store_);
  }
  return b;
}

Tensor NodeModel::linear_matrix() { return linear_.assemble_value(store_); }

Tensor NodeModel::rhs_value(const Tensor& u) {
  Tape tape;
  BoundModel b = bind(tape);
  return b.rhs(tape.constant(u)).value();
}

Tensor NodeModel::nonlinear_value(const Tensor& u) {
  Tape tape;
  BoundModel b = bind(tape);
  return b.nonlinear(tape.constant(u)).value();
}

Tensor NodeModel::encode_value(const Tensor& physical) {
  Tape tape;
  BoundModel b = bind(tape);
  return b.encode(tape.constant(physical)).value();
}

Tensor NodeModel::decode_value(const Tensor& latent) {
  Tape tape;
  BoundModel b = bind(tape);
  return b.decode(tape.constant(latent)).value();
}

void NodeModel::set_identity_autoencoder() {
  if (spec_.autoencoder != AutoencoderKind::Linear || spec_.physical_dim != spec_.latent_dim) {
    throw std::invalid_argument("identity autoencoder needs a square linear autoencoder");
  }
  const std::size_t n = spec_.latent_dim;
  for (const char* prefix : {"encoder", "decoder"}) {
    store_.at(std::string(prefix) + ".W0").value = Tensor::identity(n);
    store_.at(std::string(prefix) + ".b0").value = Tensor(n, 1);
  }
}

// ---------------------------------------------------------------- sampling

double empirical_lipschitz(const BlockMap& f, std::size_t dim, std::size_t samples, double radius,
                           std::uint64_t seed) {
  if (samples == 0) throw std::invalid_argument("empirical_lipschitz: samples must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> box(-radius, radius);
  std::uniform_real_distribution<double> near(-1e-3 * radius, 1e-3 * radius);
  Tensor u1(dim, samples);
  Tensor u2(dim, samples);
  for (std::size_t j = 0; j < samples; ++j) {
    const bool close = (j % 2) == 1;
    for (std::size_t i = 0; i < dim; ++i) {
      u1(i, j) = box(rng);
      u2(i, j) = close ? u1(i, j) + near(rng) : box(rng);
    }
  }
  const Tensor f1 = f(u1);
  const Tensor f2 = f(u2);
  double best = 0.0;
  for (std::size_t j = 0; j < samples; ++j) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < dim; ++i) den += (u1(i, j) - u2(i, j)) * (u1(i, j) - u2(i, j));
    for (std::size_t i = 0; i < f1.rows(); ++i) num += (f1(i, j) - f2(i, j)) * (f1(i, j) - f2(i, j));
    if (den == 0.0) continue;
    best = std::max(best, std::sqrt(num / den));
  }
  return best;
}

// ---------------------------------------------------------------- checkpoints

namespace {

json spec_to_json(const ModelSpec& s) {
  return json{{"physical_dim", s.physical_dim}, {"latent_dim", s.latent_dim},
              {"mu", s.mu},                     {"nonlinear", to_string(s.nonlinear)},
              {"lipschitz", s.lipschitz},       {"hidden", s.hidden},
              {"layers", s.layers},             {"rank", s.rank},
              {"autoencoder", to_string(s.autoencoder)},
              {"ae_hidden", s.ae_hidden},       {"init_scale", s.init_scale}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.physical_dim = j.at("physical_dim").get<std::size_t>();
  s.latent_dim = j.at("latent_dim").get<std::size_t>();
  s.mu = j.at("mu").get<double>();
  s.nonlinear = nonlinear_kind_from_string(j.at("nonlinear").get<std::string>());
  s.lipschitz = j.at("lipschitz").get<double>();
  s.hidden = j.at("hidden").get<std::size_t>();
  s.layers = j.at("layers").get<std::size_t>();
  s.rank = j.at("rank").get<std::size_t>();
  s.autoencoder = autoencoder_kind_from_string(j.at("autoencoder").get<std::string>());
  s.ae_hidden = j.at("ae_hidden").get<std::size_t>();
  s.init_scale = j.at("init_scale").get<double>();
  return s;
}

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

}  // namespace

void save_checkpoint(const NodeModel& model, const std::filesystem::path& path,
                     const std::string& metadata_json) {
  json header;
  header["format"] = "stiffnode-checkpoint";
  header["version"] = 1;
  header["spec"] = spec_to_json(model.spec());
  header["meta"] = json::parse(metadata_json);
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& e : model.params()) {
    manifest.push_back({{"name", e.name}, {"offset", offset}, {"shape", {e.value.rows(), e.value.cols()}}});
    offset += e.value.size();
  }
  header["params"] = manifest;
  header["count"] = offset;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << header.dump() << '\n';
  for (const auto& e : model.params()) {
    out.write(reinterpret_cast<const char*>(e.value.data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw std::runtime_error("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  if (header.value("format", "") != "stiffnode-checkpoint") {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  LoadedCheckpoint out{NodeModel(spec_from_json(header.at("spec")), 0), header.at("meta").dump()};
  const std::size_t count = header.at("count").get<std::size_t>();
  std::vector<double> block(count);
  in.read(reinterpret_cast<char*>(block.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(double)) {
    throw std::runtime_error("truncated checkpoint " + path.string());
  }
  ad::ParamStore& store = out.model.params();
  for (const auto& p : header.at("params")) {
    auto& entry = store.at(p.at("name").get<std::string>());
    const std::size_t rows = p.at("shape")[0].get<std::size_t>();
    const std::size_t cols = p.at("shape")[1].get<std::size_t>();
    if (rows != entry.value.rows() || cols != entry.value.cols()) {
      throw std::runtime_error("checkpoint shape mismatch for " + entry.name);
    }
    const std::size_t off = p.at("offset").get<std::size_t>();
    if (off + rows * cols > count) throw std::runtime_error("checkpoint offset out of range");
    std::memcpy(entry.value.data(), block.data() + off, rows * cols * sizeof(double));
  }
  return out;
}

}  // namespace stiffnode::models
