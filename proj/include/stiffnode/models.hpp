#pragma once

// Structure-preserving parameterizations of the learned right-hand side
//
//   du/dt = A_L u + g(u),   A_L = (G_s + G_u) S + mu I,
//
// with S = L_S L_S^T, G_s = -L_G L_G^T and G_u = L_s - L_s^T. The nonlinear
// operator g is a Lipschitz-controlled feed-forward network or a low-rank
// bilinear form. An optional encoder/decoder pair maps physical states to the
// latent space in which the dynamics evolve.
//
// All learnable state lives in a ParamStore owned by NodeModel. Evaluation
// binds the parameters to a tape once (BoundModel) and then applies the
// operators to column blocks of states (dim x batch).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stiffnode/autodiff.hpp"
#include "stiffnode/tensor.hpp"

namespace stiffnode::models {

enum class NonlinearKind { None, Lipschitz, Unconstrained, Bilinear };
enum class AutoencoderKind { None, Linear, Mlp };

std::string to_string(NonlinearKind kind);
std::string to_string(AutoencoderKind kind);
NonlinearKind nonlinear_kind_from_string(const std::string& s);
AutoencoderKind autoencoder_kind_from_string(const std::string& s);

struct ModelSpec {
  std::size_t physical_dim = 2;
  std::size_t latent_dim = 2;
  /// Fixed spectral shift added to the Hurwitz part.
  double mu = 0.0;
  NonlinearKind nonlinear = NonlinearKind::Lipschitz;
  double lipschitz = 1.0;
  std::size_t hidden = 100;
  std::size_t layers = 2;
  std::size_t rank = 1;
  AutoencoderKind autoencoder = AutoencoderKind::None;
  std::size_t ae_hidden = 100;
  /// Uniform init half-width (before 1/sqrt(fan-in)) for the nonlinear operator.
  double init_scale = 0.1;

  void validate() const;
};

/// Hurwitz-stable linear operator A_L.
class HurwitzLinear {
 public:
  HurwitzLinear() = default;
  HurwitzLinear(std::size_t n, double mu) : n_(n), mu_(mu) {}

  /// Registers linear.LS, linear.LG (packed lower triangles) and linear.Ls
  /// (packed strict lower triangle).
  void register_params(ad::ParamStore& store, std::mt19937_64& rng) const;
  ad::Var assemble(ad::Tape& tape, ad::ParamStore& store) const;
  Tensor assemble_value(ad::ParamStore& store) const;

  std::size_t dim() const { return n_; }
  double mu() const { return mu_; }
  static std::size_t parameter_count(std::size_t n) { return (3 * n * n + n) / 2; }

  static constexpr double kDiagonalFloor = 1e-6;

 private:
  std::size_t n_ = 0;
  double mu_ = 0.0;
};

/// One affine layer bound to a tape.
struct BoundLayer {
  ad::Var weight;
  ad::Var bias;
  bool activation = true;
};

/// Feed-forward net bound to a tape: tanh on hidden layers, affine output.
struct BoundNet {
  std::vector<BoundLayer> layers;
  ad::Var apply(ad::Var x) const;
};

/// Feed-forward network with optional Lipschitz control. With a Lipschitz
/// constant L and p layers, every weight W_i is used as
///   B_i = L^{1/p} W_i / max(1, sqrt(||W_i||_inf ||W_i||_1)).
/// The output layer is affine unless `activate_output` is set.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::string prefix, std::vector<std::size_t> widths, std::optional<double> lipschitz,
              bool activate_output = false);

  void register_params(ad::ParamStore& store, std::mt19937_64& rng, double init_scale) const;
  /// Identity weights and zero biases (square single-layer nets only).
  void register_identity(ad::ParamStore& store) const;
  BoundNet bind(ad::Tape& tape, ad::ParamStore& store) const;

  std::size_t layers() const { return widths_.size() - 1; }
  const std::vector<std::size_t>& widths() const { return widths_; }
  std::optional<double> lipschitz() const { return lipschitz_; }
  std::string weight_name(std::size_t i) const;
  std::string bias_name(std::size_t i) const;

 private:
  std::string prefix_;
  std::vector<std::size_t> widths_;
  std::optional<double> lipschitz_;
  bool activate_output_ = false;
};

/// g(u) = sum_r (C_r u) .* (D_r u) + b.
struct BoundBilinear {
  std::vector<ad::Var> c;
  std::vector<ad::Var> d;
  ad::Var b;
  ad::Var apply(ad::Var u) const;
};

class BilinearForm {
 public:
  BilinearForm() = default;
  BilinearForm(std::size_t n, std::size_t rank) : n_(n), rank_(rank) {}
  void register_params(ad::ParamStore& store, std::mt19937_64& rng, double init_scale) const;
  BoundBilinear bind(ad::Tape& tape, ad::ParamStore& store) const;
  std::size_t rank() const { return rank_; }

 private:
  std::size_t n_ = 0;
  std::size_t rank_ = 0;
};

/// A NodeModel's parameters recorded on one tape.
struct BoundModel {
  ad::Tape* tape = nullptr;
  ad::Var a;  // A_L
  NonlinearKind kind = NonlinearKind::None;
  BoundNet net;
  BoundBilinear bilinear;
  std::optional<BoundNet> encoder;
  std::optional<BoundNet> decoder;

  /// g(u) on a block of latent states; zero when there is no nonlinearity.
  ad::Var nonlinear(ad::Var u) const;
  ad::Var rhs(ad::Var u) const;
  ad::Var encode(ad::Var physical) const;
  ad::Var decode(ad::Var latent) const;
};

class NodeModel {
 public:
  NodeModel() = default;
  /// Builds the architecture and initializes parameters from `seed`.
  NodeModel(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  ad::ParamStore& params() { return store_; }
  const ad::ParamStore& params() const { return store_; }

  BoundModel bind(ad::Tape& tape);

  const HurwitzLinear& linear() const { return linear_; }
  const FeedForward& network() const { return net_; }

  // Value-level conveniences (record on a scratch tape).
  Tensor linear_matrix();
  Tensor rhs_value(const Tensor& u);
  Tensor nonlinear_value(const Tensor& u);
  Tensor encode_value(const Tensor& physical);
  Tensor decode_value(const Tensor& latent);

  /// Replaces encoder/decoder weights with the identity (requires a linear
  /// autoencoder with physical_dim == latent_dim).
  void set_identity_autoencoder();

 private:
  ModelSpec spec_;
  ad::ParamStore store_;
  HurwitzLinear linear_;
  FeedForward net_;
  BilinearForm bilinear_;
  FeedForward encoder_;
  FeedForward decoder_;
};

/// Block map (dim x batch -> dim' x batch) used by the sampling estimator.
using BlockMap = std::function<Tensor(const Tensor&)>;

/// Max over sampled pairs of ||f(u1) - f(u2)|| / ||u1 - u2||. Half of the
/// pairs are drawn independently in [-radius, radius]^dim, half as close
/// neighbours; coincident pairs are skipped.
double empirical_lipschitz(const BlockMap& f, std::size_t dim, std::size_t samples, double radius,
                           std::uint64_t seed);

/// Model checkpoint: one line of JSON (architecture, parameter manifest and
/// caller metadata) followed by the parameters as little-endian float64.
void save_checkpoint(const NodeModel& model, const std::filesystem::path& path,
                     const std::string& metadata_json = "{}");
struct LoadedCheckpoint {
  NodeModel model;
  std::string metadata_json;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stiffnode::models
