#pragma once

// Experiment configuration: data, model and training sections plus the
// ablation grid, stored as JSON. Every paper experiment ships as a preset.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stiffnode/models.hpp"
#include "stiffnode/problems.hpp"
#include "stiffnode/training.hpp"

namespace stiffnode::config {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AblationGrid {
  /// nullopt is the unconstrained column.
  std::vector<std::optional<double>> lipschitz;
  std::vector<double> init_scales;
};

struct ExperimentConfig {
  std::string name = "custom";
  /// Seeds data generation, parameter init and batch shuffling.
  std::uint64_t seed = 0;
  std::string output_dir;
  problems::GenOptions data;
  models::ModelSpec model;
  training::TrainConfig train;
  AblationGrid ablation;

  /// Pushes the shared seed into the sections and checks consistency.
  void finalize();
};

std::vector<std::string> preset_names();
/// Throws ConfigError for an unknown name.
ExperimentConfig preset(const std::string& name);

nlohmann::json to_json(const ExperimentConfig& cfg);
/// Starts from the named "preset" (if present) and applies the remaining
/// keys; unknown keys are errors.
ExperimentConfig from_json(const nlohmann::json& j);

ExperimentConfig load(const std::string& path);
void save(const ExperimentConfig& cfg, const std::string& path);

/// Applies STIFFNODE_SEED when set.
void apply_env_overrides(ExperimentConfig& cfg);

}  // namespace stiffnode::config
