#pragma once

// Run configuration tree, presets and flat dotted-key overrides.

#include <json.hpp>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "geodistill/model.hpp"
#include "geodistill/scene.hpp"
#include "geodistill/trainer.hpp"

namespace geodistill::config {

using Json = nlohmann::json;

struct EvalConfig {
  std::vector<double> alphas{0.05, 0.10};
  /// Seeds the ordinal pairs drawn for ordinal accuracy.
  std::uint64_t pair_seed = 7;
  /// Ordinal pairs per view; 0 uses every non-tied pair.
  int pair_budget = 1000;
};

struct RunConfig {
  std::string preset = "toy";
  int num_scenes = 8;
  scene::SceneConfig scene;
  model::ModelConfig model;
  trainer::TrainConfig train;
  EvalConfig eval;
  std::string output_dir = "run";

  void validate() const;
};

/// Desk-scale defaults.
RunConfig toy_preset();
/// Optimiser settings of the reference setup: lr 1e-5, 500 epochs, rank 4, unit loss weights, tau 1.0 -> 0.5.
RunConfig paper_preset();
/// ConfigError for unknown names.
RunConfig preset(std::string_view name);

Json to_json(const RunConfig& config);
/// Overlays `tree` on `base`; unknown keys or wrongly typed values raise ConfigError.
RunConfig from_json(const Json& tree, const RunConfig& base = toy_preset());

/// Sets `dotted.key` in `tree` to `value`, parsed as JSON when possible and as a string otherwise.
void apply_override(Json& tree, std::string_view key, std::string_view value);

/// Applies GEODISTILL_SEED (if set) to the scene, model and train seeds.
void apply_seed_environment(RunConfig& config);
/// Parses a decimal 64-bit seed; ConfigError on malformed text.
std::uint64_t parse_seed(std::string_view text);

/// Seed of the i-th scene of a dataset rooted at `config.scene.seed`.
scene::SceneConfig scene_config_for(const RunConfig& config, int index);

}  // namespace geodistill::config
