#pragma once

// JSON layouts for matrices, scenes and checkpoints, and file helpers.
//
// Matrices are {"shape": [rows, cols], "data": [row-major values]}. Doubles
// are written with round-trip precision.

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>

#include "geodistill/config.hpp"
#include "geodistill/model.hpp"
#include "geodistill/scene.hpp"
#include "geodistill/trainer.hpp"

namespace geodistill::io {

using Json = nlohmann::json;

Json matrix_to_json(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_json(const Json& j);

Json scene_to_json(const scene::SceneSample& sample);
scene::SceneSample scene_from_json(const Json& j);

Json parameters_to_json(const model::TrainableParameters& params);
model::TrainableParameters parameters_from_json(const Json& j);

struct Checkpoint {
  config::RunConfig config;
  /// Parameters to evaluate (best validation epoch for finished runs).
  model::TrainableParameters params;
  /// Resumable trainer state; absent for checkpoints that were never trained.
  std::optional<trainer::TrainState> state;
};

Json checkpoint_to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const Json& j);

/// IoError when the file cannot be read or written.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

/// ParseError carrying the byte offset of malformed JSON.
Json parse_json(const std::string& text);
Json read_json(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline.
void write_json(const std::filesystem::path& path, const Json& j);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Replaces `target` only when the whole file parses.
void load_checkpoint_into(const std::filesystem::path& path, Checkpoint& target);

void save_scene(const scene::SceneSample& sample, const std::filesystem::path& path);
scene::SceneSample load_scene(const std::filesystem::path& path);

}  // namespace geodistill::io
