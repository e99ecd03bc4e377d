#pragma once

// Finite-difference verification of every loss family on random instances.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "geodistill/losses.hpp"

namespace geodistill::gradcheck {

enum class LossFamily { Match, Intra, Inter, Cost, Abs, Total };

std::string_view family_name(LossFamily family);
std::optional<LossFamily> parse_family(std::string_view name);
std::vector<LossFamily> all_families();

struct Options {
  std::vector<LossFamily> families = all_families();
  /// Keypoints per instance; 0 draws 3..16.
  int keypoints = 0;
  std::uint64_t seed = 0;
  double threshold = 1e-4;
  double step = 1e-4;
  losses::LossConfig loss;
};

struct Row {
  LossFamily family = LossFamily::Match;
  int feature_dim = 0;
  int grid = 0;
  int keypoints = 0;
  std::size_t num_params = 0;
  double loss_value = 0.0;
  double max_relative_error = 0.0;
  /// Parameter matrix and flat coordinate of the largest error.
  std::string worst_parameter;
  long worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = false;
};

/// One random instance (feature dim 8..32, grid 4x4..8x8) per selected family,
/// checked over every trainable parameter.
std::vector<Row> run(const Options& options);

}  // namespace geodistill::gradcheck
